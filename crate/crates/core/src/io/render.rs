//! Heatmap rendering, PNG encoding and decoding, and a minimal line plot.

use std::io::Cursor;

use serde::{Deserialize, Serialize};

use crate::attention::bilinear_upscale;
use crate::error::{format_err, input_err, Result};
use crate::model_zoo::ImageTensor;
use crate::tensor::Tensor;

/// Opacity of the heatmap over the image.
pub const OVERLAY_ALPHA: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upscale {
    #[default]
    Bilinear,
    /// Each map cell becomes a flat block, showing the raw resolution.
    Nearest,
}

/// 8-bit interleaved RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.repeat(width * height),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = 3 * (y * self.width + x);
            self.pixels[i..i + 3].copy_from_slice(&rgb);
        }
    }

    /// PNG bytes with one `tEXt` chunk per `(key, value)`.
    pub fn to_png(&self, text: &[(&str, String)]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            for (k, v) in text {
                enc.add_text_chunk(k.to_string(), v.clone())
                    .map_err(|e| format_err!("png text: {e}"))?;
            }
            let mut w = enc
                .write_header()
                .map_err(|e| format_err!("png header: {e}"))?;
            w.write_image_data(&self.pixels)
                .map_err(|e| format_err!("png data: {e}"))?;
            w.finish().map_err(|e| format_err!("png finish: {e}"))?;
        }
        Ok(out)
    }
}

/// Decoded 8-bit PNG as planar `(channels, height, width)` bytes; alpha is dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedPng {
    pub shape: [usize; 3],
    pub planar: Vec<u8>,
    pub text: Vec<(String, String)>,
}

pub fn decode_png(bytes: &[u8]) -> Result<DecodedPng> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| format_err!("png: {e}"))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| format_err!("png image too large"))?
    ];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| format_err!("png: {e}"))?;
    let text = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|t| (t.keyword.clone(), t.text.clone()))
        .collect();
    let (w, h) = (info.width as usize, info.height as usize);
    let (stride, channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(format_err!("unsupported png color type {other:?}")),
    };
    let mut planar = vec![0u8; channels * h * w];
    for y in 0..h {
        for x in 0..w {
            let src = &buf[y * info.line_size + x * stride..];
            for c in 0..channels {
                planar[c * h * w + y * w + x] = src[c];
            }
        }
    }
    Ok(DecodedPng {
        shape: [channels, h, w],
        planar,
        text,
    })
}

/// Blue-to-red "jet" colour for `v` in `[0, 1]`.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |centre: f64| ((1.5 - (4.0 * v - centre).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

fn nearest(map: &Tensor, (oh, ow): (usize, usize)) -> Tensor {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    Tensor::from_fn(&[oh, ow], |p| {
        let (i, j) = (p / ow, p % ow);
        map.data()[(i * h / oh) * w + j * w / ow]
    })
}

/// Upscales `map` `(h, w)` to `size` with the chosen interpolation.
pub fn upscale_map(map: &Tensor, size: (usize, usize), mode: Upscale) -> Result<Tensor> {
    if map.rank() != 2 {
        return Err(input_err!("expected a 2-D map, got {:?}", map.shape()));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if size.0 < h || size.1 < w {
        return Err(input_err!(
            "cannot upscale {h}x{w} to smaller {}x{}",
            size.0,
            size.1
        ));
    }
    Ok(match mode {
        Upscale::Bilinear => {
            bilinear_upscale(&map.clone().reshaped(&[1, h, w]), size)?.reshaped(&[size.0, size.1])
        }
        Upscale::Nearest => nearest(map, size),
    })
}

/// 8-bit RGB view of a normalized image; grayscale is replicated.
pub fn image_to_rgb(image: &ImageTensor) -> RgbImage {
    let [c, h, w] = image.shape();
    let px = image.to_u8();
    let mut out = RgbImage::filled(w, h, [0, 0, 0]);
    for p in 0..h * w {
        for k in 0..3 {
            out.pixels[3 * p + k] = px[(if c == 3 { k } else { 0 }) * h * w + p];
        }
    }
    out
}

/// Colour-mapped class map. Over an image the map is upscaled to the image
/// size and blended at [`OVERLAY_ALPHA`]; alone it is drawn at map resolution.
pub fn render_heatmap(
    e_c: &Tensor,
    image: Option<&ImageTensor>,
    mode: Upscale,
) -> Result<RgbImage> {
    if e_c.rank() != 2 || e_c.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(input_err!("heatmap needs a 2-D map with values in [0, 1]"));
    }
    let Some(image) = image else {
        let (h, w) = (e_c.shape()[0], e_c.shape()[1]);
        let mut out = RgbImage::filled(w, h, [0, 0, 0]);
        for (p, &v) in e_c.data().iter().enumerate() {
            out.put(p % w, p / w, colormap(v));
        }
        return Ok(out);
    };
    let [_, h, w] = image.shape();
    let up = upscale_map(e_c, (h, w), mode)?;
    let mut out = image_to_rgb(image);
    for (p, &v) in up.data().iter().enumerate() {
        let heat = colormap(v);
        for k in 0..3 {
            let base = out.pixels[3 * p + k] as f64;
            out.pixels[3 * p + k] =
                ((1.0 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * heat[k] as f64).round() as u8;
        }
    }
    Ok(out)
}

const PLOT_W: usize = 480;
const PLOT_H: usize = 320;
const MARGIN: usize = 32;

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), rgb: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        for (ox, oy) in [(0, 0), (1, 0), (0, 1)] {
            if x + ox >= 0 && y + oy >= 0 {
                img.put((x + ox) as usize, (y + oy) as usize, rgb);
            }
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line plot of `ys` at evenly spaced x positions with a fixed y range,
/// a frame, a zero line and square markers.
pub fn line_plot_png(ys: &[f64], (lo, hi): (f64, f64), text: &[(&str, String)]) -> Result<Vec<u8>> {
    if ys.is_empty() || !(hi > lo) {
        return Err(input_err!(
            "plot needs at least one value and a nonempty range"
        ));
    }
    let mut img = RgbImage::filled(PLOT_W, PLOT_H, [255, 255, 255]);
    let (x0, x1) = (MARGIN as i64, (PLOT_W - MARGIN) as i64);
    let (y0, y1) = (MARGIN as i64, (PLOT_H - MARGIN) as i64);
    let frame = [160, 160, 160];
    draw_line(&mut img, (x0, y0), (x1, y0), frame);
    draw_line(&mut img, (x0, y1), (x1, y1), frame);
    draw_line(&mut img, (x0, y0), (x0, y1), frame);
    draw_line(&mut img, (x1, y0), (x1, y1), frame);
    let to_y = |v: f64| y1 - ((v.clamp(lo, hi) - lo) / (hi - lo) * (y1 - y0) as f64).round() as i64;
    if lo < 0.0 && hi > 0.0 {
        draw_line(&mut img, (x0, to_y(0.0)), (x1, to_y(0.0)), [220, 220, 220]);
    }
    let step = if ys.len() > 1 {
        (x1 - x0) as f64 / (ys.len() - 1) as f64
    } else {
        0.0
    };
    let pts: Vec<(i64, i64)> = ys
        .iter()
        .enumerate()
        .map(|(i, &v)| (x0 + (i as f64 * step).round() as i64, to_y(v)))
        .collect();
    for w in pts.windows(2) {
        draw_line(&mut img, w[0], w[1], [31, 119, 180]);
    }
    for &(x, y) in &pts {
        for dy in -3..=3 {
            for dx in -3..=3 {
                img.put((x + dx) as usize, (y + dy) as usize, [214, 39, 40]);
            }
        }
    }
    img.to_png(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_zoo::Normalization;

    #[test]
    fn colormap_ends() {
        assert_eq!(colormap(0.0), [0, 0, 128]);
        assert_eq!(colormap(1.0), [128, 0, 0]);
        assert_eq!(colormap(0.5), [128, 255, 128]);
    }

    #[test]
    fn uniform_maps_give_uniform_rasters() {
        let cold = render_heatmap(&Tensor::zeros(&[4, 5]), None, Upscale::Bilinear).unwrap();
        assert_eq!((cold.width, cold.height), (5, 4));
        assert!(cold.pixels.chunks(3).all(|p| p == colormap(0.0)));
        let hot = render_heatmap(&Tensor::full(&[4, 5], 1.0), None, Upscale::Nearest).unwrap();
        assert!(hot.pixels.chunks(3).all(|p| p == colormap(1.0)));
    }

    #[test]
    fn overlay_matches_image_size_and_blend() {
        let img =
            ImageTensor::new(Tensor::zeros(&[3, 12, 10]), Normalization::identity(3)).unwrap();
        let out =
            render_heatmap(&Tensor::full(&[3, 5], 1.0), Some(&img), Upscale::Bilinear).unwrap();
        assert_eq!((out.width, out.height), (10, 12));
        assert_eq!(out.get(4, 7), [64, 0, 0]);
    }

    #[test]
    fn nearest_keeps_blocks() {
        let m = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.25, 0.5]).unwrap();
        let up = upscale_map(&m, (4, 4), Upscale::Nearest).unwrap();
        assert_eq!(up.data()[..4], [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(up.data()[12..], [0.25, 0.25, 0.5, 0.5]);
        assert!(upscale_map(&m, (1, 4), Upscale::Nearest).is_err());
    }

    #[test]
    fn png_round_trip_with_text() {
        let mut img = RgbImage::filled(3, 2, [1, 2, 3]);
        img.put(2, 1, [200, 100, 50]);
        let bytes = img
            .to_png(&[("seed", "42".into()), ("config", "abc".into())])
            .unwrap();
        let d = decode_png(&bytes).unwrap();
        assert_eq!(d.shape, [3, 2, 3]);
        assert_eq!(d.planar[5], 200);
        assert_eq!(d.planar[6 + 5], 100);
        assert_eq!(
            d.text,
            vec![
                ("seed".to_string(), "42".to_string()),
                ("config".to_string(), "abc".to_string())
            ]
        );
        assert!(decode_png(b"not a png").is_err());
    }

    #[test]
    fn plot_is_a_png() {
        let bytes = line_plot_png(&[1.0, 0.4, -0.2], (-1.0, 1.0), &[]).unwrap();
        assert_eq!(decode_png(&bytes).unwrap().shape, [3, PLOT_H, PLOT_W]);
        assert!(line_plot_png(&[], (0.0, 1.0), &[]).is_err());
    }
}
