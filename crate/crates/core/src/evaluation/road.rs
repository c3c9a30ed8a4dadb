//! Neighbour infilling of removed pixels.
//!
//! Each removed pixel is constrained to equal the mean of its in-bounds
//! 4-neighbours, kept pixels acting as boundary values. The resulting sparse
//! symmetric positive-definite system is solved per channel by conjugate
//! gradients with a diagonal preconditioner, then uniform noise in
//! `[-noise_scale, noise_scale]` is added to the removed pixels.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{content_seed, f64_bytes, ThresholdMask};
use crate::error::{input_err, Error, Result};
use crate::model_zoo::ImageTensor;
use crate::tensor::Tensor;

/// Relative residual at which the solver stops.
const TOLERANCE: f64 = 1e-12;

/// Infill with noise seeded by the image and mask content only.
pub fn road_infill(
    image: &ImageTensor,
    removal: &ThresholdMask,
    noise_scale: f64,
) -> Result<ImageTensor> {
    road_infill_seeded(image, removal, noise_scale, 0)
}

/// Infill with noise seeded by `seed` together with the image and mask content.
pub fn road_infill_seeded(
    image: &ImageTensor,
    removal: &ThresholdMask,
    noise_scale: f64,
    seed: u64,
) -> Result<ImageTensor> {
    let [c, h, w] = image.shape();
    if removal.shape() != (h, w) {
        return Err(input_err!(
            "mask {:?} does not match image {h}x{w}",
            removal.shape()
        ));
    }
    if removal.bits().iter().all(|&b| b) {
        return Err(Error::Degenerate(
            "every pixel is marked for removal".into(),
        ));
    }
    let out = infill(
        image.data().data(),
        (c, h, w),
        removal.bits(),
        noise_scale,
        seed,
    )?;
    image.with_data(Tensor::new(&[c, h, w], out)?)
}

/// [`road_infill_seeded`] on a raw planar buffer; a full removal yields pure noise.
pub(crate) fn infill_or_blank(
    data: &[f64],
    shape: (usize, usize, usize),
    removed: &[bool],
    noise_scale: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if removed.iter().all(|&b| b) {
        let mut rng = noise_rng(data, removed, noise_scale, seed);
        return Ok(data.iter().map(|_| noise(&mut rng, noise_scale)).collect());
    }
    infill(data, shape, removed, noise_scale, seed)
}

fn noise_rng(data: &[f64], removed: &[bool], noise_scale: f64, seed: u64) -> ChaCha8Rng {
    let bits: Vec<u8> = removed.iter().map(|&b| u8::from(b)).collect();
    let s = content_seed(seed, &[&f64_bytes(data), &bits, &noise_scale.to_le_bytes()]);
    ChaCha8Rng::seed_from_u64(s)
}

fn noise(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    if scale > 0.0 {
        rng.random_range(-scale..=scale)
    } else {
        0.0
    }
}

fn infill(
    data: &[f64],
    (c, h, w): (usize, usize, usize),
    removed: &[bool],
    noise_scale: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(input_err!("noise scale must be finite and non-negative"));
    }
    let plane = h * w;
    let mut out = data.to_vec();
    let unknowns: Vec<usize> = (0..plane).filter(|&p| removed[p]).collect();
    if unknowns.is_empty() {
        return Ok(out);
    }
    let system = System::new(h, w, removed, &unknowns);
    let mut rng = noise_rng(data, removed, noise_scale, seed);
    for ch in 0..c {
        let img = &mut out[ch * plane..(ch + 1) * plane];
        let x = system.solve(img);
        for (k, &p) in unknowns.iter().enumerate() {
            img[p] = x[k] + noise(&mut rng, noise_scale);
        }
    }
    Ok(out)
}

/// `deg(p) x_p - sum of removed neighbours = sum of kept neighbours`.
struct System {
    degree: Vec<f64>,
    /// Unknown indices of removed neighbours.
    inner: Vec<Vec<usize>>,
    /// Pixel indices of kept neighbours.
    boundary: Vec<Vec<usize>>,
}

impl System {
    fn new(h: usize, w: usize, removed: &[bool], unknowns: &[usize]) -> Self {
        let mut slot = vec![usize::MAX; h * w];
        for (k, &p) in unknowns.iter().enumerate() {
            slot[p] = k;
        }
        let n = unknowns.len();
        let (mut degree, mut inner, mut boundary) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for &p in unknowns {
            let (i, j) = (p / w, p % w);
            let mut nb = Vec::with_capacity(4);
            if i > 0 {
                nb.push(p - w);
            }
            if i + 1 < h {
                nb.push(p + w);
            }
            if j > 0 {
                nb.push(p - 1);
            }
            if j + 1 < w {
                nb.push(p + 1);
            }
            degree.push(nb.len() as f64);
            inner.push(
                nb.iter()
                    .filter(|&&q| removed[q])
                    .map(|&q| slot[q])
                    .collect(),
            );
            boundary.push(nb.into_iter().filter(|&q| !removed[q]).collect());
        }
        Self {
            degree,
            inner,
            boundary,
        }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.degree[k] * x[k] - self.inner[k].iter().map(|&q| x[q]).sum::<f64>();
        }
    }

    fn solve(&self, img: &[f64]) -> Vec<f64> {
        let n = self.degree.len();
        let b: Vec<f64> = self
            .boundary
            .iter()
            .map(|nb| nb.iter().map(|&q| img[q]).sum())
            .collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let target = TOLERANCE * norm(&b).max(f64::MIN_POSITIVE);
        let mut x = vec![0.0; n];
        let mut r = b;
        let mut z: Vec<f64> = r.iter().zip(&self.degree).map(|(r, d)| r / d).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ap = vec![0.0; n];
        let limit = 10 * n + 100;
        for _ in 0..limit {
            if norm(&r) <= target {
                return x;
            }
            self.apply(&p, &mut ap);
            let alpha = rz / dot(&p, &ap);
            for k in 0..n {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            for k in 0..n {
                z[k] = r[k] / self.degree[k];
            }
            let next = dot(&r, &z);
            let beta = next / rz;
            rz = next;
            for k in 0..n {
                p[k] = z[k] + beta * p[k];
            }
        }
        warn!(
            "infill solver stopped at residual {:.3e} after {limit} iterations",
            norm(&r)
        );
        x
    }
}
