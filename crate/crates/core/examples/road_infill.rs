//! Removes a block of pixels from a smooth image and fills it from its
//! neighbours, with and without noise.
//!
//! `cargo run --release --example road_infill`

use ptame::evaluation::{road_infill, topk_mask, Polarity};
use ptame::model_zoo::{ImageTensor, Normalization};
use ptame::Tensor;

/// Largest error inside the removed block, without and with noise.
pub fn run(noise: f64) -> ptame::Result<(f64, f64)> {
    let (h, w) = (16, 16);
    let smooth =
        |i: usize, j: usize| 0.3 + 0.02 * i as f64 - 0.01 * j as f64 + 0.001 * (i * j) as f64;
    let image = ImageTensor::new(
        Tensor::from_fn(&[1, h, w], |p| smooth(p / w, p % w)),
        Normalization::identity(1),
    )?;
    let block = Tensor::from_fn(&[h, w], |p| {
        if (5..11).contains(&(p / w)) && (4..12).contains(&(p % w)) {
            1.0
        } else {
            0.0
        }
    });
    let removal = topk_mask(&block, 48.0 / 256.0 * 100.0, Polarity::Highest)?;
    let worst = |filled: &ImageTensor| {
        removal
            .bits()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(p, _)| (filled.data().data()[p] - smooth(p / w, p % w)).abs())
            .fold(0.0, f64::max)
    };
    Ok((
        worst(&road_infill(&image, &removal, 0.0)?),
        worst(&road_infill(&image, &removal, noise)?),
    ))
}

#[allow(dead_code)]
fn main() -> ptame::Result<()> {
    let (clean, noisy) = run(0.01)?;
    println!(
        "max error in the removed block: {clean:.2e} without noise, {noisy:.2e} with noise 0.01"
    );
    Ok(())
}
