//! Procedural labeled image sets used in place of downloaded datasets.
//!
//! [`shapes10`] produces 3x32x32 images in which the class is determined by a
//! single localized shape drawn over a noisy gradient background with a few
//! line distractors, so class evidence is spatially concentrated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::data::RawImage;

pub const SHAPE_NAMES: [&str; 10] = [
    "square", "disc", "triangle", "plus", "ring", "hstripes", "vstripes", "diamond", "cross",
    "frame",
];

fn inside(class: usize, u: f64, v: f64) -> bool {
    let (du, dv) = (u - 0.5, v - 0.5);
    let r2 = du * du + dv * dv;
    match class {
        0 => true,
        1 => r2 < 0.25,
        2 => du.abs() < v / 2.0,
        3 => du.abs() < 0.17 || dv.abs() < 0.17,
        4 => (0.09..0.25).contains(&r2),
        5 => (v * 5.0).floor() as i64 % 2 == 0,
        6 => (u * 5.0).floor() as i64 % 2 == 0,
        7 => du.abs() + dv.abs() < 0.5,
        8 => (u - v).abs() < 0.17 || (u + v - 1.0).abs() < 0.17,
        9 => !(0.25..0.75).contains(&u) || !(0.25..0.75).contains(&v),
        _ => unreachable!("ten classes"),
    }
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.0..255.0),
        rng.random_range(0.0..255.0),
        rng.random_range(0.0..255.0),
    ]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Ten-class shapes dataset; labels cycle `0..10` so every prefix is balanced.
pub fn shapes10(n: usize, seed: u64) -> Vec<RawImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 18.0).expect("valid std");
    const S: usize = 32;
    (0..n)
        .map(|i| {
            let class = i % 10;
            let (c0, c1) = (color(&mut rng), color(&mut rng));
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let (ca, sa) = (angle.cos(), angle.sin());
            let mut img = vec![[0.0f64; 3]; S * S];
            for y in 0..S {
                for x in 0..S {
                    let t = (((x as f64 / 31.0 - 0.5) * ca + (y as f64 / 31.0 - 0.5) * sa) / 1.42
                        + 0.5)
                        .clamp(0.0, 1.0);
                    img[y * S + x] = std::array::from_fn(|c| c0[c] + (c1[c] - c0[c]) * t);
                }
            }
            for _ in 0..2 {
                let lc = color(&mut rng);
                let (mut x, mut y) = (rng.random_range(0.0..32.0), rng.random_range(0.0..32.0));
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                for _ in 0..rng.random_range(6..14) {
                    img[(y as usize).min(31) * S + (x as usize).min(31)] = lc;
                    x = (x + a.cos()).clamp(0.0, 31.0);
                    y = (y + a.sin()).clamp(0.0, 31.0);
                }
            }
            let bg = std::array::from_fn(|c| (c0[c] + c1[c]) / 2.0);
            let fg = loop {
                let c = color(&mut rng);
                if dist(c, bg) > 110.0 {
                    break c;
                }
            };
            let size = rng.random_range(11..=17usize);
            let (ox, oy) = (
                rng.random_range(0..=S - size),
                rng.random_range(0..=S - size),
            );
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = (
                        (x as f64 + 0.5) / size as f64,
                        (y as f64 + 0.5) / size as f64,
                    );
                    if inside(class, u, v) {
                        img[(oy + y) * S + ox + x] = fg;
                    }
                }
            }
            let mut pixels = vec![0u8; 3 * S * S];
            for c in 0..3 {
                for p in 0..S * S {
                    pixels[c * S * S + p] = (img[p][c] + noise.sample(&mut rng))
                        .round()
                        .clamp(0.0, 255.0) as u8;
                }
            }
            RawImage {
                label: class as u8,
                pixels,
            }
        })
        .collect()
}

/// Two-class single-channel 8x8 set separable by mean intensity.
pub fn two_class_brightness(n: usize, seed: u64) -> Vec<RawImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let base = if label == 1 { 170.0 } else { 85.0 };
            let pixels = (0..64)
                .map(|_| (base + rng.random_range(-40.0..40.0)) as u8)
                .collect();
            RawImage { label, pixels }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_deterministic_and_balanced() {
        let a = shapes10(40, 7);
        assert_eq!(a, shapes10(40, 7));
        assert_ne!(a, shapes10(40, 8));
        for c in 0..10 {
            assert_eq!(a.iter().filter(|r| r.label as usize == c).count(), 4);
        }
        assert!(a.iter().all(|r| r.pixels.len() == 3072));
    }

    #[test]
    fn every_shape_covers_a_reasonable_area() {
        for class in 0..10 {
            let n = 40;
            let covered = (0..n * n)
                .filter(|k| inside(class, (k % n) as f64 / n as f64, (k / n) as f64 / n as f64))
                .count() as f64
                / (n * n) as f64;
            assert!(
                (0.2..=1.0).contains(&covered),
                "class {class} covers {covered}"
            );
        }
    }
}
