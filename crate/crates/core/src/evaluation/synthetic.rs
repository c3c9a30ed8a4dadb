//! A two-class classifier whose decision depends only on a fixed image
//! region, data for it, and explainers with fixed maps. Used to check the
//! metrics against brute-force expectations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::Explainer;
use crate::autograd::{self, Graph, Var};
use crate::error::{input_err, Result};
use crate::model_zoo::{Classifier, Dataset, Normalization};
use crate::tensor::Tensor;

/// Rectangle `[top, bottom) x [left, right)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Region {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.top..self.bottom).contains(&i) && (self.left..self.right).contains(&j)
    }

    pub fn area(&self) -> usize {
        (self.bottom - self.top) * (self.right - self.left)
    }

    /// 0/1 indicator `(h, w)`.
    pub fn indicator(&self, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[h, w], |p| {
            if self.contains(p / w, p % w) {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Logits `(g * m, -g * m)` where `m` is the mean of the region over all channels.
#[derive(Clone, Debug)]
pub struct RegionClassifier {
    shape: [usize; 3],
    region: Region,
    gain: f64,
    weights: Tensor,
}

impl RegionClassifier {
    pub fn new(shape: [usize; 3], region: Region, gain: f64) -> Result<Self> {
        let [c, h, w] = shape;
        if region.bottom > h || region.right > w || region.area() == 0 {
            return Err(input_err!(
                "region {region:?} must be a nonempty part of {h}x{w}"
            ));
        }
        let per = gain / (c * region.area()) as f64;
        let plane = h * w;
        let weights = Tensor::from_fn(&[2, c * plane], |k| {
            let p = k % (c * plane) % plane;
            let s = if k < c * plane { per } else { -per };
            if region.contains(p / w, p % w) {
                s
            } else {
                0.0
            }
        });
        Ok(Self {
            shape,
            region,
            gain,
            weights,
        })
    }

    /// 16x16 grayscale images with the decision region covering the central quarter.
    pub fn quarter() -> Self {
        Self::new(
            [1, 16, 16],
            Region {
                top: 4,
                bottom: 12,
                left: 4,
                right: 12,
            },
            4.0,
        )
        .expect("valid region")
    }

    pub fn region(&self) -> Region {
        self.region
    }

    /// Images whose region is bright for class 0 and dark for class 1 over a
    /// uniform `[-1, 1]` background; labels alternate.
    pub fn dataset(&self, n: usize, seed: u64) -> Result<Dataset> {
        let [c, h, w] = self.shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * c * h * w);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            let sign = if label == 0 { 1.0 } else { -1.0 };
            for _ in 0..c {
                for p in 0..h * w {
                    data.push(if self.region.contains(p / w, p % w) {
                        sign * rng.random_range(0.3..1.0)
                    } else {
                        rng.random_range(-1.0..1.0)
                    });
                }
            }
            labels.push(label);
        }
        Dataset::new(
            Tensor::new(&[n, c, h, w], data)?,
            labels,
            2,
            Normalization::identity(c),
        )
    }
}

impl Classifier for RegionClassifier {
    fn num_classes(&self) -> usize {
        2
    }

    fn input_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let n = x.shape()[0];
        let flat = x.reshape(&[n, self.weights.shape()[1]]);
        Ok(autograd::linear(
            flat,
            g.constant(self.weights.clone()),
            g.constant(Tensor::zeros(&[2])),
        ))
    }

    fn weights_digest(&self) -> String {
        format!("region:{:?}:{:?}:{}", self.shape, self.region, self.gain)
    }
}

/// Returns the same maps `(C, h, w)` for every image.
#[derive(Clone, Debug)]
pub struct FixedExplainer {
    pub name: String,
    pub maps: Tensor,
}

impl FixedExplainer {
    pub fn new(name: &str, maps: Tensor) -> Result<Self> {
        if maps.rank() != 3 || maps.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(input_err!("fixed maps must be (C, h, w) in [0, 1]"));
        }
        Ok(Self {
            name: name.to_string(),
            maps,
        })
    }

    /// The region indicator for both classes.
    pub fn oracle(model: &RegionClassifier) -> Self {
        let [_, h, w] = model.shape;
        let m = model.region.indicator(h, w);
        Self::new(
            "oracle",
            Tensor::stack(&[m.clone(), m]).expect("equal shapes"),
        )
        .expect("indicator in [0, 1]")
    }

    /// The complement of the region indicator for both classes.
    pub fn anti_oracle(model: &RegionClassifier) -> Self {
        let [_, h, w] = model.shape;
        let m = model.region.indicator(h, w).map(|v| 1.0 - v);
        Self::new(
            "anti-oracle",
            Tensor::stack(&[m.clone(), m]).expect("equal shapes"),
        )
        .expect("indicator in [0, 1]")
    }
}

impl Explainer for FixedExplainer {
    fn id(&self) -> String {
        format!("fixed:{}", self.name)
    }

    fn explain_batch(&self, images: &Tensor) -> Result<Tensor> {
        if images.rank() != 4 {
            return Err(input_err!(
                "expected (N, C, H, W) images, got {:?}",
                images.shape()
            ));
        }
        let n = images.shape()[0];
        Tensor::stack(&vec![self.maps.clone(); n])
    }
}
