use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::bilinear_upscale;
use crate::error::{config_err, input_err, Result};
use crate::model_zoo::{ImageTensor, LogitVector};
use crate::nn::one_cycle;
use crate::tensor::Tensor;

/// Admissible area-loss exponents.
pub const AREA_EXPONENTS: [f64; 3] = [0.5, 1.0, 2.0];

/// Weights of the composite loss and the class-subset size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_area: f64,
    pub lambda_rand: usize,
}

impl LossWeights {
    /// Weights on the search simplex: `lambda3 = 1 - lambda1 - lambda2` with
    /// `lambda1 + lambda2 < 1`.
    pub fn new(lambda1: f64, lambda2: f64, lambda_area: f64, lambda_rand: usize) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda1 + lambda2 < 1.0) {
            return Err(config_err!(
                "need lambda1, lambda2 >= 0 and lambda1 + lambda2 < 1, got {lambda1}, {lambda2}"
            ));
        }
        let w = Self {
            lambda1,
            lambda2,
            lambda3: 1.0 - lambda1 - lambda2,
            lambda_area,
            lambda_rand,
        };
        w.check_shape()?;
        Ok(w)
    }

    /// Arbitrary non-negative weights summing to one, including the simplex
    /// vertices excluded by [`LossWeights::new`].
    pub fn with_all(
        lambda1: f64,
        lambda2: f64,
        lambda3: f64,
        lambda_area: f64,
        lambda_rand: usize,
    ) -> Result<Self> {
        let w = Self {
            lambda1,
            lambda2,
            lambda3,
            lambda_area,
            lambda_rand,
        };
        w.check_shape()?;
        Ok(w)
    }

    fn check_shape(&self) -> Result<()> {
        let l = [self.lambda1, self.lambda2, self.lambda3];
        if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(config_err!(
                "loss weights must be finite and non-negative: {l:?}"
            ));
        }
        if (l.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err!(
                "loss weights must sum to 1, got {}",
                l.iter().sum::<f64>()
            ));
        }
        if !AREA_EXPONENTS.contains(&self.lambda_area) {
            return Err(config_err!(
                "lambda_area must be one of {AREA_EXPONENTS:?}, got {}",
                self.lambda_area
            ));
        }
        if self.lambda_rand == 0 {
            return Err(config_err!("lambda_rand must be at least 1"));
        }
        Ok(())
    }

    /// Full check against a class count.
    pub fn validate(&self, classes: usize) -> Result<()> {
        self.check_shape()?;
        if self.lambda_rand > classes {
            return Err(config_err!(
                "lambda_rand {} exceeds {classes} classes",
                self.lambda_rand
            ));
        }
        Ok(())
    }

    /// Inside the open search region `lambda1 + lambda2 < 1`.
    pub fn in_search_region(&self) -> bool {
        self.lambda1 + self.lambda2 < 1.0
    }

    /// Same weights with `lambda_rand` set to `batch_size`, clipped to `classes`.
    pub fn with_rand_for(mut self, batch_size: usize, classes: usize) -> Self {
        self.lambda_rand = batch_size.min(classes).max(1);
        self
    }
}

/// The three loss components and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub area: f64,
    pub variation: f64,
    pub total: f64,
}

/// `x * up(E_c)`: the map is upscaled to the image size and broadcast over channels.
pub fn mask_image(x: &ImageTensor, e_c: &Tensor) -> Result<ImageTensor> {
    if e_c.rank() != 2 {
        return Err(input_err!("class map must be 2-D, got {:?}", e_c.shape()));
    }
    if e_c.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(input_err!("class map values must lie in [0, 1]"));
    }
    let [c, h, w] = x.shape();
    let (eh, ew) = (e_c.shape()[0], e_c.shape()[1]);
    if eh > h || ew > w {
        return Err(input_err!(
            "class map {eh}x{ew} is larger than the image {h}x{w}"
        ));
    }
    let up = bilinear_upscale(&e_c.clone().reshape(&[1, eh, ew])?, (h, w))?;
    let m = up.data();
    let data = Tensor::from_fn(&[c, h, w], |i| x.data().data()[i] * m[i % (h * w)]);
    x.with_data(data)
}

/// `-log softmax(logits)[c]`.
pub fn ce_loss(c: usize, logits: &LogitVector) -> Result<f64> {
    let z = logits.values();
    if c >= z.len() {
        return Err(input_err!("class {c} out of range for {} logits", z.len()));
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok((lse - z[c]).max(0.0))
}

/// `c` together with `size - 1` distinct other classes drawn uniformly, sorted.
pub fn sample_class_subset(
    classes: usize,
    c: usize,
    size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if c >= classes {
        return Err(input_err!("class {c} out of range for {classes} classes"));
    }
    if size == 0 || size > classes {
        return Err(input_err!("subset size {size} must be in 1..={classes}"));
    }
    let mut s: Vec<usize> = index::sample(rng, classes - 1, size - 1)
        .into_iter()
        .map(|i| if i >= c { i + 1 } else { i })
        .collect();
    s.push(c);
    s.sort_unstable();
    Ok(s)
}

fn check_maps(e: &Tensor) -> Result<(usize, usize, usize)> {
    if e.rank() != 3 || e.is_empty() {
        return Err(input_err!(
            "expected nonempty (|S|, h, w) maps, got {:?}",
            e.shape()
        ));
    }
    Ok(e.dims3())
}

/// Mean of `E_S ^ lambda_area`.
pub fn area_loss(e_s: &Tensor, lambda_area: f64) -> Result<f64> {
    check_maps(e_s)?;
    if lambda_area <= 0.0 {
        return Err(input_err!("lambda_area must be positive"));
    }
    Ok(e_s.data().iter().map(|v| v.powf(lambda_area)).sum::<f64>() / e_s.len() as f64)
}

/// Squared forward differences along both axes, summed and divided by `|S| * R`.
pub fn variation_loss(e_s: &Tensor) -> Result<f64> {
    let (s, h, w) = check_maps(e_s)?;
    if h < 2 || w < 2 {
        return Err(input_err!(
            "variation needs maps of at least 2x2, got {h}x{w}"
        ));
    }
    let d = e_s.data();
    let mut total = 0.0;
    for p in 0..s {
        let m = &d[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    total += (m[(i + 1) * w + j] - m[i * w + j]).powi(2);
                }
                if j + 1 < w {
                    total += (m[i * w + j + 1] - m[i * w + j]).powi(2);
                }
            }
        }
    }
    Ok(total / e_s.len() as f64)
}

/// All three components and the weighted total for one image.
pub fn total_loss(
    c: usize,
    logits_masked: &LogitVector,
    e_s: &Tensor,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate(logits_masked.len())?;
    let ce = ce_loss(c, logits_masked)?;
    let area = area_loss(e_s, weights.lambda_area)?;
    let variation = variation_loss(e_s)?;
    let total = weights.lambda1 * ce + weights.lambda2 * area + weights.lambda3 * variation;
    Ok(LossBreakdown {
        ce,
        area,
        variation,
        total,
    })
}

/// One-cycle learning rate for `step` of `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, max_lr: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(input_err!(
            "step {step} out of range for {total_steps} steps"
        ));
    }
    if !(max_lr > 0.0) {
        return Err(input_err!("max_lr must be positive"));
    }
    Ok(one_cycle(step, total_steps, max_lr))
}
