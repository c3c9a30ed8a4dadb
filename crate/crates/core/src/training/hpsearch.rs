//! Constrained search over loss weights: random initial trials followed by
//! trials chosen by expected improvement under a Gaussian-process surrogate.

use std::fmt::Write as _;

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::{LossWeights, AREA_EXPONENTS};
use crate::error::{config_err, input_err, Error, Result};

/// Feasible region and search protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Allowed `lambda_area` values, a subset of [`AREA_EXPONENTS`].
    pub area_exponents: Vec<f64>,
    pub lambda_rand: usize,
    /// Trials drawn uniformly before the surrogate takes over.
    pub initial_random: usize,
    /// `false` selects the all-random protocol.
    pub guided: bool,
    /// Random feasible candidates scored by expected improvement per guided trial.
    pub candidates: usize,
}

impl SearchSpace {
    pub fn new(lambda_rand: usize) -> Self {
        Self {
            area_exponents: AREA_EXPONENTS.to_vec(),
            lambda_rand,
            initial_random: 5,
            guided: true,
            candidates: 512,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.area_exponents.is_empty()
            || self
                .area_exponents
                .iter()
                .any(|a| !AREA_EXPONENTS.contains(a))
        {
            return Err(config_err!(
                "area exponents {:?} must be a nonempty subset of {AREA_EXPONENTS:?}",
                self.area_exponents
            ));
        }
        if self.lambda_rand == 0 {
            return Err(config_err!("lambda_rand must be at least 1"));
        }
        if self.guided && self.candidates == 0 {
            return Err(config_err!("guided search needs candidates"));
        }
        Ok(())
    }

    /// Uniform draw from `{l1, l2 >= 0, l1 + l2 < 1}` times the exponent set.
    fn sample(&self, rng: &mut ChaCha8Rng) -> LossWeights {
        loop {
            let (mut a, mut b) = (rng.random::<f64>(), rng.random::<f64>());
            if a + b > 1.0 {
                (a, b) = (1.0 - a, 1.0 - b);
            }
            let area = self.area_exponents[rng.random_range(0..self.area_exponents.len())];
            if let Ok(w) = LossWeights::new(a, b, area, self.lambda_rand) {
                return w;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub weights: LossWeights,
    pub score: f64,
    pub guided: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: LossWeights,
    pub best_index: usize,
    pub trials: Vec<Trial>,
}

impl SearchResult {
    /// Trial log as CSV.
    pub fn log_csv(&self) -> String {
        let mut out =
            String::from("trial,guided,lambda1,lambda2,lambda3,lambda_area,lambda_rand,score\n");
        for t in &self.trials {
            let w = &t.weights;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                t.index,
                t.guided,
                w.lambda1,
                w.lambda2,
                w.lambda3,
                w.lambda_area,
                w.lambda_rand,
                t.score
            );
        }
        out
    }
}

/// Surrogate coordinates: both free weights and the exponent mapped into `[0, 1]`.
fn encode(w: &LossWeights) -> [f64; 3] {
    [w.lambda1, w.lambda2, (w.lambda_area.log2() + 1.0) / 2.0]
}

const LENGTH_SCALE: f64 = 0.25;
const NOISE: f64 = 1e-4;
const XI: f64 = 0.01;

fn kernel(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-d2 / (2.0 * LENGTH_SCALE * LENGTH_SCALE)).exp()
}

/// Zero-mean GP with unit RBF kernel on standardized scores.
struct Surrogate {
    xs: Vec<[f64; 3]>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
    best: f64,
}

impl Surrogate {
    fn fit(xs: Vec<[f64; 3]>, ys: &[f64]) -> Result<Self> {
        let n = xs.len();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let sd = if sd > 1e-12 { sd } else { 1.0 };
        let y = DVector::from_iterator(n, ys.iter().map(|v| (v - mean) / sd));
        let k = DMatrix::from_fn(n, n, |i, j| {
            kernel(&xs[i], &xs[j]) + if i == j { NOISE } else { 0.0 }
        });
        let chol = k
            .cholesky()
            .ok_or_else(|| Error::Internal("surrogate kernel is not positive definite".into()))?;
        let alpha = chol.solve(&y);
        let best = y.max();
        Ok(Self {
            xs,
            chol,
            alpha,
            best,
        })
    }

    fn expected_improvement(&self, x: &[f64; 3]) -> f64 {
        let ks = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| kernel(xi, x)));
        let mu = ks.dot(&self.alpha);
        let v = self
            .chol
            .l()
            .solve_lower_triangular(&ks)
            .expect("triangular solve");
        let sigma = (1.0 + NOISE - v.dot(&v)).max(1e-12).sqrt();
        let z = (mu - self.best - XI) / sigma;
        let n = Normal::standard();
        (mu - self.best - XI) * n.cdf(z) + sigma * n.pdf(z)
    }
}

/// Runs `trials` evaluations of `objective` (higher is better) and returns the
/// best trial, earliest on ties.
///
/// The first `space.initial_random` trials (or all, when unguided) are
/// uniform draws from the feasible region; the rest maximize expected
/// improvement over `space.candidates` random feasible points.
pub fn hyperparameter_search(
    space: &SearchSpace,
    trials: usize,
    seed: u64,
    mut objective: impl FnMut(usize, &LossWeights) -> Result<f64>,
) -> Result<SearchResult> {
    space.validate()?;
    if trials == 0 {
        return Err(input_err!("at least one trial is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log: Vec<Trial> = Vec::with_capacity(trials);
    for index in 0..trials {
        let guided = space.guided && index >= space.initial_random.max(1);
        let weights = if guided {
            let gp = Surrogate::fit(
                log.iter().map(|t| encode(&t.weights)).collect(),
                &log.iter().map(|t| t.score).collect::<Vec<_>>(),
            )?;
            let mut best: Option<(f64, LossWeights)> = None;
            for _ in 0..space.candidates {
                let c = space.sample(&mut rng);
                let ei = gp.expected_improvement(&encode(&c));
                if best.is_none_or(|(b, _)| ei > b) {
                    best = Some((ei, c));
                }
            }
            best.expect("at least one candidate").1
        } else {
            space.sample(&mut rng)
        };
        let score = objective(index, &weights)?;
        if !score.is_finite() {
            return Err(Error::Degenerate(format!(
                "trial {index} produced a non-finite score"
            )));
        }
        info!(
            "trial {index} ({}) {:?} -> {score:.5}",
            if guided { "guided" } else { "random" },
            weights
        );
        log.push(Trial {
            index,
            weights,
            score,
            guided,
        });
    }
    let best_index = log
        .iter()
        .enumerate()
        .fold(0, |b, (i, t)| if t.score > log[b].score { i } else { b });
    Ok(SearchResult {
        best: log[best_index].weights,
        best_index,
        trials: log,
    })
}
