//! Self-supervised training of the attention mechanism against a frozen
//! backbone: masking, the three loss terms, class-subset sampling, the epoch
//! loop and the constrained hyperparameter search.

pub mod config;
mod hpsearch;
mod losses;

use std::fmt::Write as _;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMechanism;
use crate::autograd::{self, gradcheck, Graph, Var};
use crate::error::{input_err, Error, Result};
use crate::model_zoo::{Classifier, ClassifierHandle, Dataset};
use crate::nn::{one_cycle, AdamW, AdamWConfig, Bound};
use crate::tensor::Tensor;

pub use hpsearch::{hyperparameter_search, SearchResult, SearchSpace, Trial};
pub use losses::{
    area_loss, ce_loss, lr_schedule, mask_image, sample_class_subset, total_loss, variation_loss,
    LossBreakdown, LossWeights, AREA_EXPONENTS,
};

/// Batch-norm momentum for the attention's running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Attention training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Stop after this many optimizer steps; the schedule spans the shortened run.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_lr: 1e-3,
            epochs: 1,
            seed: 0,
            optimizer: AdamWConfig::default(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(input_err!("batch size must be at least 1"));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(input_err!("max_lr must be positive"));
        }
        Ok(())
    }

    /// Optimizer steps the run will take on `n` images.
    pub fn total_steps(&self, n: usize) -> usize {
        let full = n.div_ceil(self.batch_size) * self.epochs;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// One optimizer step of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub ce: f64,
    pub area: f64,
    pub variation: f64,
    pub total: f64,
    pub lr: f64,
}

/// Loss trace as CSV with header `step,ce,area,variation,total,lr`.
pub fn trace_csv(trace: &[StepRecord]) -> String {
    let mut out = String::from("step,ce,area,variation,total,lr\n");
    for r in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.ce, r.area, r.variation, r.total, r.lr
        );
    }
    out
}

pub struct TrainOutcome {
    pub attention: AttentionMechanism,
    pub trace: Vec<StepRecord>,
}

/// Graph nodes of the composite loss for one batch.
pub struct BatchLoss<'g> {
    pub total: Var<'g>,
    pub ce: Var<'g>,
    pub area: Var<'g>,
    pub variation: Var<'g>,
}

/// Composite loss of a batch, averaged over images.
///
/// `maps` are the attention outputs `(N, C, h_E, w_E)`; `images` the
/// unmasked inputs; `cstar` the backbone's classes on them and `subsets` the
/// sampled class sets (each containing its `cstar`).
pub fn batch_loss<'g>(
    backbone: &dyn Classifier,
    maps: Var<'g>,
    images: &Tensor,
    cstar: &[usize],
    subsets: &[Vec<usize>],
    weights: &LossWeights,
) -> Result<BatchLoss<'g>> {
    let g = maps.graph();
    let (_, _, h, w) = images.dims4();
    let picks: Vec<Vec<usize>> = cstar.iter().map(|&c| vec![c]).collect();
    let selected = autograd::gather_channels(maps, &picks);
    let up = autograd::resize_bilinear(selected, h, w);
    let masked = autograd::mul_channel_mask(g.constant(images.clone()), up);
    let ce = autograd::cross_entropy(backbone.forward(g, masked)?, cstar);
    let es = autograd::gather_channels(maps, subsets);
    let area = es.powf(weights.lambda_area).mean();
    let variation = autograd::squared_variation_sum(es).scale(1.0 / es.value().len() as f64);
    let total = Var::weighted_sum(&[
        (weights.lambda1, ce),
        (weights.lambda2, area),
        (weights.lambda3, variation),
    ]);
    Ok(BatchLoss {
        total,
        ce,
        area,
        variation,
    })
}

/// Largest relative error between backpropagated and central-difference
/// gradients of the batch loss with respect to the trainable attention
/// parameters, for `images` `(N, C, H, W)` explained from `aux` features.
pub fn loss_gradient_error(
    backbone: &dyn Classifier,
    aux: &ClassifierHandle,
    attention: &AttentionMechanism,
    images: &Tensor,
    subsets: &[Vec<usize>],
    weights: &LossWeights,
) -> Result<f64> {
    let names: Vec<&str> = attention.spec().layers.iter().map(String::as_str).collect();
    let feats = aux.features_batch(images, &aux.feature_indices(&names)?)?;
    let cstar = backbone.predict(images)?;
    if subsets.len() != cstar.len() || subsets.iter().zip(&cstar).any(|(s, c)| !s.contains(c)) {
        return Err(input_err!(
            "need one class subset per image containing its predicted class"
        ));
    }
    let entries = &attention.params().entries;
    let inputs: Vec<Tensor> = entries.iter().map(|e| e.value.as_ref().clone()).collect();
    let failure = std::cell::RefCell::new(None);
    let err = gradcheck::max_rel_error(&inputs, |g, vars| {
        let bound = (0..entries.len())
            .map(|i| {
                if entries[i].role.trainable() {
                    vars[i]
                } else {
                    g.constant(inputs[i].clone())
                }
            })
            .collect();
        let b = Bound::from_vars(g, bound, true);
        let fv: Vec<_> = feats.iter().map(|f| g.constant(f.clone())).collect();
        let loss = attention.forward(&b, &fv).and_then(|maps| {
            batch_loss(backbone, maps, images, &cstar, subsets, weights).map(|l| l.total)
        });
        loss.unwrap_or_else(|e| {
            failure.borrow_mut().get_or_insert(e);
            g.constant(Tensor::zeros(&[1]))
        })
    });
    match failure.into_inner() {
        Some(e) => Err(e),
        None => Ok(err),
    }
}

fn check_frozen(model: &dyn Classifier, before: &str, what: &str) -> Result<()> {
    if model.weights_digest() != before {
        return Err(Error::Internal(format!(
            "{what} weights changed during attention training"
        )));
    }
    Ok(())
}

/// Trains `attention` on `data` with the composite loss. Only attention
/// parameters change; backbone and auxiliary digests are checked before and after.
pub fn train_epoch(
    backbone: &dyn Classifier,
    aux: &ClassifierHandle,
    mut attention: AttentionMechanism,
    data: &Dataset,
    weights: &LossWeights,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(input_err!("training set is empty"));
    }
    let classes = backbone.num_classes();
    weights.validate(classes)?;
    if attention.spec().classes != classes {
        return Err(input_err!(
            "attention has {} maps, backbone {classes} classes",
            attention.spec().classes
        ));
    }
    let names: Vec<&str> = attention.spec().layers.iter().map(String::as_str).collect();
    let layer_idx = aux.feature_indices(&names)?;
    let (backbone_digest, aux_digest) = (backbone.weights_digest(), aux.weights_digest());

    let total_steps = config.total_steps(data.len());
    let mut opt = AdamW::new(attention.params(), config.optimizer);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut subset_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(total_steps);
    let mut step = 0;
    'epochs: for _ in 0..config.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(config.batch_size) {
            if step >= total_steps {
                break 'epochs;
            }
            let (x, _) = data.batch(chunk);
            let cstar = backbone.predict(&x)?;
            let subsets = cstar
                .iter()
                .map(|&c| sample_class_subset(classes, c, weights.lambda_rand, &mut subset_rng))
                .collect::<Result<Vec<_>>>()?;
            let feats = aux.features_batch(&x, &layer_idx)?;

            let g = Graph::new();
            let b = Bound::new(&g, attention.params(), true, true);
            let fvars: Vec<Var<'_>> = feats.into_iter().map(|f| g.constant(f)).collect();
            let maps = attention.forward(&b, &fvars)?;
            let loss = batch_loss(backbone, maps, &x, &cstar, &subsets, weights)?;
            let lr = one_cycle(step, total_steps, config.max_lr);
            let rec = StepRecord {
                step,
                ce: loss.ce.value().item(),
                area: loss.area.value().item(),
                variation: loss.variation.value().item(),
                total: loss.total.value().item(),
                lr,
            };
            if ![rec.ce, rec.area, rec.variation, rec.total]
                .iter()
                .all(|v| v.is_finite())
            {
                return Err(Error::Training {
                    step,
                    reason: format!("non-finite loss {rec:?}"),
                });
            }
            let grads = b.gradients(&g.backward(loss.total));
            let stats = b.take_stats();
            drop(g);
            opt.step(attention.params_mut(), &grads, lr);
            attention
                .params_mut()
                .apply_batch_stats(&stats, BN_MOMENTUM);
            if !attention.params().all_finite() {
                return Err(Error::Training {
                    step,
                    reason: "non-finite attention parameters".into(),
                });
            }
            debug!(
                "step {step}: total {:.5} ce {:.5} area {:.5} var {:.5}",
                rec.total, rec.ce, rec.area, rec.variation
            );
            trace.push(rec);
            step += 1;
        }
    }
    check_frozen(backbone, &backbone_digest, "backbone")?;
    check_frozen(aux, &aux_digest, "auxiliary")?;
    Ok(TrainOutcome { attention, trace })
}

#[cfg(test)]
mod tests;
