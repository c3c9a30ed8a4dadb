use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accuracy, Arch, ClassifierHandle, Dataset};
use crate::autograd::{self, Graph};
use crate::error::{input_err, Error, Result};
use crate::nn::{one_cycle, AdamW, AdamWConfig, Bound};

/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

/// Supervised training settings for toy backbones and auxiliaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for ModelTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 64,
            max_lr: 3e-3,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// Trains `arch` on `train` with cross-entropy, AdamW and a one-cycle
/// schedule, scores it on `val` and returns a frozen handle.
pub fn train_toy_classifier(
    train: &Dataset,
    val: &Dataset,
    arch: &Arch,
    config: &ModelTrainConfig,
) -> Result<ClassifierHandle> {
    if train.is_empty() || val.is_empty() {
        return Err(input_err!(
            "training and validation splits must be nonempty"
        ));
    }
    if train.classes_present() < 2 {
        return Err(input_err!("training split needs at least two classes"));
    }
    if train.num_classes() != arch.classes() || val.num_classes() != arch.classes() {
        return Err(input_err!(
            "dataset has {} classes, architecture {}",
            train.num_classes(),
            arch.classes()
        ));
    }
    if train.image_shape() != val.image_shape() {
        return Err(input_err!("train and validation image shapes differ"));
    }
    if config.batch_size == 0 || config.max_lr <= 0.0 {
        return Err(input_err!("batch size must be positive and max_lr > 0"));
    }
    let handle = ClassifierHandle::init(
        arch.clone(),
        train.image_shape(),
        train.normalization().clone(),
        config.seed,
    )?;
    let (mut meta, layout, mut params) = handle.into_parts();
    let mut opt = AdamW::new(&params, config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let per_epoch = train.len().div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut running = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = train.batch(chunk);
            let g = Graph::new();
            let b = Bound::new(&g, &params, true, true);
            let logits = layout
                .forward(&b, g.constant(x), None)
                .logits
                .expect("logits");
            let loss = autograd::cross_entropy(logits, &y);
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("loss is {value}"),
                });
            }
            running += value;
            let grads = b.gradients(&g.backward(loss));
            let stats = b.take_stats();
            opt.step(&mut params, &grads, one_cycle(step, total, config.max_lr));
            params.apply_batch_stats(&stats, BN_MOMENTUM);
            if !params.all_finite() {
                return Err(Error::Training {
                    step,
                    reason: "non-finite parameters".into(),
                });
            }
            step += 1;
        }
        info!(
            "{} epoch {}: mean loss {:.4}",
            arch.id(),
            epoch + 1,
            running / per_epoch as f64
        );
    }
    meta.epochs = config.epochs;
    let model = ClassifierHandle::assemble(meta.clone(), layout.clone(), params.clone(), true);
    meta.val_accuracy = Some(accuracy(&model, val)?);
    info!(
        "{} validation accuracy {:.4}",
        arch.id(),
        meta.val_accuracy.unwrap_or(0.0)
    );
    Ok(ClassifierHandle::assemble(meta, layout, params, true))
}
