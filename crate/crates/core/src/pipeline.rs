//! End-to-end workflows built from the other modules: data splits, toy
//! model training, attention training, weight search, evaluation of the
//! search objective and the randomization test with per-model retraining.

use std::path::PathBuf;

use log::info;
use serde::{Deserialize, Serialize};

use crate::attention::{
    AttentionMechanism, AttentionMeta, AttentionSpec, Explainer, PtameExplainer,
};
use crate::error::{config_err, input_err, Result};
use crate::evaluation::{deletion_aucs, EvalConfig};
use crate::model_zoo::data::load_cifar_dir;
use crate::model_zoo::synth::shapes10;
use crate::model_zoo::{
    accuracy, train_toy_classifier, Arch, Classifier, ClassifierHandle, Dataset, ImageTensor,
    ModelTrainConfig, Normalization, RawImage,
};
use crate::sanity::{mprt, MprtCurve};
use crate::tensor::Tensor;
use crate::training::{
    hyperparameter_search, train_epoch, LossWeights, SearchResult, SearchSpace, StepRecord,
    TrainConfig,
};

/// Fraction of the training images held out for validation.
pub const VAL_FRACTION: f64 = 0.1;
/// Fraction of an epoch used to retrain attention per randomized backbone.
pub const MPRT_RETRAIN_FRACTION: f64 = 0.1;
/// Probe images in the randomization test.
pub const MPRT_PROBES: usize = 64;

/// Where images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    /// Procedural ten-class shapes, `train` and `test` images from `seed`.
    Shapes10 {
        train: usize,
        test: usize,
        seed: u64,
    },
    /// A directory of CIFAR-10 binary batches.
    Cifar(PathBuf),
}

impl DataSource {
    /// `shapes10` or a directory path.
    pub fn parse(spec: &str, train: usize, test: usize, seed: u64) -> Self {
        if spec == "shapes10" {
            DataSource::Shapes10 { train, test, seed }
        } else {
            DataSource::Cifar(PathBuf::from(spec))
        }
    }
}

/// Undecoded images of a source.
#[derive(Clone, Debug)]
pub struct RawSplits {
    pub train: Vec<RawImage>,
    pub test: Vec<RawImage>,
    pub shape: [usize; 3],
    pub classes: usize,
}

impl RawSplits {
    pub fn load(source: &DataSource) -> Result<Self> {
        let (train, test) = match source {
            DataSource::Shapes10 { train, test, seed } => (
                shapes10(*train, *seed),
                shapes10(*test, seed.wrapping_add(1)),
            ),
            DataSource::Cifar(dir) => load_cifar_dir(dir)?,
        };
        if train.is_empty() || test.is_empty() {
            return Err(input_err!("data source has an empty split"));
        }
        Ok(Self {
            train,
            test,
            shape: [3, 32, 32],
            classes: 10,
        })
    }

    /// Per-channel statistics of the training images.
    pub fn fit_normalization(&self) -> Result<Normalization> {
        Normalization::fit(&self.train, self.shape[0])
    }

    pub fn datasets(&self, normalization: &Normalization) -> Result<Splits> {
        let all = Dataset::from_raw(&self.train, self.shape, self.classes, normalization.clone())?;
        let (train, val) = all.split_tail(VAL_FRACTION);
        let test = Dataset::from_raw(&self.test, self.shape, self.classes, normalization.clone())?;
        Ok(Splits { train, val, test })
    }
}

/// Normalized train, validation and test sets.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Architectures and schedules for the backbone and the auxiliary model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelsConfig {
    pub backbone: Arch,
    pub aux: Arch,
    pub backbone_train: ModelTrainConfig,
    pub aux_train: ModelTrainConfig,
}

impl ModelsConfig {
    pub fn toy(classes: usize, seed: u64) -> Self {
        Self {
            backbone: Arch::toy_vgg(classes),
            aux: Arch::toy_resnet_aux(classes),
            backbone_train: ModelTrainConfig {
                epochs: 4,
                seed,
                ..ModelTrainConfig::default()
            },
            aux_train: ModelTrainConfig {
                epochs: 3,
                seed: seed.wrapping_add(1),
                ..ModelTrainConfig::default()
            },
        }
    }
}

/// Trains both models; returns `(backbone, aux)`, frozen.
pub fn train_models(
    splits: &Splits,
    cfg: &ModelsConfig,
) -> Result<(ClassifierHandle, ClassifierHandle)> {
    let backbone = train_toy_classifier(
        &splits.train,
        &splits.val,
        &cfg.backbone,
        &cfg.backbone_train,
    )?;
    info!(
        "backbone {} validation accuracy {:.3}",
        backbone.arch_id(),
        backbone.meta().val_accuracy.unwrap_or(f64::NAN)
    );
    let aux = train_toy_classifier(&splits.train, &splits.val, &cfg.aux, &cfg.aux_train)?;
    info!(
        "auxiliary {} validation accuracy {:.3}",
        aux.arch_id(),
        aux.meta().val_accuracy.unwrap_or(f64::NAN)
    );
    Ok((backbone, aux))
}

/// Channel-preserving attention over every feature layer of `aux`.
pub fn attention_spec(aux: &ClassifierHandle, classes: usize) -> Result<AttentionSpec> {
    let layers = aux.feature_layers();
    if layers.is_empty() {
        return Err(config_err!(
            "{} has no feature layers to attend to",
            aux.arch_id()
        ));
    }
    let names: Vec<&str> = layers.iter().map(String::as_str).collect();
    let [c, h, w] = aux.meta().input_shape;
    let probe = ImageTensor::new(Tensor::zeros(&[c, h, w]), aux.normalization().clone())?;
    AttentionSpec::for_features(&aux.extract_features(&probe, &names)?, classes)
}

/// A trained explainer and its loss trace.
pub struct TrainedAttention {
    pub explainer: PtameExplainer,
    pub trace: Vec<StepRecord>,
}

impl TrainedAttention {
    pub fn meta(
        &self,
        backbone: &dyn Classifier,
        seed: u64,
        config_digest: Option<String>,
    ) -> AttentionMeta {
        AttentionMeta {
            spec: self.explainer.attention().spec().clone(),
            seed,
            backbone_digest: Some(backbone.weights_digest()),
            aux_digest: Some(self.explainer.aux().weights_digest()),
            config_digest,
        }
    }
}

/// Fresh attention (seeded by `config.seed`) trained against `backbone`.
pub fn train_attention(
    backbone: &dyn Classifier,
    aux: &ClassifierHandle,
    data: &Dataset,
    weights: &LossWeights,
    config: &TrainConfig,
) -> Result<TrainedAttention> {
    let mech = AttentionMechanism::new(attention_spec(aux, backbone.num_classes())?, config.seed)?;
    let out = train_epoch(backbone, aux, mech, data, weights, config)?;
    Ok(TrainedAttention {
        explainer: PtameExplainer::new(aux.clone(), out.attention)?,
        trace: out.trace,
    })
}

/// `LeRF_AUC - MoRF_AUC` of `explainer` on `data`.
pub fn faithfulness_score(
    backbone: &dyn Classifier,
    explainer: &dyn Explainer,
    data: &Dataset,
    eval: &EvalConfig,
) -> Result<f64> {
    let (morf, lerf) = deletion_aucs(backbone, explainer, data, eval)?;
    Ok(lerf - morf)
}

/// Weight search: each trial trains attention on `train` and scores it on `val`.
#[allow(clippy::too_many_arguments)]
pub fn search_weights(
    backbone: &dyn Classifier,
    aux: &ClassifierHandle,
    train: &Dataset,
    val: &Dataset,
    space: &SearchSpace,
    trials: usize,
    config: &TrainConfig,
    eval: &EvalConfig,
) -> Result<SearchResult> {
    hyperparameter_search(space, trials, config.seed, |i, w| {
        let trained = train_attention(backbone, aux, train, w, config)?;
        let score = faithfulness_score(backbone, &trained.explainer, val, eval)?;
        info!("trial {i}: LeRF - MoRF = {score:.4}");
        Ok(score)
    })
}

/// Randomization test where depth 0 uses `trained` and every randomized
/// backbone gets a fresh attention trained for [`MPRT_RETRAIN_FRACTION`] of
/// an epoch on `data` with the same weights and settings.
#[allow(clippy::too_many_arguments)]
pub fn mprt_with_retraining(
    backbone: &ClassifierHandle,
    trained: &PtameExplainer,
    data: &Dataset,
    weights: &LossWeights,
    config: &TrainConfig,
    probes: &Tensor,
    seed: u64,
) -> Result<MprtCurve> {
    let per_epoch = data.len().div_ceil(config.batch_size);
    let steps = ((per_epoch as f64 * MPRT_RETRAIN_FRACTION).ceil() as usize).max(1);
    let short = TrainConfig {
        epochs: 1,
        max_steps: Some(steps),
        ..config.clone()
    };
    mprt(
        backbone,
        |k, model| -> Result<Box<dyn Explainer>> {
            if k == 0 {
                return Ok(Box::new(trained.clone()));
            }
            Ok(Box::new(
                train_attention(model, trained.aux(), data, weights, &short)?.explainer,
            ))
        },
        probes,
        seed,
    )
}

/// Test-set accuracy of a model.
pub fn test_accuracy(model: &dyn Classifier, splits: &Splits) -> Result<f64> {
    accuracy(model, &splits.test)
}
