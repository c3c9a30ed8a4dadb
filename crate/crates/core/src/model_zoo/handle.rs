use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{Arch, Layout};
use super::checkpoint;
use super::{check_batch, Classifier, FeatureMapSet, ImageTensor, LogitVector, Normalization};
use crate::autograd::{Graph, Var};
use crate::error::{config_err, format_err, input_err, Result};
use crate::nn::{Bound, ParamSet};
use crate::tensor::Tensor;

/// Metadata stored alongside classifier weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub arch: Arch,
    /// `(C, H, W)` accepted by the model.
    pub input_shape: [usize; 3],
    pub normalization: Normalization,
    pub val_accuracy: Option<f64>,
    pub seed: u64,
    pub epochs: usize,
    /// Layers re-drawn by [`ClassifierHandle::randomize_parameters_up_to`], with its seed.
    pub randomized: Option<(usize, u64)>,
}

/// An immutable classifier: architecture, weights and their content digest.
#[derive(Clone, Debug)]
pub struct ClassifierHandle {
    meta: ModelMeta,
    layout: Layout,
    params: ParamSet,
    digest: String,
    frozen: bool,
}

impl ClassifierHandle {
    /// Freshly initialized, unfrozen weights.
    pub fn init(
        arch: Arch,
        input_shape: [usize; 3],
        normalization: Normalization,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        if input_shape[0] != arch.in_channels() {
            return Err(config_err!(
                "{} expects {} channels, input has {}",
                arch.id(),
                arch.in_channels(),
                input_shape[0]
            ));
        }
        if let Some(hw) = arch.fixed_input() {
            if hw != (input_shape[1], input_shape[2]) {
                return Err(config_err!(
                    "{} expects {:?} inputs, got {:?}",
                    arch.id(),
                    hw,
                    input_shape
                ));
            }
        }
        let (layout, params) = arch.init(&mut ChaCha8Rng::seed_from_u64(seed));
        let meta = ModelMeta {
            arch,
            input_shape,
            normalization,
            val_accuracy: None,
            seed,
            epochs: 0,
            randomized: None,
        };
        Ok(Self::assemble(meta, layout, params, false))
    }

    pub(crate) fn assemble(
        meta: ModelMeta,
        layout: Layout,
        params: ParamSet,
        frozen: bool,
    ) -> Self {
        let digest = params.digest(&meta.arch.id());
        Self {
            meta,
            layout,
            params,
            digest,
            frozen,
        }
    }

    pub(crate) fn into_parts(self) -> (ModelMeta, Layout, ParamSet) {
        (self.meta, self.layout, self.params)
    }

    pub fn arch(&self) -> &Arch {
        &self.meta.arch
    }

    pub fn arch_id(&self) -> String {
        self.meta.arch.id()
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn normalization(&self) -> &Normalization {
        &self.meta.normalization
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the handle as a frozen model.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Content hash recorded when the handle was built.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Content hash recomputed from the current weights.
    pub fn recompute_digest(&self) -> String {
        self.params.digest(&self.meta.arch.id())
    }

    /// Parameterized layers in input-to-output order.
    pub fn param_layers(&self) -> &[String] {
        &self.params.layers
    }

    pub fn feature_layers(&self) -> Vec<String> {
        self.meta.arch.feature_layers()
    }

    pub fn classify(&self, image: &ImageTensor) -> Result<LogitVector> {
        let batch = image.data().clone().reshaped(&with_batch(image.shape()));
        Ok(LogitVector(self.logits(&batch)?.into_data()))
    }

    /// Indices of the named feature layers, validated.
    pub fn feature_indices(&self, layers: &[&str]) -> Result<Vec<usize>> {
        let known = self.feature_layers();
        if known.is_empty() {
            return Err(config_err!(
                "{} exposes no intermediate feature layers",
                self.arch_id()
            ));
        }
        layers
            .iter()
            .map(|l| {
                known
                    .iter()
                    .position(|k| k == l)
                    .ok_or_else(|| config_err!("unknown layer {l:?}; have {known:?}"))
            })
            .collect()
    }

    pub fn extract_features(&self, image: &ImageTensor, layers: &[&str]) -> Result<FeatureMapSet> {
        let idx = self.feature_indices(layers)?;
        let batch = image.data().clone().reshaped(&with_batch(image.shape()));
        let maps = self.features_batch(&batch, &idx)?;
        let maps = maps.into_iter().map(|m| m.index_first(0)).collect();
        FeatureMapSet::new(layers.iter().map(|s| s.to_string()).collect(), maps)
    }

    /// Feature maps `(N, d_l, h_l, w_l)` for feature layer indices `idx`.
    pub fn features_batch(&self, batch: &Tensor, idx: &[usize]) -> Result<Vec<Tensor>> {
        check_batch(batch, self.meta.input_shape)?;
        let known = self.feature_layers().len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= known) {
            return Err(config_err!(
                "feature layer index {bad} out of range ({known} layers)"
            ));
        }
        let deepest = idx.iter().copied().max().map_or(0, |m| m + 1);
        let g = Graph::inference();
        let b = Bound::new(&g, &self.params, false, false);
        let out = self
            .layout
            .forward(&b, g.constant(batch.clone()), Some(deepest));
        Ok(idx
            .iter()
            .map(|&i| out.features[i].value().as_ref().clone())
            .collect())
    }

    /// Copy whose parameters in layers `[0, layer_index)` are re-drawn from
    /// their initializers.
    pub fn randomize_parameters_up_to(&self, layer_index: usize, seed: u64) -> Result<Self> {
        let n = self.params.num_layers();
        if layer_index > n {
            return Err(input_err!(
                "layer index {layer_index} exceeds {n} parameterized layers"
            ));
        }
        if layer_index == 0 {
            return Ok(self.clone());
        }
        let mut params = self.params.clone();
        params.reinit_layers(layer_index, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut meta = self.meta.clone();
        meta.randomized = Some((layer_index, seed));
        meta.val_accuracy = None;
        Ok(Self::assemble(
            meta,
            self.layout.clone(),
            params,
            self.frozen,
        ))
    }

    pub fn save_checkpoint(&self) -> Vec<u8> {
        let meta = SavedMeta {
            meta: self.meta.clone(),
            frozen: self.frozen,
        };
        checkpoint::encode(KIND, &meta, &self.params, &self.digest)
    }

    pub fn load_checkpoint(bytes: &[u8]) -> Result<Self> {
        let d = checkpoint::decode::<SavedMeta>(bytes, KIND, |m| {
            m.meta.arch.validate()?;
            Ok(m.meta.arch.layout().1)
        })?;
        let (layout, _) = d.meta.meta.arch.layout();
        let handle = Self::assemble(d.meta.meta, layout, d.params, d.meta.frozen);
        if handle.digest != d.digest {
            return Err(format_err!("checkpoint digest mismatch"));
        }
        Ok(handle)
    }
}

const KIND: &str = "classifier";

#[derive(Serialize, Deserialize)]
struct SavedMeta {
    meta: ModelMeta,
    frozen: bool,
}

fn with_batch(s: [usize; 3]) -> [usize; 4] {
    [1, s[0], s[1], s[2]]
}

impl Classifier for ClassifierHandle {
    fn num_classes(&self) -> usize {
        self.meta.arch.classes()
    }

    fn input_shape(&self) -> [usize; 3] {
        self.meta.input_shape
    }

    fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        check_batch(&x.value(), self.meta.input_shape)?;
        let b = Bound::new(g, &self.params, false, false);
        Ok(self
            .layout
            .forward(&b, x, None)
            .logits
            .expect("full forward yields logits"))
    }

    fn weights_digest(&self) -> String {
        self.recompute_digest()
    }
}
