use super::{AttentionMechanism, ExplanationMaps};
use crate::error::{config_err, input_err, Result};
use crate::model_zoo::{ClassifierHandle, ImageTensor, INFERENCE_CHUNK};
use crate::tensor::Tensor;

/// Anything that maps a batch of normalized images to class-specific maps.
pub trait Explainer: Send + Sync {
    fn id(&self) -> String;

    /// Maps `(N, C, h_E, w_E)` in `[0, 1]` for images `(N, channels, H, W)`.
    fn explain_batch(&self, images: &Tensor) -> Result<Tensor>;

    fn explain(&self, image: &ImageTensor) -> Result<ExplanationMaps> {
        let [c, h, w] = image.shape();
        let maps = self.explain_batch(&image.data().clone().reshape(&[1, c, h, w])?)?;
        ExplanationMaps::new(maps.index_first(0))
    }
}

/// Auxiliary feature extraction followed by a trained attention mechanism;
/// one forward pass per image.
#[derive(Clone, Debug)]
pub struct PtameExplainer {
    aux: ClassifierHandle,
    attention: AttentionMechanism,
    layer_idx: Vec<usize>,
}

impl PtameExplainer {
    pub fn new(aux: ClassifierHandle, attention: AttentionMechanism) -> Result<Self> {
        let names: Vec<&str> = attention.spec().layers.iter().map(String::as_str).collect();
        let layer_idx = aux.feature_indices(&names)?;
        Ok(Self {
            aux,
            attention,
            layer_idx,
        })
    }

    pub fn aux(&self) -> &ClassifierHandle {
        &self.aux
    }

    pub fn attention(&self) -> &AttentionMechanism {
        &self.attention
    }

    pub fn into_attention(self) -> AttentionMechanism {
        self.attention
    }
}

impl Explainer for PtameExplainer {
    fn id(&self) -> String {
        format!(
            "ptame:{}:{}",
            self.aux.arch_id(),
            &self.attention.digest()[..12]
        )
    }

    fn explain_batch(&self, images: &Tensor) -> Result<Tensor> {
        if images.rank() != 4 {
            return Err(input_err!(
                "expected (N, C, H, W) images, got {:?}",
                images.shape()
            ));
        }
        let n = images.shape()[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let chunk = images.slice_first(start, (start + INFERENCE_CHUNK).min(n));
            let feats = self.aux.features_batch(&chunk, &self.layer_idx)?;
            parts.push(self.attention.explain_features(&feats)?);
        }
        let (c, (h, w)) = (
            self.attention.spec().classes,
            self.attention.spec().map_size,
        );
        let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
        if data.len() != n * c * h * w {
            return Err(config_err!("attention produced an unexpected map shape"));
        }
        Tensor::new(&[n, c, h, w], data)
    }
}
