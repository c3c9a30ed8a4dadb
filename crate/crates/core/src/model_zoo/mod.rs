//! Frozen classifiers: the backbone being explained and the auxiliary feature
//! extractor, with toy-model training, checkpoints and layer-wise randomization.

pub mod arch;
pub mod checkpoint;
pub mod data;
mod handle;
pub mod synth;
mod train;

use crate::autograd::{Graph, Var};
use crate::error::{input_err, Result};
use crate::tensor::Tensor;

pub use arch::Arch;
pub use data::{Dataset, Normalization, RawImage};
pub use handle::{ClassifierHandle, ModelMeta};
pub use train::{train_toy_classifier, ModelTrainConfig};

/// Images per forward pass when classifying large batches.
pub const INFERENCE_CHUNK: usize = 64;

/// A normalized network input `(channels, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor,
    normalization: Normalization,
}

impl ImageTensor {
    pub fn new(data: Tensor, normalization: Normalization) -> Result<Self> {
        if data.rank() != 3 {
            return Err(input_err!(
                "image must be (C, H, W), got {:?}",
                data.shape()
            ));
        }
        let (c, h, w) = data.dims3();
        if c != 1 && c != 3 {
            return Err(input_err!("image must have 1 or 3 channels, got {c}"));
        }
        if h < 8 || w < 8 {
            return Err(input_err!("image must be at least 8x8, got {h}x{w}"));
        }
        if !data.all_finite() {
            return Err(input_err!("image contains non-finite values"));
        }
        if normalization.channels() != c {
            return Err(input_err!(
                "normalization has {} channels, image {c}",
                normalization.channels()
            ));
        }
        Ok(Self {
            data,
            normalization,
        })
    }

    pub(crate) fn from_parts(data: Tensor, normalization: Normalization) -> Self {
        Self {
            data,
            normalization,
        }
    }

    /// Normalizes an 8-bit planar image.
    pub fn from_u8(pixels: &[u8], shape: [usize; 3], normalization: Normalization) -> Result<Self> {
        let [c, h, w] = shape;
        if pixels.len() != c * h * w {
            return Err(input_err!("{} pixels for shape {:?}", pixels.len(), shape));
        }
        let plane = h * w;
        let data = Tensor::from_fn(&[c, h, w], |i| {
            normalization.normalize(i / plane, pixels[i] as f64 / 255.0)
        });
        Self::new(data, normalization)
    }

    /// Undo normalization and quantize back to 8-bit planar pixels.
    pub fn to_u8(&self) -> Vec<u8> {
        let (_, h, w) = self.data.dims3();
        let plane = h * w;
        self.data
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                (self.normalization.denormalize(i / plane, v) * 255.0)
                    .round()
                    .clamp(0.0, 255.0) as u8
            })
            .collect()
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn shape(&self) -> [usize; 3] {
        let (c, h, w) = self.data.dims3();
        [c, h, w]
    }

    /// Same normalization record, new pixel values.
    pub fn with_data(&self, data: Tensor) -> Result<Self> {
        Self::new(data, self.normalization.clone())
    }
}

/// Class logits `y = f(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitVector(pub Vec<f64>);

impl LogitVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Softmax probabilities.
    pub fn softmax(&self) -> Vec<f64> {
        softmax(&self.0)
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest logit, smallest index on ties.
pub fn model_truth(logits: &LogitVector) -> Result<usize> {
    argmax(logits.values())
}

pub(crate) fn argmax(z: &[f64]) -> Result<usize> {
    if z.is_empty() {
        return Err(input_err!("empty logits"));
    }
    if z.iter().any(|v| v.is_nan()) {
        return Err(input_err!("logits contain NaN"));
    }
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Per-layer feature maps, shallowest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapSet {
    pub layers: Vec<String>,
    /// `(d_l, h_l, w_l)` per layer.
    pub maps: Vec<Tensor>,
}

impl FeatureMapSet {
    pub fn new(layers: Vec<String>, maps: Vec<Tensor>) -> Result<Self> {
        if layers.is_empty() || layers.len() != maps.len() {
            return Err(input_err!("need one map per layer and at least one layer"));
        }
        if maps.iter().any(|m| m.rank() != 3 || !m.all_finite()) {
            return Err(input_err!("feature maps must be finite rank-3 arrays"));
        }
        Ok(Self { layers, maps })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// A frozen image classifier usable as a backbone.
///
/// Implementations must be pure functions of their parameters and input.
pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;

    /// `(C, H, W)` expected by [`Classifier::forward`].
    fn input_shape(&self) -> [usize; 3];

    /// Inference-mode logits `(N, classes)` for a batch `(N, C, H, W)` on `g`.
    /// Parameters are constants; gradients flow only to the input.
    fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>>;

    /// Content hash of everything that determines the outputs.
    fn weights_digest(&self) -> String;

    /// Logits for a batch, evaluated in chunks without recording gradients.
    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        check_batch(batch, self.input_shape())?;
        let n = batch.shape()[0];
        let mut out = Vec::with_capacity(n * self.num_classes());
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(n);
            let g = Graph::inference();
            let y = self.forward(&g, g.constant(batch.slice_first(start, end)))?;
            out.extend_from_slice(y.value().data());
        }
        Tensor::new(&[n, self.num_classes()], out)
    }

    /// Model-truth class per image of a batch.
    fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        let c = self.num_classes();
        logits.data().chunks(c).map(argmax).collect()
    }
}

pub(crate) fn check_batch(batch: &Tensor, shape: [usize; 3]) -> Result<()> {
    if batch.rank() != 4 || batch.shape()[1..] != shape {
        return Err(input_err!(
            "batch shape {:?} does not match model input {:?}",
            batch.shape(),
            shape
        ));
    }
    Ok(())
}

/// Fraction of images whose prediction equals their label.
pub fn accuracy(model: &dyn Classifier, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(input_err!("accuracy of an empty dataset"));
    }
    let pred = model.predict(data.images())?;
    Ok(pred
        .iter()
        .zip(data.labels())
        .filter(|(p, l)| p == l)
        .count() as f64
        / data.len() as f64)
}

pub fn classify(model: &ClassifierHandle, image: &ImageTensor) -> Result<LogitVector> {
    model.classify(image)
}

pub fn extract_features(
    aux: &ClassifierHandle,
    image: &ImageTensor,
    layers: &[&str],
) -> Result<FeatureMapSet> {
    aux.extract_features(image, layers)
}

pub fn randomize_parameters_up_to(
    model: &ClassifierHandle,
    layer_index: usize,
    seed: u64,
) -> Result<ClassifierHandle> {
    model.randomize_parameters_up_to(layer_index, seed)
}

pub fn save_checkpoint(model: &ClassifierHandle) -> Vec<u8> {
    model.save_checkpoint()
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<ClassifierHandle> {
    ClassifierHandle::load_checkpoint(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_truth_breaks_ties_low() {
        assert_eq!(model_truth(&LogitVector(vec![0.1, 2.0, -1.0])).unwrap(), 1);
        assert_eq!(model_truth(&LogitVector(vec![0.5; 4])).unwrap(), 0);
        assert_eq!(model_truth(&LogitVector(vec![3.0, 3.0, 1.0])).unwrap(), 0);
        assert!(model_truth(&LogitVector(vec![1.0, f64::NAN])).is_err());
        assert!(model_truth(&LogitVector(vec![])).is_err());
    }

    #[test]
    fn image_invariants() {
        let norm = Normalization::identity(3);
        assert!(ImageTensor::new(Tensor::zeros(&[3, 8, 8]), norm.clone()).is_ok());
        assert!(ImageTensor::new(Tensor::zeros(&[2, 8, 8]), Normalization::identity(2)).is_err());
        assert!(ImageTensor::new(Tensor::zeros(&[3, 7, 8]), norm.clone()).is_err());
        assert!(ImageTensor::new(Tensor::full(&[3, 8, 8], f64::INFINITY), norm).is_err());
    }

    #[test]
    fn u8_round_trip() {
        let norm = Normalization {
            mean: vec![0.4],
            std: vec![0.2],
        };
        let px: Vec<u8> = (0..64).map(|i| (i * 4) as u8).collect();
        let img = ImageTensor::from_u8(&px, [1, 8, 8], norm).unwrap();
        assert_eq!(img.to_u8(), px);
    }
}
