//! Faithfulness measures: Average Drop and Increase in Confidence at
//! thresholded masks, MoRF/LeRF deletion curves with neighbour infilling,
//! their areas under the curve, and a uniform random-saliency baseline.
//!
//! Explanations for the backbone's class are upscaled to the image size and
//! thresholded at image resolution.

mod road;
pub mod synthetic;

use std::cmp::Ordering;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{resize, Explainer, ExplanationMaps};
use crate::error::{input_err, Error, Result};
use crate::model_zoo::{softmax, Classifier, Dataset, INFERENCE_CHUNK};
use crate::tensor::Tensor;

pub use road::{road_infill, road_infill_seeded};

/// Thresholds `v` (percent kept) for AD and IC.
pub const AD_IC_THRESHOLDS: [f64; 3] = [100.0, 50.0, 15.0];
/// Thresholds `v` (percent removed) for the deletion curves.
pub const DELETION_THRESHOLDS: [f64; 7] = [10.0, 20.0, 30.0, 40.0, 50.0, 70.0, 90.0];
/// Infill noise half-width in normalized pixel units.
pub const DEFAULT_NOISE_SCALE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Highest,
    Lowest,
}

/// Binary selection of `round(v / 100 * R)` pixels of a map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ThresholdMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    percent_bits: u64,
    polarity: Polarity,
}

impl ThresholdMask {
    /// Mask from explicit bits, row-major.
    pub fn from_bits(
        height: usize,
        width: usize,
        bits: Vec<bool>,
        polarity: Polarity,
    ) -> Result<Self> {
        if bits.len() != height * width || bits.is_empty() {
            return Err(input_err!(
                "{} bits for a {height}x{width} mask",
                bits.len()
            ));
        }
        let percent = 100.0 * bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64;
        Ok(Self {
            height,
            width,
            bits,
            percent_bits: percent.to_bits(),
            polarity,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j]
    }

    /// Number of selected pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn percent(&self) -> f64 {
        f64::from_bits(self.percent_bits)
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }

    /// 0/1 array `(height, width)`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.height, self.width], |i| {
            if self.bits[i] {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Pixels selected at `v` percent: the `round(v / 100 * R)` highest (or
/// lowest) values, ties going to the smaller row-major index.
pub fn topk_mask(e_c: &Tensor, v: f64, polarity: Polarity) -> Result<ThresholdMask> {
    if !(v > 0.0 && v <= 100.0) {
        return Err(input_err!("threshold {v} must lie in (0, 100]"));
    }
    let mut m = mask_at(e_c, v, polarity)?;
    m.percent_bits = v.to_bits();
    Ok(m)
}

/// Like [`topk_mask`] but also accepts `v = 0` (nothing selected).
fn mask_at(e_c: &Tensor, v: f64, polarity: Polarity) -> Result<ThresholdMask> {
    if e_c.rank() != 2 || e_c.is_empty() {
        return Err(input_err!(
            "expected a nonempty 2-D map, got {:?}",
            e_c.shape()
        ));
    }
    if !e_c.all_finite() {
        return Err(input_err!("map contains non-finite values"));
    }
    if !(0.0..=100.0).contains(&v) {
        return Err(input_err!("threshold {v} must lie in [0, 100]"));
    }
    let (h, w) = (e_c.shape()[0], e_c.shape()[1]);
    let count = (v / 100.0 * (h * w) as f64).round() as usize;
    let d = e_c.data();
    let mut order: Vec<usize> = (0..d.len()).collect();
    let by_value = |a: &usize, b: &usize| match polarity {
        Polarity::Highest => d[*b].partial_cmp(&d[*a]).unwrap_or(Ordering::Equal),
        Polarity::Lowest => d[*a].partial_cmp(&d[*b]).unwrap_or(Ordering::Equal),
    };
    order.sort_by(|a, b| by_value(a, b).then(a.cmp(b)));
    let mut bits = vec![false; d.len()];
    for &i in &order[..count] {
        bits[i] = true;
    }
    Ok(ThresholdMask {
        height: h,
        width: w,
        bits,
        percent_bits: v.to_bits(),
        polarity,
    })
}

/// Softmax confidence of the backbone's class before and after masking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePair {
    pub original: f64,
    pub masked: f64,
}

impl ConfidencePair {
    pub fn new(original: f64, masked: f64) -> Result<Self> {
        if !((0.0..=1.0).contains(&original) && (0.0..=1.0).contains(&masked)) {
            return Err(input_err!(
                "confidences must lie in [0, 1], got {original}, {masked}"
            ));
        }
        Ok(Self { original, masked })
    }
}

/// Average Drop and Increase in Confidence, both in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdIc {
    pub ad: f64,
    pub ic: f64,
    /// Images averaged over.
    pub counted: usize,
    /// Images skipped because their original confidence was zero.
    pub excluded: usize,
}

/// AD and IC over `pairs`. The normalized drop divides by the original
/// confidence; the unnormalized one does not.
pub fn ad_ic(pairs: &[ConfidencePair], normalized: bool) -> Result<AdIc> {
    if pairs.is_empty() {
        return Err(input_err!("AD/IC of an empty list"));
    }
    let (mut drop, mut inc, mut counted) = (0.0, 0usize, 0usize);
    for p in pairs {
        if p.original == 0.0 {
            continue;
        }
        let d = (p.original - p.masked).max(0.0);
        drop += if normalized { d / p.original } else { d };
        inc += usize::from(p.masked > p.original);
        counted += 1;
    }
    let excluded = pairs.len() - counted;
    if excluded > 0 {
        warn!("{excluded} images with zero original confidence excluded from AD/IC");
    }
    if counted == 0 {
        return Err(Error::Degenerate(
            "every original confidence is zero".into(),
        ));
    }
    Ok(AdIc {
        ad: 100.0 * drop / counted as f64,
        ic: 100.0 * inc as f64 / counted as f64,
        counted,
        excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeletionMode {
    /// Most relevant pixels removed first.
    MoRF,
    /// Least relevant pixels removed first.
    LeRF,
}

impl DeletionMode {
    fn polarity(self) -> Polarity {
        match self {
            DeletionMode::MoRF => Polarity::Highest,
            DeletionMode::LeRF => Polarity::Lowest,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub percent: f64,
    pub accuracy: f64,
}

/// Trapezoidal area under an accuracy curve over `v / 100`, extended flat to
/// both ends of `[0, 1]`.
pub fn auc(points: &[CurvePoint]) -> Result<f64> {
    if points.len() < 2 {
        return Err(input_err!(
            "AUC needs at least 2 points, got {}",
            points.len()
        ));
    }
    if points.windows(2).any(|w| !(w[1].percent > w[0].percent)) {
        return Err(input_err!("curve thresholds must be strictly increasing"));
    }
    if points
        .iter()
        .any(|p| !(0.0..=100.0).contains(&p.percent) || !p.accuracy.is_finite())
    {
        return Err(input_err!(
            "curve points must have thresholds in [0, 100] and finite values"
        ));
    }
    let first = points[0];
    let last = points[points.len() - 1];
    let mut xs = vec![(0.0, first.accuracy)];
    xs.extend(points.iter().map(|p| (p.percent / 100.0, p.accuracy)));
    xs.push((1.0, last.accuracy));
    Ok(xs
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum())
}

/// I.i.d. uniform maps `(C, h, w)` in `[0, 1)`.
pub fn random_baseline(rng: &mut impl Rng, shape: (usize, usize, usize)) -> ExplanationMaps {
    let (c, h, w) = shape;
    ExplanationMaps::new(Tensor::from_fn(&[c, h, w], |_| rng.random::<f64>()))
        .expect("uniform values lie in [0, 1)")
}

/// Seed derived from a byte stream, stable across platforms and releases.
pub(crate) fn content_seed(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub(crate) fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Random saliency: each image gets maps drawn from a generator seeded by
/// its pixel content, so results do not depend on batching.
#[derive(Clone, Debug)]
pub struct RandomExplainer {
    pub classes: usize,
    pub size: (usize, usize),
    pub seed: u64,
}

impl Explainer for RandomExplainer {
    fn id(&self) -> String {
        format!("random:{}", self.seed)
    }

    fn explain_batch(&self, images: &Tensor) -> Result<Tensor> {
        if images.rank() != 4 {
            return Err(input_err!(
                "expected (N, C, H, W) images, got {:?}",
                images.shape()
            ));
        }
        let n = images.shape()[0];
        let (h, w) = self.size;
        let mut data = Vec::with_capacity(n * self.classes * h * w);
        for i in 0..n {
            let seed = content_seed(self.seed, &[&f64_bytes(images.index_first(i).data())]);
            let maps = random_baseline(&mut ChaCha8Rng::seed_from_u64(seed), (self.classes, h, w));
            data.extend_from_slice(maps.data().data());
        }
        Tensor::new(&[n, self.classes, h, w], data)
    }
}

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub noise_scale: f64,
    /// Divide each confidence drop by the original confidence.
    pub normalized_ad: bool,
    /// Mixed into every infill noise seed.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            noise_scale: DEFAULT_NOISE_SCALE,
            normalized_ad: true,
            seed: 0,
        }
    }
}

/// Backbone decisions and upscaled explanations for a dataset.
struct Explained {
    images: Tensor,
    cstar: Vec<usize>,
    confidence: Vec<f64>,
    /// `E_{c*}` at image resolution, one `(H, W)` map per image.
    saliency: Vec<Tensor>,
}

fn explain_dataset(
    backbone: &dyn Classifier,
    explainer: &dyn Explainer,
    data: &Dataset,
) -> Result<Explained> {
    if data.is_empty() {
        return Err(input_err!("evaluation dataset is empty"));
    }
    let images = data.images().clone();
    let (n, _, h, w) = images.dims4();
    let classes = backbone.num_classes();
    let (mut cstar, mut confidence, mut saliency) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for start in (0..n).step_by(INFERENCE_CHUNK) {
        let chunk = images.slice_first(start, (start + INFERENCE_CHUNK).min(n));
        let logits = backbone.logits(&chunk)?;
        let maps = explainer.explain_batch(&chunk)?;
        if maps.rank() != 4 || maps.shape()[0] != chunk.shape()[0] || maps.shape()[1] != classes {
            return Err(input_err!(
                "explainer returned {:?} for {} images and {classes} classes",
                maps.shape(),
                chunk.shape()[0]
            ));
        }
        let (_, _, mh, mw) = maps.dims4();
        if mh > h || mw > w {
            return Err(input_err!(
                "explanations {mh}x{mw} are larger than the images {h}x{w}"
            ));
        }
        for (i, z) in logits.data().chunks(classes).enumerate() {
            let c = crate::model_zoo::argmax(z)?;
            let e = maps.index_first(i).index_first(c).reshaped(&[1, 1, mh, mw]);
            if e.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(input_err!("explanation values must lie in [0, 1]"));
            }
            saliency.push(resize(&e, (h, w)).reshaped(&[h, w]));
            confidence.push(softmax(z)[c]);
            cstar.push(c);
        }
    }
    Ok(Explained {
        images,
        cstar,
        confidence,
        saliency,
    })
}

fn ad_ic_at(backbone: &dyn Classifier, ex: &Explained, v: f64, normalized: bool) -> Result<AdIc> {
    let (n, c, h, w) = ex.images.dims4();
    let plane = h * w;
    let mut masked = ex.images.clone();
    for i in 0..n {
        let keep = topk_mask(&ex.saliency[i], v, Polarity::Highest)?;
        let img = &mut masked.data_mut()[i * c * plane..(i + 1) * c * plane];
        for (j, px) in img.iter_mut().enumerate() {
            if !keep.bits[j % plane] {
                *px = 0.0;
            }
        }
    }
    let logits = backbone.logits(&masked)?;
    let k = backbone.num_classes();
    let pairs = logits
        .data()
        .chunks(k)
        .enumerate()
        .map(|(i, z)| ConfidencePair::new(ex.confidence[i], softmax(z)[ex.cstar[i]]))
        .collect::<Result<Vec<_>>>()?;
    ad_ic(&pairs, normalized)
}

fn curve_at(
    backbone: &dyn Classifier,
    ex: &Explained,
    mode: DeletionMode,
    thresholds: &[f64],
    cfg: &EvalConfig,
) -> Result<Vec<CurvePoint>> {
    let (n, c, h, w) = ex.images.dims4();
    let size = c * h * w;
    let mut out = Vec::with_capacity(thresholds.len());
    for &v in thresholds {
        let mut infilled = ex.images.clone();
        for i in 0..n {
            let removal = mask_at(&ex.saliency[i], v, mode.polarity())?;
            let img = &mut infilled.data_mut()[i * size..(i + 1) * size];
            let filled =
                road::infill_or_blank(img, (c, h, w), removal.bits(), cfg.noise_scale, cfg.seed)?;
            img.copy_from_slice(&filled);
        }
        let pred = backbone.predict(&infilled)?;
        let kept = pred.iter().zip(&ex.cstar).filter(|(p, c)| p == c).count();
        out.push(CurvePoint {
            percent: v,
            accuracy: kept as f64 / n as f64,
        });
    }
    Ok(out)
}

/// AD and IC when each image keeps only its top `v` percent pixels.
pub fn evaluate_ad_ic(
    backbone: &dyn Classifier,
    explainer: &dyn Explainer,
    data: &Dataset,
    v: f64,
    cfg: &EvalConfig,
) -> Result<AdIc> {
    let ex = explain_dataset(backbone, explainer, data)?;
    ad_ic_at(backbone, &ex, v, cfg.normalized_ad)
}

/// Accuracy against the original decisions after removing and infilling
/// pixels at each of [`DELETION_THRESHOLDS`].
pub fn deletion_curve(
    backbone: &dyn Classifier,
    explainer: &dyn Explainer,
    data: &Dataset,
    mode: DeletionMode,
    cfg: &EvalConfig,
) -> Result<Vec<CurvePoint>> {
    deletion_curve_at(backbone, explainer, data, mode, &DELETION_THRESHOLDS, cfg)
}

/// [`deletion_curve`] at arbitrary thresholds in `[0, 100]`. At 100 every
/// pixel is replaced by noise around zero, identically for both modes.
pub fn deletion_curve_at(
    backbone: &dyn Classifier,
    explainer: &dyn Explainer,
    data: &Dataset,
    mode: DeletionMode,
    thresholds: &[f64],
    cfg: &EvalConfig,
) -> Result<Vec<CurvePoint>> {
    let ex = explain_dataset(backbone, explainer, data)?;
    curve_at(backbone, &ex, mode, thresholds, cfg)
}

/// `(MoRF_AUC, LeRF_AUC)` over [`DELETION_THRESHOLDS`].
pub fn deletion_aucs(
    backbone: &dyn Classifier,
    explainer: &dyn Explainer,
    data: &Dataset,
    cfg: &EvalConfig,
) -> Result<(f64, f64)> {
    let ex = explain_dataset(backbone, explainer, data)?;
    let morf = auc(&curve_at(
        backbone,
        &ex,
        DeletionMode::MoRF,
        &DELETION_THRESHOLDS,
        cfg,
    )?)?;
    let lerf = auc(&curve_at(
        backbone,
        &ex,
        DeletionMode::LeRF,
        &DELETION_THRESHOLDS,
        cfg,
    )?)?;
    Ok((morf, lerf))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub percent: f64,
    pub ad: f64,
    pub ic: f64,
    pub excluded: usize,
}

/// All faithfulness measures for one explainer on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub explainer: String,
    pub images: usize,
    pub seed: u64,
    pub noise_scale: f64,
    pub normalized_ad: bool,
    pub ad_ic: Vec<ThresholdScore>,
    pub morf: Vec<CurvePoint>,
    pub lerf: Vec<CurvePoint>,
    pub morf_auc: f64,
    pub lerf_auc: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Header and one row: explainer, AD and IC per threshold, both AUCs.
    pub fn to_csv(&self) -> String {
        let mut head = vec!["explainer".to_string(), "images".to_string()];
        let mut row = vec![self.explainer.clone(), self.images.to_string()];
        for s in &self.ad_ic {
            head.push(format!("ad{}", s.percent));
            head.push(format!("ic{}", s.percent));
            row.push(s.ad.to_string());
            row.push(s.ic.to_string());
        }
        head.extend([
            "morf_auc".to_string(),
            "lerf_auc".to_string(),
            "seed".to_string(),
        ]);
        row.extend([
            self.morf_auc.to_string(),
            self.lerf_auc.to_string(),
            self.seed.to_string(),
        ]);
        format!("{}\n{}\n", head.join(","), row.join(","))
    }

    pub fn ad_at(&self, percent: f64) -> Option<f64> {
        self.ad_ic
            .iter()
            .find(|s| s.percent == percent)
            .map(|s| s.ad)
    }

    pub fn ic_at(&self, percent: f64) -> Option<f64> {
        self.ad_ic
            .iter()
            .find(|s| s.percent == percent)
            .map(|s| s.ic)
    }
}

/// AD/IC at [`AD_IC_THRESHOLDS`] and both deletion curves with their AUCs.
pub fn evaluate(
    backbone: &dyn Classifier,
    explainer: &dyn Explainer,
    data: &Dataset,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if !(cfg.noise_scale >= 0.0 && cfg.noise_scale.is_finite()) {
        return Err(input_err!("noise scale must be finite and non-negative"));
    }
    let ex = explain_dataset(backbone, explainer, data)?;
    let ad_ic = AD_IC_THRESHOLDS
        .iter()
        .map(|&v| {
            ad_ic_at(backbone, &ex, v, cfg.normalized_ad).map(|r| ThresholdScore {
                percent: v,
                ad: r.ad,
                ic: r.ic,
                excluded: r.excluded,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let morf = curve_at(backbone, &ex, DeletionMode::MoRF, &DELETION_THRESHOLDS, cfg)?;
    let lerf = curve_at(backbone, &ex, DeletionMode::LeRF, &DELETION_THRESHOLDS, cfg)?;
    Ok(EvalReport {
        explainer: explainer.id(),
        images: data.len(),
        seed: cfg.seed,
        noise_scale: cfg.noise_scale,
        normalized_ad: cfg.normalized_ad,
        morf_auc: auc(&morf)?,
        lerf_auc: auc(&lerf)?,
        ad_ic,
        morf,
        lerf,
    })
}

#[cfg(test)]
mod tests;
