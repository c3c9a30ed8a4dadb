//! The trainable attention mechanism: one feature branch per auxiliary layer
//! and a fusion module emitting one sigmoid map per class.
//!
//! Each branch computes `relu(BN(conv1x1(F)) + skip(F))` and upsamples the
//! result bilinearly to the largest feature resolution. The skip is the
//! identity when the branch preserves channels, otherwise the channel mean
//! replicated to the branch width. The fusion module concatenates branch
//! outputs, applies a 1x1 convolution to `C` channels and a sigmoid.

mod explainer;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Graph, Var};
use crate::error::{config_err, format_err, input_err, Error, Result};
use crate::model_zoo::{checkpoint, FeatureMapSet};
use crate::nn::{BnRef, Bound, ConvRef, Init, ParamBuilder, ParamSet};
use crate::tensor::Tensor;

pub use explainer::{Explainer, PtameExplainer};

/// Class-specific explanation maps `(C, h_E, w_E)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationMaps {
    data: Tensor,
}

impl ExplanationMaps {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(input_err!(
                "explanation maps must be (C, H, W), got {:?}",
                data.shape()
            ));
        }
        if data.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(input_err!("explanation values must lie in [0, 1]"));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn classes(&self) -> usize {
        self.data.shape()[0]
    }

    /// `(h_E, w_E)`.
    pub fn size(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }

    /// Pixel count `R = h_E * w_E`.
    pub fn resolution(&self) -> usize {
        self.data.shape()[1] * self.data.shape()[2]
    }
}

/// Copy of the `c`-th map as an `(h_E, w_E)` array.
pub fn select_class_map(e: &ExplanationMaps, c: usize) -> Result<Tensor> {
    if c >= e.classes() {
        return Err(input_err!(
            "class {c} out of range for {} maps",
            e.classes()
        ));
    }
    let (h, w) = e.size();
    Ok(e.data.index_first(c).reshaped(&[h, w]))
}

/// Bilinear upscaling of `(C, h, w)` with half-pixel centers.
pub fn bilinear_upscale(map: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    if map.rank() != 3 {
        return Err(input_err!("expected (C, H, W), got {:?}", map.shape()));
    }
    let (c, h, w) = map.dims3();
    if target.0 < h || target.1 < w {
        return Err(input_err!(
            "cannot upscale {h}x{w} to smaller {}x{}",
            target.0,
            target.1
        ));
    }
    Ok(resize(&map.clone().reshaped(&[1, c, h, w]), target).reshaped(&[c, target.0, target.1]))
}

/// Bilinear resize of an `(N, C, h, w)` tensor outside any training graph.
pub(crate) fn resize(x: &Tensor, target: (usize, usize)) -> Tensor {
    let (_, _, h, w) = x.dims4();
    if (h, w) == target {
        return x.clone();
    }
    let g = Graph::inference();
    autograd::resize_bilinear(g.constant(x.clone()), target.0, target.1)
        .value()
        .as_ref()
        .clone()
}

/// Shape of an attention mechanism.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    /// Auxiliary feature layers, shallowest first.
    pub layers: Vec<String>,
    /// `d_l` per layer.
    pub in_channels: Vec<usize>,
    /// `d_branch` per layer.
    pub branch_channels: Vec<usize>,
    pub classes: usize,
    /// `(h_E, w_E)`.
    pub map_size: (usize, usize),
}

impl AttentionSpec {
    /// Channel-preserving branches sized from example feature maps; the map
    /// size is the largest feature resolution.
    pub fn for_features(features: &FeatureMapSet, classes: usize) -> Result<Self> {
        let in_channels: Vec<usize> = features.maps.iter().map(|m| m.shape()[0]).collect();
        Ok(Self {
            layers: features.layers.clone(),
            branch_channels: in_channels.clone(),
            in_channels,
            classes,
            map_size: largest_size(features.maps.iter().map(|m| (m.shape()[1], m.shape()[2])))?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.layers.len();
        if s == 0 || self.in_channels.len() != s || self.branch_channels.len() != s {
            return Err(config_err!("attention needs one channel count per layer"));
        }
        if self.classes == 0 || self.in_channels.contains(&0) || self.branch_channels.contains(&0) {
            return Err(config_err!("channel and class counts must be positive"));
        }
        if self.map_size.0 < 2 || self.map_size.1 < 2 {
            return Err(config_err!("explanation maps must be at least 2x2"));
        }
        Ok(())
    }

    fn builder(&self) -> (ParamBuilder, Vec<BranchRefs>, ConvRef) {
        let mut b = ParamBuilder::new();
        let branches = (0..self.layers.len())
            .map(|i| {
                let (din, dout) = (self.in_channels[i], self.branch_channels[i]);
                BranchRefs {
                    conv: b.conv(&format!("branch{}.conv", i + 1), din, dout, 1, true),
                    bn: b.batch_norm(&format!("branch{}.bn", i + 1), dout),
                    in_channels: din,
                    out_channels: dout,
                }
            })
            .collect();
        let total: usize = self.branch_channels.iter().sum();
        let fusion = b.conv_with_init("fusion", total, self.classes, 1, true, Init::fan_in(total));
        (b, branches, fusion)
    }
}

fn largest_size(sizes: impl Iterator<Item = (usize, usize)>) -> Result<(usize, usize)> {
    sizes
        .max_by_key(|&(h, w)| (h * w, h))
        .ok_or_else(|| config_err!("no feature maps"))
}

#[derive(Clone, Copy, Debug)]
struct BranchRefs {
    conv: ConvRef,
    bn: BnRef,
    in_channels: usize,
    out_channels: usize,
}

/// Branch forward on a graph: `(N, d_l, h, w)` to `(N, d_branch, h_E, w_E)`.
fn branch_forward<'g>(
    b: &Bound<'g>,
    r: &BranchRefs,
    f: Var<'g>,
    target: (usize, usize),
) -> Var<'g> {
    let u = b.batch_norm(r.bn, b.conv(r.conv, f, 1, 0));
    let skip = if r.in_channels == r.out_channels {
        f
    } else {
        let avg = Tensor::full(
            &[r.out_channels, r.in_channels, 1, 1],
            1.0 / r.in_channels as f64,
        );
        autograd::conv2d(f, b.graph.constant(avg), None, 1, 0)
    };
    let v = u.add(skip).relu();
    let s = v.shape();
    if (s[2], s[3]) == target {
        v
    } else {
        autograd::resize_bilinear(v, target.0, target.1)
    }
}

fn fusion_forward<'g>(b: &Bound<'g>, r: ConvRef, parts: &[Var<'g>]) -> Var<'g> {
    b.conv(r, autograd::concat_channels(parts), 1, 0).sigmoid()
}

/// Parameters of one feature branch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBranchParams {
    /// `(d_branch, d_l, 1, 1)`.
    pub kernel: Tensor,
    pub bias: Tensor,
    pub bn_scale: Tensor,
    pub bn_shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// `(h_E, w_E)`.
    pub target: (usize, usize),
}

impl FeatureBranchParams {
    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        let s = self.kernel.shape();
        if s.len() != 4 || s[2] != 1 || s[3] != 1 {
            return Err(config_err!(
                "branch kernel must be (d_branch, d_l, 1, 1), got {:?}",
                s
            ));
        }
        let d = s[0];
        for t in [
            &self.bias,
            &self.bn_scale,
            &self.bn_shift,
            &self.running_mean,
            &self.running_var,
        ] {
            if t.shape() != [d] {
                return Err(config_err!("branch vectors must have length {d}"));
            }
        }
        if !self.running_mean.all_finite() || !self.running_var.all_finite() {
            return Err(config_err!("running statistics must be finite"));
        }
        Ok(())
    }
}

/// Parameters of the fusion convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    /// `(C, sum d_branch, 1, 1)`.
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl FusionParams {
    fn validate(&self) -> Result<()> {
        let s = self.kernel.shape();
        if s.len() != 4 || s[2] != 1 || s[3] != 1 || self.bias.shape() != [s[0]] {
            return Err(config_err!(
                "fusion kernel must be (C, channels, 1, 1) with C biases"
            ));
        }
        Ok(())
    }
}

fn single_branch_set(p: &FeatureBranchParams) -> Result<(ParamSet, BranchRefs)> {
    let mut b = ParamBuilder::new();
    let r = BranchRefs {
        conv: b.conv("branch.conv", p.in_channels(), p.out_channels(), 1, true),
        bn: b.batch_norm("branch.bn", p.out_channels()),
        in_channels: p.in_channels(),
        out_channels: p.out_channels(),
    };
    let set = b.with_values(vec![
        p.kernel.clone(),
        p.bias.clone(),
        p.bn_scale.clone(),
        p.bn_shift.clone(),
        p.running_mean.clone(),
        p.running_var.clone(),
    ])?;
    Ok((set, r))
}

/// One branch applied to a single `(d_l, h, w)` map. With `training`,
/// batch normalization uses the statistics of this map.
pub fn feature_branch_forward(
    f: &Tensor,
    params: &FeatureBranchParams,
    training: bool,
) -> Result<Tensor> {
    params.validate()?;
    if f.rank() != 3 || f.shape()[0] != params.in_channels() {
        return Err(config_err!(
            "feature map {:?} does not match {} input channels",
            f.shape(),
            params.in_channels()
        ));
    }
    let (d, h, w) = f.dims3();
    if params.target.0 < h || params.target.1 < w {
        return Err(input_err!(
            "branch target {:?} is smaller than its input {h}x{w}",
            params.target
        ));
    }
    let (set, r) = single_branch_set(params)?;
    let g = Graph::inference();
    let b = Bound::new(&g, &set, false, training);
    let out = branch_forward(
        &b,
        &r,
        g.constant(f.clone().reshaped(&[1, d, h, w])),
        params.target,
    );
    Ok(out.value().index_first(0))
}

/// Concatenates processed maps in order, applies the fusion convolution and a sigmoid.
pub fn fuse(processed: &[Tensor], params: &FusionParams) -> Result<ExplanationMaps> {
    params.validate()?;
    let first = processed
        .first()
        .ok_or_else(|| config_err!("nothing to fuse"))?;
    if first.rank() != 3 {
        return Err(config_err!("processed maps must be (d, h, w)"));
    }
    let (_, h, w) = first.dims3();
    if processed
        .iter()
        .any(|p| p.rank() != 3 || p.shape()[1..] != [h, w])
    {
        return Err(config_err!(
            "processed maps must share spatial size {h}x{w}"
        ));
    }
    let total: usize = processed.iter().map(|p| p.shape()[0]).sum();
    if total != params.kernel.shape()[1] {
        return Err(config_err!(
            "fusion expects {} channels, got {total}",
            params.kernel.shape()[1]
        ));
    }
    let mut b = ParamBuilder::new();
    let r = b.conv("fusion", total, params.kernel.shape()[0], 1, true);
    let set = b.with_values(vec![params.kernel.clone(), params.bias.clone()])?;
    let g = Graph::inference();
    let bound = Bound::new(&g, &set, false, false);
    let parts: Vec<Var<'_>> = processed
        .iter()
        .map(|p| g.constant(p.clone().reshaped(&[1, p.shape()[0], h, w])))
        .collect();
    ExplanationMaps::new(fusion_forward(&bound, r, &parts).value().index_first(0))
}

/// `E = fuse([branch_l(F_l)])` at the largest feature resolution.
pub fn attention_forward(
    features: &FeatureMapSet,
    branches: &[FeatureBranchParams],
    fusion: &FusionParams,
    training: bool,
) -> Result<ExplanationMaps> {
    if branches.len() != features.len() {
        return Err(config_err!(
            "{} branches for {} feature layers",
            branches.len(),
            features.len()
        ));
    }
    let target = largest_size(features.maps.iter().map(|m| (m.shape()[1], m.shape()[2])))?;
    let processed = features
        .maps
        .iter()
        .zip(branches)
        .map(|(f, p)| {
            if p.target != target {
                return Err(config_err!(
                    "branch target {:?} differs from largest resolution {:?}",
                    p.target,
                    target
                ));
            }
            feature_branch_forward(f, p, training)
        })
        .collect::<Result<Vec<_>>>()?;
    fuse(&processed, fusion)
}

/// Share of total absolute fusion-kernel mass attributable to each branch, in percent.
pub fn branch_contributions(fusion: &FusionParams, branch_channels: &[usize]) -> Result<Vec<f64>> {
    fusion.validate()?;
    let (c, total) = (fusion.kernel.shape()[0], fusion.kernel.shape()[1]);
    if branch_channels.iter().sum::<usize>() != total {
        return Err(input_err!(
            "branch widths {:?} do not add up to {total} fusion inputs",
            branch_channels
        ));
    }
    let mut mass = vec![0.0; branch_channels.len()];
    let k = fusion.kernel.data();
    let mut start = 0;
    for (b, &width) in branch_channels.iter().enumerate() {
        for o in 0..c {
            mass[b] += k[o * total + start..o * total + start + width]
                .iter()
                .map(|v| v.abs())
                .sum::<f64>();
        }
        start += width;
    }
    let sum: f64 = mass.iter().sum();
    if sum == 0.0 || !sum.is_finite() {
        return Err(Error::Degenerate("fusion kernel has no weight mass".into()));
    }
    Ok(mass.into_iter().map(|m| m / sum * 100.0).collect())
}

/// A complete attention mechanism with its trainable state.
#[derive(Clone, Debug)]
pub struct AttentionMechanism {
    spec: AttentionSpec,
    params: ParamSet,
    branches: Vec<BranchRefs>,
    fusion: ConvRef,
}

/// Metadata stored in attention checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMeta {
    pub spec: AttentionSpec,
    pub seed: u64,
    pub backbone_digest: Option<String>,
    pub aux_digest: Option<String>,
    /// Digest of the training configuration.
    #[serde(default)]
    pub config_digest: Option<String>,
}

const KIND: &str = "attention";

impl AttentionMechanism {
    /// Freshly initialized parameters.
    pub fn new(spec: AttentionSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (b, branches, fusion) = spec.builder();
        let params = b.build(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            spec,
            params,
            branches,
            fusion,
        })
    }

    /// Copy with every parameter shifted by uniform noise in `[-scale, scale]`.
    /// Running variances are kept at least 0.5.
    pub fn jittered(&self, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for e in out.params.entries.iter_mut() {
            let t = Tensor::from_fn(e.value.shape(), |i| {
                e.value.data()[i] + rng.random_range(-scale..=scale)
            });
            e.value = Arc::new(if e.name.ends_with("running_var") {
                t.map(|v| v.abs() + 0.5)
            } else {
                t
            });
        }
        out
    }

    pub fn spec(&self) -> &AttentionSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn digest(&self) -> String {
        self.params.digest(KIND)
    }

    pub fn branch_params(&self, i: usize) -> FeatureBranchParams {
        let r = &self.branches[i];
        let v = |idx: usize| self.params.value(idx).clone();
        FeatureBranchParams {
            kernel: v(r.conv.weight),
            bias: v(r.conv.bias.expect("branch conv has bias")),
            bn_scale: v(r.bn.scale),
            bn_shift: v(r.bn.shift),
            running_mean: v(r.bn.mean),
            running_var: v(r.bn.var),
            target: self.spec.map_size,
        }
    }

    pub fn fusion_params(&self) -> FusionParams {
        FusionParams {
            kernel: self.params.value(self.fusion.weight).clone(),
            bias: self
                .params
                .value(self.fusion.bias.expect("fusion has bias"))
                .clone(),
        }
    }

    /// Contribution of each branch to the fusion kernel, in percent.
    pub fn contributions(&self) -> Result<Vec<f64>> {
        branch_contributions(&self.fusion_params(), &self.spec.branch_channels)
    }

    /// Maps `(N, C, h_E, w_E)` from batched features `(N, d_l, h_l, w_l)`.
    pub fn forward<'g>(&self, b: &Bound<'g>, features: &[Var<'g>]) -> Result<Var<'g>> {
        if features.len() != self.branches.len() {
            return Err(config_err!(
                "{} feature layers for {} branches",
                features.len(),
                self.branches.len()
            ));
        }
        let parts = features
            .iter()
            .zip(&self.branches)
            .map(|(f, r)| {
                let s = f.shape();
                if s.len() != 4 || s[1] != r.in_channels {
                    return Err(config_err!(
                        "feature map {:?} does not match {} channels",
                        s,
                        r.in_channels
                    ));
                }
                if s[2] > self.spec.map_size.0 || s[3] > self.spec.map_size.1 {
                    return Err(config_err!(
                        "feature map {:?} exceeds map size {:?}",
                        s,
                        self.spec.map_size
                    ));
                }
                Ok(branch_forward(b, r, *f, self.spec.map_size))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(fusion_forward(b, self.fusion, &parts))
    }

    /// Inference-mode maps for batched features.
    pub fn explain_features(&self, features: &[Tensor]) -> Result<Tensor> {
        let g = Graph::inference();
        let b = Bound::new(&g, &self.params, false, false);
        let vars: Vec<Var<'_>> = features.iter().map(|f| g.constant(f.clone())).collect();
        Ok(self.forward(&b, &vars)?.value().as_ref().clone())
    }

    pub fn save_checkpoint(&self, meta: &AttentionMeta) -> Result<Vec<u8>> {
        if meta.spec != self.spec {
            return Err(input_err!(
                "checkpoint metadata describes a different attention shape"
            ));
        }
        Ok(checkpoint::encode(KIND, meta, &self.params, &self.digest()))
    }

    pub fn load_checkpoint(bytes: &[u8]) -> Result<(Self, AttentionMeta)> {
        let d = checkpoint::decode::<AttentionMeta>(bytes, KIND, |m| {
            m.spec.validate()?;
            Ok(m.spec.builder().0)
        })?;
        let (_, branches, fusion) = d.meta.spec.builder();
        let mech = Self {
            spec: d.meta.spec.clone(),
            params: d.params,
            branches,
            fusion,
        };
        if mech.digest() != d.digest {
            return Err(format_err!("attention checkpoint digest mismatch"));
        }
        Ok((mech, d.meta))
    }
}
