//! Model Parameter Randomization Test: how much explanations change, measured
//! by SSIM, as backbone layers are re-initialized from the input upwards.

use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use crate::attention::Explainer;
use crate::error::{input_err, Result};
use crate::io::render::line_plot_png;
use crate::model_zoo::{Classifier, ClassifierHandle};
use crate::tensor::Tensor;

/// Side of the uniform SSIM window.
pub const SSIM_WINDOW: usize = 7;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Mean structural similarity of two maps with values in `[0, 1]`, using a
/// 7x7 uniform window, unit dynamic range and sample covariances, averaged
/// over all window positions that fit inside the map.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 2 || a.shape() != b.shape() {
        return Err(input_err!(
            "SSIM needs equal 2-D shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(input_err!(
            "SSIM needs maps of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        ));
    }
    if a.data()
        .iter()
        .chain(b.data())
        .any(|v| !(0.0..=1.0).contains(v))
    {
        return Err(input_err!("SSIM inputs must lie in [0, 1]"));
    }
    let (x, y) = (a.data(), b.data());
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let cov_norm = n / (n - 1.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - SSIM_WINDOW {
        for j in 0..=w - SSIM_WINDOW {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..SSIM_WINDOW {
                for dj in 0..SSIM_WINDOW {
                    let p = (i + di) * w + j + dj;
                    sx += x[p];
                    sy += y[p];
                    sxx += x[p] * x[p];
                    syy += y[p] * y[p];
                    sxy += x[p] * y[p];
                }
            }
            let (ux, uy) = (sx / n, sy / n);
            let vx = cov_norm * (sxx / n - ux * ux);
            let vy = cov_norm * (syy / n - uy * uy);
            let vxy = cov_norm * (sxy / n - ux * uy);
            total += ((2.0 * ux * uy + C1) * (2.0 * vxy + C2))
                / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean SSIM per randomization depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MprtCurve {
    /// `(last randomized layer, mean SSIM)`; the first entry is the intact model.
    pub points: Vec<(String, f64)>,
    pub probes: usize,
    pub seed: u64,
}

impl MprtCurve {
    /// CSV with header `layer,ssim`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,ssim\n");
        for (l, s) in &self.points {
            let _ = writeln!(out, "{l},{s}");
        }
        out
    }

    /// Line plot of SSIM against randomization depth on a fixed `[-1, 1]` axis.
    pub fn to_png(&self, text: &[(&str, String)]) -> Result<Vec<u8>> {
        let ys: Vec<f64> = self.points.iter().map(|p| p.1).collect();
        line_plot_png(&ys, (-1.0, 1.0), text)
    }

    /// SSIM of the fully randomized model.
    pub fn last(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.1)
    }
}

/// Label used for the unrandomized model in [`MprtCurve`].
pub const INTACT: &str = "none";

/// Runs the randomization test on `probes` `(N, C, H, W)`.
///
/// For each depth `k = 0..=L`, the backbone's first `k` parameterized layers
/// are re-drawn with `seed`, `explainer_for(k, model)` builds an explainer
/// for that model, and the maps for the intact backbone's class on each
/// probe are compared with those at `k = 0`.
pub fn mprt<F>(
    backbone: &ClassifierHandle,
    mut explainer_for: F,
    probes: &Tensor,
    seed: u64,
) -> Result<MprtCurve>
where
    F: FnMut(usize, &ClassifierHandle) -> Result<Box<dyn Explainer>>,
{
    if probes.rank() != 4 || probes.shape()[0] == 0 {
        return Err(input_err!(
            "probe set must be a nonempty (N, C, H, W) batch"
        ));
    }
    let n = probes.shape()[0];
    let cstar = backbone.predict(probes)?;
    let class_maps = |explainer: &dyn Explainer| -> Result<Vec<Tensor>> {
        let maps = explainer.explain_batch(probes)?;
        if maps.rank() != 4 || maps.shape()[0] != n || maps.shape()[1] != backbone.num_classes() {
            return Err(input_err!(
                "explainer returned {:?} for {n} probes",
                maps.shape()
            ));
        }
        let (_, _, h, w) = maps.dims4();
        Ok((0..n)
            .map(|i| maps.index_first(i).index_first(cstar[i]).reshaped(&[h, w]))
            .collect())
    };
    let layers = backbone.param_layers();
    let mut reference: Vec<Tensor> = Vec::new();
    let mut points = Vec::with_capacity(layers.len() + 1);
    for k in 0..=layers.len() {
        let model = backbone.randomize_parameters_up_to(k, seed)?;
        let maps = class_maps(explainer_for(k, &model)?.as_ref())?;
        if k == 0 {
            reference = maps.clone();
        }
        let mut total = 0.0;
        for (a, b) in reference.iter().zip(&maps) {
            total += ssim(a, b)?;
        }
        let label = if k == 0 {
            INTACT.to_string()
        } else {
            layers[k - 1].clone()
        };
        info!(
            "randomized through {label}: mean SSIM {:.4}",
            total / n as f64
        );
        points.push((label, total / n as f64));
    }
    Ok(MprtCurve {
        points,
        probes: n,
        seed,
    })
}
