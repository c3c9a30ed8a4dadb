//! Differentiable operations. Every op computes its forward value eagerly and
//! registers a closure producing the gradients of its inputs.

use super::{BackwardArgs, Var};
use crate::tensor::{gemm, Tensor};

fn unary<'g>(
    x: Var<'g>,
    value: Tensor,
    back: impl Fn(&BackwardArgs<'_>) -> Tensor + 'static,
) -> Var<'g> {
    x.graph
        .push(value, &[x], Box::new(move |a| vec![Some(back(a))]))
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

impl<'g> Var<'g> {
    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = a.zip_map(&b, |x, y| x + y);
        self.graph.push(
            out,
            &[self, other],
            Box::new(|a| vec![Some(a.grad.clone()), Some(a.grad.clone())]),
        )
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = a.zip_map(&b, |x, y| x - y);
        self.graph.push(
            out,
            &[self, other],
            Box::new(|a| vec![Some(a.grad.clone()), Some(a.grad.scale(-1.0))]),
        )
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph.push(
            out,
            &[self, other],
            Box::new(|a| {
                vec![
                    a.needs[0].then(|| a.grad.zip_map(a.inputs[1], |g, y| g * y)),
                    a.needs[1].then(|| a.grad.zip_map(a.inputs[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let out = self.value().scale(s);
        unary(self, out, move |a| a.grad.scale(s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let out = self.value().map(|v| v + s);
        unary(self, out, |a| a.grad.clone())
    }

    pub fn relu(self) -> Var<'g> {
        let out = self.value().map(|v| v.max(0.0));
        unary(self, out, |a| {
            a.grad
                .zip_map(a.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 })
        })
    }

    pub fn sigmoid(self) -> Var<'g> {
        let out = self.value().map(sigmoid);
        unary(self, out, |a| {
            a.grad.zip_map(a.output, |g, y| g * y * (1.0 - y))
        })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(self) -> Var<'g> {
        let out = self.value().map(|x| gelu(x).0);
        unary(self, out, |a| {
            a.grad.zip_map(a.inputs[0], |g, x| g * gelu(x).1)
        })
    }

    /// Elementwise `x^p` for non-negative `x`.
    pub fn powf(self, p: f64) -> Var<'g> {
        let out = self.value().map(|v| v.powf(p));
        unary(self, out, move |a| {
            a.grad.zip_map(a.inputs[0], |g, x| {
                if x > 0.0 {
                    g * p * x.powf(p - 1.0)
                } else {
                    0.0
                }
            })
        })
    }

    pub fn sum(self) -> Var<'g> {
        let out = Tensor::scalar(self.value().sum());
        unary(self, out, |a| {
            Tensor::full(a.inputs[0].shape(), a.grad.item())
        })
    }

    pub fn mean(self) -> Var<'g> {
        let v = self.value();
        let n = v.len() as f64;
        let out = Tensor::scalar(v.sum() / n);
        unary(self, out, move |a| {
            Tensor::full(a.inputs[0].shape(), a.grad.item() / n)
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let out = self.value().as_ref().clone().reshaped(shape);
        unary(self, out, |a| a.grad.clone().reshaped(a.inputs[0].shape()))
    }

    /// Weighted sum of scalar vars, `sum_i w_i * x_i`.
    pub fn weighted_sum(terms: &[(f64, Var<'g>)]) -> Var<'g> {
        let graph = terms[0].1.graph;
        let total: f64 = terms.iter().map(|(w, v)| w * v.value().item()).sum();
        let weights: Vec<f64> = terms.iter().map(|t| t.0).collect();
        let vars: Vec<Var<'g>> = terms.iter().map(|t| t.1).collect();
        graph.push(
            Tensor::scalar(total),
            &vars,
            Box::new(move |a| {
                weights
                    .iter()
                    .map(|w| Some(Tensor::scalar(w * a.grad.item())))
                    .collect()
            }),
        )
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = K * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let d_inner = K * (1.0 + 3.0 * 0.044715 * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner;
    (value, deriv)
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> ConvGeom {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, kh, kw) = w.dims4();
    assert_eq!(
        cin, wcin,
        "conv2d channel mismatch: input {} vs kernel {}",
        cin, wcin
    );
    assert!(
        h + 2 * pad >= kh && wd + 2 * pad >= kw,
        "conv2d kernel larger than padded input"
    );
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    ConvGeom {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
    }
}

/// Columns laid out as `[k][n * P + p]`.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let np = g.n * p;
    let mut cols = vec![0.0; k * np];
    for n in 0..g.n {
        for c in 0..g.cin {
            let plane = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let dst = &mut cols[row * np + n * p..][..p];
                    for oi in 0..g.ho {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[ii as usize * g.w..][..g.w];
                        for oj in 0..g.wo {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                dst[oi * g.wo + oj] = src_row[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (p, np) = (g.p(), g.n * g.p());
    let mut x = vec![0.0; g.n * g.cin * g.h * g.w];
    for n in 0..g.n {
        for c in 0..g.cin {
            let plane = &mut x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let src = &cols[row * np + n * p..][..p];
                    for oi in 0..g.ho {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        for oj in 0..g.wo {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                plane[ii as usize * g.w + jj as usize] += src[oi * g.wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Channel-major `[c][n * P + p]` view of an NCHW buffer (used for 1x1 convs).
fn nchw_to_cnp(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * p + ni * p..][..p].copy_from_slice(&x[(ni * c + ci) * p..][..p]);
        }
    }
    out
}

fn cnp_to_nchw(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * p..][..p].copy_from_slice(&x[ci * n * p + ni * p..][..p]);
        }
    }
    out
}

fn columns(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    if g.pointwise() {
        nchw_to_cnp(x, g.n, g.cin, g.p())
    } else {
        im2col(x, g)
    }
}

/// Plain forward convolution, NCHW input and OIHW kernel.
pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let g = conv_geom(x, w, stride, pad);
    let cols = columns(x.data(), &g);
    let np = g.n * g.p();
    let mut out = vec![0.0; g.cout * np];
    if let Some(b) = b {
        for (co, chunk) in out.chunks_mut(np).enumerate() {
            chunk.fill(b.data()[co]);
        }
    }
    let beta = if b.is_some() { 1.0 } else { 0.0 };
    gemm(
        g.cout,
        g.k(),
        np,
        1.0,
        w.data(),
        g.k() as isize,
        1,
        &cols,
        np as isize,
        1,
        beta,
        &mut out,
    );
    Tensor::from_parts(
        vec![g.n, g.cout, g.ho, g.wo],
        cnp_to_nchw(&out, g.n, g.cout, g.p()),
    )
}

/// 2-D convolution with optional bias. `x: (N, Cin, H, W)`, `w: (Cout, Cin, kh, kw)`.
pub fn conv2d<'g>(
    x: Var<'g>,
    w: Var<'g>,
    b: Option<Var<'g>>,
    stride: usize,
    pad: usize,
) -> Var<'g> {
    let out = conv2d_forward(
        &x.value(),
        &w.value(),
        b.map(|b| b.value()).as_deref(),
        stride,
        pad,
    );
    let mut parents = vec![x, w];
    parents.extend(b);
    x.graph.push(
        out,
        &parents,
        Box::new(move |a| {
            let (xv, wv) = (a.inputs[0], a.inputs[1]);
            let g = conv_geom(xv, wv, stride, pad);
            let (k, np) = (g.k(), g.n * g.p());
            let dy = nchw_to_cnp(a.grad.data(), g.n, g.cout, g.p());
            let mut grads = Vec::with_capacity(3);

            let cols = if a.needs[1] {
                Some(columns(xv.data(), &g))
            } else {
                None
            };
            if a.needs[0] {
                let mut dcols = vec![0.0; k * np];
                // w^T (k x cout) @ dy (cout x np)
                gemm(
                    k,
                    g.cout,
                    np,
                    1.0,
                    wv.data(),
                    1,
                    k as isize,
                    &dy,
                    np as isize,
                    1,
                    0.0,
                    &mut dcols,
                );
                let dx = if g.pointwise() {
                    cnp_to_nchw(&dcols, g.n, g.cin, g.p())
                } else {
                    col2im(&dcols, &g)
                };
                grads.push(Some(Tensor::from_parts(xv.shape().to_vec(), dx)));
            } else {
                grads.push(None);
            }
            if let Some(cols) = cols {
                let mut dw = vec![0.0; g.cout * k];
                // dy (cout x np) @ cols^T (np x k)
                gemm(
                    g.cout,
                    np,
                    k,
                    1.0,
                    &dy,
                    np as isize,
                    1,
                    &cols,
                    1,
                    np as isize,
                    0.0,
                    &mut dw,
                );
                grads.push(Some(Tensor::from_parts(wv.shape().to_vec(), dw)));
            } else {
                grads.push(None);
            }
            if a.inputs.len() == 3 {
                grads.push(a.needs[2].then(|| {
                    Tensor::from_parts(
                        vec![g.cout],
                        dy.chunks(np).map(|c| c.iter().sum()).collect(),
                    )
                }));
            }
            grads
        }),
    )
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-channel batch statistics produced by [`batch_norm_train`].
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var_unbiased: Vec<f64>,
}

/// Batch normalization over `(N, H, W)` using batch statistics.
pub fn batch_norm_train<'g>(
    x: Var<'g>,
    gamma: Var<'g>,
    beta: Var<'g>,
    eps: f64,
) -> (Var<'g>, BatchStats) {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4();
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            mean[ci] += xv.data()[(ni * c + ci) * hw..][..hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for ni in 0..n {
        for ci in 0..c {
            var[ci] += xv.data()[(ni * c + ci) * hw..][..hw]
                .iter()
                .map(|v| (v - mean[ci]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

    let (gv, bv) = (gamma.value(), beta.value());
    let mut xhat = vec![0.0; xv.len()];
    let mut out = vec![0.0; xv.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            for i in off..off + hw {
                xhat[i] = (xv.data()[i] - mean[ci]) * inv_std[ci];
                out[i] = gv.data()[ci] * xhat[i] + bv.data()[ci];
            }
        }
    }
    let stats = BatchStats {
        var_unbiased: var
            .iter()
            .map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v })
            .collect(),
        mean,
    };
    let shape = xv.shape().to_vec();
    let y = x.graph.push(
        Tensor::from_parts(shape, out),
        &[x, gamma, beta],
        Box::new(move |a| {
            let gd = a.grad.data();
            let gamma = a.inputs[1].data();
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * hw;
                    for i in off..off + hw {
                        sum_dy[ci] += gd[i];
                        sum_dy_xhat[ci] += gd[i] * xhat[i];
                    }
                }
            }
            let dx = a.needs[0].then(|| {
                let mut dx = vec![0.0; gd.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * hw;
                        let k = gamma[ci] * inv_std[ci] / m;
                        for i in off..off + hw {
                            dx[i] = k * (m * gd[i] - sum_dy[ci] - xhat[i] * sum_dy_xhat[ci]);
                        }
                    }
                }
                Tensor::from_parts(a.grad.shape().to_vec(), dx)
            });
            vec![
                dx,
                a.needs[1].then(|| Tensor::from_parts(vec![c], sum_dy_xhat.clone())),
                a.needs[2].then(|| Tensor::from_parts(vec![c], sum_dy.clone())),
            ]
        }),
    );
    (y, stats)
}

/// Batch normalization with fixed (running) statistics.
pub fn batch_norm_eval<'g>(
    x: Var<'g>,
    gamma: Var<'g>,
    beta: Var<'g>,
    mean: Var<'g>,
    var: Var<'g>,
    eps: f64,
) -> Var<'g> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4();
    let hw = h * w;
    let (gv, bv, mv, vv) = (gamma.value(), beta.value(), mean.value(), var.value());
    let inv_std: Vec<f64> = vv.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; xv.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            let s = gv.data()[ci] * inv_std[ci];
            let t = bv.data()[ci] - mv.data()[ci] * s;
            for i in off..off + hw {
                out[i] = xv.data()[i] * s + t;
            }
        }
    }
    let shape = xv.shape().to_vec();
    x.graph.push(
        Tensor::from_parts(shape, out),
        &[x, gamma, beta, mean, var],
        Box::new(move |a| {
            let (xd, gd, gamma, mean) = (
                a.inputs[0].data(),
                a.grad.data(),
                a.inputs[1].data(),
                a.inputs[3].data(),
            );
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = if a.needs[0] {
                vec![0.0; gd.len()]
            } else {
                Vec::new()
            };
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * hw;
                    for i in off..off + hw {
                        dbeta[ci] += gd[i];
                        dgamma[ci] += gd[i] * (xd[i] - mean[ci]) * inv_std[ci];
                        if a.needs[0] {
                            dx[i] = gd[i] * gamma[ci] * inv_std[ci];
                        }
                    }
                }
            }
            vec![
                a.needs[0].then(|| Tensor::from_parts(a.grad.shape().to_vec(), dx)),
                a.needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
                a.needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
                None,
                None,
            ]
        }),
    )
}

/// Layer normalization over the last axis with affine `gamma`, `beta` of length `D`.
pub fn layer_norm<'g>(x: Var<'g>, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Var<'g> {
    let xv = x.value();
    let d = *xv.shape().last().expect("layer_norm on rank-0");
    let rows = xv.len() / d;
    let (gv, bv) = (gamma.value(), beta.value());
    let mut xhat = vec![0.0; xv.len()];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; xv.len()];
    for r in 0..rows {
        let row = &xv.data()[r * d..][..d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        inv_std[r] = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            let xh = (row[j] - mu) * inv_std[r];
            xhat[r * d + j] = xh;
            out[r * d + j] = gv.data()[j] * xh + bv.data()[j];
        }
    }
    let shape = xv.shape().to_vec();
    x.graph.push(
        Tensor::from_parts(shape, out),
        &[x, gamma, beta],
        Box::new(move |a| {
            let gd = a.grad.data();
            let gamma = a.inputs[1].data();
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            let mut dx = vec![0.0; gd.len()];
            for r in 0..rows {
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for j in 0..d {
                    let i = r * d + j;
                    dgamma[j] += gd[i] * xhat[i];
                    dbeta[j] += gd[i];
                    let dxh = gd[i] * gamma[j];
                    s1 += dxh;
                    s2 += dxh * xhat[i];
                }
                for j in 0..d {
                    let i = r * d + j;
                    let dxh = gd[i] * gamma[j];
                    dx[i] = inv_std[r] / d as f64 * (d as f64 * dxh - s1 - xhat[i] * s2);
                }
            }
            vec![
                a.needs[0].then(|| Tensor::from_parts(a.grad.shape().to_vec(), dx)),
                a.needs[1].then(|| Tensor::from_parts(vec![d], dgamma)),
                a.needs[2].then(|| Tensor::from_parts(vec![d], dbeta)),
            ]
        }),
    )
}

// ---------------------------------------------------------------------------
// Pooling and dense layers
// ---------------------------------------------------------------------------

/// 2x2 max pooling with stride 2 (odd trailing rows/cols are dropped).
pub fn max_pool2<'g>(x: Var<'g>) -> Var<'g> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * ho * wo];
    let mut argmax = vec![0usize; out.len()];
    for plane in 0..n * c {
        let src = &xv.data()[plane * h * w..][..h * w];
        for i in 0..ho {
            for j in 0..wo {
                let mut best = (2 * i) * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * i + di) * w + 2 * j + dj;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = plane * ho * wo + i * wo + j;
                out[o] = src[best];
                argmax[o] = plane * h * w + best;
            }
        }
    }
    let in_shape = xv.shape().to_vec();
    unary(x, Tensor::from_parts(vec![n, c, ho, wo], out), move |a| {
        let mut dx = vec![0.0; in_shape.iter().product()];
        for (o, &src) in argmax.iter().enumerate() {
            dx[src] += a.grad.data()[o];
        }
        Tensor::from_parts(in_shape.clone(), dx)
    })
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2<'g>(x: Var<'g>) -> Var<'g> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        let src = &xv.data()[plane * h * w..][..h * w];
        for i in 0..ho {
            for j in 0..wo {
                let s = src[2 * i * w + 2 * j]
                    + src[2 * i * w + 2 * j + 1]
                    + src[(2 * i + 1) * w + 2 * j]
                    + src[(2 * i + 1) * w + 2 * j + 1];
                out[plane * ho * wo + i * wo + j] = 0.25 * s;
            }
        }
    }
    let in_shape = xv.shape().to_vec();
    unary(x, Tensor::from_parts(vec![n, c, ho, wo], out), move |a| {
        let mut dx = vec![0.0; in_shape.iter().product()];
        for plane in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    let g = 0.25 * a.grad.data()[plane * ho * wo + i * wo + j];
                    let base = plane * h * w;
                    dx[base + 2 * i * w + 2 * j] += g;
                    dx[base + 2 * i * w + 2 * j + 1] += g;
                    dx[base + (2 * i + 1) * w + 2 * j] += g;
                    dx[base + (2 * i + 1) * w + 2 * j + 1] += g;
                }
            }
        }
        Tensor::from_parts(in_shape.clone(), dx)
    })
}

/// `(N, C, H, W) -> (N, C)` spatial mean.
pub fn global_avg_pool<'g>(x: Var<'g>) -> Var<'g> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4();
    let hw = h * w;
    let out: Vec<f64> = xv
        .data()
        .chunks(hw)
        .map(|p| p.iter().sum::<f64>() / hw as f64)
        .collect();
    unary(x, Tensor::from_parts(vec![n, c], out), move |a| {
        let mut dx = Vec::with_capacity(n * c * hw);
        for &g in a.grad.data() {
            dx.extend(std::iter::repeat_n(g / hw as f64, hw));
        }
        Tensor::from_parts(vec![n, c, h, w], dx)
    })
}

/// Affine map over the last axis: `x (.., in) @ w^T + b` with `w: (out, in)`.
pub fn linear<'g>(x: Var<'g>, w: Var<'g>, b: Var<'g>) -> Var<'g> {
    let (xv, wv, bv) = (x.value(), w.value(), b.value());
    let din = *xv.shape().last().expect("linear on rank-0");
    let (dout, wdin) = (wv.shape()[0], wv.shape()[1]);
    assert_eq!(din, wdin, "linear input width {} vs weight {}", din, wdin);
    let rows = xv.len() / din;
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        out[r * dout..][..dout].copy_from_slice(bv.data());
    }
    gemm(
        rows,
        din,
        dout,
        1.0,
        xv.data(),
        din as isize,
        1,
        wv.data(),
        1,
        din as isize,
        1.0,
        &mut out,
    );
    let mut shape = xv.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    x.graph.push(
        Tensor::from_parts(shape, out),
        &[x, w, b],
        Box::new(move |a| {
            let (xd, wd, gd) = (a.inputs[0].data(), a.inputs[1].data(), a.grad.data());
            let dx = a.needs[0].then(|| {
                let mut dx = vec![0.0; rows * din];
                gemm(
                    rows,
                    dout,
                    din,
                    1.0,
                    gd,
                    dout as isize,
                    1,
                    wd,
                    din as isize,
                    1,
                    0.0,
                    &mut dx,
                );
                Tensor::from_parts(a.inputs[0].shape().to_vec(), dx)
            });
            let dw = a.needs[1].then(|| {
                let mut dw = vec![0.0; dout * din];
                gemm(
                    dout,
                    rows,
                    din,
                    1.0,
                    gd,
                    1,
                    dout as isize,
                    xd,
                    din as isize,
                    1,
                    0.0,
                    &mut dw,
                );
                Tensor::from_parts(vec![dout, din], dw)
            });
            let db = a.needs[2].then(|| {
                let mut db = vec![0.0; dout];
                for r in 0..rows {
                    for (j, d) in db.iter_mut().enumerate() {
                        *d += gd[r * dout + j];
                    }
                }
                Tensor::from_parts(vec![dout], db)
            });
            vec![dx, dw, db]
        }),
    )
}

/// Mean cross-entropy of `logits: (N, C)` against hard targets.
pub fn cross_entropy<'g>(logits: Var<'g>, targets: &[usize]) -> Var<'g> {
    let lv = logits.value();
    let (n, c) = (lv.shape()[0], lv.shape()[1]);
    assert_eq!(n, targets.len(), "cross_entropy target count mismatch");
    let mut probs = vec![0.0; n * c];
    let mut loss = 0.0;
    for r in 0..n {
        let row = &lv.data()[r * c..][..c];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for j in 0..c {
            probs[r * c + j] = (row[j] - mx).exp() / z;
        }
        loss += -(row[targets[r]] - mx - z.ln());
    }
    let targets = targets.to_vec();
    unary(logits, Tensor::scalar(loss / n as f64), move |a| {
        let g = a.grad.item() / n as f64;
        let mut d = probs.clone();
        for (r, &t) in targets.iter().enumerate() {
            d[r * c + t] -= 1.0;
        }
        Tensor::from_parts(vec![n, c], d.into_iter().map(|v| v * g).collect())
    })
}

// ---------------------------------------------------------------------------
// Spatial resampling and channel plumbing
// ---------------------------------------------------------------------------

/// Source taps for one output coordinate of a half-pixel bilinear resize.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Axis1d {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Per-axis interpolation taps with half-pixel centers (corners not aligned).
pub(crate) fn bilinear_tables(src: usize, dst: usize) -> Vec<Axis1d> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Axis1d {
                lo,
                hi,
                frac: s - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of `(N, C, h, w)` to `(N, C, out_h, out_w)`.
pub fn resize_bilinear<'g>(x: Var<'g>, out_h: usize, out_w: usize) -> Var<'g> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4();
    let ty = bilinear_tables(h, out_h);
    let tx = bilinear_tables(w, out_w);
    let mut out = vec![0.0; n * c * out_h * out_w];
    for plane in 0..n * c {
        let src = &xv.data()[plane * h * w..][..h * w];
        let dst = &mut out[plane * out_h * out_w..][..out_h * out_w];
        for (i, ay) in ty.iter().enumerate() {
            for (j, ax) in tx.iter().enumerate() {
                let top =
                    src[ay.lo * w + ax.lo] * (1.0 - ax.frac) + src[ay.lo * w + ax.hi] * ax.frac;
                let bot =
                    src[ay.hi * w + ax.lo] * (1.0 - ax.frac) + src[ay.hi * w + ax.hi] * ax.frac;
                dst[i * out_w + j] = top * (1.0 - ay.frac) + bot * ay.frac;
            }
        }
    }
    unary(
        x,
        Tensor::from_parts(vec![n, c, out_h, out_w], out),
        move |a| {
            let mut dx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                let g = &a.grad.data()[plane * out_h * out_w..][..out_h * out_w];
                let d = &mut dx[plane * h * w..][..h * w];
                for (i, ay) in ty.iter().enumerate() {
                    for (j, ax) in tx.iter().enumerate() {
                        let v = g[i * out_w + j];
                        d[ay.lo * w + ax.lo] += v * (1.0 - ay.frac) * (1.0 - ax.frac);
                        d[ay.lo * w + ax.hi] += v * (1.0 - ay.frac) * ax.frac;
                        d[ay.hi * w + ax.lo] += v * ay.frac * (1.0 - ax.frac);
                        d[ay.hi * w + ax.hi] += v * ay.frac * ax.frac;
                    }
                }
            }
            Tensor::from_parts(vec![n, c, h, w], dx)
        },
    )
}

/// Concatenate `(N, C_i, H, W)` tensors along the channel axis.
pub fn concat_channels<'g>(parts: &[Var<'g>]) -> Var<'g> {
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let (n, _, h, w) = values[0].dims4();
    let chans: Vec<usize> = values
        .iter()
        .map(|v| {
            let (vn, vc, vh, vw) = v.dims4();
            assert!(
                vn == n && vh == h && vw == w,
                "concat_channels shape mismatch"
            );
            vc
        })
        .collect();
    let total: usize = chans.iter().sum();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total * hw);
    for ni in 0..n {
        for (v, &c) in values.iter().zip(&chans) {
            out.extend_from_slice(&v.data()[ni * c * hw..][..c * hw]);
        }
    }
    parts[0].graph.push(
        Tensor::from_parts(vec![n, total, h, w], out),
        parts,
        Box::new(move |a| {
            let mut grads: Vec<Vec<f64>> = chans
                .iter()
                .map(|&c| Vec::with_capacity(n * c * hw))
                .collect();
            let gd = a.grad.data();
            let mut off = 0;
            for _ in 0..n {
                for (g, &c) in grads.iter_mut().zip(&chans) {
                    g.extend_from_slice(&gd[off..off + c * hw]);
                    off += c * hw;
                }
            }
            grads
                .into_iter()
                .zip(&chans)
                .zip(&a.needs)
                .map(|((g, &c), &need)| need.then(|| Tensor::from_parts(vec![n, c, h, w], g)))
                .collect()
        }),
    )
}

/// Per-sample channel gather: `x: (N, C, H, W)`, `picks[n]` channel lists of equal length `k`,
/// result `(N, k, H, W)`.
pub fn gather_channels<'g>(x: Var<'g>, picks: &[Vec<usize>]) -> Var<'g> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4();
    assert_eq!(
        picks.len(),
        n,
        "gather_channels needs one pick list per sample"
    );
    let k = picks[0].len();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * k * hw);
    for (ni, p) in picks.iter().enumerate() {
        assert_eq!(
            p.len(),
            k,
            "gather_channels pick lists must have equal length"
        );
        for &ci in p {
            assert!(ci < c, "gather_channels index {} out of range {}", ci, c);
            out.extend_from_slice(&xv.data()[(ni * c + ci) * hw..][..hw]);
        }
    }
    let picks = picks.to_vec();
    unary(x, Tensor::from_parts(vec![n, k, h, w], out), move |a| {
        let mut dx = vec![0.0; n * c * hw];
        for (ni, p) in picks.iter().enumerate() {
            for (j, &ci) in p.iter().enumerate() {
                let src = &a.grad.data()[(ni * k + j) * hw..][..hw];
                for (d, s) in dx[(ni * c + ci) * hw..][..hw].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        Tensor::from_parts(vec![n, c, h, w], dx)
    })
}

/// `x: (N, C, H, W)` times a single-channel `mask: (N, 1, H, W)` broadcast over channels.
pub fn mul_channel_mask<'g>(x: Var<'g>, mask: Var<'g>) -> Var<'g> {
    let (xv, mv) = (x.value(), mask.value());
    let (n, c, h, w) = xv.dims4();
    assert_eq!(mv.shape(), &[n, 1, h, w], "mask must be (N, 1, H, W)");
    let hw = h * w;
    let mut out = vec![0.0; xv.len()];
    for ni in 0..n {
        let m = &mv.data()[ni * hw..][..hw];
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            for (k, (o, xval)) in out[off..off + hw]
                .iter_mut()
                .zip(&xv.data()[off..off + hw])
                .enumerate()
            {
                *o = xval * m[k];
            }
        }
    }
    x.graph.push(
        Tensor::from_parts(xv.shape().to_vec(), out),
        &[x, mask],
        Box::new(move |a| {
            let (xd, md, gd) = (a.inputs[0].data(), a.inputs[1].data(), a.grad.data());
            let dx = a.needs[0].then(|| {
                let mut dx = vec![0.0; gd.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * hw;
                        for k in 0..hw {
                            dx[off + k] = gd[off + k] * md[ni * hw + k];
                        }
                    }
                }
                Tensor::from_parts(vec![n, c, h, w], dx)
            });
            let dm = a.needs[1].then(|| {
                let mut dm = vec![0.0; n * hw];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * hw;
                        for k in 0..hw {
                            dm[ni * hw + k] += gd[off + k] * xd[off + k];
                        }
                    }
                }
                Tensor::from_parts(vec![n, 1, h, w], dm)
            });
            vec![dx, dm]
        }),
    )
}

/// Sum of squared forward differences along both spatial axes of every
/// `(H, W)` plane, without wraparound.
pub fn squared_variation_sum<'g>(x: Var<'g>) -> Var<'g> {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = xv.len() / (h * w);
    let d = xv.data();
    let mut total = 0.0;
    for p in 0..planes {
        let m = &d[p * h * w..][..h * w];
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    total += (m[(i + 1) * w + j] - m[i * w + j]).powi(2);
                }
                if j + 1 < w {
                    total += (m[i * w + j + 1] - m[i * w + j]).powi(2);
                }
            }
        }
    }
    unary(x, Tensor::scalar(total), move |a| {
        let g = a.grad.item();
        let d = a.inputs[0].data();
        let mut dx = vec![0.0; d.len()];
        for p in 0..planes {
            let m = &d[p * h * w..][..h * w];
            let o = &mut dx[p * h * w..][..h * w];
            for i in 0..h {
                for j in 0..w {
                    if i + 1 < h {
                        let diff = 2.0 * g * (m[(i + 1) * w + j] - m[i * w + j]);
                        o[(i + 1) * w + j] += diff;
                        o[i * w + j] -= diff;
                    }
                    if j + 1 < w {
                        let diff = 2.0 * g * (m[i * w + j + 1] - m[i * w + j]);
                        o[i * w + j + 1] += diff;
                        o[i * w + j] -= diff;
                    }
                }
            }
        }
        Tensor::from_parts(shape.clone(), dx)
    })
}

// ---------------------------------------------------------------------------
// Token ops for the transformer backbone
// ---------------------------------------------------------------------------

/// `(N, A, B) -> (N, B, A)`.
pub fn transpose_last2<'g>(x: Var<'g>) -> Var<'g> {
    fn tr(d: &[f64], n: usize, a: usize, b: usize) -> Vec<f64> {
        let mut out = vec![0.0; d.len()];
        for ni in 0..n {
            for i in 0..a {
                for j in 0..b {
                    out[ni * a * b + j * a + i] = d[ni * a * b + i * b + j];
                }
            }
        }
        out
    }
    let xv = x.value();
    let (n, a, b) = xv.dims3();
    unary(
        x,
        Tensor::from_parts(vec![n, b, a], tr(xv.data(), n, a, b)),
        move |args| Tensor::from_parts(vec![n, a, b], tr(args.grad.data(), n, b, a)),
    )
}

/// Adds a `(T, D)` table to every sample of `(N, T, D)`.
pub fn add_broadcast<'g>(x: Var<'g>, table: Var<'g>) -> Var<'g> {
    let (xv, tv) = (x.value(), table.value());
    let per = tv.len();
    assert_eq!(xv.len() % per, 0, "add_broadcast shape mismatch");
    let mut out = xv.data().to_vec();
    for chunk in out.chunks_mut(per) {
        for (o, t) in chunk.iter_mut().zip(tv.data()) {
            *o += t;
        }
    }
    let tshape = tv.shape().to_vec();
    x.graph.push(
        Tensor::from_parts(xv.shape().to_vec(), out),
        &[x, table],
        Box::new(move |a| {
            let dt = a.needs[1].then(|| {
                let mut dt = vec![0.0; per];
                for chunk in a.grad.data().chunks(per) {
                    for (d, g) in dt.iter_mut().zip(chunk) {
                        *d += g;
                    }
                }
                Tensor::from_parts(tshape.clone(), dt)
            });
            vec![Some(a.grad.clone()), dt]
        }),
    )
}

/// Prepends one learned token `(D)` to every sample of `(N, T, D)`.
pub fn prepend_token<'g>(x: Var<'g>, token: Var<'g>) -> Var<'g> {
    let (xv, tv) = (x.value(), token.value());
    let (n, t, d) = xv.dims3();
    assert_eq!(tv.len(), d, "token width mismatch");
    let mut out = Vec::with_capacity(n * (t + 1) * d);
    for ni in 0..n {
        out.extend_from_slice(tv.data());
        out.extend_from_slice(&xv.data()[ni * t * d..][..t * d]);
    }
    let tshape = tv.shape().to_vec();
    x.graph.push(
        Tensor::from_parts(vec![n, t + 1, d], out),
        &[x, token],
        Box::new(move |a| {
            let gd = a.grad.data();
            let mut dx = Vec::with_capacity(n * t * d);
            let mut dt = vec![0.0; d];
            for ni in 0..n {
                let base = ni * (t + 1) * d;
                for (o, g) in dt.iter_mut().zip(&gd[base..base + d]) {
                    *o += g;
                }
                dx.extend_from_slice(&gd[base + d..base + (t + 1) * d]);
            }
            vec![
                Some(Tensor::from_parts(vec![n, t, d], dx)),
                Some(Tensor::from_parts(tshape.clone(), dt)),
            ]
        }),
    )
}

/// Token 0 of every sample: `(N, T, D) -> (N, D)`.
pub fn first_token<'g>(x: Var<'g>) -> Var<'g> {
    let xv = x.value();
    let (n, t, d) = xv.dims3();
    let mut out = Vec::with_capacity(n * d);
    for ni in 0..n {
        out.extend_from_slice(&xv.data()[ni * t * d..][..d]);
    }
    unary(x, Tensor::from_parts(vec![n, d], out), move |a| {
        let mut dx = vec![0.0; n * t * d];
        for ni in 0..n {
            dx[ni * t * d..][..d].copy_from_slice(&a.grad.data()[ni * d..][..d]);
        }
        Tensor::from_parts(vec![n, t, d], dx)
    })
}

/// Multi-head scaled dot-product self-attention core on projected
/// `q, k, v: (N, T, D)`; heads split `D` evenly.
pub fn multi_head_attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, heads: usize) -> Var<'g> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let (n, t, d) = qv.dims3();
    assert!(
        d % heads == 0,
        "model width {} not divisible by {} heads",
        d,
        heads
    );
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let dd = d as isize;
    // probs laid out [n][head][t][t]
    let mut probs = vec![0.0; n * heads * t * t];
    let mut out = vec![0.0; n * t * d];
    for ni in 0..n {
        for hd in 0..heads {
            let off = ni * t * d + hd * dh;
            let p = &mut probs[(ni * heads + hd) * t * t..][..t * t];
            // scores = q_h (t x dh) @ k_h^T (dh x t)
            gemm(
                t,
                dh,
                t,
                scale,
                &qv.data()[off..],
                dd,
                1,
                &kv.data()[off..],
                1,
                dd,
                0.0,
                p,
            );
            for row in p.chunks_mut(t) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                row.iter_mut().for_each(|s| *s /= z);
            }
            let mut o = vec![0.0; t * dh];
            gemm(
                t,
                t,
                dh,
                1.0,
                p,
                t as isize,
                1,
                &vv.data()[off..],
                dd,
                1,
                0.0,
                &mut o,
            );
            for ti in 0..t {
                out[ni * t * d + ti * d + hd * dh..][..dh].copy_from_slice(&o[ti * dh..][..dh]);
            }
        }
    }
    q.graph.push(
        Tensor::from_parts(vec![n, t, d], out),
        &[q, k, v],
        Box::new(move |a| {
            let (qd, kd, vd, gd) = (
                a.inputs[0].data(),
                a.inputs[1].data(),
                a.inputs[2].data(),
                a.grad.data(),
            );
            let mut dq = vec![0.0; n * t * d];
            let mut dk = vec![0.0; n * t * d];
            let mut dv = vec![0.0; n * t * d];
            let mut dp = vec![0.0; t * t];
            let mut tmp = vec![0.0; t * dh];
            for ni in 0..n {
                for hd in 0..heads {
                    let off = ni * t * d + hd * dh;
                    let p = &probs[(ni * heads + hd) * t * t..][..t * t];
                    // dV = P^T dO
                    gemm(
                        t,
                        t,
                        dh,
                        1.0,
                        p,
                        1,
                        t as isize,
                        &gd[off..],
                        dd,
                        1,
                        0.0,
                        &mut tmp,
                    );
                    scatter_head(&mut dv, &tmp, off, t, d, dh);
                    // dP = dO V^T
                    gemm(
                        t,
                        dh,
                        t,
                        1.0,
                        &gd[off..],
                        dd,
                        1,
                        &vd[off..],
                        1,
                        dd,
                        0.0,
                        &mut dp,
                    );
                    // dS = P * (dP - rowsum(dP * P)), pre-scaled
                    for (prow, dprow) in p.chunks(t).zip(dp.chunks_mut(t)) {
                        let s: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                        for (dpv, pv) in dprow.iter_mut().zip(prow) {
                            *dpv = pv * (*dpv - s) * scale;
                        }
                    }
                    // dQ = dS K ; dK = dS^T Q
                    gemm(
                        t,
                        t,
                        dh,
                        1.0,
                        &dp,
                        t as isize,
                        1,
                        &kd[off..],
                        dd,
                        1,
                        0.0,
                        &mut tmp,
                    );
                    scatter_head(&mut dq, &tmp, off, t, d, dh);
                    gemm(
                        t,
                        t,
                        dh,
                        1.0,
                        &dp,
                        1,
                        t as isize,
                        &qd[off..],
                        dd,
                        1,
                        0.0,
                        &mut tmp,
                    );
                    scatter_head(&mut dk, &tmp, off, t, d, dh);
                }
            }
            let shape = vec![n, t, d];
            vec![
                Some(Tensor::from_parts(shape.clone(), dq)),
                Some(Tensor::from_parts(shape.clone(), dk)),
                Some(Tensor::from_parts(shape, dv)),
            ]
        }),
    )
}

fn scatter_head(dst: &mut [f64], src: &[f64], off: usize, t: usize, d: usize, dh: usize) {
    for ti in 0..t {
        dst[off + ti * d..][..dh].copy_from_slice(&src[ti * dh..][..dh]);
    }
}
