//! Named, layer-grouped parameter sets and their binding onto a graph.

use std::cell::RefCell;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{self, BatchStats, Gradients, Graph, Var};
use crate::error::{format_err, Result};
use crate::tensor::Tensor;

/// How a parameter tensor is (re-)drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Uniform { bound: f64 },
    Normal { std: f64 },
    Constant(f64),
}

impl Init {
    pub fn sample(&self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        match *self {
            Init::Uniform { bound } => Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound)),
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape, |_| dist.sample(rng))
            }
            Init::Constant(v) => Tensor::full(shape, v),
        }
    }

    /// He-uniform bound for a layer with the given fan-in.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform {
            bound: (6.0 / fan_in as f64).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Weight,
    Bias,
    Scale,
    Shift,
    RunningMean,
    RunningVar,
    Embedding,
}

impl Role {
    pub fn trainable(self) -> bool {
        !matches!(self, Role::RunningMean | Role::RunningVar)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    /// Index into [`ParamSet::layers`].
    pub layer: usize,
    pub role: Role,
    pub init: Init,
    pub value: Arc<Tensor>,
}

/// Ordered parameters of a network, grouped into parameterized layers listed
/// input-to-output.
#[derive(Clone, Debug)]
pub struct ParamSet {
    pub layers: Vec<String>,
    pub entries: Vec<ParamEntry>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvRef {
    pub weight: usize,
    pub bias: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct BnRef {
    pub scale: usize,
    pub shift: usize,
    pub mean: usize,
    pub var: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearRef {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct NormRef {
    pub scale: usize,
    pub shift: usize,
}

/// Declares parameters in network order and hands back index references.
#[derive(Default)]
pub struct ParamBuilder {
    layers: Vec<String>,
    entries: Vec<(String, usize, Role, Init, Vec<usize>)>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn layer(&mut self, name: &str) -> usize {
        assert!(
            !self.layers.iter().any(|l| l == name),
            "duplicate layer {name}"
        );
        self.layers.push(name.to_string());
        self.layers.len() - 1
    }

    fn entry(
        &mut self,
        layer: usize,
        suffix: &str,
        role: Role,
        init: Init,
        shape: Vec<usize>,
    ) -> usize {
        let name = format!("{}.{}", self.layers[layer], suffix);
        self.entries.push((name, layer, role, init, shape));
        self.entries.len() - 1
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> ConvRef {
        self.conv_with_init(name, cin, cout, k, bias, Init::fan_in(cin * k * k))
    }

    pub fn conv_with_init(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        init: Init,
    ) -> ConvRef {
        let l = self.layer(name);
        let weight = self.entry(l, "weight", Role::Weight, init, vec![cout, cin, k, k]);
        let bias = bias.then(|| self.entry(l, "bias", Role::Bias, Init::Constant(0.0), vec![cout]));
        ConvRef { weight, bias }
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> BnRef {
        let l = self.layer(name);
        BnRef {
            scale: self.entry(l, "scale", Role::Scale, Init::Constant(1.0), vec![c]),
            shift: self.entry(l, "shift", Role::Shift, Init::Constant(0.0), vec![c]),
            mean: self.entry(
                l,
                "running_mean",
                Role::RunningMean,
                Init::Constant(0.0),
                vec![c],
            ),
            var: self.entry(
                l,
                "running_var",
                Role::RunningVar,
                Init::Constant(1.0),
                vec![c],
            ),
        }
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> LinearRef {
        let l = self.layer(name);
        LinearRef {
            weight: self.entry(
                l,
                "weight",
                Role::Weight,
                Init::fan_in(din),
                vec![dout, din],
            ),
            bias: self.entry(l, "bias", Role::Bias, Init::Constant(0.0), vec![dout]),
        }
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> NormRef {
        let l = self.layer(name);
        NormRef {
            scale: self.entry(l, "scale", Role::Scale, Init::Constant(1.0), vec![d]),
            shift: self.entry(l, "shift", Role::Shift, Init::Constant(0.0), vec![d]),
        }
    }

    /// A free-standing learned tensor (token, position table) forming its own layer.
    pub fn embedding(&mut self, name: &str, shape: &[usize], std: f64) -> usize {
        let l = self.layer(name);
        self.entry(
            l,
            "value",
            Role::Embedding,
            Init::Normal { std },
            shape.to_vec(),
        )
    }

    /// Materialize with freshly drawn values.
    pub fn build(self, rng: &mut impl Rng) -> ParamSet {
        let entries = self
            .entries
            .into_iter()
            .map(|(name, layer, role, init, shape)| ParamEntry {
                value: Arc::new(init.sample(&shape, rng)),
                name,
                layer,
                role,
                init,
            })
            .collect();
        ParamSet {
            layers: self.layers,
            entries,
        }
    }

    /// Materialize with stored values, which must match the declared shapes.
    pub fn with_values(self, values: Vec<Tensor>) -> Result<ParamSet> {
        if values.len() != self.entries.len() {
            return Err(format_err!(
                "expected {} tensors, found {}",
                self.entries.len(),
                values.len()
            ));
        }
        let entries = self
            .entries
            .into_iter()
            .zip(values)
            .map(|((name, layer, role, init, shape), value)| {
                if value.shape() != shape.as_slice() {
                    return Err(format_err!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        value.shape(),
                        shape
                    ));
                }
                Ok(ParamEntry {
                    value: Arc::new(value),
                    name,
                    layer,
                    role,
                    init,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ParamSet {
            layers: self.layers,
            entries,
        })
    }

    /// Names and shapes in declaration order.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|(n, _, _, _, s)| (n.clone(), s.clone()))
            .collect()
    }
}

impl ParamSet {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.entries[idx].value
    }

    pub fn set_value(&mut self, idx: usize, t: Tensor) {
        assert_eq!(
            t.shape(),
            self.entries[idx].value.shape(),
            "set_value shape mismatch"
        );
        self.entries[idx].value = Arc::new(t);
    }

    /// SHA-256 over names, shapes and little-endian values, prefixed by `tag`.
    pub fn digest(&self, tag: &str) -> String {
        let mut h = Sha256::new();
        h.update(tag.as_bytes());
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Re-draw every entry belonging to layers `[0, upto)` from its initializer.
    pub fn reinit_layers(&mut self, upto: usize, rng: &mut impl Rng) {
        for e in self.entries.iter_mut().filter(|e| e.layer < upto) {
            e.value = Arc::new(e.init.sample(e.value.shape(), rng));
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }

    /// Fold batch statistics into running estimates, `r <- (1 - m) r + m b`.
    pub fn apply_batch_stats(&mut self, stats: &[(BnRef, BatchStats)], momentum: f64) {
        for (r, s) in stats {
            let blend = |old: &Tensor, new: &[f64]| {
                Tensor::from_fn(old.shape(), |i| {
                    (1.0 - momentum) * old.data()[i] + momentum * new[i]
                })
            };
            let m = blend(self.value(r.mean), &s.mean);
            let v = blend(self.value(r.var), &s.var_unbiased);
            self.set_value(r.mean, m);
            self.set_value(r.var, v);
        }
    }
}

/// Parameters bound onto a [`Graph`] for one forward pass.
pub struct Bound<'g> {
    pub graph: &'g Graph,
    vars: Vec<Var<'g>>,
    train: bool,
    stats: RefCell<Vec<(BnRef, BatchStats)>>,
}

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-6;

impl<'g> Bound<'g> {
    /// `trainable`: register trainable entries as gradient leaves.
    /// `train_mode`: batch norm uses batch statistics (and records them).
    pub fn new(graph: &'g Graph, params: &ParamSet, trainable: bool, train_mode: bool) -> Self {
        let vars = params
            .entries
            .iter()
            .map(|e| {
                if trainable && e.role.trainable() {
                    graph.param(Arc::clone(&e.value))
                } else {
                    graph.constant(Arc::clone(&e.value))
                }
            })
            .collect();
        Self {
            graph,
            vars,
            train: train_mode,
            stats: RefCell::new(Vec::new()),
        }
    }

    /// Binds already-created graph nodes, aligned with a [`ParamSet`]'s entries.
    pub fn from_vars(graph: &'g Graph, vars: Vec<Var<'g>>, train_mode: bool) -> Self {
        Self {
            graph,
            vars,
            train: train_mode,
            stats: RefCell::new(Vec::new()),
        }
    }

    pub fn var(&self, idx: usize) -> Var<'g> {
        self.vars[idx]
    }

    pub fn train_mode(&self) -> bool {
        self.train
    }

    pub fn conv(&self, r: ConvRef, x: Var<'g>, stride: usize, pad: usize) -> Var<'g> {
        autograd::conv2d(
            x,
            self.vars[r.weight],
            r.bias.map(|b| self.vars[b]),
            stride,
            pad,
        )
    }

    pub fn batch_norm(&self, r: BnRef, x: Var<'g>) -> Var<'g> {
        if self.train {
            let (y, s) =
                autograd::batch_norm_train(x, self.vars[r.scale], self.vars[r.shift], BN_EPS);
            self.stats.borrow_mut().push((r, s));
            y
        } else {
            autograd::batch_norm_eval(
                x,
                self.vars[r.scale],
                self.vars[r.shift],
                self.vars[r.mean],
                self.vars[r.var],
                BN_EPS,
            )
        }
    }

    pub fn linear(&self, r: LinearRef, x: Var<'g>) -> Var<'g> {
        autograd::linear(x, self.vars[r.weight], self.vars[r.bias])
    }

    pub fn layer_norm(&self, r: NormRef, x: Var<'g>) -> Var<'g> {
        autograd::layer_norm(x, self.vars[r.scale], self.vars[r.shift], LN_EPS)
    }

    pub fn take_stats(&self) -> Vec<(BnRef, BatchStats)> {
        std::mem::take(&mut self.stats.borrow_mut())
    }

    /// Gradients for every entry (zeros for non-trainable ones).
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    }
}
