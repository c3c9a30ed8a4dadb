//! Network architectures and their forward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Var};
use crate::error::{config_err, Result};
use crate::nn::{BnRef, Bound, ConvRef, LinearRef, NormRef, ParamBuilder, ParamSet};

/// Architecture description; everything needed to rebuild the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    /// Stacked `conv3x3 -> BN -> ReLU [-> conv3x3 -> BN -> ReLU] -> maxpool` blocks,
    /// global average pooling and a linear head.
    Vgg {
        in_channels: usize,
        widths: Vec<usize>,
        convs_per_block: usize,
        classes: usize,
    },
    /// Residual stages, each halving resolution; stage outputs are the
    /// extractable feature layers `stage1..stageN`.
    ResNet {
        in_channels: usize,
        widths: Vec<usize>,
        classes: usize,
    },
    /// Patch-embedding transformer with a class token.
    Vit {
        in_channels: usize,
        image_size: usize,
        patch: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_dim: usize,
        classes: usize,
    },
    /// Flatten followed by one affine layer.
    Linear {
        in_channels: usize,
        height: usize,
        width: usize,
        classes: usize,
    },
}

impl Arch {
    /// Small VGG-style backbone for 32x32 inputs.
    pub fn toy_vgg(classes: usize) -> Self {
        Arch::Vgg {
            in_channels: 3,
            widths: vec![32, 64, 128],
            convs_per_block: 1,
            classes,
        }
    }

    /// Four-stage residual auxiliary network; on 32x32 inputs the stage outputs
    /// are (64,16,16), (128,8,8), (256,4,4), (512,2,2).
    pub fn toy_resnet_aux(classes: usize) -> Self {
        Arch::ResNet {
            in_channels: 3,
            widths: vec![64, 128, 256, 512],
            classes,
        }
    }

    /// Small vision transformer: patch 4, 4 heads, 4 blocks.
    pub fn toy_vit(classes: usize) -> Self {
        Arch::Vit {
            in_channels: 3,
            image_size: 32,
            patch: 4,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_dim: 128,
            classes,
        }
    }

    pub fn id(&self) -> String {
        match self {
            Arch::Vgg {
                widths,
                convs_per_block,
                ..
            } => format!("vgg-{}x{}", join(widths), convs_per_block),
            Arch::ResNet { widths, .. } => format!("resnet-{}", join(widths)),
            Arch::Vit {
                dim,
                depth,
                heads,
                patch,
                ..
            } => format!("vit-p{patch}-d{dim}-l{depth}-h{heads}"),
            Arch::Linear {
                in_channels,
                height,
                width,
                ..
            } => format!("linear-{in_channels}x{height}x{width}"),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Arch::Vgg { classes, .. }
            | Arch::ResNet { classes, .. }
            | Arch::Vit { classes, .. }
            | Arch::Linear { classes, .. } => *classes,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Arch::Vgg { in_channels, .. }
            | Arch::ResNet { in_channels, .. }
            | Arch::Vit { in_channels, .. }
            | Arch::Linear { in_channels, .. } => *in_channels,
        }
    }

    /// Spatial input size required by the architecture, if fixed.
    pub fn fixed_input(&self) -> Option<(usize, usize)> {
        match self {
            Arch::Vit { image_size, .. } => Some((*image_size, *image_size)),
            Arch::Linear { height, width, .. } => Some((*height, *width)),
            _ => None,
        }
    }

    /// Named intermediate outputs, shallowest first. Empty for non-convolutional models.
    pub fn feature_layers(&self) -> Vec<String> {
        match self {
            Arch::Vgg { widths, .. } => (1..=widths.len()).map(|i| format!("block{i}")).collect(),
            Arch::ResNet { widths, .. } => {
                (1..=widths.len()).map(|i| format!("stage{i}")).collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Arch::Vgg {
                widths,
                convs_per_block,
                classes,
                ..
            } => !widths.is_empty() && *convs_per_block >= 1 && *classes >= 1,
            Arch::ResNet {
                widths, classes, ..
            } => !widths.is_empty() && *classes >= 1,
            Arch::Vit {
                image_size,
                patch,
                dim,
                heads,
                depth,
                classes,
                ..
            } => {
                *patch > 0
                    && image_size % patch == 0
                    && *heads > 0
                    && dim % heads == 0
                    && *depth >= 1
                    && *classes >= 1
            }
            Arch::Linear { classes, .. } => *classes >= 1,
        };
        if ok && self.in_channels() >= 1 {
            Ok(())
        } else {
            Err(config_err!("invalid architecture {:?}", self))
        }
    }

    pub(crate) fn layout(&self) -> (Layout, ParamBuilder) {
        let mut b = ParamBuilder::new();
        let layout = match self {
            Arch::Vgg {
                in_channels,
                widths,
                convs_per_block,
                classes,
            } => {
                let mut blocks = Vec::new();
                let mut cin = *in_channels;
                for (i, &w) in widths.iter().enumerate() {
                    let convs = (0..*convs_per_block)
                        .map(|j| {
                            let suffix = if *convs_per_block == 1 {
                                String::new()
                            } else {
                                format!("_{}", j + 1)
                            };
                            let conv =
                                b.conv(&format!("block{}.conv{}", i + 1, suffix), cin, w, 3, false);
                            let bn = b.batch_norm(&format!("block{}.bn{}", i + 1, suffix), w);
                            cin = w;
                            (conv, bn)
                        })
                        .collect();
                    blocks.push(convs);
                }
                let head = b.linear("head", cin, *classes);
                Layout::Vgg { blocks, head }
            }
            Arch::ResNet {
                in_channels,
                widths,
                classes,
            } => {
                let mut stages = Vec::new();
                let mut cin = *in_channels;
                for (i, &w) in widths.iter().enumerate() {
                    let p = format!("stage{}", i + 1);
                    stages.push(ResStage {
                        conv_a: b.conv(&format!("{p}.conv_a"), cin, w, 3, false),
                        bn_a: b.batch_norm(&format!("{p}.bn_a"), w),
                        conv_b: b.conv(&format!("{p}.conv_b"), w, w, 3, false),
                        bn_b: b.batch_norm(&format!("{p}.bn_b"), w),
                        short: b.conv(&format!("{p}.shortcut"), cin, w, 1, false),
                        bn_s: b.batch_norm(&format!("{p}.bn_shortcut"), w),
                    });
                    cin = w;
                }
                let head = b.linear("head", cin, *classes);
                Layout::ResNet { stages, head }
            }
            Arch::Vit {
                in_channels,
                image_size,
                patch,
                dim,
                depth,
                heads,
                mlp_dim,
                classes,
            } => {
                let tokens = (image_size / patch).pow(2);
                let embed = b.conv("patch_embed", *in_channels, *dim, *patch, true);
                let cls = b.embedding("cls_token", &[*dim], 0.02);
                let pos = b.embedding("pos_embed", &[tokens + 1, *dim], 0.02);
                let blocks = (0..*depth)
                    .map(|i| {
                        let p = format!("block{}", i + 1);
                        VitBlock {
                            ln1: b.layer_norm(&format!("{p}.ln1"), *dim),
                            q: b.linear(&format!("{p}.q"), *dim, *dim),
                            k: b.linear(&format!("{p}.k"), *dim, *dim),
                            v: b.linear(&format!("{p}.v"), *dim, *dim),
                            proj: b.linear(&format!("{p}.proj"), *dim, *dim),
                            ln2: b.layer_norm(&format!("{p}.ln2"), *dim),
                            fc1: b.linear(&format!("{p}.fc1"), *dim, *mlp_dim),
                            fc2: b.linear(&format!("{p}.fc2"), *mlp_dim, *dim),
                        }
                    })
                    .collect();
                let ln = b.layer_norm("ln_final", *dim);
                let head = b.linear("head", *dim, *classes);
                Layout::Vit {
                    embed,
                    patch: *patch,
                    heads: *heads,
                    cls,
                    pos,
                    blocks,
                    ln,
                    head,
                }
            }
            Arch::Linear {
                in_channels,
                height,
                width,
                classes,
            } => Layout::Linear {
                head: b.linear("head", in_channels * height * width, *classes),
            },
        };
        (layout, b)
    }

    pub(crate) fn init(&self, rng: &mut impl Rng) -> (Layout, ParamSet) {
        let (layout, b) = self.layout();
        (layout, b.build(rng))
    }
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join("-")
}

#[derive(Clone, Debug)]
pub(crate) struct ResStage {
    conv_a: ConvRef,
    bn_a: BnRef,
    conv_b: ConvRef,
    bn_b: BnRef,
    short: ConvRef,
    bn_s: BnRef,
}

#[derive(Clone, Debug)]
pub(crate) struct VitBlock {
    ln1: NormRef,
    q: LinearRef,
    k: LinearRef,
    v: LinearRef,
    proj: LinearRef,
    ln2: NormRef,
    fc1: LinearRef,
    fc2: LinearRef,
}

#[derive(Clone, Debug)]
pub(crate) enum Layout {
    Vgg {
        blocks: Vec<Vec<(ConvRef, BnRef)>>,
        head: LinearRef,
    },
    ResNet {
        stages: Vec<ResStage>,
        head: LinearRef,
    },
    Vit {
        embed: ConvRef,
        patch: usize,
        heads: usize,
        cls: usize,
        pos: usize,
        blocks: Vec<VitBlock>,
        ln: NormRef,
        head: LinearRef,
    },
    Linear {
        head: LinearRef,
    },
}

pub(crate) struct NetOut<'g> {
    pub logits: Option<Var<'g>>,
    pub features: Vec<Var<'g>>,
}

impl Layout {
    /// Runs the network. When `stop_after` is set, returns after that many
    /// feature stages without computing logits.
    pub(crate) fn forward<'g>(
        &self,
        b: &Bound<'g>,
        x: Var<'g>,
        stop_after: Option<usize>,
    ) -> NetOut<'g> {
        let mut features = Vec::new();
        let done = |f: &Vec<Var<'g>>| stop_after.is_some_and(|s| f.len() >= s);
        match self {
            Layout::Vgg { blocks, head } => {
                let mut h = x;
                for block in blocks {
                    for &(conv, bn) in block {
                        h = b.batch_norm(bn, b.conv(conv, h, 1, 1)).relu();
                    }
                    h = autograd::max_pool2(h);
                    features.push(h);
                    if done(&features) {
                        return NetOut {
                            logits: None,
                            features,
                        };
                    }
                }
                let logits = b.linear(*head, autograd::global_avg_pool(h));
                NetOut {
                    logits: Some(logits),
                    features,
                }
            }
            Layout::ResNet { stages, head } => {
                let mut h = x;
                for s in stages {
                    let main = b.batch_norm(s.bn_a, b.conv(s.conv_a, h, 2, 1)).relu();
                    let main = b.batch_norm(s.bn_b, b.conv(s.conv_b, main, 1, 1));
                    let short = b.batch_norm(s.bn_s, b.conv(s.short, h, 2, 0));
                    h = main.add(short).relu();
                    features.push(h);
                    if done(&features) {
                        return NetOut {
                            logits: None,
                            features,
                        };
                    }
                }
                let logits = b.linear(*head, autograd::global_avg_pool(h));
                NetOut {
                    logits: Some(logits),
                    features,
                }
            }
            Layout::Vit {
                embed,
                patch,
                heads,
                cls,
                pos,
                blocks,
                ln,
                head,
            } => {
                let e = b.conv(*embed, x, *patch, 0);
                let (n, d, gh, gw) = {
                    let s = e.shape();
                    (s[0], s[1], s[2], s[3])
                };
                let tokens = autograd::transpose_last2(e.reshape(&[n, d, gh * gw]));
                let mut h = autograd::prepend_token(tokens, b.var(*cls));
                h = autograd::add_broadcast(h, b.var(*pos));
                for blk in blocks {
                    let a = b.layer_norm(blk.ln1, h);
                    let att = autograd::multi_head_attention(
                        b.linear(blk.q, a),
                        b.linear(blk.k, a),
                        b.linear(blk.v, a),
                        *heads,
                    );
                    h = h.add(b.linear(blk.proj, att));
                    let m = b.layer_norm(blk.ln2, h);
                    h = h.add(b.linear(blk.fc2, b.linear(blk.fc1, m).gelu()));
                }
                let logits = b.linear(*head, autograd::first_token(b.layer_norm(*ln, h)));
                NetOut {
                    logits: Some(logits),
                    features,
                }
            }
            Layout::Linear { head } => {
                let s = x.shape();
                let flat = x.reshape(&[s[0], s[1..].iter().product()]);
                NetOut {
                    logits: Some(b.linear(*head, flat)),
                    features,
                }
            }
        }
    }
}
