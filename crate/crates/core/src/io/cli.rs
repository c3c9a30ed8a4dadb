//! The `ptame` command line.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors, 1 for
//! everything else. Each output directory gets a `manifest.json` listing
//! every file written with its SHA-256, the seed and the config digest.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{
    select_class_map, AttentionMechanism, AttentionMeta, Explainer, PtameExplainer,
};
use crate::error::{config_err, input_err, Error, Result};
use crate::evaluation::{evaluate, EvalConfig, RandomExplainer, DEFAULT_NOISE_SCALE};
use crate::io::explanation::{encode_explanation, Sidecar, HEADER_LEN};
use crate::io::render::{decode_png, render_heatmap, Upscale};
use crate::model_zoo::{model_truth, Classifier, ClassifierHandle, ImageTensor};
use crate::pipeline::{
    mprt_with_retraining, search_weights, train_attention, train_models, DataSource, ModelsConfig,
    RawSplits, Splits,
};
use crate::training::config::KeyValues;
use crate::training::{trace_csv, SearchSpace, TrainConfig};

pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const AUX_FILE: &str = "aux.ckpt";
pub const ATTENTION_FILE: &str = "attention.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(
    name = "ptame",
    version,
    about = "Trainable attention explanations for image classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// `shapes10` or a CIFAR-10 binary directory.
    #[arg(long, default_value = "shapes10")]
    data: String,
    /// Synthetic training images.
    #[arg(long, default_value_t = 5000)]
    train_size: usize,
    /// Synthetic test images.
    #[arg(long, default_value_t = 1000)]
    test_size: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

impl DataArgs {
    fn source(&self) -> DataSource {
        DataSource::parse(&self.data, self.train_size, self.test_size, self.data_seed)
    }

    fn record(&self, kv: &mut KeyValues) {
        kv.insert("arg.data", &self.data);
        if self.data == "shapes10" {
            kv.insert("arg.train_size", self.train_size);
            kv.insert("arg.test_size", self.test_size);
            kv.insert("arg.data_seed", self.data_seed);
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the toy backbone and auxiliary classifier.
    TrainModels {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        backbone_epochs: usize,
        #[arg(long, default_value_t = 3)]
        aux_epochs: usize,
    },
    /// Train the attention mechanism.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Explain one PNG image.
    Explain {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        attention: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// `auto` for the backbone's prediction, or a class index.
        #[arg(long, default_value = "auto")]
        class: String,
        /// Nearest-neighbour upscaling in the heatmap.
        #[arg(long)]
        nearest: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// AD/IC and deletion metrics on the test split.
    Evaluate {
        #[arg(long)]
        models: PathBuf,
        /// Required for `--explainer ptame`.
        #[arg(long)]
        attention: Option<PathBuf>,
        #[arg(long, default_value = "ptame")]
        explainer: String,
        #[command(flatten)]
        data: DataArgs,
        /// Evaluate only the first N test images.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_NOISE_SCALE)]
        noise_scale: f64,
        /// Report unnormalized confidence drops.
        #[arg(long)]
        unnormalized_ad: bool,
        /// Map size of the random explainer when no attention is given.
        #[arg(long, default_value_t = 8)]
        map_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter randomization test with per-model retraining.
    Sanity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        attention: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 64)]
        probes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search the loss weights.
    Hpsearch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Pure random search.
        #[arg(long)]
        random: bool,
        /// Fraction of the training split used per trial.
        #[arg(long, default_value_t = 1.0)]
        subsample: f64,
        /// Stop each trial after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_NOISE_SCALE)]
        noise_scale: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// 2 for configuration errors, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// One entry of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub seed: u64,
    pub config_digest: String,
    pub sha256: String,
}

/// File name to provenance, for every file written into a directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Writes files into an output directory and records them in its manifest.
struct Outputs {
    dir: PathBuf,
    command: &'static str,
    seed: u64,
    digest: String,
    manifest: Manifest,
}

impl Outputs {
    fn create(dir: &Path, command: &'static str, seed: u64, digest: String) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            seed,
            digest,
            manifest: Manifest::read(dir)?,
        })
    }

    fn png_text(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("config_digest", self.digest.clone()),
        ]
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)?;
        let entry = ManifestEntry {
            command: self.command.to_string(),
            seed: self.seed,
            config_digest: self.digest.clone(),
            sha256: hex::encode(Sha256::digest(bytes)),
        };
        self.manifest.files.insert(name.to_string(), entry);
        info!("wrote {}", path.display());
        Ok(path)
    }

    fn finish(self) -> Result<()> {
        fs::write(
            self.dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        Ok(())
    }
}

fn read_config(path: &Path) -> Result<KeyValues> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_err!("cannot read config {}: {e}", path.display()))?;
    KeyValues::parse(&text)
}

/// Fails on the first missing loss-weight key, naming it.
fn require_loss_keys(kv: &KeyValues) -> Result<()> {
    for key in ["lambda1", "lambda2", "lambda_area"] {
        kv.get_str(key)?;
    }
    Ok(())
}

fn read_file(path: &Path, what: &str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| input_err!("cannot read {what} {}: {e}", path.display()))
}

fn load_models(dir: &Path) -> Result<(ClassifierHandle, ClassifierHandle)> {
    let backbone = ClassifierHandle::load_checkpoint(&read_file(
        &dir.join(BACKBONE_FILE),
        "backbone checkpoint",
    )?)?;
    let aux = ClassifierHandle::load_checkpoint(&read_file(
        &dir.join(AUX_FILE),
        "auxiliary checkpoint",
    )?)?;
    Ok((backbone, aux))
}

fn load_explainer(path: &Path, aux: &ClassifierHandle) -> Result<(PtameExplainer, AttentionMeta)> {
    let (mech, meta) =
        AttentionMechanism::load_checkpoint(&read_file(path, "attention checkpoint")?)?;
    if meta
        .aux_digest
        .as_deref()
        .is_some_and(|d| d != aux.weights_digest())
    {
        return Err(config_err!(
            "attention {} was trained with a different auxiliary model",
            path.display()
        ));
    }
    Ok((PtameExplainer::new(aux.clone(), mech)?, meta))
}

fn load_splits(data: &DataArgs, backbone: &ClassifierHandle) -> Result<Splits> {
    let raw = RawSplits::load(&data.source())?;
    if raw.shape != backbone.input_shape() {
        return Err(config_err!(
            "data shape {:?} does not match the backbone input {:?}",
            raw.shape,
            backbone.input_shape()
        ));
    }
    raw.datasets(backbone.normalization())
}

fn file_digest(kv: &KeyValues, extra: &[(&str, String)]) -> String {
    let mut kv = kv.clone();
    for (k, v) in extra {
        kv.insert(k, v);
    }
    kv.digest()
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::TrainModels {
            data,
            out,
            seed,
            backbone_epochs,
            aux_epochs,
        } => {
            let mut kv = KeyValues::default();
            data.record(&mut kv);
            let digest = file_digest(
                &kv,
                &[
                    ("arg.seed", seed.to_string()),
                    ("arg.backbone_epochs", backbone_epochs.to_string()),
                    ("arg.aux_epochs", aux_epochs.to_string()),
                ],
            );
            let raw = RawSplits::load(&data.source())?;
            let splits = raw.datasets(&raw.fit_normalization()?)?;
            let mut cfg = ModelsConfig::toy(raw.classes, seed);
            cfg.backbone_train.epochs = backbone_epochs;
            cfg.aux_train.epochs = aux_epochs;
            let (backbone, aux) = train_models(&splits, &cfg)?;
            let mut outs = Outputs::create(&out, "train-models", seed, digest)?;
            outs.write(BACKBONE_FILE, &backbone.save_checkpoint())?;
            outs.write(AUX_FILE, &aux.save_checkpoint())?;
            let summary = serde_json::json!({
                "seed": seed,
                "backbone": { "arch": backbone.arch_id(), "val_accuracy": backbone.meta().val_accuracy,
                              "test_accuracy": crate::pipeline::test_accuracy(&backbone, &splits)? },
                "aux": { "arch": aux.arch_id(), "val_accuracy": aux.meta().val_accuracy,
                         "test_accuracy": crate::pipeline::test_accuracy(&aux, &splits)? },
            });
            outs.write(
                "models.json",
                serde_json::to_string_pretty(&summary)?.as_bytes(),
            )?;
            outs.finish()
        }
        Command::Train {
            config,
            models,
            data,
            out,
            max_steps,
        } => {
            let kv = read_config(&config)?;
            let mut tc = kv.train_config()?;
            tc.max_steps = max_steps;
            require_loss_keys(&kv)?;
            let (backbone, aux) = load_models(&models)?;
            let weights = kv.loss_weights(backbone.num_classes())?;
            let mut dkv = kv.clone();
            data.record(&mut dkv);
            let digest = file_digest(&dkv, &[("arg.max_steps", format!("{max_steps:?}"))]);
            let splits = load_splits(&data, &backbone)?;
            let trained = train_attention(&backbone, &aux, &splits.train, &weights, &tc)?;
            let meta = trained.meta(&backbone, tc.seed, Some(digest.clone()));
            let mut outs = Outputs::create(&out, "train", tc.seed, digest)?;
            outs.write(
                ATTENTION_FILE,
                &trained.explainer.attention().save_checkpoint(&meta)?,
            )?;
            outs.write("trace.csv", trace_csv(&trained.trace).as_bytes())?;
            outs.write("config.txt", kv.to_text().as_bytes())?;
            outs.finish()
        }
        Command::Explain {
            models,
            attention,
            image,
            class,
            nearest,
            out,
        } => {
            let (backbone, aux) = load_models(&models)?;
            let (explainer, meta) = load_explainer(&attention, &aux)?;
            let decoded = decode_png(&read_file(&image, "image")?)?;
            if decoded.shape != backbone.input_shape() {
                return Err(input_err!(
                    "image is {:?}, the backbone expects {:?}",
                    decoded.shape,
                    backbone.input_shape()
                ));
            }
            let x = ImageTensor::from_u8(
                &decoded.planar,
                decoded.shape,
                backbone.normalization().clone(),
            )?;
            let truth = model_truth(&backbone.classify(&x)?)?;
            let c = match class.as_str() {
                "auto" => truth,
                s => s
                    .parse::<usize>()
                    .map_err(|_| config_err!("--class must be `auto` or an index, got {s:?}"))?,
            };
            if c >= backbone.num_classes() {
                return Err(input_err!(
                    "class {c} out of range for {} classes",
                    backbone.num_classes()
                ));
            }
            let maps = explainer.explain(&x)?;
            let digest = meta
                .config_digest
                .clone()
                .unwrap_or_else(|| explainer.attention().digest());
            let mut outs = Outputs::create(&out, "explain", meta.seed, digest.clone())?;
            let stem = image
                .file_stem()
                .map_or("image".into(), |s| s.to_string_lossy().into_owned());
            let pexp = outs.write(&format!("{stem}.pexp"), &encode_explanation(&maps))?;
            debug_assert_eq!(
                fs::metadata(&pexp)?.len() as usize,
                HEADER_LEN + 4 * maps.data().len()
            );
            let sidecar = Sidecar {
                seed: meta.seed,
                config_digest: digest,
                explainer: explainer.id(),
                class: c,
                model_truth: truth,
            };
            outs.write(
                &format!("{stem}.pexp.json"),
                serde_json::to_string_pretty(&sidecar)?.as_bytes(),
            )?;
            let mode = if nearest {
                Upscale::Nearest
            } else {
                Upscale::Bilinear
            };
            let heat = render_heatmap(&select_class_map(&maps, c)?, Some(&x), mode)?;
            let mut text = outs.png_text();
            text.push(("class", c.to_string()));
            outs.write(&format!("{stem}_heatmap.png"), &heat.to_png(&text)?)?;
            outs.finish()
        }
        Command::Evaluate {
            models,
            attention,
            explainer,
            data,
            limit,
            seed,
            noise_scale,
            unnormalized_ad,
            map_size,
            out,
        } => {
            let (backbone, aux) = load_models(&models)?;
            let mut kv = KeyValues::default();
            data.record(&mut kv);
            let cfg = EvalConfig {
                noise_scale,
                normalized_ad: !unnormalized_ad,
                seed,
            };
            let ptame = attention
                .as_deref()
                .map(|p| load_explainer(p, &aux))
                .transpose()?;
            let boxed: Box<dyn Explainer> = match explainer.as_str() {
                "ptame" => {
                    let (e, meta) = ptame.ok_or_else(|| {
                        config_err!("missing key `attention`: --explainer ptame needs --attention")
                    })?;
                    kv.insert("arg.attention", e.attention().digest());
                    if let Some(d) = meta.config_digest {
                        kv.insert("attention.config_digest", d);
                    }
                    Box::new(e)
                }
                "random" => {
                    let size = ptame
                        .as_ref()
                        .map_or((map_size, map_size), |(e, _)| e.attention().spec().map_size);
                    Box::new(RandomExplainer {
                        classes: backbone.num_classes(),
                        size,
                        seed,
                    })
                }
                other => {
                    return Err(config_err!(
                        "unknown explainer {other:?}; expected `ptame` or `random`"
                    ))
                }
            };
            let splits = load_splits(&data, &backbone)?;
            let test = limit.map_or(splits.test.clone(), |n| splits.test.take(n));
            let digest = file_digest(
                &kv,
                &[
                    ("arg.explainer", explainer.clone()),
                    ("arg.limit", format!("{limit:?}")),
                    ("arg.eval", serde_json::to_string(&cfg)?),
                    ("arg.backbone", backbone.weights_digest()),
                ],
            );
            let report = evaluate(&backbone, boxed.as_ref(), &test, &cfg)?;
            let mut outs = Outputs::create(&out, "evaluate", seed, digest)?;
            outs.write(
                &format!("report_{explainer}.json"),
                report.to_json()?.as_bytes(),
            )?;
            outs.write(
                &format!("report_{explainer}.csv"),
                report.to_csv().as_bytes(),
            )?;
            outs.finish()
        }
        Command::Sanity {
            config,
            models,
            attention,
            data,
            probes,
            out,
        } => {
            let kv = read_config(&config)?;
            let tc = kv.train_config()?;
            require_loss_keys(&kv)?;
            let (backbone, aux) = load_models(&models)?;
            let weights = kv.loss_weights(backbone.num_classes())?;
            let (explainer, _) = load_explainer(&attention, &aux)?;
            let splits = load_splits(&data, &backbone)?;
            if probes == 0 || probes > splits.test.len() {
                return Err(input_err!("--probes must be in 1..={}", splits.test.len()));
            }
            let mut dkv = kv.clone();
            data.record(&mut dkv);
            let digest = file_digest(
                &dkv,
                &[
                    ("arg.probes", probes.to_string()),
                    ("arg.attention", explainer.attention().digest()),
                ],
            );
            let probe_images = splits.test.take(probes).images().clone();
            let curve = mprt_with_retraining(
                &backbone,
                &explainer,
                &splits.train,
                &weights,
                &tc,
                &probe_images,
                tc.seed,
            )?;
            let mut outs = Outputs::create(&out, "sanity", tc.seed, digest)?;
            outs.write("mprt.csv", curve.to_csv().as_bytes())?;
            outs.write(
                "mprt.json",
                serde_json::to_string_pretty(&curve)?.as_bytes(),
            )?;
            let png = curve.to_png(&outs.png_text())?;
            outs.write("mprt.png", &png)?;
            outs.finish()
        }
        Command::Hpsearch {
            config,
            models,
            data,
            trials,
            random,
            subsample,
            max_steps,
            noise_scale,
            out,
        } => {
            let kv = read_config(&config)?;
            let tc = TrainConfig {
                max_steps,
                ..kv.train_config()?
            };
            let (backbone, aux) = load_models(&models)?;
            let classes = backbone.num_classes();
            let lambda_rand = kv.get_or("lambda_rand", tc.batch_size.min(classes).max(1))?;
            let mut space = SearchSpace::new(lambda_rand);
            space.guided = !random;
            if !(subsample > 0.0 && subsample <= 1.0) {
                return Err(config_err!(
                    "--subsample must be in (0, 1], got {subsample}"
                ));
            }
            let splits = load_splits(&data, &backbone)?;
            let n = ((splits.train.len() as f64 * subsample).ceil() as usize).max(1);
            let train = splits.train.take(n);
            let eval = EvalConfig {
                noise_scale,
                seed: tc.seed,
                ..EvalConfig::default()
            };
            let mut dkv = kv.clone();
            data.record(&mut dkv);
            let digest = file_digest(
                &dkv,
                &[
                    ("arg.trials", trials.to_string()),
                    ("arg.random", random.to_string()),
                    ("arg.subsample", subsample.to_string()),
                    ("arg.max_steps", format!("{max_steps:?}")),
                    ("arg.noise_scale", noise_scale.to_string()),
                ],
            );
            let result = search_weights(
                &backbone,
                &aux,
                &train,
                &splits.val,
                &space,
                trials,
                &tc,
                &eval,
            )?;
            let mut best = kv.clone();
            best.insert("lambda1", result.best.lambda1);
            best.insert("lambda2", result.best.lambda2);
            best.insert("lambda_area", result.best.lambda_area);
            best.insert("lambda_rand", result.best.lambda_rand);
            let mut outs = Outputs::create(&out, "hpsearch", tc.seed, digest)?;
            outs.write("search.csv", result.log_csv().as_bytes())?;
            outs.write("best.cfg", best.to_text().as_bytes())?;
            outs.finish()
        }
    }
}
