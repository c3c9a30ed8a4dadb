//! Trains the attention mechanism against a small backbone and prints the
//! loss trace and the per-branch contributions.
//!
//! `cargo run --release --example train_attention -- [train_images]`

use ptame::pipeline::{train_attention, train_models, DataSource, ModelsConfig, RawSplits};
use ptame::training::{trace_csv, LossWeights, StepRecord, TrainConfig};

pub struct Summary {
    pub trace: Vec<StepRecord>,
    pub contributions: Vec<f64>,
}

pub fn run(train_images: usize, seed: u64) -> ptame::Result<Summary> {
    let raw = RawSplits::load(&DataSource::Shapes10 {
        train: train_images,
        test: 10,
        seed,
    })?;
    let splits = raw.datasets(&raw.fit_normalization()?)?;
    let mut cfg = ModelsConfig::toy(raw.classes, seed);
    cfg.backbone_train.epochs = 1;
    cfg.aux_train.epochs = 1;
    let (backbone, aux) = train_models(&splits, &cfg)?;
    let weights = LossWeights::new(0.5, 0.3, 1.0, 10)?;
    let tc = TrainConfig {
        batch_size: 32,
        seed,
        ..TrainConfig::default()
    };
    let trained = train_attention(&backbone, &aux, &splits.train, &weights, &tc)?;
    let contributions = trained.explainer.attention().contributions()?;
    Ok(Summary {
        trace: trained.trace,
        contributions,
    })
}

#[allow(dead_code)]
fn main() -> ptame::Result<()> {
    let n = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(1000);
    let s = run(n, 0)?;
    print!("{}", trace_csv(&s.trace));
    println!(
        "branch contributions (shallowest first): {:?}",
        s.contributions
    );
    Ok(())
}
