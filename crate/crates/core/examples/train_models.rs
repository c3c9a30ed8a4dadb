//! Trains the toy backbone and auxiliary classifier on synthetic shapes and
//! reports their test accuracies.
//!
//! `cargo run --release --example train_models -- [train_images] [epochs]`

use ptame::model_zoo::ClassifierHandle;
use ptame::pipeline::{test_accuracy, train_models, DataSource, ModelsConfig, RawSplits};

pub struct Summary {
    pub backbone: ClassifierHandle,
    pub aux: ClassifierHandle,
    pub backbone_accuracy: f64,
    pub aux_accuracy: f64,
}

pub fn run(train_images: usize, epochs: usize, seed: u64) -> ptame::Result<Summary> {
    let raw = RawSplits::load(&DataSource::Shapes10 {
        train: train_images,
        test: train_images / 5 + 1,
        seed,
    })?;
    let splits = raw.datasets(&raw.fit_normalization()?)?;
    let mut cfg = ModelsConfig::toy(raw.classes, seed);
    cfg.backbone_train.epochs = epochs;
    cfg.aux_train.epochs = epochs;
    let (backbone, aux) = train_models(&splits, &cfg)?;
    let backbone_accuracy = test_accuracy(&backbone, &splits)?;
    let aux_accuracy = test_accuracy(&aux, &splits)?;
    Ok(Summary {
        backbone,
        aux,
        backbone_accuracy,
        aux_accuracy,
    })
}

#[allow(dead_code)]
fn main() -> ptame::Result<()> {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let s = run(
        args.first().copied().unwrap_or(2000),
        args.get(1).copied().unwrap_or(2),
        0,
    )?;
    println!(
        "{}: test accuracy {:.3}",
        s.backbone.arch_id(),
        s.backbone_accuracy
    );
    println!("{}: test accuracy {:.3}", s.aux.arch_id(), s.aux_accuracy);
    Ok(())
}
