//! Faithfulness metrics on a classifier whose decision depends only on a
//! known image region: the region indicator, its complement and random
//! saliency compared by AD/IC and MoRF/LeRF.
//!
//! `cargo run --release --example evaluate_metrics -- [images]`

use ptame::attention::Explainer;
use ptame::evaluation::synthetic::{FixedExplainer, RegionClassifier};
use ptame::evaluation::{evaluate, EvalConfig, EvalReport, RandomExplainer};

pub fn run(images: usize, seed: u64) -> ptame::Result<Vec<EvalReport>> {
    let model = RegionClassifier::quarter();
    let data = model.dataset(images, seed)?;
    let explainers: Vec<Box<dyn Explainer>> = vec![
        Box::new(FixedExplainer::oracle(&model)),
        Box::new(FixedExplainer::anti_oracle(&model)),
        Box::new(RandomExplainer {
            classes: 2,
            size: (16, 16),
            seed,
        }),
    ];
    let cfg = EvalConfig {
        seed,
        ..EvalConfig::default()
    };
    explainers
        .iter()
        .map(|e| evaluate(&model, e.as_ref(), &data, &cfg))
        .collect()
}

#[allow(dead_code)]
fn main() -> ptame::Result<()> {
    let n = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(200);
    for (i, r) in run(n, 0)?.iter().enumerate() {
        let csv = r.to_csv();
        let mut lines = csv.lines();
        let header = lines.next().unwrap_or_default();
        if i == 0 {
            println!("{header}");
        }
        lines.for_each(|l| println!("{l}"));
    }
    Ok(())
}
