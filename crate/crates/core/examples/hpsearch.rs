//! Constrained loss-weight search on a cheap analytic objective, comparing
//! the guided search with pure random sampling.
//!
//! `cargo run --release --example hpsearch -- [trials]`

use ptame::training::{hyperparameter_search, LossWeights, SearchResult, SearchSpace};

/// Peaks at `lambda1 = 0.6`, `lambda2 = 0.25`, `lambda_area = 1`.
pub fn objective(w: &LossWeights) -> f64 {
    let area = if w.lambda_area == 1.0 { 0.0 } else { 0.1 };
    1.0 - (w.lambda1 - 0.6).powi(2) - (w.lambda2 - 0.25).powi(2) - area
}

pub fn run(trials: usize, guided: bool, seed: u64) -> ptame::Result<SearchResult> {
    let mut space = SearchSpace::new(10);
    space.guided = guided;
    hyperparameter_search(&space, trials, seed, |_, w| Ok(objective(w)))
}

#[allow(dead_code)]
fn main() -> ptame::Result<()> {
    let trials = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(20);
    for guided in [true, false] {
        let r = run(trials, guided, 0)?;
        let best = &r.trials[r.best_index];
        println!(
            "{}: best {:.4} at trial {} with {:?}",
            if guided { "guided" } else { "random" },
            best.score,
            r.best_index,
            best.weights
        );
    }
    print!("{}", run(trials, true, 0)?.log_csv());
    Ok(())
}
