//! Model parameter randomization test: SSIM between explanations of the
//! intact backbone and of progressively re-initialized copies.
//!
//! `cargo run --release --example sanity_check`

use ptame::attention::{AttentionMechanism, Explainer, PtameExplainer};
use ptame::model_zoo::synth::shapes10;
use ptame::model_zoo::{Arch, ClassifierHandle, Dataset, Normalization};
use ptame::pipeline::attention_spec;
use ptame::sanity::{mprt, MprtCurve};

/// Each randomized backbone gets a fresh attention seeded from its weights,
/// standing in for retraining.
pub fn run(probes: usize, seed: u64) -> ptame::Result<MprtCurve> {
    let raw = shapes10(probes, seed);
    let norm = Normalization::fit(&raw, 3)?;
    let data = Dataset::from_raw(&raw, [3, 32, 32], 10, norm.clone())?;
    let backbone =
        ClassifierHandle::init(Arch::toy_vgg(10), [3, 32, 32], norm.clone(), seed)?.freeze();
    let aux =
        ClassifierHandle::init(Arch::toy_resnet_aux(10), [3, 32, 32], norm, seed + 1)?.freeze();
    let spec = attention_spec(&aux, 10)?;
    mprt(
        &backbone,
        |k, _model| -> ptame::Result<Box<dyn Explainer>> {
            let mech = AttentionMechanism::new(spec.clone(), seed + k as u64)?;
            Ok(Box::new(PtameExplainer::new(aux.clone(), mech)?))
        },
        data.images(),
        seed,
    )
}

#[allow(dead_code)]
fn main() -> ptame::Result<()> {
    print!("{}", run(8, 0)?.to_csv());
    Ok(())
}
