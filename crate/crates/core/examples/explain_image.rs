//! Explains one image: writes the binary explanation file with its sidecar
//! and a heatmap overlay, then reads the file back.
//!
//! `cargo run --release --example explain_image -- [out_dir]`

use std::path::{Path, PathBuf};

use ptame::attention::{select_class_map, AttentionMechanism, Explainer, PtameExplainer};
use ptame::io::explanation::{export_with_sidecar, import_explanation, Sidecar};
use ptame::io::render::{render_heatmap, Upscale};
use ptame::model_zoo::synth::shapes10;
use ptame::model_zoo::{model_truth, Arch, ClassifierHandle, Normalization};
use ptame::pipeline::attention_spec;

pub struct Summary {
    pub explanation: PathBuf,
    pub heatmap: PathBuf,
    pub class: usize,
    pub identical: bool,
}

pub fn run(out: &Path, seed: u64) -> ptame::Result<Summary> {
    std::fs::create_dir_all(out)?;
    let raw = shapes10(64, seed);
    let norm = Normalization::fit(&raw, 3)?;
    // Untrained models keep the example fast; the file formats are the same.
    let backbone =
        ClassifierHandle::init(Arch::toy_vgg(10), [3, 32, 32], norm.clone(), seed)?.freeze();
    let aux = ClassifierHandle::init(
        Arch::toy_resnet_aux(10),
        [3, 32, 32],
        norm.clone(),
        seed + 1,
    )?
    .freeze();
    let explainer = PtameExplainer::new(
        aux.clone(),
        AttentionMechanism::new(attention_spec(&aux, 10)?, seed)?,
    )?;

    let image = ptame::model_zoo::ImageTensor::from_u8(&raw[0].pixels, [3, 32, 32], norm)?;
    let class = model_truth(&backbone.classify(&image)?)?;
    let maps = explainer.explain(&image)?;
    let explanation = out.join("image0.pexp");
    let sidecar = Sidecar {
        seed,
        config_digest: explainer.attention().digest(),
        explainer: explainer.id(),
        class,
        model_truth: class,
    };
    export_with_sidecar(&maps, &explanation, &sidecar)?;

    let heat = render_heatmap(
        &select_class_map(&maps, class)?,
        Some(&image),
        Upscale::Bilinear,
    )?;
    let heatmap = out.join("image0_heatmap.png");
    std::fs::write(
        &heatmap,
        heat.to_png(&[("seed", seed.to_string()), ("class", class.to_string())])?,
    )?;

    let back = import_explanation(&explanation)?;
    let identical = back
        .data()
        .data()
        .iter()
        .zip(maps.data().data())
        .all(|(a, b)| *a == (*b as f32) as f64);
    Ok(Summary {
        explanation,
        heatmap,
        class,
        identical,
    })
}

#[allow(dead_code)]
fn main() -> ptame::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("ptame_explain"), PathBuf::from);
    let s = run(&out, 0)?;
    println!(
        "class {} explained: {} and {}",
        s.class,
        s.explanation.display(),
        s.heatmap.display()
    );
    println!("round trip at f32 precision: {}", s.identical);
    Ok(())
}
