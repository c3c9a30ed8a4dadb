//! Drives the `ptame` command line in-process on a tiny synthetic dataset:
//! trains models and attention, explains an image and evaluates.
//!
//! `cargo run --release --example command_line -- [work_dir]`

use std::path::{Path, PathBuf};

use ptame::io::cli::{run as cli, Manifest, ATTENTION_FILE};
use ptame::io::render::RgbImage;
use ptame::model_zoo::synth::shapes10;

/// Runs the commands and returns the manifests of the output directories.
pub fn run(dir: &Path) -> ptame::Result<Vec<(String, Manifest)>> {
    std::fs::create_dir_all(dir)?;
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    let data = ["--train-size", "200", "--test-size", "20"];
    let config = dir.join("train.cfg");
    std::fs::write(
        &config,
        "batch_size = 32\nmax_lr = 1e-3\nseed = 1\nlambda1 = 0.5\nlambda2 = 0.3\nlambda_area = 1\n",
    )?;
    let raw = &shapes10(1, 99)[0];
    let mut png = RgbImage::filled(32, 32, [0, 0, 0]);
    for p in 0..32 * 32 {
        png.put(
            p % 32,
            p / 32,
            [raw.pixels[p], raw.pixels[1024 + p], raw.pixels[2048 + p]],
        );
    }
    std::fs::write(dir.join("input.png"), png.to_png(&[])?)?;

    let commands: Vec<Vec<String>> = vec![
        [
            "train-models",
            "--out",
            &s(dir.join("models")),
            "--backbone-epochs",
            "1",
            "--aux-epochs",
            "1",
        ]
        .iter()
        .chain(&data)
        .map(|v| v.to_string())
        .collect(),
        [
            "train",
            "--config",
            &s(config.clone()),
            "--models",
            &s(dir.join("models")),
            "--out",
            &s(dir.join("train")),
            "--max-steps",
            "3",
        ]
        .iter()
        .chain(&data)
        .map(|v| v.to_string())
        .collect(),
        [
            "explain",
            "--models",
            &s(dir.join("models")),
            "--attention",
            &s(dir.join("train").join(ATTENTION_FILE)),
            "--image",
            &s(dir.join("input.png")),
            "--out",
            &s(dir.join("explain")),
        ]
        .iter()
        .map(|v| v.to_string())
        .collect(),
        [
            "evaluate",
            "--models",
            &s(dir.join("models")),
            "--attention",
            &s(dir.join("train").join(ATTENTION_FILE)),
            "--limit",
            "10",
            "--out",
            &s(dir.join("eval")),
        ]
        .iter()
        .chain(&data)
        .map(|v| v.to_string())
        .collect(),
    ];
    for args in commands {
        let code = cli(std::iter::once("ptame".to_string()).chain(args.iter().cloned()));
        if code != 0 {
            return Err(ptame::Error::Internal(format!(
                "`ptame {}` exited with {code}",
                args.join(" ")
            )));
        }
    }
    ["models", "train", "explain", "eval"]
        .iter()
        .map(|d| Ok((d.to_string(), Manifest::read(&dir.join(d))?)))
        .collect()
}

#[allow(dead_code)]
fn main() -> ptame::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("ptame_cli"), PathBuf::from);
    for (name, manifest) in run(&dir)? {
        for (file, entry) in manifest.files {
            println!(
                "{name}/{file}  seed {}  sha256 {}",
                entry.seed,
                &entry.sha256[..16]
            );
        }
    }
    Ok(())
}
