//! Binary explanation files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `PEXP` |
//! | 1 | version, currently 1 |
//! | 4 | `C` as `u32` |
//! | 4 | `w_E` as `u32` |
//! | 4 | `h_E` as `u32` |
//! | `4 * C * w_E * h_E` | `f32` values, class-major, then row-major `(h_E, w_E)` |
//!
//! Values are stored as `f32`, so a round trip is exact for maps whose values
//! are representable in single precision and within `f32` rounding otherwise.
//! Run provenance lives in a JSON sidecar next to the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::ExplanationMaps;
use crate::error::{format_err, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PEXP";
pub const VERSION: u8 = 1;
/// Bytes before the payload.
pub const HEADER_LEN: usize = 17;

pub fn encode_explanation(e: &ExplanationMaps) -> Vec<u8> {
    let (h, w) = e.size();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * e.data().len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for d in [e.classes(), w, h] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in e.data().data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_explanation(bytes: &[u8]) -> Result<ExplanationMaps> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err!(
            "explanation file is {} bytes, shorter than its header",
            bytes.len()
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err!("bad magic {:?}", &bytes[..4]));
    }
    if bytes[4] != VERSION {
        return Err(format_err!(
            "unsupported explanation file version {}",
            bytes[4]
        ));
    }
    let dim = |i: usize| {
        u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    let (c, w, h) = (dim(0), dim(1), dim(2));
    let n = c
        .checked_mul(w)
        .and_then(|v| v.checked_mul(h))
        .ok_or_else(|| format_err!("header dimensions {c}x{w}x{h} overflow"))?;
    if n == 0 {
        return Err(format_err!("header declares an empty map {c}x{w}x{h}"));
    }
    if bytes.len() - HEADER_LEN != 4 * n {
        return Err(format_err!(
            "payload is {} bytes, header declares {}",
            bytes.len() - HEADER_LEN,
            4 * n
        ));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    ExplanationMaps::new(Tensor::new(&[c, h, w], data)?).map_err(|e| format_err!("{e}"))
}

/// Provenance stored beside an explanation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub seed: u64,
    pub config_digest: String,
    pub explainer: String,
    /// Class the heatmap shows.
    pub class: usize,
    /// Backbone prediction for the image.
    pub model_truth: usize,
}

/// `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn export_explanation(e: &ExplanationMaps, path: &Path) -> Result<()> {
    fs::write(path, encode_explanation(e))?;
    Ok(())
}

pub fn import_explanation(path: &Path) -> Result<ExplanationMaps> {
    decode_explanation(&fs::read(path)?)
}

/// Writes the explanation and its sidecar.
pub fn export_with_sidecar(e: &ExplanationMaps, path: &Path, sidecar: &Sidecar) -> Result<()> {
    export_explanation(e, path)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    Ok(serde_json::from_str(&fs::read_to_string(sidecar_path(
        path,
    ))?)?)
}
