//! Binary checkpoint container shared by classifiers and attention mechanisms.
//!
//! Layout: `b"PTCK"`, one version byte, a little-endian `u32` header length,
//! a JSON header, then every tensor as little-endian `f64` in header order.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, Result};
use crate::nn::{ParamBuilder, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PTCK";
pub const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Header<M> {
    kind: String,
    digest: String,
    meta: M,
    tensors: Vec<(String, Vec<usize>)>,
}

pub(crate) fn encode<M: Serialize>(
    kind: &str,
    meta: &M,
    params: &ParamSet,
    digest: &str,
) -> Vec<u8> {
    let header = Header {
        kind: kind.to_string(),
        digest: digest.to_string(),
        meta,
        tensors: params
            .entries
            .iter()
            .map(|e| (e.name.clone(), e.value.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(9 + json.len() + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for e in &params.entries {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) struct Decoded<M> {
    pub meta: M,
    pub digest: String,
    pub params: ParamSet,
}

/// Decodes a container whose kind must be `kind`; `layout` rebuilds the
/// parameter declarations from the metadata.
pub(crate) fn decode<M: DeserializeOwned>(
    bytes: &[u8],
    kind: &str,
    layout: impl FnOnce(&M) -> Result<ParamBuilder>,
) -> Result<Decoded<M>> {
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(format_err!("missing checkpoint magic"));
    }
    if bytes[4] != VERSION {
        return Err(format_err!("unsupported checkpoint version {}", bytes[4]));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let body = &bytes[9..];
    if body.len() < hlen {
        return Err(format_err!("truncated checkpoint header"));
    }
    let header: Header<M> = serde_json::from_slice(&body[..hlen])
        .map_err(|e| format_err!("bad checkpoint header: {e}"))?;
    if header.kind != kind {
        return Err(format_err!(
            "checkpoint holds a {}, expected a {kind}",
            header.kind
        ));
    }
    let builder = layout(&header.meta)?;
    if builder.signature() != header.tensors {
        return Err(format_err!(
            "checkpoint tensors do not match the declared architecture"
        ));
    }
    let payload = &body[hlen..];
    let scalars: usize = header
        .tensors
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if payload.len() != scalars * 8 {
        return Err(format_err!(
            "checkpoint payload has {} bytes, expected {}",
            payload.len(),
            scalars * 8
        ));
    }
    let mut values = Vec::with_capacity(header.tensors.len());
    let mut chunks = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for (_, shape) in &header.tensors {
        let n = shape.iter().product();
        values.push(Tensor::new(shape, chunks.by_ref().take(n).collect())?);
    }
    let params = builder.with_values(values)?;
    Ok(Decoded {
        meta: header.meta,
        digest: header.digest,
        params,
    })
}
