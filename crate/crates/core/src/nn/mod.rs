//! Parameter storage, binding onto the autograd tape, and optimization.

pub mod optim;
pub mod params;
pub mod schedule;

pub use optim::{AdamW, AdamWConfig};
pub use params::{
    BnRef, Bound, ConvRef, Init, LinearRef, NormRef, ParamBuilder, ParamEntry, ParamSet, Role,
};
pub use schedule::one_cycle;
