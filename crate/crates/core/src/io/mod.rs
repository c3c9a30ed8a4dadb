//! Command line, explanation files and heatmap rendering.

pub mod cli;
pub mod explanation;
pub mod render;
