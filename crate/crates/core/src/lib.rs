//! Scribble-supervised binary segmentation with a spatial and a spectral
//! branch trained by mutual teaching and entropy-guided pseudo-label
//! ensembling.

pub mod data;
pub mod eval;
pub mod fusion;
pub mod labels;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod selftest;
pub mod trainer;
