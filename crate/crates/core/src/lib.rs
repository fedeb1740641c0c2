//! Forest-type segmentation benchmark toolkit.
//!
//! * [`numerics`]: tensors, reverse-mode differentiation, Adam.
//! * [`labelfuse`]: per-pixel reference-label fusion.
//! * [`sampler`]: geographic block splits and stratified plot selection.
//! * [`datagen`]: deterministic synthetic multi-modal plots.
//! * [`mtsvit`]: the multi-modal temporal-spatial transformer.
//! * [`metrics`]: confusion matrices and F1 reports.
//! * [`harness`]: on-disk formats, training, ablations and the CLI.

pub mod numerics;
pub mod datagen;
pub mod labelfuse;
pub mod metrics;
pub mod mtsvit;
pub mod sampler;
pub mod harness;
