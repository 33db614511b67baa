//! CLQ: a one-stage detection head that fuses an IoU-guided localization
//! quality estimate into the classification score, trained and evaluated
//! end-to-end on a deterministic synthetic benchmark.
//!
//! The crate is self-contained: geometry, ATSS label assignment, a small
//! reverse-mode autodiff engine, the detection head with optional
//! box-guided feature alignment, the quality-focal / GIoU / LQE losses,
//! greedy NMS with a COCO-style AP evaluator, a synthetic scene
//! generator, and the training/ablation harness behind the `clq` binary.

pub mod assignment;
pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod head;
pub mod losses;
pub mod oracles;
pub mod postprocess;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
