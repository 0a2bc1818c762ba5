//! Informative frame-pair selection for visually repetitive pipe-interior
//! video, plus the evaluation tooling around it.

pub mod bench;
pub mod config;
pub mod features;
pub mod geometry2d;
pub mod image_io;
pub mod optical_flow;
pub mod quality_metrics;
pub mod selection;
pub mod sim3_align;
pub mod synth_culvert;
