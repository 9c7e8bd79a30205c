//! Query-based instance segmentation of ships in SAR imagery.

pub mod coco;
pub mod error;
pub mod graph;
pub mod harness;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod orientation;
pub mod params;
pub mod pipeline;
pub mod query_gen;
pub mod resample;
pub mod synth;
pub mod tensor;
pub mod types;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamStore, Session};
pub use tensor::Tensor;
pub use types::*;
