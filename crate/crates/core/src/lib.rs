//! Universal adversarial perturbations against multi-label pedestrian
//! attribute models, with part-wise label perturbation, semantic
//! (image-text similarity) perturbation, gradient-attack baselines, and a
//! filter-plus-prompt defense.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod artifacts;
pub mod attack;
pub mod data;
pub mod defense;
pub mod dtsr;
pub mod error;
pub mod eval;
pub mod graph;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use labels::{AttributeSchema, LabelVector};
pub use model::{ModelConfig, ModelParams, ParModel};
pub use tensor::Tensor;
