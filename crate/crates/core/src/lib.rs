//! Dataset reduction with synthesized privileged information.
//!
//! A reduced dataset (selected by a coreset heuristic or distilled by
//! gradient/distribution matching) is enriched with feature labels,
//! attention labels and soft labels. Models are then trained on the
//! enriched set with a combined classification + feature-regression loss.

pub mod coreset;
pub mod data;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod hash;
pub mod lupi;
pub mod nn;
pub mod privileged;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{GradMap, Graph, Var};
pub use tensor::Tensor;
pub use nn::{init_model, sgd_step, ModelSpec, ModelState, Params};
