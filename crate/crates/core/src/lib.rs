//! Information-driven affordance discovery.
//!
//! An online contextual-bandit loop trains a shared-encoder ensemble of
//! convolutional affordance predictors on synthetic tabletop interactions.
//! Actions are chosen by an optimistic score that adds the ensemble's
//! Jensen-Shannon disagreement to the predicted success probability; at
//! evaluation time the disagreement is subtracted instead.

pub mod acquisition;
pub mod autodiff;
pub mod bandit;
pub mod error;
pub mod harness;
pub mod model;
pub mod policy;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
