//! Simulation of a one-layer softmax-attention classifier trained by
//! full-batch gradient descent on signal-plus-noise token pairs with
//! label-flipping noise, together with the test-metric estimators and the
//! sweep machinery used to map benign and harmful overfitting.

pub mod data;
pub mod error;
pub mod evaluator;
pub mod experiments;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
