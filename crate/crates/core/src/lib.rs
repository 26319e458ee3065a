//! Mixture-of-LoRAs with constant routing weights.
//!
//! Each mixture layer activates `k` of its `n` low-rank adapters with the
//! same fixed weight ω. The activated subset is sampled without replacement
//! from the router's softmax distribution during training and chosen by
//! top-k at inference. Because the weights are constant, the router gets no
//! backpropagated gradient; it is trained with a leave-one-out REINFORCE
//! estimator over `M` sampled selections instead.
//!
//! Alongside the method itself the crate carries a dense learnable-softmax
//! baseline, an exact enumeration oracle for the router gradient, numerical
//! checks for the routing-collapse bound and the top-k optimality argument,
//! and a small synthetic trainer.

pub mod checkpoint;
pub mod error;
pub mod experiments;
pub mod mixture;
pub mod numerics;
pub mod rloo;
pub mod routing;
pub mod theory;
pub mod trainer;

pub use error::{RemixError, Result};
