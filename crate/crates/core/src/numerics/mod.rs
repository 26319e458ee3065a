//! Dense linear algebra, seeded randomness, Gaussian special functions,
//! adaptive quadrature and finite differences.
//!
//! Everything is `f64`. Values are plain data and can be shared freely
//! across threads.

mod diff;
mod linalg;
mod quadrature;
mod rng;
mod special;

pub use diff::finite_diff_grad;
pub use linalg::{softmax, Matrix, Vector};
pub use quadrature::{integrate, Integral, UpperBound};
pub use rng::{gaussian_matrix, RngStream};
pub use special::{ln_gamma, std_normal_cdf, std_normal_inv_cdf, std_normal_pdf, std_normal_sf};
