//! Nonlinear low-dimensional SVM trained by the method of auxiliary coordinates.
//!
//! A Gaussian RBF network `F(x) = W Φ(x)` maps inputs to an `L`-dimensional
//! latent space and `K` one-vs-all linear SVMs classify the latent points.
//! Both are trained jointly by introducing one auxiliary coordinate `z_n` per
//! training point and minimizing the quadratic-penalty objective
//!
//! ```text
//! λ‖W‖² + Σ_k (½‖w_k‖² + C Σ_n ξ_nk) + μ/2 Σ_n ‖z_n − F(x_n)‖²
//! ```
//!
//! by alternating three convex block steps: a per-point closed form / tiny QP
//! over `Z` ([`zstep`]), ordinary linear SVM training over `g` ([`linsvm`]) and
//! ridge regression over `W` ([`fstep`]). The penalty `μ` grows geometrically
//! between stages ([`trainer`]).
//!
//! Matrices holding one column per point (`Φ`, `Z`) are `rows × N`; datasets
//! keep the conventional `N × D` layout.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod features;
pub mod fstep;
pub mod linsvm;
pub mod modelfile;
pub mod rng;
pub mod trainer;
pub mod zstep;

pub use error::{Error, Result};
