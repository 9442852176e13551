//! Score-field rearrangement lab.
//!
//! A target gradient field (the score of a distribution over ball
//! arrangements) is learned from example arrangements by denoising score
//! matching. The field drives a velocity-level planner built on ORCA, and an
//! evaluation kit measures how close rollouts get to the target distribution.
//!
//! Module map:
//! - [`ballworld`]: kinematic 2D ball simulator with overlap resolution.
//! - [`targets`]: target samplers, pseudo-likelihoods, analytic GMM scores.
//! - [`tensor`]: dense tensors, a reverse-mode tape, and Adam.
//! - [`scorenet`]: the noise-conditioned graph score network and its training.
//! - [`planner`]: gradient actions, ORCA constraints, 2D/3D LPs, policies.
//! - [`rewards`]: first-order delta log-likelihood rewards and normalization.
//! - [`eval`]: PL curves, coverage score, ACN, ASC, mode posteriors.

pub mod ballworld;
pub mod error;
pub mod eval;
pub mod field;
pub mod planner;
pub mod rewards;
pub mod rng;
pub mod scorenet;
pub mod targets;
pub mod tensor;

pub use error::{Error, Result};
pub use field::{Field, ScoreField};
