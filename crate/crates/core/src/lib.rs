//! Direction-of-arrival estimation for uniform linear arrays with sparse
//! Bayesian recovery under NUV priors.
//!
//! The crate is organised bottom-up:
//!
//! * [`array`]: geometry, steering dictionaries, simulation, snapshot statistics.
//! * [`nuv`]: the EM solver for per-atom variances and spectrum/peak extraction.
//! * [`superres`]: sub-band spatial filtering over a fine grid.
//! * [`hierarchical`]: coarse estimation, interference cancellation and refinement.
//! * [`baselines`]: Bartlett, MVDR, MUSIC and Root-MUSIC.
//! * [`harness`]: scenario configs, Monte-Carlo runs, metrics and calibration.

// `!(x > 0.0)` deliberately rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod array;
pub mod baselines;
pub mod error;
pub mod harness;
pub mod hierarchical;
pub mod nuv;
pub mod superres;

pub use error::{DoaError, Result};
