//! Stochastic H-infinity state-feedback control for linear Ito systems with
//! state-dependent multiplicative noise: generalized Riccati solvers
//! (model-based policy iteration) and an off-policy learning pipeline that
//! recovers the same solution from trajectory data, plus a harness for
//! probing the learning loop's robustness to evaluation errors.

// Validation guards are written as `!(x > 0.0)` so that NaN fails them;
// the positive phrasing `x <= 0.0` would wave NaN through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datamat;
pub mod error;
pub mod gare;
pub mod ioutil;
pub mod offpolicy;
pub mod robust;
pub mod sde;
pub mod symlin;

pub use error::{Error, Result};
