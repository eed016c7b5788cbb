//! Scalar SDEs driven by G-Brownian motion, solved pathwise.
//!
//! A G-SDE `dX = b dt + h d<B> + sigma dB` is reduced, path by path, to a flow
//! ODE in the noise variable and a finite-variation ODE for `V`, so that
//! `X_t = phi(t, B_t, V_t)`. The crate provides the driver simulation, the flow
//! and its sensitivities, the transformed drifts, a direct Euler scheme for
//! cross-checking, mollification of Lipschitz diffusions and numerical checks
//! of the comparison theorems.

pub mod driver;
pub mod error;
pub mod expr;
pub mod rng;

pub use error::{Error, Result};
pub mod coeff;
pub mod compare;
pub mod doss;
pub mod euler;
pub mod flow;
pub mod mollify;
