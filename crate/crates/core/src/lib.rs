//! Penalty approximation and time-optimal control for second-order systems
//! with backlash and absolutely inelastic shocks.
//!
//! The constrained coordinate `y` must stay non-positive. Contact with the
//! wall `y = 0` is modelled in two ways:
//!
//! - the penalty system, where the wall reacts with the force `γ·y₊·w₊`
//!   ([`integrator::integrate_penalty`]);
//! - the limit system with an impulse measure `dν` that kills the outward
//!   velocity on impact ([`integrator::integrate_limit`]).
//!
//! On top of the integrators sit γ-sweeps that certify convergence of penalty
//! trajectories ([`limits`]), a switching-time solver for time-optimal
//! problems ([`optimal`]), adjoint integration and maximum-principle checks
//! ([`adjoint`]), and the stable-neighborhood construction used as a terminal
//! set ([`stabilize`]).

// Negated float comparisons are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod cli;
pub mod control;
pub mod error;
pub mod integrator;
pub mod io;
pub mod limits;
pub mod model;
pub mod optimal;
pub mod stabilize;

pub use control::{BangBangControl, ConstantControl, ControlSignal, SampledControl};
pub use error::{Error, Result};
pub use integrator::{Dynamics, IntegratorConfig, Trajectory};
pub use model::{CanonicalModel, ControlBox, SystemState};

/// Version tag written into every JSON document.
pub const SCHEMA: &str = "backlash-opt/1";
