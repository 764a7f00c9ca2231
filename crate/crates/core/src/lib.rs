//! Staggered Lax-Friedrichs schemes for periodic scalar conservation laws
//! `u_t + H(x, t, c + u)_x = 0` and Hamilton-Jacobi equations
//! `v_t + H(x, t, c + v_x) = h`, with their controlled random-walk
//! representation, time-periodic states and the discrete effective
//! Hamiltonian.

pub mod analysis;
pub mod error;
pub mod flux;
pub mod grid;
pub mod scheme;
pub mod periodic;
pub mod stochastic;

pub use error::{Error, Result};
