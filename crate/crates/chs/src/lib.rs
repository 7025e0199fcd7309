//! Simulation laboratory for a two-species nonlocal Cahn-Hilliard system on
//! the periodic torus, its local fourth-order limit, and the verification
//! machinery that ties the two together: certified mollifier kernels,
//! nonlocal operator calculus, energy/entropy functionals with positivity
//! certificates, a conservative finite-volume integrator, a minimizing
//! movement (JKO) reference solver built on entropic optimal transport, and
//! the epsilon-sweep convergence study.

pub mod dynamics_fd;
pub mod fft;
pub mod functionals;
pub mod jko;
pub mod mollifier;
pub mod nonlocal;
pub mod torus_field;

pub use torus_field::{Field, PeriodicGrid, State};
