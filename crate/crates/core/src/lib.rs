//! Neural-network quantum states for the transverse-field Ising model, prepared
//! by adiabatic transport with inverse power iteration.
//!
//! Start with [`transport::TransportPlan`] to run a sweep, or with [`exact`] for
//! reference solutions.

pub mod analysis;
pub mod ansatz;
pub mod error;
pub mod exact;
pub mod io;
pub mod ipi;
pub mod lattice;
pub mod observables;
pub mod par;
pub mod report;
pub mod sampler;
pub mod transport;

pub use error::{Error, Result};
