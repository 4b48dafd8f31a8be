//! Exact reference solutions: diagonalization of small lattices and the
//! free-fermion solution of the periodic chain.

mod ed;
mod jw;

pub use ed::{dense_diagonalize, exact_diagonalize, lanczos_diagonalize, EdMethod, EdResult, LanczosConfig};
pub use jw::{
    agp_coefficient, bogoliubov_angle, bogoliubov_fidelity, chi0_exact_1d, dispersion, exact_low_spectrum_1d,
    gap_1d, ground_energy_1d, jw_momenta, ExactSolution1D, Momenta,
};
