//! Variational log-amplitudes and their parameter derivatives.

mod full;
mod network;
mod params;
mod reference;

use num_complex::Complex64;

pub use full::FullAmplitude;
pub use network::{ln_cosh, tanh, ArchitectureConfig, InitConfig, ResidualRbm};
pub use params::{ParameterBlock, ParameterLayout, WavefunctionParameters};
pub use reference::{
    build_reference_state, ExcitationSpec, ReferenceKind, ReferenceState, DEFAULT_MANIFOLD_CAP, NODE_LOG_AMPLITUDE,
};

use crate::error::{Error, Result};
use crate::lattice::{config_bits, SpinConfiguration, TfimHamiltonian};

/// A log-amplitude `ln ψ_θ(x)` over real parameters `θ`.
///
/// Implementations must be pure functions of `(params, x)` so they can be
/// evaluated concurrently.
pub trait Ansatz: Send + Sync {
    fn n_sites(&self) -> usize;

    fn n_params(&self) -> usize;

    fn layout(&self) -> &ParameterLayout;

    fn log_amplitude(&self, params: &[f64], x: &[i8]) -> Complex64;

    /// Writes `∂ ln ψ / ∂θ_μ` into `jac` and returns `ln ψ`.
    fn log_amplitude_and_jacobian(&self, params: &[f64], x: &[i8], jac: &mut [Complex64]) -> Complex64;

    /// Configurations with equal keys have equal log-amplitudes and Jacobians.
    fn amplitude_key(&self, x: &[i8]) -> u64 {
        config_bits(x)
    }

    /// Preferred Markov-chain starting points; chain `c` starts from entry `c mod len`.
    fn preferred_starts(&self) -> Vec<Vec<i8>> {
        Vec::new()
    }
}

fn check_len<A: Ansatz + ?Sized>(ansatz: &A, params: &[f64], x: &[i8]) -> Result<()> {
    if params.len() != ansatz.n_params() {
        return Err(Error::Shape(format!("{} parameters, ansatz expects {}", params.len(), ansatz.n_params())));
    }
    if x.len() != ansatz.n_sites() {
        return Err(Error::Shape(format!("{} spins, ansatz expects {}", x.len(), ansatz.n_sites())));
    }
    Ok(())
}

fn finite(v: Complex64) -> bool {
    v.re.is_finite() && v.im.is_finite()
}

/// `J_μ(x) = ∂ ln ψ(x) / ∂θ_μ`.
pub fn log_jacobian<A: Ansatz + ?Sized>(ansatz: &A, params: &[f64], x: &SpinConfiguration) -> Result<Vec<Complex64>> {
    check_len(ansatz, params, x.spins())?;
    let mut jac = vec![Complex64::new(0.0, 0.0); ansatz.n_params()];
    let l = ansatz.log_amplitude_and_jacobian(params, x.spins(), &mut jac);
    if !finite(l) {
        return Err(Error::NonFinite { config: x.spins().to_vec() });
    }
    Ok(jac)
}

/// Local energy and its parameter gradient
/// `∂_μ E_loc(x) = Σ_x' H_xx' e^{ln ψ(x') − ln ψ(x)} (J_μ(x') − J_μ(x))`.
pub fn local_energy_gradient<A: Ansatz + ?Sized>(
    ansatz: &A,
    params: &[f64],
    h: &TfimHamiltonian,
    x: &SpinConfiguration,
) -> Result<(Complex64, Vec<Complex64>)> {
    check_len(ansatz, params, x.spins())?;
    h.check(x.spins())?;
    let p = ansatz.n_params();
    let mut j0 = vec![Complex64::new(0.0, 0.0); p];
    let l0 = ansatz.log_amplitude_and_jacobian(params, x.spins(), &mut j0);
    if !finite(l0) {
        return Err(Error::NonFinite { config: x.spins().to_vec() });
    }
    let mut e = Complex64::new(h.diagonal(x.spins()), 0.0);
    let mut grad = vec![Complex64::new(0.0, 0.0); p];
    let mut j1 = vec![Complex64::new(0.0, 0.0); p];
    let mut y = x.spins().to_vec();
    for i in 0..y.len() {
        y[i] = -y[i];
        let l1 = ansatz.log_amplitude_and_jacobian(params, &y, &mut j1);
        if !finite(l1) {
            return Err(Error::NonFinite { config: y.clone() });
        }
        let r = -(l1 - l0).exp();
        e += r;
        for m in 0..p {
            grad[m] += r * (j1[m] - j0[m]);
        }
        y[i] = -y[i];
    }
    Ok((e, grad))
}
