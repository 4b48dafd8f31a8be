use num_complex::Complex64;

use super::params::ParameterLayout;
use super::Ansatz;
use crate::error::{Error, Result};
use crate::lattice::config_bits;

/// Complete parameterization: one real amplitude per basis configuration, so
/// `ψ(x) = θ_x`.
#[derive(Clone, Debug)]
pub struct FullAmplitude {
    n_sites: usize,
    layout: ParameterLayout,
}

impl FullAmplitude {
    pub fn new(n_sites: usize) -> Result<Self> {
        if n_sites == 0 || n_sites > 20 {
            return Err(Error::Unsupported(format!("amplitude table over {n_sites} sites")));
        }
        let mut layout = ParameterLayout::default();
        layout.push("amplitudes", vec![1 << n_sites], false);
        Ok(Self { n_sites, layout })
    }
}

fn ln_real(v: f64) -> Complex64 {
    if v > 0.0 {
        Complex64::new(v.ln(), 0.0)
    } else if v < 0.0 {
        Complex64::new((-v).ln(), std::f64::consts::PI)
    } else {
        Complex64::new(f64::NEG_INFINITY, 0.0)
    }
}

impl Ansatz for FullAmplitude {
    fn n_sites(&self) -> usize {
        self.n_sites
    }

    fn n_params(&self) -> usize {
        1 << self.n_sites
    }

    fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    fn log_amplitude(&self, params: &[f64], x: &[i8]) -> Complex64 {
        ln_real(params[config_bits(x) as usize])
    }

    fn log_amplitude_and_jacobian(&self, params: &[f64], x: &[i8], jac: &mut [Complex64]) -> Complex64 {
        let i = config_bits(x) as usize;
        jac.fill(Complex64::new(0.0, 0.0));
        jac[i] = Complex64::new(1.0 / params[i], 0.0);
        ln_real(params[i])
    }
}
