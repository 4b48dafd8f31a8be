//! Inverse power iteration projected onto the variational manifold.
//!
//! One step solves `Re(J†P) δθ = −Re(J†ε)` from sampled Jacobians `J`,
//! projected Jacobians `P = ∂E_loc + J (E_loc − ω)` and local energies `ε`,
//! then applies `θ ← θ + η_t δθ`. Complex rows are stacked as
//! `[Re; Im]` so that `ĴᵀP̂ = Re(J†P)` and every solve is real.

use std::borrow::Cow;
use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SVD};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ansatz::Ansatz;
use crate::error::{Error, Result};
use crate::lattice::{bits_config, TfimHamiltonian};
use crate::par;
use crate::sampler::{expectation_values, sample, stream_seed, Estimate, SampleBatch, SamplerConfig};

/// Budget (in complex entries) for caching neighbour Jacobians during assembly.
const JACOBIAN_CACHE_ENTRIES: usize = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolvePath {
    /// Woodbury whenever the parameter count exceeds the stacked row count.
    Auto,
    Direct,
    Woodbury,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Soft-inverse cutoff relative to the largest singular value.
    pub s_cutoff: f64,
    pub gamma: f64,
    pub eta_initial: f64,
    pub eta_final: f64,
    pub max_iterations: usize,
    pub centering: bool,
    pub variance_cutoff: f64,
    pub trust_radius: f64,
    pub path: SolvePath,
}

impl SolverConfig {
    pub const VARIANCE_CUTOFF_1D: f64 = 5e-7;
    pub const VARIANCE_CUTOFF_2D: f64 = 5e-5;

    pub fn for_dimension(dimension: usize) -> Self {
        let base = SolverConfig {
            s_cutoff: 1e-4,
            gamma: 0.0,
            eta_initial: 0.02,
            eta_final: 0.01,
            max_iterations: 80,
            centering: true,
            variance_cutoff: Self::VARIANCE_CUTOFF_1D,
            trust_radius: 1e3,
            path: SolvePath::Auto,
        };
        if dimension == 1 {
            base
        } else {
            SolverConfig {
                eta_final: 0.0005,
                max_iterations: 100,
                variance_cutoff: Self::VARIANCE_CUTOFF_2D,
                ..base
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_cutoff > 0.0 && self.s_cutoff.is_finite()) {
            return Err(Error::config("solver.s_cutoff", "must be positive"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("solver.gamma", "must be non-negative"));
        }
        if !(self.eta_final > 0.0 && self.eta_final <= self.eta_initial && self.eta_initial <= 1.0) {
            return Err(Error::config("solver.eta", "require 0 < eta_final <= eta_initial <= 1"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("solver.max_iterations", "must be at least 1"));
        }
        if !(self.variance_cutoff > 0.0) {
            return Err(Error::config("solver.variance_cutoff", "must be positive"));
        }
        if !(self.trust_radius > 0.0) {
            return Err(Error::config("solver.trust_radius", "must be positive"));
        }
        Ok(())
    }

    /// Damping `η_t = η_f + (η_i − η_f) cos²(πt / 2T)` with `T = max_iterations`.
    pub fn eta(&self, t: usize) -> f64 {
        schedule(self.eta_initial, self.eta_final, t, self.max_iterations)
    }
}

/// Cosine annealing from `eta_initial` at `t = 0` to `eta_final` at `t = total`.
pub fn schedule(eta_initial: f64, eta_final: f64, t: usize, total: usize) -> f64 {
    let t = t.min(total) as f64;
    let c = (PI * t / (2.0 * total.max(1) as f64)).cos();
    eta_final + (eta_initial - eta_final) * c * c
}

/// Soft inverse `(1/x) / (1 + (cutoff/x)⁶)`, continuous at zero.
pub fn soft_inverse(x: f64, cutoff: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let r = cutoff / x;
    1.0 / (x * (1.0 + r.powi(6)))
}

/// Singular-value summary of one solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// Singular values above the cutoff.
    pub effective_rank: usize,
}

/// Solves `A x = rhs` through the SVD with each `1/σ` replaced by the soft inverse.
/// `relative_cutoff` is scaled by the largest singular value.
pub fn soft_pseudoinverse_solve(
    a: &DMatrix<f64>,
    rhs: &DVector<f64>,
    relative_cutoff: f64,
) -> Result<(DVector<f64>, Spectrum)> {
    if a.nrows() != rhs.len() {
        return Err(Error::Shape(format!("{}×{} matrix with rhs of length {}", a.nrows(), a.ncols(), rhs.len())));
    }
    if a.iter().any(|v| !v.is_finite()) || rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver("non-finite entries in linear system".into()));
    }
    let svd = SVD::try_new(a.clone(), true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Solver(format!("SVD did not converge on a {}×{} matrix", a.nrows(), a.ncols())))?;
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested Vᵀ");
    let s = &svd.singular_values;
    let sigma_max = s.iter().copied().fold(0.0, f64::max);
    let sigma_min = s.iter().copied().fold(f64::INFINITY, f64::min);
    let cutoff = relative_cutoff * sigma_max;
    let mut y = u.transpose() * rhs;
    for (yi, &si) in y.iter_mut().zip(s.iter()) {
        *yi *= soft_inverse(si, cutoff);
    }
    let x = vt.transpose() * y;
    let spectrum = Spectrum {
        sigma_max,
        sigma_min: if sigma_min.is_finite() { sigma_min } else { 0.0 },
        effective_rank: s.iter().filter(|&&v| v > cutoff).count(),
    };
    Ok((x, spectrum))
}

/// Real-stacked finite-sample system, one row per distinct amplitude key
/// (scaled by the square root of its total weight).
#[derive(Clone, Debug)]
pub struct IpiSystem {
    pub j: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub eps: DVector<f64>,
    pub omega: f64,
    /// Weighted energy estimate over the batch (uncentered).
    pub energy: Estimate,
    /// Weighted variance of the local energy.
    pub variance: f64,
    /// Distinct configurations after compression.
    pub n_unique: usize,
}

impl IpiSystem {
    pub fn n_params(&self) -> usize {
        self.j.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.j.nrows()
    }

    /// `ĴᵀP̂ = Re E[J* P]`.
    pub fn normal_matrix(&self) -> DMatrix<f64> {
        self.j.transpose() * &self.p
    }

    /// `Ĵᵀε̂ = Re E[J* ε]`.
    pub fn force(&self) -> DVector<f64> {
        self.j.transpose() * &self.eps
    }
}

struct Row {
    weight: f64,
    e_loc: Complex64,
    jac: Vec<Complex64>,
    grad: Vec<Complex64>,
}

fn block_name<A: Ansatz + ?Sized>(ansatz: &A, index: usize) -> String {
    ansatz.layout().block_of(index).map(|b| b.name.clone()).unwrap_or_else(|| format!("#{index}"))
}

fn finite(v: Complex64) -> bool {
    v.re.is_finite() && v.im.is_finite()
}

/// Local energy and its gradient from precomputed `(ln ψ, J)` of `x` and its flips.
fn local_row<'a>(
    h: &TfimHamiltonian,
    x: &[i8],
    own: &(Complex64, Vec<Complex64>),
    mut neighbour: impl FnMut(usize) -> (Complex64, Option<Cow<'a, [Complex64]>>),
) -> (Complex64, Vec<Complex64>) {
    let (l0, j0) = own;
    let mut e = Complex64::new(h.diagonal(x), 0.0);
    let mut grad = vec![Complex64::new(0.0, 0.0); j0.len()];
    for i in 0..x.len() {
        let (l1, j1) = neighbour(i);
        let r = -(l1 - l0).exp();
        if r == Complex64::new(0.0, 0.0) {
            continue;
        }
        e += r;
        if let Some(j1) = j1 {
            for (g, (a, b)) in grad.iter_mut().zip(j1.iter().zip(j0.iter())) {
                *g += r * (a - b);
            }
        }
    }
    (e, grad)
}

/// Evaluates `J`, `E_loc` and `∂E_loc` at every distinct configuration in `batch`
/// and assembles the stacked system. With `centering`, weighted column means of `J`
/// are subtracted (also inside `P`) and the mean of `E_loc` is subtracted from `ε`.
pub fn assemble_system<A: Ansatz + ?Sized>(
    ansatz: &A,
    params: &[f64],
    h: &TfimHamiltonian,
    batch: &SampleBatch,
    omega: f64,
    centering: bool,
) -> Result<IpiSystem> {
    let n = ansatz.n_sites();
    let np = ansatz.n_params();
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    if batch.n_sites() != n || h.n_sites() != n || params.len() != np {
        return Err(Error::Shape("batch, Hamiltonian and ansatz disagree on size".into()));
    }

    // Compress samples by amplitude key.
    let mut slot: HashMap<u64, usize> = HashMap::new();
    let mut reps: Vec<(u64, Vec<i8>, f64, usize)> = Vec::new();
    let mut sample_slot = Vec::with_capacity(batch.len());
    for (i, (&bits, &w)) in batch.bits().iter().zip(batch.weights()).enumerate() {
        let x = bits_config(bits, n);
        let key = ansatz.amplitude_key(&x);
        let s = *slot.entry(key).or_insert_with(|| {
            reps.push((key, x, 0.0, i));
            reps.len() - 1
        });
        reps[s].2 += w;
        sample_slot.push(s);
    }

    // Every configuration whose amplitude enters a row, deduplicated by key.
    let mut needed: HashMap<u64, usize> = HashMap::new();
    let mut needed_configs: Vec<Vec<i8>> = Vec::new();
    for (key, x, _, _) in &reps {
        needed.entry(*key).or_insert_with(|| {
            needed_configs.push(x.clone());
            needed_configs.len() - 1
        });
    }
    for (_, x, _, _) in &reps {
        let mut y = x.clone();
        for i in 0..n {
            y[i] = -y[i];
            let key = ansatz.amplitude_key(&y);
            needed.entry(key).or_insert_with(|| {
                needed_configs.push(y.clone());
                needed_configs.len() - 1
            });
            y[i] = -y[i];
        }
    }
    let cache_jacobians = needed_configs.len().saturating_mul(np.max(1)) <= JACOBIAN_CACHE_ENTRIES;

    let rows: Vec<Result<Row>> = if cache_jacobians {
        let evals: Vec<(Complex64, Vec<Complex64>)> = par::map(&needed_configs, |x| {
            let mut j = vec![Complex64::new(0.0, 0.0); np];
            let l = ansatz.log_amplitude_and_jacobian(params, x, &mut j);
            (l, j)
        });
        par::map(&reps, |(key, x, w, first)| {
            let own = &evals[needed[key]];
            if !finite(own.0) {
                return Err(Error::NonFinite { config: x.clone() });
            }
            let mut y = x.clone();
            let (e, grad) = local_row(h, x, own, |i| {
                y.clone_from(x);
                y[i] = -y[i];
                let (l, j) = &evals[needed[&ansatz.amplitude_key(&y)]];
                (*l, Some(Cow::Borrowed(j.as_slice())))
            });
            check_row(ansatz, *first, e, &own.1, &grad)?;
            Ok(Row { weight: *w, e_loc: e, jac: own.1.clone(), grad })
        })
    } else {
        let log_amps: Vec<Complex64> = par::map(&needed_configs, |x| ansatz.log_amplitude(params, x));
        par::map(&reps, |(key, x, w, first)| {
            let mut j0 = vec![Complex64::new(0.0, 0.0); np];
            let l0 = ansatz.log_amplitude_and_jacobian(params, x, &mut j0);
            debug_assert_eq!(l0, log_amps[needed[key]]);
            if !finite(l0) {
                return Err(Error::NonFinite { config: x.clone() });
            }
            let own = (l0, j0);
            let mut y = x.clone();
            let (e, grad) = local_row(h, x, &own, |i| {
                y.clone_from(x);
                y[i] = -y[i];
                let l = log_amps[needed[&ansatz.amplitude_key(&y)]];
                if (l - own.0).exp() == Complex64::new(0.0, 0.0) {
                    return (l, None);
                }
                let mut j = vec![Complex64::new(0.0, 0.0); np];
                ansatz.log_amplitude_and_jacobian(params, &y, &mut j);
                (l, Some(Cow::Owned(j)))
            });
            check_row(ansatz, *first, e, &own.1, &grad)?;
            Ok(Row { weight: *w, e_loc: e, jac: own.1, grad })
        })
    };
    let rows: Vec<Row> = rows.into_iter().collect::<Result<_>>()?;

    let e_per_sample: Vec<f64> = sample_slot.iter().map(|&s| rows[s].e_loc.re).collect();
    let energy = expectation_values(batch, &e_per_sample)?;
    let mean_e: Complex64 = rows.iter().map(|r| r.e_loc * r.weight).sum();
    let variance: f64 = rows.iter().map(|r| r.weight * (r.e_loc - mean_e).norm_sqr()).sum();

    let mut mean_j = vec![Complex64::new(0.0, 0.0); np];
    if centering {
        for r in &rows {
            for (m, j) in mean_j.iter_mut().zip(&r.jac) {
                *m += j * r.weight;
            }
        }
    }
    let shift = if centering { mean_e } else { Complex64::new(0.0, 0.0) };

    let complex = rows.iter().any(|r| {
        r.e_loc.im != 0.0 || r.jac.iter().any(|v| v.im != 0.0) || r.grad.iter().any(|v| v.im != 0.0)
    });
    let u = rows.len();
    let nr = if complex { 2 * u } else { u };
    let mut j = DMatrix::<f64>::zeros(nr, np);
    let mut p = DMatrix::<f64>::zeros(nr, np);
    let mut eps = DVector::<f64>::zeros(nr);
    for (i, r) in rows.iter().enumerate() {
        let sw = r.weight.sqrt();
        let de = r.e_loc - omega;
        let e = (r.e_loc - shift) * sw;
        eps[i] = e.re;
        if complex {
            eps[u + i] = e.im;
        }
        for m in 0..np {
            let jc = r.jac[m] - mean_j[m];
            let pm = (r.grad[m] + jc * de) * sw;
            let jm = jc * sw;
            j[(i, m)] = jm.re;
            p[(i, m)] = pm.re;
            if complex {
                j[(u + i, m)] = jm.im;
                p[(u + i, m)] = pm.im;
            }
        }
    }
    Ok(IpiSystem { j, p, eps, omega, energy, variance, n_unique: u })
}

fn check_row<A: Ansatz + ?Sized>(
    ansatz: &A,
    row: usize,
    e: Complex64,
    jac: &[Complex64],
    grad: &[Complex64],
) -> Result<()> {
    if !finite(e) {
        return Err(Error::NonFiniteSystem { row, block: "local energy".into() });
    }
    if let Some(m) = jac.iter().zip(grad).position(|(a, b)| !finite(*a) || !finite(*b)) {
        return Err(Error::NonFiniteSystem { row, block: block_name(ansatz, m) });
    }
    Ok(())
}

/// Parameter update `δθ` (before damping) and the path actually used.
pub fn solve(system: &IpiSystem, cfg: &SolverConfig) -> Result<(DVector<f64>, Spectrum, SolvePath)> {
    let np = system.n_params();
    let nr = system.n_rows();
    let path = match cfg.path {
        SolvePath::Auto if np > nr => SolvePath::Woodbury,
        SolvePath::Auto => SolvePath::Direct,
        other => other,
    };
    match path {
        SolvePath::Woodbury => {
            let mut b = &system.p * system.j.transpose();
            for i in 0..nr {
                b[(i, i)] += cfg.gamma;
            }
            let (y, spec) = soft_pseudoinverse_solve(&b, &system.eps, cfg.s_cutoff)?;
            Ok((-(system.j.transpose() * y), spec, path))
        }
        _ => {
            let mut a = system.normal_matrix();
            for i in 0..np {
                a[(i, i)] += cfg.gamma;
            }
            let rhs = -system.force();
            let (x, spec) = soft_pseudoinverse_solve(&a, &rhs, cfg.s_cutoff)?;
            Ok((x, spec, SolvePath::Direct))
        }
    }
}

/// Per-iteration record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iteration: usize,
    pub energy: f64,
    pub energy_stderr: f64,
    pub variance: f64,
    pub v_score: f64,
    pub omega: f64,
    pub step_norm: f64,
    pub eta: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub effective_rank: usize,
    pub rejected: bool,
    pub woodbury: bool,
    pub acceptance: Option<f64>,
}

pub fn converged(diagnostics: &Diagnostics, variance_cutoff: f64) -> bool {
    diagnostics.variance < variance_cutoff
}

fn v_score_or_nan(energy: f64, variance: f64, n: usize) -> f64 {
    if energy == 0.0 {
        f64::NAN
    } else {
        n as f64 * variance / (energy * energy)
    }
}

/// One damped update `θ + η_t δθ`. An update longer than the trust radius is
/// clipped to it and applied with `η_t / 2`; the diagnostics flag it as rejected.
pub fn ipi_step<A: Ansatz + ?Sized>(
    ansatz: &A,
    params: &[f64],
    h: &TfimHamiltonian,
    omega: f64,
    batch: &SampleBatch,
    cfg: &SolverConfig,
    t: usize,
) -> Result<(Vec<f64>, Diagnostics)> {
    let system = assemble_system(ansatz, params, h, batch, omega, cfg.centering)?;
    step_from_system(ansatz.n_sites(), params, &system, batch, cfg, t)
}

fn step_from_system(
    n_sites: usize,
    params: &[f64],
    system: &IpiSystem,
    batch: &SampleBatch,
    cfg: &SolverConfig,
    t: usize,
) -> Result<(Vec<f64>, Diagnostics)> {
    let (delta, spectrum, path) = solve(system, cfg)?;
    let norm = delta.norm();
    let mut eta = cfg.eta(t);
    let mut scale = 1.0;
    let rejected = norm > cfg.trust_radius;
    if rejected {
        eta *= 0.5;
        scale = cfg.trust_radius / norm;
    }
    let new: Vec<f64> = params.iter().zip(delta.iter()).map(|(p, d)| p + eta * scale * d).collect();
    let diag = Diagnostics {
        iteration: t,
        energy: system.energy.mean,
        energy_stderr: system.energy.stderr,
        variance: system.variance,
        v_score: v_score_or_nan(system.energy.mean, system.variance, n_sites),
        omega: system.omega,
        step_norm: norm,
        eta,
        sigma_min: spectrum.sigma_min,
        sigma_max: spectrum.sigma_max,
        effective_rank: spectrum.effective_rank,
        rejected,
        woodbury: path == SolvePath::Woodbury,
        acceptance: batch.mean_acceptance(),
    };
    Ok((new, diag))
}

/// Energy estimate and local-energy variance of the current parameters.
pub fn measure_energy<A: Ansatz + ?Sized>(
    ansatz: &A,
    params: &[f64],
    h: &TfimHamiltonian,
    batch: &SampleBatch,
) -> Result<(Estimate, f64)> {
    let n = ansatz.n_sites();
    let mut memo: HashMap<u64, Complex64> = HashMap::new();
    let mut keys = Vec::new();
    let mut configs = Vec::new();
    for &b in batch.bits() {
        let x = bits_config(b, n);
        for i in 0..=n {
            let mut y = x.clone();
            if i < n {
                y[i] = -y[i];
            }
            let k = ansatz.amplitude_key(&y);
            if let std::collections::hash_map::Entry::Vacant(e) = memo.entry(k) {
                e.insert(Complex64::new(0.0, 0.0));
                keys.push(k);
                configs.push(y);
            }
        }
    }
    let vals = par::map(&configs, |x| ansatz.log_amplitude(params, x));
    for (k, v) in keys.into_iter().zip(vals) {
        memo.insert(k, v);
    }
    let e_loc: Vec<Complex64> = batch
        .bits()
        .iter()
        .map(|&b| {
            let x = bits_config(b, n);
            let l0 = memo[&ansatz.amplitude_key(&x)];
            let mut e = Complex64::new(h.diagonal(&x), 0.0);
            let mut y = x.clone();
            for i in 0..n {
                y[i] = -y[i];
                e -= (memo[&ansatz.amplitude_key(&y)] - l0).exp();
                y[i] = -y[i];
            }
            e
        })
        .collect();
    if let Some(i) = e_loc.iter().position(|e| !finite(*e)) {
        return Err(Error::NonFinite { config: batch.configuration(i) });
    }
    let re: Vec<f64> = e_loc.iter().map(|e| e.re).collect();
    let est = expectation_values(batch, &re)?;
    let mean: Complex64 = e_loc.iter().zip(batch.weights()).map(|(e, w)| e * w).sum();
    let var = e_loc.iter().zip(batch.weights()).map(|(e, w)| w * (e - mean).norm_sqr()).sum();
    Ok((est, var))
}

/// Outcome of repeated IPI steps at fixed `ω`.
#[derive(Clone, Debug)]
pub struct IpiRun {
    pub params: Vec<f64>,
    pub diagnostics: Vec<Diagnostics>,
    pub converged: bool,
    pub energy: Estimate,
    pub variance: f64,
    /// Chain positions after the last batch (Metropolis only).
    pub chain_states: Option<Vec<u64>>,
}

/// Iterates `ipi_step` up to `max_iterations` times, stopping as soon as the
/// measured variance is below the cutoff. Iteration `t` samples with seed
/// `stream_seed([seed, t])`; Metropolis chains persist across iterations.
pub fn run<A: Ansatz + ?Sized>(
    ansatz: &A,
    params: Vec<f64>,
    h: &TfimHamiltonian,
    omega: f64,
    sampler: &SamplerConfig,
    cfg: &SolverConfig,
    seed: u64,
    starts: Option<Vec<u64>>,
) -> Result<IpiRun> {
    cfg.validate()?;
    let mut params = params;
    let mut starts = starts;
    let mut diagnostics = Vec::new();
    for t in 0..cfg.max_iterations {
        let batch = sample(ansatz, &params, &sampler.with_seed(stream_seed(&[seed, t as u64])), starts.as_deref())?;
        let system = assemble_system(ansatz, &params, h, &batch, omega, cfg.centering)?;
        starts = chain_states(&batch);
        if system.variance < cfg.variance_cutoff {
            return Ok(IpiRun {
                params,
                diagnostics,
                converged: true,
                energy: system.energy,
                variance: system.variance,
                chain_states: starts,
            });
        }
        let (next, diag) = step_from_system(ansatz.n_sites(), &params, &system, &batch, cfg, t)?;
        params = next;
        diagnostics.push(diag);
    }
    let t = cfg.max_iterations as u64;
    let batch = sample(ansatz, &params, &sampler.with_seed(stream_seed(&[seed, t])), starts.as_deref())?;
    let (energy, variance) = measure_energy(ansatz, &params, h, &batch)?;
    Ok(IpiRun {
        params,
        diagnostics,
        converged: variance < cfg.variance_cutoff,
        energy,
        variance,
        chain_states: chain_states(&batch),
    })
}

fn chain_states(batch: &SampleBatch) -> Option<Vec<u64>> {
    if batch.final_states().is_empty() {
        None
    } else {
        Some(batch.final_states().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ansatz::{
        build_reference_state, ArchitectureConfig, ExcitationSpec, FullAmplitude, InitConfig, ResidualRbm,
    };
    use crate::exact::dense_diagonalize;
    use crate::lattice::Lattice;
    use crate::sampler::SamplerConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exact_cfg() -> SolverConfig {
        SolverConfig {
            eta_initial: 1.0,
            eta_final: 1.0,
            max_iterations: 200,
            variance_cutoff: 1e-14,
            ..SolverConfig::for_dimension(1)
        }
    }

    fn chain(l: usize, lambda: f64) -> TfimHamiltonian {
        TfimHamiltonian::new(Lattice::chain(l).unwrap(), lambda).unwrap()
    }

    fn small_net(lat: Lattice, seed: u64) -> (ResidualRbm, Vec<f64>) {
        let h0 = TfimHamiltonian::new(lat.clone(), 0.0).unwrap();
        let reference = build_reference_state(&h0, &ExcitationSpec::ground(), 4096).unwrap();
        let mut arch = ArchitectureConfig::for_lattice(&lat);
        arch.embedding = 2;
        arch.blocks = 1;
        let net = ResidualRbm::new(lat, arch, reference).unwrap();
        let init = InitConfig { encoder_std: 0.2, rbm_std: 0.2, b: 0.5, ..InitConfig::default() };
        let p = net.init(&mut ChaCha8Rng::seed_from_u64(seed), &init).values().to_vec();
        (net, p)
    }

    #[test]
    fn schedule_endpoints_and_bounds() {
        let cfg = SolverConfig::for_dimension(2);
        assert_eq!(cfg.eta(0), cfg.eta_initial);
        assert!((cfg.eta(cfg.max_iterations) - cfg.eta_final).abs() < 1e-16);
        for t in 0..=cfg.max_iterations {
            let e = cfg.eta(t);
            assert!(e <= cfg.eta_initial && e >= cfg.eta_final);
        }
    }

    #[test]
    fn default_cutoffs() {
        assert_eq!(SolverConfig::for_dimension(1).variance_cutoff, 5e-7);
        assert_eq!(SolverConfig::for_dimension(2).variance_cutoff, 5e-5);
        assert!(SolverConfig::for_dimension(1).centering);
    }

    #[test]
    fn soft_inverse_values() {
        assert_eq!(soft_inverse(1e-3, 1e-3), 0.5e3);
        assert_eq!(soft_inverse(0.0, 1e-3), 0.0);
        let x = 10.0;
        assert!((soft_inverse(x, 1.0) * x - 1.0).abs() < 1.1e-6);
        let mut last = 0.0;
        for i in 1..200 {
            let x = i as f64 * 0.01;
            let v = soft_inverse(x, 0.5) * x;
            assert!(v > last && v <= 1.0);
            last = v;
        }
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let a = DMatrix::<f64>::identity(5, 5);
        let b = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5, 0.25]);
        let (x, s) = soft_pseudoinverse_solve(&a, &b, 1e-12).unwrap();
        assert!((x - b).norm() < 1e-12);
        assert_eq!(s.effective_rank, 5);
    }

    #[test]
    fn scalar_system() {
        // One sample, one parameter: g δθ = −f with g = Re(J* P), f = Re(J* ε).
        let sys = IpiSystem {
            j: DMatrix::from_row_slice(2, 1, &[0.3, -0.4]),
            p: DMatrix::from_row_slice(2, 1, &[1.5, 0.5]),
            eps: DVector::from_vec(vec![2.0, 1.0]),
            omega: 0.0,
            energy: Estimate { mean: 0.0, stderr: 0.0 },
            variance: 0.0,
            n_unique: 1,
        };
        let g = 0.3 * 1.5 + (-0.4) * 0.5;
        let f = 0.3 * 2.0 + (-0.4) * 1.0;
        let (d, _, _) = solve(&sys, &SolverConfig { s_cutoff: 1e-12, ..SolverConfig::for_dimension(1) }).unwrap();
        assert!((d[0] + f / g).abs() < 1e-14);
    }

    #[test]
    fn normal_matrix_matches_dense_tangent_vectors() {
        let lat = Lattice::chain(4).unwrap();
        let h = TfimHamiltonian::new(lat.clone(), 0.7).unwrap();
        let (net, p) = small_net(lat, 4);
        let omega = -3.1;
        let batch = sample(&net, &p, &SamplerConfig::full_summation(), None).unwrap();
        let sys = assemble_system(&net, &p, &h, &batch, omega, false).unwrap();
        let np = net.n_params();
        let mut tangent = nalgebra::DMatrix::<Complex64>::zeros(16, np);
        let mut psi = nalgebra::DVector::<Complex64>::zeros(16);
        for b in 0..16u64 {
            let x = bits_config(b, 4);
            let mut j = vec![Complex64::new(0.0, 0.0); np];
            let a = net.log_amplitude_and_jacobian(&p, &x, &mut j).exp();
            psi[b as usize] = a;
            for m in 0..np {
                tangent[(b as usize, m)] = a * j[m];
            }
        }
        let mut hm = h.dense_matrix().unwrap().map(|v| Complex64::new(v, 0.0));
        for i in 0..16 {
            hm[(i, i)] -= omega;
        }
        let norm = psi.norm_squared();
        let g = (tangent.adjoint() * &hm * &tangent).map(|v| v.re / norm);
        let diff = (&g - sys.normal_matrix()).amax();
        assert!(diff < 1e-9 * g.amax().max(1.0), "max deviation {diff}");
        let hpsi = h.dense_matrix().unwrap().map(|v| Complex64::new(v, 0.0)) * &psi;
        let f = (tangent.adjoint() * hpsi).map(|v| v.re / norm);
        assert!((&f - sys.force()).amax() < 1e-9 * f.amax().max(1.0));
    }

    #[test]
    fn exact_eigenstate_has_vanishing_force() {
        let h = chain(4, 0.5);
        let ed = dense_diagonalize(&h, 1).unwrap();
        let v: Vec<f64> = ed.eigenvectors[0].iter().copied().collect();
        let net = FullAmplitude::new(4).unwrap();
        let batch = sample(&net, &v, &SamplerConfig::full_summation(), None).unwrap();
        let sys = assemble_system(&net, &v, &h, &batch, ed.eigenvalues[0], true).unwrap();
        assert!(sys.force().norm() < 1e-10);
        assert!(sys.variance < 1e-20);
        let sys = assemble_system(&net, &v, &h, &batch, ed.eigenvalues[0] - 0.3, true).unwrap();
        let (d, _, _) = solve(&sys, &exact_cfg()).unwrap();
        assert!(d.norm() < 1e-9);
    }

    #[test]
    fn direct_and_woodbury_agree() {
        // Square, invertible system: uncentered complete parameterization away from the spectrum.
        let h = chain(3, 0.6);
        let net = FullAmplitude::new(3).unwrap();
        let p: Vec<f64> = (0..8).map(|i| 0.7 + 0.13 * i as f64).collect();
        let batch = sample(&net, &p, &SamplerConfig::full_summation(), None).unwrap();
        let sys = assemble_system(&net, &p, &h, &batch, -1.7, false).unwrap();
        assert_eq!(sys.n_rows(), sys.n_params());
        let cfg = SolverConfig { s_cutoff: 1e-14, ..SolverConfig::for_dimension(1) };
        let (a, sa, _) = solve(&sys, &SolverConfig { path: SolvePath::Direct, ..cfg.clone() }).unwrap();
        let (b, sb, used) = solve(&sys, &SolverConfig { path: SolvePath::Woodbury, ..cfg }).unwrap();
        assert_eq!(used, SolvePath::Woodbury);
        assert!(sa.sigma_max / sa.sigma_min < 1e8 && sb.sigma_max / sb.sigma_min < 1e8);
        assert!((&a - &b).norm() < 1e-8 * a.norm().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn auto_path_prefers_woodbury_for_wide_systems() {
        let lat = Lattice::chain(4).unwrap();
        let h = TfimHamiltonian::new(lat.clone(), 0.6).unwrap();
        let (net, p) = small_net(lat, 9);
        let batch = sample(&net, &p, &SamplerConfig::metropolis(2, 3, 5), None).unwrap();
        let sys = assemble_system(&net, &p, &h, &batch, -4.0, true).unwrap();
        assert!(sys.n_params() > sys.n_rows());
        let (_, _, used) = solve(&sys, &SolverConfig::for_dimension(1)).unwrap();
        assert_eq!(used, SolvePath::Woodbury);
    }

    #[test]
    fn inverse_iteration_selects_target_levels() {
        let h = chain(4, 0.5);
        let ed = dense_diagonalize(&h, 16).unwrap();
        let net = FullAmplitude::new(4).unwrap();
        let start: Vec<f64> = (0..16).map(|i| 1.0 + 0.1 * i as f64).collect();
        for k in 0..3 {
            let omega = ed.eigenvalues[k] - 0.05;
            let out = run(&net, start.clone(), &h, omega, &SamplerConfig::full_summation(), &exact_cfg(), 0, None)
                .unwrap();
            let psi = DVector::from_vec(out.params.clone());
            // Level 2 is doubly degenerate here; measure against the whole eigenspace.
            let overlap: f64 =
                ed.manifold(k, 1e-9).unwrap().iter().map(|v| psi.dot(v).powi(2)).sum::<f64>() / psi.norm_squared();
            assert!(1.0 - overlap < 1e-8, "level {k}: infidelity {}", 1.0 - overlap);
            assert!((out.energy.mean - ed.eigenvalues[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn converged_thresholds() {
        let mut d = Diagnostics {
            iteration: 0,
            energy: -1.0,
            energy_stderr: 0.0,
            variance: 1e-8,
            v_score: 0.0,
            omega: -1.0,
            step_norm: 0.0,
            eta: 0.01,
            sigma_min: 0.0,
            sigma_max: 0.0,
            effective_rank: 0,
            rejected: false,
            woodbury: false,
            acceptance: None,
        };
        assert!(converged(&d, 5e-7));
        d.variance = 1e-4;
        assert!(!converged(&d, 5e-5));
        d.variance = 0.0;
        assert!(converged(&d, 1e-300));
    }

    #[test]
    fn trust_radius_clips_step() {
        let sys = IpiSystem {
            j: DMatrix::from_row_slice(1, 1, &[1.0]),
            p: DMatrix::from_row_slice(1, 1, &[1e-5]),
            eps: DVector::from_vec(vec![1.0]),
            omega: 0.0,
            energy: Estimate { mean: -1.0, stderr: 0.0 },
            variance: 1.0,
            n_unique: 1,
        };
        let batch = SampleBatch::from_weighted(1, vec![0], vec![1.0]).unwrap();
        let cfg = SolverConfig { s_cutoff: 1e-12, ..SolverConfig::for_dimension(1) };
        let (new, d) = step_from_system(1, &[0.0], &sys, &batch, &cfg, 0).unwrap();
        assert!(d.rejected);
        assert_eq!(d.eta, 0.01);
        assert!((new[0].abs() - 0.01 * 1e3).abs() < 1e-9);
    }

    #[test]
    fn nonfinite_rows_name_the_block() {
        let h = chain(3, 0.5);
        let net = FullAmplitude::new(3).unwrap();
        let mut p = vec![1.0; 8];
        p[3] = f64::INFINITY;
        let batch = SampleBatch::from_weighted(3, vec![0, 1], vec![0.5, 0.5]).unwrap();
        let err = assemble_system(&net, &p, &h, &batch, 0.0, true).unwrap_err();
        assert!(matches!(err, Error::NonFiniteSystem { .. } | Error::NonFinite { .. }), "{err}");
    }
}
