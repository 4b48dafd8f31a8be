//! Adiabatic transport of eigenstates along a coupling grid.
//!
//! Each track starts from a perturbative reference at `λ0 = grid[0]`, is refined
//! there with IPI, and is then carried step by step to larger couplings with the
//! first-order target `ω = E + δλ ⟨dH/dλ⟩`. Tracks share nothing and run in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ansatz::{
    build_reference_state, ArchitectureConfig, ExcitationSpec, InitConfig, ResidualRbm, DEFAULT_MANIFOLD_CAP,
};
use crate::error::{Error, Result};
use crate::ipi::{self, SolverConfig};
use crate::lattice::{Lattice, TfimHamiltonian};
use crate::par;
use crate::sampler::{expectation, sample, stream_seed, SampleBatch, SamplerConfig, SamplerMode};

/// One transported eigenstate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub label: String,
    pub excitation: ExcitationSpec,
}

impl TrackSpec {
    pub fn new(label: impl Into<String>, excitation: ExcitationSpec) -> Self {
        TrackSpec { label: label.into(), excitation }
    }
}

#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub lattice: Lattice,
    /// Couplings visited in order; `grid[0]` is the pre-optimization point.
    pub grid: Vec<f64>,
    pub tracks: Vec<TrackSpec>,
    pub architecture: ArchitectureConfig,
    pub init: InitConfig,
    pub solver: SolverConfig,
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub manifold_cap: usize,
}

/// `steps + 1` evenly spaced couplings from `lambda0` to `lambda_final`.
pub fn uniform_grid(lambda0: f64, lambda_final: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::config("model.steps", "must be at least 1"));
    }
    if !(lambda0.is_finite() && lambda_final.is_finite()) || lambda_final < lambda0 || lambda0 < 0.0 {
        return Err(Error::config("model.lambda_final", "require 0 <= lambda0 <= lambda_final"));
    }
    let d = (lambda_final - lambda0) / steps as f64;
    Ok((0..=steps).map(|s| if s == steps { lambda_final } else { lambda0 + d * s as f64 }).collect())
}

impl TransportPlan {
    /// Plan with the per-dimension defaults for architecture, solver and sampler.
    pub fn with_defaults(lattice: Lattice, grid: Vec<f64>, tracks: Vec<TrackSpec>, seed: u64) -> Self {
        let n = lattice.n_sites();
        let sampler = if lattice.dimension() == 1 {
            SamplerConfig::metropolis(12, n, seed)
        } else {
            SamplerConfig::metropolis(32, 32, seed)
        };
        TransportPlan {
            architecture: ArchitectureConfig::for_lattice(&lattice),
            init: InitConfig::default(),
            solver: SolverConfig::for_dimension(lattice.dimension()),
            sampler,
            lattice,
            grid,
            tracks,
            seed,
            manifold_cap: DEFAULT_MANIFOLD_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.len() < 2 {
            return Err(Error::config("model.steps", "the grid needs at least one step"));
        }
        if self.grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::config("model.grid", "couplings must be finite and non-negative"));
        }
        if self.grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("model.grid", "couplings must be non-decreasing"));
        }
        if self.tracks.is_empty() {
            return Err(Error::config("tracks", "at least one track is required"));
        }
        let mut labels: Vec<&str> = self.tracks.iter().map(|t| t.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("tracks", "track labels must be unique"));
        }
        self.solver.validate()?;
        self.sampler.validate(self.lattice.n_sites())
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    /// Seed of a track, independent of the other tracks in the plan.
    pub fn track_seed(&self, label: &str) -> u64 {
        let digest = Sha256::digest(label.as_bytes());
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        stream_seed(&[self.seed, u64::from_le_bytes(word)])
    }

    /// Builds the network for a track.
    pub fn ansatz(&self, track: &TrackSpec) -> Result<ResidualRbm> {
        let h0 = TfimHamiltonian::new(self.lattice.clone(), 0.0)?;
        let reference = build_reference_state(&h0, &track.excitation, self.manifold_cap)?;
        ResidualRbm::new(self.lattice.clone(), self.architecture.clone(), reference)
    }
}

/// Checkpointed state after one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportState {
    pub label: String,
    pub step: usize,
    pub lambda: f64,
    pub params: Vec<f64>,
    pub energy: f64,
    pub energy_stderr: f64,
    pub variance: f64,
    pub v_score: f64,
    pub omega: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Metropolis chain positions; sampling resumes from here.
    pub chain_states: Vec<u64>,
}

/// `ω = E + δλ ⟨dH/dλ⟩` with the expectation taken over `batch`.
pub fn perturbative_target(energy: f64, delta_lambda: f64, h: &TfimHamiltonian, batch: &SampleBatch) -> Result<f64> {
    if delta_lambda == 0.0 {
        return Ok(energy);
    }
    let slope = expectation(batch, |x| -(h.bond_sum(x) as f64))?;
    Ok(energy + delta_lambda * slope.mean)
}

const INIT_STREAM: u64 = 0x696e_6974;
const TARGET_STREAM: u64 = 0x7461_7267;

/// Runs one track. With `resume`, continues after the given state; otherwise
/// starts from the reference. `on_state` sees every new state in order.
pub fn transport_eigenstate(
    plan: &TransportPlan,
    track: &TrackSpec,
    resume: Option<&TransportState>,
    on_state: &mut dyn FnMut(&TransportState) -> Result<()>,
) -> Result<Vec<TransportState>> {
    plan.validate()?;
    let net = plan.ansatz(track)?;
    let seed = plan.track_seed(&track.label);
    let n = plan.lattice.n_sites();
    let mut out = Vec::new();

    let mut current = match resume {
        Some(state) => {
            if state.label != track.label {
                return Err(Error::Checkpoint(format!("state for `{}` used to resume `{}`", state.label, track.label)));
            }
            if state.params.len() != net.layout().n_params() {
                return Err(Error::Checkpoint(format!(
                    "{} parameters in checkpoint, layout has {}",
                    state.params.len(),
                    net.layout().n_params()
                )));
            }
            if state.step >= plan.steps() {
                return Ok(out);
            }
            state.clone()
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, INIT_STREAM]));
            let params = net.init(&mut rng, &plan.init).values().to_vec();
            let lambda = plan.grid[0];
            let h = TfimHamiltonian::new(plan.lattice.clone(), lambda)?;
            let omega = net.reference().energy_estimate(lambda);
            let run = ipi::run(&net, params, &h, omega, &plan.sampler, &plan.solver, stream_seed(&[seed, 0]), None)?;
            let state = to_state(track, 0, lambda, omega, n, run);
            on_state(&state)?;
            out.push(state.clone());
            state
        }
    };

    for step in current.step + 1..=plan.steps() {
        let lambda = plan.grid[step];
        let h = TfimHamiltonian::new(plan.lattice.clone(), lambda)?;
        let starts = (!current.chain_states.is_empty()).then(|| current.chain_states.clone());
        let sampler = plan.sampler.with_seed(stream_seed(&[seed, step as u64, TARGET_STREAM]));
        let batch = sample(&net, &current.params, &sampler, starts.as_deref())?;
        let omega = perturbative_target(current.energy, lambda - current.lambda, &h, &batch)?;
        let starts = (plan.sampler.mode == SamplerMode::Metropolis).then(|| batch.final_states().to_vec());
        let run = ipi::run(
            &net,
            current.params.clone(),
            &h,
            omega,
            &plan.sampler,
            &plan.solver,
            stream_seed(&[seed, step as u64]),
            starts,
        )?;
        let state = to_state(track, step, lambda, omega, n, run);
        on_state(&state)?;
        out.push(state.clone());
        current = state;
    }
    Ok(out)
}

fn to_state(track: &TrackSpec, step: usize, lambda: f64, omega: f64, n: usize, run: ipi::IpiRun) -> TransportState {
    let e = run.energy.mean;
    TransportState {
        label: track.label.clone(),
        step,
        lambda,
        params: run.params,
        energy: e,
        energy_stderr: run.energy.stderr,
        variance: run.variance,
        v_score: if e == 0.0 { f64::NAN } else { n as f64 * run.variance / (e * e) },
        omega,
        iterations: run.diagnostics.len(),
        converged: run.converged,
        chain_states: run.chain_states.unwrap_or_default(),
    }
}

/// Result of one track inside `transport_all`.
#[derive(Debug)]
pub struct TrackOutcome {
    pub label: String,
    pub states: Result<Vec<TransportState>>,
}

/// Runs every track concurrently. Output order follows `plan.tracks`; a failing
/// track does not stop the others. `on_state` may be called from several threads.
pub fn transport_all<F>(plan: &TransportPlan, resume: &[Option<TransportState>], on_state: F) -> Vec<TrackOutcome>
where
    F: Fn(&TransportState) -> Result<()> + Sync + Send,
{
    par::map_range(plan.tracks.len(), |i| {
        let track = &plan.tracks[i];
        let start = resume.get(i).and_then(|s| s.as_ref());
        let states = transport_eigenstate(plan, track, start, &mut |s| on_state(s));
        TrackOutcome { label: track.label.clone(), states }
    })
}
