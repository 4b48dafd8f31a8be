//! Run configuration, checkpoints, result tables and the transport driver used
//! by the command-line front end.
//!
//! A run directory holds `config.toml` (the fully resolved configuration),
//! `checkpoints/<track>/step_NNNN.ckpt`, `results.csv`, `fidelity.csv` and
//! `run.log`. Tables are rebuilt from the checkpoints at the end of every run,
//! so a resumed run writes exactly what an uninterrupted one would.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ansatz::{ArchitectureConfig, Ansatz, ExcitationSpec, InitConfig, ParameterLayout, ResidualRbm, DEFAULT_MANIFOLD_CAP};
use crate::error::{Error, Result};
use crate::exact::{exact_diagonalize, EdResult};
use crate::ipi::SolverConfig;
use crate::lattice::{Boundary, Lattice, TfimHamiltonian};
use crate::observables::{
    infidelity_against, full_wavefunction, magnetization_moments, nqs_fidelity, nqs_fidelity_exact,
    ObservableRecord,
};
use crate::par;
use crate::sampler::{sample, stream_seed, SamplerConfig, SamplerMode, FULL_SUMMATION_MAX_SITES};
use crate::transport::{transport_all, uniform_grid, TrackSpec, TransportPlan, TransportState};

pub const SCHEMA_VERSION: u32 = 1;

/// Largest lattice for which infidelities against exact eigenspaces are on by default.
pub const DEFAULT_INFIDELITY_MAX_SITES: usize = 16;
/// Exact levels searched when reporting the infidelity of a transported state.
const INFIDELITY_LEVELS: usize = 8;
const MOMENT_STREAM: u64 = 0x6d6f_6d73;
const FIDELITY_STREAM: u64 = 0x6669_6465;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dimension: usize,
    pub extent: usize,
    pub boundary: Boundary,
    pub lambda0: f64,
    pub lambda_final: f64,
    /// Number of uniform steps `S` between `lambda0` and `lambda_final`.
    pub steps: usize,
    /// Additional couplings merged into the uniform grid, e.g. `λ ± ϵ` pairs for
    /// fidelity susceptibilities.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_points: Vec<f64>,
    pub manifold_cap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub n_chains: usize,
    pub samples_per_chain: usize,
    pub burn_in: usize,
    pub warm_burn_in: usize,
    pub thinning: usize,
    pub mode: SamplerMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackConfig {
    pub label: String,
    #[serde(default)]
    pub flips: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<Vec<usize>>,
    #[serde(default)]
    pub level: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservablesConfig {
    /// Infidelity against the closest low-lying exact eigenspace.
    pub infidelity: bool,
    /// `⟨m²⟩`, `⟨m⁴⟩` from a fresh batch per state.
    pub magnetization: bool,
    /// Fidelities between neighbouring grid points and the resulting susceptibility.
    pub fidelity: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub ansatz: ArchitectureConfig,
    pub init: InitConfig,
    pub solver: SolverConfig,
    pub sampler: SamplerSection,
    pub observables: ObservablesConfig,
    pub tracks: Vec<TrackConfig>,
}

impl RunConfig {
    /// Per-dimension defaults for a `dimension`-D lattice of linear size `extent`,
    /// transporting the ground state and the zero-momentum single-flip state.
    pub fn defaults(dimension: usize, extent: usize) -> Result<Self> {
        let lattice = lattice_for(dimension, extent, Boundary::Periodic)?;
        let n = lattice.n_sites();
        let (lambda_final, steps, n_chains, samples) = if dimension == 1 { (1.0, 20, 12, n) } else { (0.329, 25, 32, 32) };
        let sampler = SamplerConfig::metropolis(n_chains, samples, 0);
        Ok(RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: None,
            model: ModelConfig {
                dimension,
                extent,
                boundary: Boundary::Periodic,
                lambda0: 0.05,
                lambda_final,
                steps,
                extra_points: Vec::new(),
                manifold_cap: DEFAULT_MANIFOLD_CAP,
            },
            ansatz: ArchitectureConfig::for_lattice(&lattice),
            init: InitConfig::default(),
            solver: SolverConfig::for_dimension(dimension),
            sampler: SamplerSection {
                n_chains: sampler.n_chains,
                samples_per_chain: sampler.samples_per_chain,
                burn_in: sampler.burn_in,
                warm_burn_in: sampler.warm_burn_in,
                thinning: sampler.thinning,
                mode: sampler.mode,
            },
            observables: ObservablesConfig {
                infidelity: n <= DEFAULT_INFIDELITY_MAX_SITES,
                magnetization: true,
                fidelity: true,
            },
            tracks: vec![
                TrackConfig { label: "ground".into(), flips: 0, momentum: None, level: 0 },
                TrackConfig { label: "first".into(), flips: 1, momentum: Some(vec![0; dimension]), level: 0 },
            ],
        })
    }

    /// Parses a TOML document. Only `model.dimension` and `model.extent` are
    /// required; every other key falls back to the per-dimension default.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        let model = user.get("model").and_then(|m| m.as_table());
        let int = |key: &str| -> Result<usize> {
            let v = model
                .and_then(|m| m.get(key))
                .ok_or_else(|| Error::config(format!("model.{key}"), "is required"))?;
            v.as_integer()
                .filter(|i| *i >= 0)
                .map(|i| i as usize)
                .ok_or_else(|| Error::config(format!("model.{key}"), "must be a non-negative integer"))
        };
        let dimension = int("dimension")?;
        let extent = int("extent")?;
        let defaults = Self::defaults(dimension, extent)?;
        let mut merged = toml::Table::try_from(&defaults).map_err(|e| Error::config("config", e.to_string()))?;
        merge_tables(&mut merged, user);
        let config: RunConfig =
            toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        let m = &self.model;
        lattice_for(m.dimension, m.extent, m.boundary)?;
        if m.steps == 0 {
            return Err(Error::config("model.steps", "must be at least 1"));
        }
        if !(m.lambda0.is_finite() && m.lambda0 >= 0.0) {
            return Err(Error::config("model.lambda0", "must be finite and non-negative"));
        }
        if !(m.lambda_final.is_finite() && m.lambda_final >= m.lambda0) {
            return Err(Error::config("model.lambda_final", "must be at least lambda0"));
        }
        if m.extra_points.iter().any(|l| !(l.is_finite() && *l >= m.lambda0 && *l <= m.lambda_final)) {
            return Err(Error::config("model.extra_points", "couplings must lie in [lambda0, lambda_final]"));
        }
        if m.manifold_cap == 0 {
            return Err(Error::config("model.manifold_cap", "must be at least 1"));
        }
        let a = &self.ansatz;
        for (field, value) in [
            ("ansatz.embedding", a.embedding),
            ("ansatz.enhancement", a.enhancement),
            ("ansatz.rbm_channels", a.rbm_channels),
        ] {
            if value == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if a.encoder_kernel % 2 == 0 {
            return Err(Error::config("ansatz.encoder_kernel", "must be odd"));
        }
        if a.rbm_kernel.is_some_and(|k| k % 2 == 0 || k > m.extent) {
            return Err(Error::config("ansatz.rbm_kernel", "must be odd and at most the lattice extent"));
        }
        if !(a.norm_eps > 0.0) {
            return Err(Error::config("ansatz.norm_eps", "must be positive"));
        }
        let i = &self.init;
        for (field, value) in [
            ("init.encoder_std", i.encoder_std),
            ("init.rbm_std", i.rbm_std),
            ("init.embedding_std", i.embedding_std),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        if !(i.a.is_finite() && i.b.is_finite()) {
            return Err(Error::config("init", "a and b must be finite"));
        }
        self.solver.validate()?;
        self.sampler_config().validate(m.extent.pow(m.dimension as u32))?;
        if self.tracks.is_empty() {
            return Err(Error::config("tracks", "at least one track is required"));
        }
        for t in &self.tracks {
            if t.label.is_empty() || !t.label.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(Error::config("tracks.label", format!("`{}` must be non-empty [A-Za-z0-9_-]", t.label)));
            }
            if t.momentum.as_ref().is_some_and(|k| k.len() != m.dimension) {
                return Err(Error::config("tracks.momentum", format!("track `{}` needs {} components", t.label, m.dimension)));
            }
        }
        let mut labels: Vec<&str> = self.tracks.iter().map(|t| t.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("tracks.label", "labels must be unique"));
        }
        Ok(())
    }

    pub fn lattice(&self) -> Result<Lattice> {
        lattice_for(self.model.dimension, self.model.extent, self.model.boundary)
    }

    /// The uniform grid with `extra_points` merged in.
    pub fn grid(&self) -> Result<Vec<f64>> {
        let m = &self.model;
        let mut grid = uniform_grid(m.lambda0, m.lambda_final, m.steps)?;
        grid.extend(m.extra_points.iter().copied());
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        Ok(grid)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            n_chains: s.n_chains,
            samples_per_chain: s.samples_per_chain,
            burn_in: s.burn_in,
            warm_burn_in: s.warm_burn_in,
            thinning: s.thinning,
            seed: self.seed,
            mode: s.mode,
        }
    }

    pub fn to_plan(&self) -> Result<TransportPlan> {
        self.validate()?;
        let tracks = self
            .tracks
            .iter()
            .map(|t| {
                TrackSpec::new(t.label.clone(), ExcitationSpec { flips: t.flips, momentum: t.momentum.clone(), level: t.level })
            })
            .collect();
        let plan = TransportPlan {
            lattice: self.lattice()?,
            grid: self.grid()?,
            tracks,
            architecture: self.ansatz.clone(),
            init: self.init.clone(),
            solver: self.solver.clone(),
            sampler: self.sampler_config(),
            seed: self.seed,
            manifold_cap: self.model.manifold_cap,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// SHA-256 over the canonical JSON form, excluding the output directory.
    pub fn digest(&self) -> String {
        let canonical = RunConfig { output_dir: None, ..self.clone() };
        let bytes = serde_json::to_vec(&canonical).expect("configuration serializes");
        hex(&Sha256::digest(&bytes))
    }

    /// Short identifier written in the `run_id` column.
    pub fn run_id(&self) -> String {
        self.digest()[..12].to_string()
    }
}

fn lattice_for(dimension: usize, extent: usize, boundary: Boundary) -> Result<Lattice> {
    if !(1..=2).contains(&dimension) {
        return Err(Error::config("model.dimension", format!("must be 1 or 2, got {dimension}")));
    }
    Lattice::new(dimension, extent, boundary).map_err(|e| Error::config("model.extent", e.to_string()))
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

const MAGIC: &[u8; 8] = b"NQSTCKPT";
const TRAILER: usize = 32;

/// Persistent form of one transported state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_digest: String,
    /// Seed of the track's random streams; step `s` draws from `stream_seed([track_seed, s, ..])`.
    pub track_seed: u64,
    pub layout: ParameterLayout,
    pub state: TransportState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    config_digest: String,
    track_seed: u64,
    label: String,
    step: usize,
    iterations: usize,
    converged: bool,
    n_params: usize,
    n_chains: usize,
    layout: ParameterLayout,
}

impl Checkpoint {
    /// `MAGIC | u32 header length | JSON header | f64 scalars | f64 params |
    /// u64 chain states | SHA-256 of everything before`, little endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        if s.params.len() != self.layout.n_params() {
            return Err(Error::Checkpoint(format!(
                "{} parameters for a layout of {}",
                s.params.len(),
                self.layout.n_params()
            )));
        }
        let header = Header {
            schema_version: SCHEMA_VERSION,
            config_digest: self.config_digest.clone(),
            track_seed: self.track_seed,
            label: s.label.clone(),
            step: s.step,
            iterations: s.iterations,
            converged: s.converged,
            n_params: s.params.len(),
            n_chains: s.chain_states.len(),
            layout: self.layout.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(64 + json.len() + 8 * (6 + s.params.len() + s.chain_states.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in [s.lambda, s.energy, s.energy_stderr, s.variance, s.v_score, s.omega] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &s.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &s.chain_states {
            out.extend_from_slice(&c.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 + TRAILER || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - TRAILER);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(bad("checksum mismatch"));
        }
        let hlen = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
        let json = body.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let h: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if h.schema_version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!("schema version {} (expected {SCHEMA_VERSION})", h.schema_version)));
        }
        h.layout.validate()?;
        if h.layout.n_params() != h.n_params {
            return Err(Error::Checkpoint(format!(
                "layout manifest describes {} parameters, header says {}",
                h.layout.n_params(),
                h.n_params
            )));
        }
        let payload = &body[12 + hlen..];
        if payload.len() != 8 * (6 + h.n_params + h.n_chains) {
            return Err(bad("payload length does not match the header"));
        }
        let words: Vec<[u8; 8]> = payload.chunks_exact(8).map(|c| c.try_into().unwrap()).collect();
        let f = |i: usize| f64::from_le_bytes(words[i]);
        let params = (0..h.n_params).map(|i| f(6 + i)).collect();
        let chain_states = (0..h.n_chains).map(|i| u64::from_le_bytes(words[6 + h.n_params + i])).collect();
        let state = TransportState {
            label: h.label,
            step: h.step,
            lambda: f(0),
            params,
            energy: f(1),
            energy_stderr: f(2),
            variance: f(3),
            v_score: f(4),
            omega: f(5),
            iterations: h.iterations,
            converged: h.converged,
            chain_states,
        };
        Ok(Checkpoint { config_digest: h.config_digest, track_seed: h.track_seed, layout: h.layout, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn checkpoint_path(output_dir: &Path, label: &str, step: usize) -> PathBuf {
    output_dir.join("checkpoints").join(label).join(format!("step_{step:04}.ckpt"))
}

/// Checkpoints of one track ordered by step.
pub fn list_checkpoints(output_dir: &Path, label: &str) -> Result<Vec<(usize, PathBuf)>> {
    let dir = output_dir.join("checkpoints").join(label);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(step) = name.strip_prefix("step_").and_then(|s| s.strip_suffix(".ckpt")) {
            if let Ok(step) = step.parse() {
                out.push((step, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Columns of `results.csv`, in order.
pub const RESULTS_COLUMNS: [&str; 12] = [
    "run_id",
    "track",
    "lambda",
    "energy",
    "energy_stderr",
    "variance",
    "v_score",
    "infidelity",
    "m2",
    "m4",
    "converged",
    "iterations",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub track: String,
    pub lambda: f64,
    pub energy: f64,
    pub energy_stderr: f64,
    pub variance: f64,
    pub v_score: f64,
    pub infidelity: Option<f64>,
    pub m2: Option<f64>,
    pub m4: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl ResultRow {
    pub fn from_record(run_id: &str, record: &ObservableRecord, state: &TransportState) -> Self {
        ResultRow {
            run_id: run_id.to_string(),
            track: record.label.clone(),
            lambda: record.lambda,
            energy: record.energy,
            energy_stderr: record.energy_stderr,
            variance: record.variance,
            v_score: record.v_score,
            infidelity: record.infidelity,
            m2: record.m2,
            m4: record.m4,
            converged: state.converged,
            iterations: state.iterations,
        }
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new().has_headers(false).from_path(path)?)
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(RESULTS_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a results table, reporting every missing column at once.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    read_table(path, &RESULTS_COLUMNS)
}

fn read_table<T: serde::de::DeserializeOwned>(path: &Path, columns: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let missing: Vec<String> =
        columns.iter().filter(|c| !headers.iter().any(|h| h == **c)).map(|c| c.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::Schema { path: path.display().to_string(), columns: missing });
    }
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

pub const FIDELITY_COLUMNS: [&str; 9] = [
    "track",
    "lambda",
    "epsilon_minus",
    "epsilon_plus",
    "fidelity_minus",
    "fidelity_plus",
    "chi_f",
    "chi_f_stderr",
    "method",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub track: String,
    pub lambda: f64,
    pub epsilon_minus: f64,
    pub epsilon_plus: f64,
    pub fidelity_minus: f64,
    pub fidelity_plus: f64,
    pub chi_f: f64,
    pub chi_f_stderr: f64,
    /// `exact` (full wavefunctions) or `sampled`.
    pub method: String,
}

pub fn write_fidelity(path: &Path, rows: &[FidelityRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(FIDELITY_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a fidelity table, reporting every missing column at once.
pub fn read_fidelity(path: &Path) -> Result<Vec<FidelityRow>> {
    read_table(path, &FIDELITY_COLUMNS)
}

/// `χ_F = −ln F₋/ϵ₋² − ln F₊/ϵ₊²`, which reduces to `−ln(F₋F₊)/ϵ²` on a uniform grid.
pub fn uneven_susceptibility(f_minus: f64, eps_minus: f64, f_plus: f64, eps_plus: f64) -> Result<f64> {
    if !(f_minus > 0.0 && f_plus > 0.0) {
        return Err(Error::Invalid(format!("fidelities must be positive, got {f_minus} and {f_plus}")));
    }
    if !(eps_minus > 0.0 && eps_plus > 0.0) {
        return Err(Error::Invalid("coupling spacings must be positive".into()));
    }
    Ok(-f_minus.ln() / (eps_minus * eps_minus) - f_plus.ln() / (eps_plus * eps_plus))
}

/// Exact spectra per coupling, shared by all tracks.
fn exact_spectra(lattice: &Lattice, lambdas: &[f64]) -> Result<Vec<EdResult>> {
    let dim = 1usize << lattice.n_sites();
    let levels = INFIDELITY_LEVELS.min(dim);
    par::map(lambdas, |&l| exact_diagonalize(&TfimHamiltonian::new(lattice.clone(), l)?, levels))
        .into_iter()
        .collect()
}

/// Infidelity against the closest of the lowest exact eigenspaces.
fn nearest_manifold_infidelity<A: Ansatz + ?Sized>(net: &A, params: &[f64], ed: &EdResult) -> Result<f64> {
    let psi = full_wavefunction(net, params)?;
    let mut best = 1.0f64;
    let mut level = 0;
    while level < ed.eigenvalues.len() {
        let group = ed.degenerate_group(level, 1e-8);
        // A group cut off by the level count is incomplete; skip it.
        if group.end < ed.eigenvalues.len() || ed.eigenvalues.len() == 1usize << net.n_sites() {
            best = best.min(infidelity_against(&psi, &ed.eigenvectors[group.clone()])?);
        }
        level = group.end;
    }
    Ok(best)
}

/// Observables of one checkpointed state.
pub fn observe_state(
    plan: &TransportPlan,
    net: &ResidualRbm,
    track_seed: u64,
    state: &TransportState,
    ed: Option<&EdResult>,
    magnetization: bool,
) -> Result<ObservableRecord> {
    let infidelity = match ed {
        Some(ed) => Some(nearest_manifold_infidelity(net, &state.params, ed)?),
        None => None,
    };
    let (m2, m4) = if magnetization {
        let sampler = plan.sampler.with_seed(stream_seed(&[track_seed, state.step as u64, MOMENT_STREAM]));
        let starts = (!state.chain_states.is_empty()).then(|| state.chain_states.clone());
        let batch = sample(net, &state.params, &sampler, starts.as_deref())?;
        let (m2, m4) = magnetization_moments(&batch)?;
        (Some(m2.mean), Some(m4.mean))
    } else {
        (None, None)
    };
    Ok(ObservableRecord {
        lambda: state.lambda,
        label: state.label.clone(),
        energy: state.energy,
        energy_stderr: state.energy_stderr,
        variance: state.variance,
        v_score: state.v_score,
        infidelity,
        m2,
        m4,
    })
}

/// Fidelity-susceptibility rows at the interior grid points of one track.
pub fn fidelity_rows(plan: &TransportPlan, net: &ResidualRbm, track_seed: u64, states: &[TransportState]) -> Result<Vec<FidelityRow>> {
    let n = plan.lattice.n_sites();
    let exact = plan.sampler.mode == SamplerMode::FullSummation || n <= FULL_SUMMATION_MAX_SITES.min(16);
    let pair = |a: &TransportState, b: &TransportState| -> Result<(f64, f64)> {
        if exact {
            return Ok((nqs_fidelity_exact(net, &a.params, net, &b.params)?, 0.0));
        }
        let draw = |s: &TransportState| {
            let sampler = plan.sampler.with_seed(stream_seed(&[track_seed, s.step as u64, FIDELITY_STREAM]));
            let starts = (!s.chain_states.is_empty()).then(|| s.chain_states.clone());
            sample(net, &s.params, &sampler, starts.as_deref())
        };
        let f = nqs_fidelity(net, &a.params, &draw(a)?, net, &b.params, &draw(b)?)?;
        Ok((f.value, f.stderr))
    };
    let fids: Vec<Result<(f64, f64)>> = par::map_range(states.len().saturating_sub(1), |i| pair(&states[i], &states[i + 1]));
    let fids: Vec<(f64, f64)> = fids.into_iter().collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for i in 1..states.len().saturating_sub(1) {
        let (em, ep) = (states[i].lambda - states[i - 1].lambda, states[i + 1].lambda - states[i].lambda);
        let ((fm, sm), (fp, sp)) = (fids[i - 1], fids[i]);
        if em <= 0.0 || ep <= 0.0 || fm <= 0.0 || fp <= 0.0 {
            continue;
        }
        let chi = uneven_susceptibility(fm, em, fp, ep)?;
        let stderr = ((sm / fm / (em * em)).powi(2) + (sp / fp / (ep * ep)).powi(2)).sqrt();
        rows.push(FidelityRow {
            track: states[i].label.clone(),
            lambda: states[i].lambda,
            epsilon_minus: em,
            epsilon_plus: ep,
            fidelity_minus: fm,
            fidelity_plus: fp,
            chi_f: chi,
            chi_f_stderr: stderr,
            method: if exact { "exact" } else { "sampled" }.into(),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default)]
pub struct TransportOptions {
    pub resume: bool,
}

#[derive(Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub rows: Vec<ResultRow>,
    /// `(track, error message)` for every failed track.
    pub failures: Vec<(String, String)>,
}

/// Runs every track of `config` into `output_dir` and writes the tables.
/// With `resume`, each track continues from its latest checkpoint; a checkpoint
/// or stored configuration with a different digest is refused.
pub fn run_transport(config: &RunConfig, output_dir: &Path, options: &TransportOptions) -> Result<RunReport> {
    let plan = config.to_plan()?;
    let digest = config.digest();
    fs::create_dir_all(output_dir)?;
    let config_path = output_dir.join("config.toml");
    if options.resume && config_path.exists() {
        let stored = RunConfig::load(&config_path)?;
        if stored.digest() != digest {
            return Err(Error::Checkpoint(format!(
                "configuration digest {} differs from the run in {} ({}); refusing to resume",
                digest,
                output_dir.display(),
                stored.digest()
            )));
        }
    }
    fs::write(&config_path, config.to_toml_string()?)?;

    let nets: Vec<ResidualRbm> = plan.tracks.iter().map(|t| plan.ansatz(t)).collect::<Result<_>>()?;
    let mut resume = Vec::with_capacity(plan.tracks.len());
    for (track, net) in plan.tracks.iter().zip(&nets) {
        let latest = if options.resume { list_checkpoints(output_dir, &track.label)?.pop() } else { None };
        match latest {
            Some((_, path)) => {
                let c = Checkpoint::load(&path)?;
                if c.config_digest != digest {
                    return Err(Error::Checkpoint(format!(
                        "{} was written with configuration digest {}, current is {digest}; refusing to resume",
                        path.display(),
                        c.config_digest
                    )));
                }
                if &c.layout != net.layout() {
                    return Err(Error::Checkpoint(format!("{}: parameter layout does not match the ansatz", path.display())));
                }
                resume.push(Some(c.state));
            }
            None => resume.push(None),
        }
    }
    if !options.resume {
        let dir = output_dir.join("checkpoints");
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
    }

    let log = Mutex::new(fs::OpenOptions::new().create(true).append(true).open(output_dir.join("run.log"))?);
    let save = |state: &TransportState| -> Result<()> {
        let i = plan.tracks.iter().position(|t| t.label == state.label).expect("known track");
        let c = Checkpoint {
            config_digest: digest.clone(),
            track_seed: plan.track_seed(&state.label),
            layout: nets[i].layout().clone(),
            state: state.clone(),
        };
        c.save(&checkpoint_path(output_dir, &state.label, state.step))?;
        let mut f = log.lock().expect("log mutex");
        writeln!(
            f,
            "track={} step={} lambda={} energy={} stderr={} variance={} v_score={} iterations={} converged={}",
            state.label,
            state.step,
            state.lambda,
            state.energy,
            state.energy_stderr,
            state.variance,
            state.v_score,
            state.iterations,
            state.converged
        )?;
        Ok(())
    };
    let outcomes = transport_all(&plan, &resume, save);
    let mut failures = Vec::new();
    for o in &outcomes {
        if let Err(e) = &o.states {
            failures.push((o.label.clone(), e.to_string()));
            let mut f = log.lock().expect("log mutex");
            writeln!(f, "track={} failed: {e}", o.label)?;
        }
    }

    let rows = write_tables(config, &plan, &nets, output_dir, &failures)?;
    Ok(RunReport { output_dir: output_dir.to_path_buf(), rows, failures })
}

/// Rebuilds `results.csv` and `fidelity.csv` from the checkpoints on disk.
fn write_tables(
    config: &RunConfig,
    plan: &TransportPlan,
    nets: &[ResidualRbm],
    output_dir: &Path,
    failures: &[(String, String)],
) -> Result<Vec<ResultRow>> {
    let run_id = config.run_id();
    let mut per_track: Vec<Vec<TransportState>> = Vec::new();
    for track in &plan.tracks {
        let mut states = Vec::new();
        if !failures.iter().any(|(l, _)| l == &track.label) {
            for (_, path) in list_checkpoints(output_dir, &track.label)? {
                states.push(Checkpoint::load(&path)?.state);
            }
        }
        per_track.push(states);
    }
    let ed: BTreeMap<u64, EdResult> = if config.observables.infidelity {
        let lambdas: Vec<f64> = plan.grid.clone();
        exact_spectra(&plan.lattice, &lambdas)?.into_iter().zip(&lambdas).map(|(e, l)| (l.to_bits(), e)).collect()
    } else {
        BTreeMap::new()
    };

    let mut rows = Vec::new();
    let mut fidelity = Vec::new();
    for ((track, net), states) in plan.tracks.iter().zip(nets).zip(&per_track) {
        let seed = plan.track_seed(&track.label);
        let records: Vec<Result<ObservableRecord>> = par::map(states, |s| {
            observe_state(plan, net, seed, s, ed.get(&s.lambda.to_bits()), config.observables.magnetization)
        });
        for (record, state) in records.into_iter().zip(states) {
            rows.push(ResultRow::from_record(&run_id, &record?, state));
        }
        if config.observables.fidelity {
            fidelity.extend(fidelity_rows(plan, net, seed, states)?);
        }
    }
    write_results(&output_dir.join("results.csv"), &rows)?;
    if config.observables.fidelity {
        write_fidelity(&output_dir.join("fidelity.csv"), &fidelity)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::TransportState;

    fn minimal(extra: &str) -> String {
        format!("[model]\ndimension = 1\nextent = 4\n{extra}")
    }

    #[test]
    fn defaults_follow_dimension() {
        let c1 = RunConfig::from_toml_str(&minimal("")).unwrap();
        assert_eq!(c1.solver.max_iterations, 80);
        assert_eq!(c1.solver.eta_final, 0.01);
        assert_eq!(c1.sampler.n_chains, 12);
        assert_eq!(c1.sampler.samples_per_chain, 4);
        assert_eq!(c1.ansatz.embedding, 2);
        assert_eq!(c1.model.steps, 20);
        assert_eq!(c1.solver.variance_cutoff, 5e-7);
        let c2 = RunConfig::from_toml_str("[model]\ndimension = 2\nextent = 3\n").unwrap();
        assert_eq!(c2.solver.max_iterations, 100);
        assert_eq!(c2.solver.eta_final, 0.0005);
        assert_eq!((c2.sampler.n_chains, c2.sampler.samples_per_chain), (32, 32));
        assert_eq!(c2.ansatz.embedding, 8);
        assert_eq!(c2.model.steps, 25);
        assert_eq!(c2.solver.variance_cutoff, 5e-5);
    }

    #[test]
    fn overrides_and_round_trip() {
        let c = RunConfig::from_toml_str(&minimal("steps = 3\nlambda_final = 0.5\n[solver]\nmax_iterations = 7\n")).unwrap();
        assert_eq!(c.model.steps, 3);
        assert_eq!(c.solver.max_iterations, 7);
        assert_eq!(c.solver.eta_initial, 0.02);
        let again = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.digest(), again.digest());
    }

    #[test]
    fn field_level_errors() {
        let field_of = |text: &str| match RunConfig::from_toml_str(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        };
        assert_eq!(field_of(&minimal("steps = 0\n")), "model.steps");
        assert_eq!(field_of("[model]\ndimension = 1\n"), "model.extent");
        assert_eq!(field_of(&minimal("[sampler]\nn_chains = 0\n")), "sampler.n_chains");
        assert_eq!(field_of(&minimal("[solver]\neta_initial = 0.001\n")), "solver.eta");
        assert_eq!(field_of(&minimal("lambda_final = 0.01\n")), "model.lambda_final");
        assert_eq!(field_of("schema_version = 9\n[model]\ndimension = 1\nextent = 4\n"), "schema_version");
        assert_eq!(field_of("[model]\ndimension = 3\nextent = 4\n"), "model.dimension");
        let unknown = RunConfig::from_toml_str(&minimal("stpes = 3\n")).unwrap_err().to_string();
        assert!(unknown.contains("stpes"), "{unknown}");
        let dup = "[[tracks]]\nlabel = \"a\"\n[[tracks]]\nlabel = \"a\"\n";
        assert_eq!(field_of(&minimal(dup)), "tracks.label");
    }

    #[test]
    fn digest_ignores_output_dir_only() {
        let a = RunConfig::from_toml_str(&minimal("")).unwrap();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn grid_merges_extra_points() {
        let c = RunConfig::from_toml_str(&minimal("steps = 2\nlambda_final = 0.45\nextra_points = [0.3, 0.25]\n")).unwrap();
        assert_eq!(c.grid().unwrap(), vec![0.05, 0.25, 0.3, 0.45]);
        assert!(RunConfig::from_toml_str(&minimal("extra_points = [2.0]\n")).is_err());
    }

    fn sample_checkpoint() -> Checkpoint {
        let mut layout = ParameterLayout::default();
        layout.push("w", vec![2], true);
        layout.push("c", vec![1], false);
        Checkpoint {
            config_digest: "ab".repeat(32),
            track_seed: 0xdead_beef,
            layout,
            state: TransportState {
                label: "ground".into(),
                step: 3,
                lambda: 0.1 + 0.2,
                params: vec![1.0 / 3.0, -0.0, f64::MIN_POSITIVE, 1e300, -7.25],
                energy: -4.123456789012345,
                energy_stderr: 0.0,
                variance: 1e-9,
                v_score: f64::NAN,
                omega: -4.2,
                iterations: 17,
                converged: false,
                chain_states: vec![0, u64::MAX, 5],
            },
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let c = sample_checkpoint();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.state.params.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), c.state.params.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(back.state.v_score.is_nan());
        assert_eq!(back.layout, c.layout);
        assert_eq!(back.state.chain_states, c.state.chain_states);
        let dir = tempfile::tempdir().unwrap();
        let p = checkpoint_path(dir.path(), "ground", 3);
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap().to_bytes().unwrap(), bytes);
        assert_eq!(list_checkpoints(dir.path(), "ground").unwrap(), vec![(3, p)]);
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
        let mut c = sample_checkpoint();
        c.state.params.pop();
        assert!(c.to_bytes().is_err());
    }

    #[test]
    fn results_schema_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        fs::write(&p, "run_id,track,lambda\nx,g,0.1\n").unwrap();
        match read_results(&p) {
            Err(Error::Schema { columns, .. }) => {
                assert!(columns.contains(&"energy".to_string()));
                assert!(columns.contains(&"iterations".to_string()));
                assert!(!columns.contains(&"lambda".to_string()));
            }
            other => panic!("{other:?}"),
        }
        let row = ResultRow {
            run_id: "r".into(),
            track: "ground".into(),
            lambda: 0.3,
            energy: -1.5,
            energy_stderr: 0.01,
            variance: 1e-3,
            v_score: 2e-4,
            infidelity: None,
            m2: Some(0.25),
            m4: None,
            converged: true,
            iterations: 12,
        };
        write_results(&p, &[row.clone()]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(&RESULTS_COLUMNS.join(",")));
        assert_eq!(read_results(&p).unwrap(), vec![row]);
    }

    #[test]
    fn uneven_susceptibility_reduces_to_symmetric_form() {
        let s = uneven_susceptibility(0.99, 0.1, 0.98, 0.1).unwrap();
        let t = crate::observables::fidelity_susceptibility(0.99, 0.98, 0.1).unwrap();
        assert!((s - t).abs() < 1e-12);
        assert!(uneven_susceptibility(0.0, 0.1, 0.9, 0.1).is_err());
    }

    fn tiny_config(mode: &str) -> RunConfig {
        let text = format!(
            "seed = 5\n[model]\ndimension = 1\nextent = 4\nsteps = 3\nlambda_final = 0.35\n\
             [solver]\nmax_iterations = 6\n[sampler]\nmode = \"{mode}\"\nn_chains = 4\nsamples_per_chain = 8\n"
        );
        RunConfig::from_toml_str(&text).unwrap()
    }

    #[test]
    fn run_writes_tables_and_resumes_identically() {
        let cfg = tiny_config("metropolis");
        let a = tempfile::tempdir().unwrap();
        let report = run_transport(&cfg, a.path(), &TransportOptions::default()).unwrap();
        assert!(report.failures.is_empty());
        assert_eq!(report.rows.len(), 2 * 4);
        let full = fs::read(a.path().join("results.csv")).unwrap();
        let fid = fs::read(a.path().join("fidelity.csv")).unwrap();

        // Simulate an interruption after step 1 of every track.
        let b = tempfile::tempdir().unwrap();
        run_transport(&cfg, b.path(), &TransportOptions::default()).unwrap();
        for t in &cfg.tracks {
            for (step, path) in list_checkpoints(b.path(), &t.label).unwrap() {
                if step > 1 {
                    fs::remove_file(path).unwrap();
                }
            }
        }
        fs::remove_file(b.path().join("results.csv")).unwrap();
        run_transport(&cfg, b.path(), &TransportOptions { resume: true }).unwrap();
        assert_eq!(fs::read(b.path().join("results.csv")).unwrap(), full);
        assert_eq!(fs::read(b.path().join("fidelity.csv")).unwrap(), fid);

        let mut other = cfg.clone();
        other.seed = 6;
        let err = run_transport(&other, b.path(), &TransportOptions { resume: true }).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn full_summation_energies_match_exact_diagonalization() {
        let mut cfg = tiny_config("full-summation");
        cfg.solver.max_iterations = 400;
        cfg.solver.eta_initial = 0.05;
        cfg.solver.eta_final = 0.05;
        cfg.solver.s_cutoff = 1e-6;
        cfg.solver.variance_cutoff = 1e-13;
        cfg.tracks.truncate(1);
        let dir = tempfile::tempdir().unwrap();
        let report = run_transport(&cfg, dir.path(), &TransportOptions::default()).unwrap();
        assert_eq!(report.rows.len(), cfg.model.steps + 1);
        let lattice = cfg.lattice().unwrap();
        for row in &report.rows {
            let ed = exact_diagonalize(&TfimHamiltonian::new(lattice.clone(), row.lambda).unwrap(), 1).unwrap();
            assert!((row.energy - ed.eigenvalues[0]).abs() < 1e-6, "{row:?} vs {}", ed.eigenvalues[0]);
            assert!(row.infidelity.unwrap() < 1e-6);
        }
    }
}
