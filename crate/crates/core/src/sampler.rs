//! Configurations drawn from |ψ_θ|², by Metropolis single-spin flips or by
//! exhaustive enumeration of the basis.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ansatz::Ansatz;
use crate::error::{Error, Result};
use crate::lattice::{bits_config, config_bits};
use crate::par;

/// Largest system the full-summation backend will enumerate.
pub const FULL_SUMMATION_MAX_SITES: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    Metropolis,
    FullSummation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub samples_per_chain: usize,
    /// Sweeps discarded from a cold start.
    pub burn_in: usize,
    /// Sweeps discarded when chains resume from a previous batch.
    pub warm_burn_in: usize,
    /// Sweeps between kept samples.
    pub thinning: usize,
    pub seed: u64,
    pub mode: SamplerMode,
}

impl SamplerConfig {
    pub fn metropolis(n_chains: usize, samples_per_chain: usize, seed: u64) -> Self {
        SamplerConfig {
            n_chains,
            samples_per_chain,
            burn_in: 100,
            warm_burn_in: 10,
            thinning: 1,
            seed,
            mode: SamplerMode::Metropolis,
        }
    }

    pub fn full_summation() -> Self {
        SamplerConfig { mode: SamplerMode::FullSummation, ..Self::metropolis(1, 1, 0) }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SamplerConfig { seed, ..self.clone() }
    }

    pub fn validate(&self, n_sites: usize) -> Result<()> {
        match self.mode {
            SamplerMode::Metropolis => {
                if self.n_chains == 0 {
                    return Err(Error::config("sampler.n_chains", "must be at least 1"));
                }
                if self.samples_per_chain == 0 {
                    return Err(Error::config("sampler.samples_per_chain", "must be at least 1"));
                }
                if self.thinning == 0 {
                    return Err(Error::config("sampler.thinning", "must be at least 1"));
                }
            }
            SamplerMode::FullSummation => {
                if n_sites > FULL_SUMMATION_MAX_SITES {
                    return Err(Error::config(
                        "sampler.mode",
                        format!("full summation supports at most {FULL_SUMMATION_MAX_SITES} sites, got {n_sites}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Samples (or the full basis) with probability weights.
///
/// Configurations are stored as bit patterns (bit `i` set means spin `i` is down).
#[derive(Clone, Debug)]
pub struct SampleBatch {
    n_sites: usize,
    mode: SamplerMode,
    configs: Vec<u64>,
    weights: Vec<f64>,
    chain: Vec<usize>,
    n_chains: usize,
    acceptance: Vec<f64>,
    final_states: Vec<u64>,
    warnings: Vec<String>,
}

impl SampleBatch {
    /// Builds a batch from explicit weighted configurations, normalizing the weights.
    pub fn from_weighted(n_sites: usize, configs: Vec<u64>, weights: Vec<f64>) -> Result<Self> {
        if configs.len() != weights.len() || configs.is_empty() {
            return Err(Error::Shape(format!("{} configurations, {} weights", configs.len(), weights.len())));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invalid("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Invalid("weights sum to zero".into()));
        }
        let n = configs.len();
        Ok(SampleBatch {
            n_sites,
            mode: SamplerMode::FullSummation,
            configs,
            weights: weights.into_iter().map(|w| w / total).collect(),
            chain: vec![0; n],
            n_chains: 1,
            acceptance: Vec::new(),
            final_states: Vec::new(),
            warnings: Vec::new(),
        })
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn mode(&self) -> SamplerMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn bits(&self) -> &[u64] {
        &self.configs
    }

    pub fn configuration(&self, i: usize) -> Vec<i8> {
        bits_config(self.configs[i], self.n_sites)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn chain_ids(&self) -> &[usize] {
        &self.chain
    }

    pub fn n_chains(&self) -> usize {
        self.n_chains
    }

    /// Per-chain acceptance rates (empty in full-summation mode).
    pub fn acceptance(&self) -> &[f64] {
        &self.acceptance
    }

    pub fn mean_acceptance(&self) -> Option<f64> {
        if self.acceptance.is_empty() {
            None
        } else {
            Some(self.acceptance.iter().sum::<f64>() / self.acceptance.len() as f64)
        }
    }

    /// Last configuration of each chain, used to resume sampling.
    pub fn final_states(&self) -> &[u64] {
        &self.final_states
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

/// A weighted mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Mixes a sequence of integers into one seed (SplitMix64 finalizer per word).
pub fn stream_seed(parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(0x6a09_e667_f3bc_c909, |acc, &p| mix(acc ^ mix(p)))
}

/// Draws a batch from |ψ|². `starts` resumes chains from earlier final states,
/// in which case `warm_burn_in` replaces `burn_in`.
pub fn sample<A: Ansatz + ?Sized>(
    ansatz: &A,
    params: &[f64],
    cfg: &SamplerConfig,
    starts: Option<&[u64]>,
) -> Result<SampleBatch> {
    let n = ansatz.n_sites();
    cfg.validate(n)?;
    if params.len() != ansatz.n_params() {
        return Err(Error::Shape(format!("{} parameters, ansatz expects {}", params.len(), ansatz.n_params())));
    }
    match cfg.mode {
        SamplerMode::FullSummation => full_summation(ansatz, params),
        SamplerMode::Metropolis => metropolis(ansatz, params, cfg, starts),
    }
}

fn full_summation<A: Ansatz + ?Sized>(ansatz: &A, params: &[f64]) -> Result<SampleBatch> {
    let n = ansatz.n_sites();
    if n > FULL_SUMMATION_MAX_SITES {
        return Err(Error::Unsupported(format!("full summation on {n} sites")));
    }
    let dim = 1usize << n;
    let log_p: Vec<f64> = par::map_range(dim, |b| 2.0 * ansatz.log_amplitude(params, &bits_config(b as u64, n)).re);
    if let Some(b) = log_p.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite { config: bits_config(b as u64, n) });
    }
    let max = log_p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Invalid("wavefunction vanishes on every configuration".into()));
    }
    let mut configs = Vec::new();
    let mut weights = Vec::new();
    for (b, lp) in log_p.into_iter().enumerate() {
        let w = (lp - max).exp();
        if w > 0.0 {
            configs.push(b as u64);
            weights.push(w);
        }
    }
    SampleBatch::from_weighted(n, configs, weights)
}

struct Chain {
    kept: Vec<u64>,
    accepted: usize,
    proposed: usize,
    frozen: bool,
    last: u64,
}

fn metropolis<A: Ansatz + ?Sized>(
    ansatz: &A,
    params: &[f64],
    cfg: &SamplerConfig,
    starts: Option<&[u64]>,
) -> Result<SampleBatch> {
    let n = ansatz.n_sites();
    if let Some(s) = starts {
        if s.len() != cfg.n_chains {
            return Err(Error::Shape(format!("{} chain starts for {} chains", s.len(), cfg.n_chains)));
        }
    }
    let preferred: Vec<u64> = ansatz.preferred_starts().iter().map(|x| config_bits(x)).collect();
    let burn_in = if starts.is_some() { cfg.warm_burn_in } else { cfg.burn_in };
    let chains: Vec<Result<Chain>> = par::map_range(cfg.n_chains, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(c as u64);
        let start = match starts {
            Some(s) => s[c],
            None if !preferred.is_empty() => preferred[c % preferred.len()],
            None => {
                let mask = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
                rng.random::<u64>() & mask
            }
        };
        run_chain(ansatz, params, n, start, burn_in, cfg, &mut rng)
    });

    let mut batch = SampleBatch {
        n_sites: n,
        mode: SamplerMode::Metropolis,
        configs: Vec::with_capacity(cfg.n_chains * cfg.samples_per_chain),
        weights: Vec::new(),
        chain: Vec::new(),
        n_chains: cfg.n_chains,
        acceptance: Vec::with_capacity(cfg.n_chains),
        final_states: Vec::with_capacity(cfg.n_chains),
        warnings: Vec::new(),
    };
    for (c, chain) in chains.into_iter().enumerate() {
        let chain = chain?;
        if chain.frozen {
            batch.warnings.push(format!("chain {c} rejected every proposal during burn-in"));
        }
        batch.acceptance.push(if chain.proposed == 0 { 1.0 } else { chain.accepted as f64 / chain.proposed as f64 });
        batch.final_states.push(chain.last);
        batch.chain.extend(std::iter::repeat_n(c, chain.kept.len()));
        batch.configs.extend(chain.kept);
    }
    let total = batch.configs.len();
    batch.weights = vec![1.0 / total as f64; total];
    Ok(batch)
}

fn run_chain<A: Ansatz + ?Sized>(
    ansatz: &A,
    params: &[f64],
    n: usize,
    start: u64,
    burn_in: usize,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Chain> {
    // 2 Re ln ψ per amplitude key; parameters are fixed for the whole batch.
    let mut memo: HashMap<u64, f64> = HashMap::new();
    let mut x = bits_config(start, n);
    let mut log_p = |x: &[i8]| -> Result<f64> {
        let key = ansatz.amplitude_key(x);
        if let Some(&v) = memo.get(&key) {
            return Ok(v);
        }
        let v = 2.0 * ansatz.log_amplitude(params, x).re;
        if v.is_nan() || v == f64::INFINITY {
            return Err(Error::NonFinite { config: x.to_vec() });
        }
        memo.insert(key, v);
        Ok(v)
    };
    let mut current = log_p(&x)?;
    if !current.is_finite() {
        return Err(Error::NonFinite { config: x });
    }
    let mut chain = Chain {
        kept: Vec::with_capacity(cfg.samples_per_chain),
        accepted: 0,
        proposed: 0,
        frozen: false,
        last: start,
    };
    let mut burn_accepted = 0usize;
    let total_sweeps = burn_in + cfg.samples_per_chain * cfg.thinning;
    for sweep in 0..total_sweeps {
        for _ in 0..n {
            let i = rng.random_range(0..n);
            x[i] = -x[i];
            let proposed = log_p(&x)?;
            let u: f64 = rng.random();
            chain.proposed += 1;
            if proposed > f64::NEG_INFINITY && (proposed >= current || u < (proposed - current).exp()) {
                current = proposed;
                chain.accepted += 1;
                if sweep < burn_in {
                    burn_accepted += 1;
                }
            } else {
                x[i] = -x[i];
            }
        }
        if sweep >= burn_in && (sweep + 1 - burn_in) % cfg.thinning == 0 {
            chain.kept.push(config_bits(&x));
        }
    }
    chain.frozen = burn_in > 0 && burn_accepted == 0;
    chain.last = config_bits(&x);
    Ok(chain)
}

/// Weighted mean of precomputed per-sample values. The standard error comes from
/// the spread of per-chain means for Metropolis batches and is zero for full summation.
pub fn expectation_values(batch: &SampleBatch, values: &[f64]) -> Result<Estimate> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    if values.len() != batch.len() {
        return Err(Error::Shape(format!("{} values for {} samples", values.len(), batch.len())));
    }
    let mean: f64 = values.iter().zip(&batch.weights).map(|(v, w)| v * w).sum();
    if batch.mode == SamplerMode::FullSummation {
        return Ok(Estimate { mean, stderr: 0.0 });
    }
    let k = batch.n_chains;
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (v, &c) in values.iter().zip(&batch.chain) {
        sums[c] += v;
        counts[c] += 1;
    }
    let means: Vec<f64> = sums.iter().zip(&counts).filter(|(_, &n)| n > 0).map(|(s, &n)| s / n as f64).collect();
    let stderr = if means.len() >= 2 {
        let m = means.iter().sum::<f64>() / means.len() as f64;
        let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
        (var / means.len() as f64).sqrt()
    } else {
        // Single chain: naive i.i.d. error.
        let n = values.len() as f64;
        if n < 2.0 {
            0.0
        } else {
            let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        }
    };
    Ok(Estimate { mean, stderr })
}

/// Weighted mean and standard error of `f` over the batch.
pub fn expectation<F>(batch: &SampleBatch, f: F) -> Result<Estimate>
where
    F: Fn(&[i8]) -> f64 + Sync + Send,
{
    let n = batch.n_sites;
    let values = par::map(&batch.configs, |&b| f(&bits_config(b, n)));
    expectation_values(batch, &values)
}
