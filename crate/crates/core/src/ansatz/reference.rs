//! Zeroth-order reference states from degenerate perturbation theory around
//! `λ = 0`, where eigenstates are σˣ-basis flip states.

use std::collections::HashMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{config_bits, TfimHamiltonian};

/// `ln ψ₀` assigned to configurations where the reference amplitude vanishes.
pub const NODE_LOG_AMPLITUDE: f64 = -30.0;

/// Default cap on the flip-manifold dimension.
pub const DEFAULT_MANIFOLD_CAP: usize = 4096;

/// Which unperturbed eigenstate to start from: `flips` σˣ flips (0 for the
/// ground state), optionally restricted to lattice momentum `2π·q/L`, and the
/// `level`-th lowest first-order energy inside that sector.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcitationSpec {
    pub flips: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<Vec<usize>>,
    #[serde(default)]
    pub level: usize,
}

impl ExcitationSpec {
    pub fn ground() -> Self {
        Self::default()
    }

    /// `flips`-flip state at zero momentum.
    pub fn symmetric(flips: usize, level: usize, dimension: usize) -> Self {
        Self { flips, momentum: Some(vec![0; dimension]), level }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceKind {
    ProductPlus,
    DegeneratePt,
}

/// `ψ₀(x) = Σ_S c_S Π_{i∈S} xᵢ` over flip sets `S` of the selected manifold state.
#[derive(Clone, Debug)]
pub struct ReferenceState {
    kind: ReferenceKind,
    n_sites: usize,
    spec: ExcitationSpec,
    terms: Vec<(u64, Complex64)>,
    scale: f64,
    unperturbed_energy: f64,
    slope: f64,
    translation_invariant: bool,
}

impl ReferenceState {
    /// The σˣ-polarized product state, `ln ψ₀ ≡ 0`.
    pub fn ground(n_sites: usize) -> Self {
        Self {
            kind: ReferenceKind::ProductPlus,
            n_sites,
            spec: ExcitationSpec::ground(),
            terms: vec![(0, Complex64::new(1.0, 0.0))],
            scale: 1.0,
            unperturbed_energy: -(n_sites as f64),
            slope: 0.0,
            translation_invariant: true,
        }
    }

    pub fn kind(&self) -> ReferenceKind {
        self.kind
    }

    pub fn spec(&self) -> &ExcitationSpec {
        &self.spec
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    /// Expansion coefficients `(flip-set mask, c_S)`.
    pub fn terms(&self) -> &[(u64, Complex64)] {
        &self.terms
    }

    pub fn is_translation_invariant(&self) -> bool {
        self.translation_invariant
    }

    /// First-order energy `E⁽⁰⁾ + λ·⟨dH/dλ⟩₀`.
    pub fn energy_estimate(&self, lambda: f64) -> f64 {
        self.unperturbed_energy + lambda * self.slope
    }

    /// First-order coefficient `⟨dH/dλ⟩` in the selected manifold state.
    pub fn energy_slope(&self) -> f64 {
        self.slope
    }

    pub fn amplitude(&self, x: &[i8]) -> Complex64 {
        if self.kind == ReferenceKind::ProductPlus {
            return Complex64::new(1.0, 0.0);
        }
        let down = config_bits(x);
        self.terms
            .iter()
            .map(|&(mask, c)| if (mask & down).count_ones() % 2 == 0 { c } else { -c })
            .sum()
    }

    /// `ln ψ₀(x)`, clamped to [`NODE_LOG_AMPLITUDE`] where the amplitude vanishes.
    pub fn log_amplitude(&self, x: &[i8]) -> Complex64 {
        if self.kind == ReferenceKind::ProductPlus {
            return Complex64::new(0.0, 0.0);
        }
        let a = self.amplitude(x);
        if a.norm() <= 1e-12 * self.scale {
            Complex64::new(NODE_LOG_AMPLITUDE, 0.0)
        } else {
            a.ln()
        }
    }

    pub fn has_nodes(&self) -> bool {
        self.kind == ReferenceKind::DegeneratePt
    }

    /// A local maximum of `|ψ₀|` reached by greedy single flips from the all-up state.
    pub fn max_amplitude_configuration(&self) -> Vec<i8> {
        let mut x = vec![1i8; self.n_sites];
        let mut best = self.amplitude(&x).norm();
        loop {
            let mut improved = None;
            for i in 0..self.n_sites {
                x[i] = -x[i];
                let a = self.amplitude(&x).norm();
                x[i] = -x[i];
                if a > best * (1.0 + 1e-12) {
                    best = a;
                    improved = Some(i);
                }
            }
            match improved {
                Some(i) => x[i] = -x[i],
                None => return x,
            }
        }
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Builds the reference for `spec` by diagonalizing `dH/dλ = −Σ σᶻσᶻ` inside the
/// `spec.flips`-flip manifold of `h0`'s lattice.
pub fn build_reference_state(h0: &TfimHamiltonian, spec: &ExcitationSpec, cap: usize) -> Result<ReferenceState> {
    let lattice = h0.lattice();
    let n = lattice.n_sites();
    let k = spec.flips;
    if k > n {
        return Err(Error::Invalid(format!("{k} flips on {n} sites")));
    }
    if k == 0 {
        if spec.level != 0 {
            return Err(Error::Invalid("the zero-flip manifold has a single level".into()));
        }
        let mut r = ReferenceState::ground(n);
        r.spec = spec.clone();
        return Ok(r);
    }
    let dim = binomial(n, k);
    if dim > cap as u128 {
        return Err(Error::ManifoldTooLarge { dim: dim.min(usize::MAX as u128) as usize, cap });
    }
    let dim = dim as usize;

    let mut masks = Vec::with_capacity(dim);
    let mut m: u64 = (1u64 << k) - 1;
    let limit = if n == 64 { u64::MAX } else { 1u64 << n };
    while m < limit {
        masks.push(m);
        // Gosper's hack: next integer with the same popcount.
        let c = m & m.wrapping_neg();
        let r = m + c;
        if r == 0 || c == 0 {
            break;
        }
        m = (((r ^ m) >> 2) / c) | r;
    }
    let index: HashMap<u64, usize> = masks.iter().enumerate().map(|(i, &m)| (m, i)).collect();

    let mut v = DMatrix::<f64>::zeros(dim, dim);
    for (col, &s) in masks.iter().enumerate() {
        for &(i, j) in lattice.bonds() {
            let t = s ^ (1 << i) ^ (1 << j);
            if let Some(&row) = index.get(&t) {
                v[(row, col)] -= 1.0;
            }
        }
    }

    let (energy, coeffs, invariant) = match &spec.momentum {
        Some(q) if lattice.is_periodic() => {
            if q.len() != lattice.dimension() {
                return Err(Error::Invalid(format!("momentum {q:?} has wrong dimension")));
            }
            let l = lattice.extent() as f64;
            let translations = lattice.translation_vectors();
            let mut basis: Vec<Vec<Complex64>> = Vec::new();
            let mut seen = vec![false; dim];
            for (i, &s) in masks.iter().enumerate() {
                if seen[i] {
                    continue;
                }
                let mut vec = vec![Complex64::new(0.0, 0.0); dim];
                for &t in &translations {
                    let image = lattice.translate_bits(s, t);
                    let j = index[&image];
                    seen[j] = true;
                    let phase = -2.0 * std::f64::consts::PI * (q[0] * t[0] + q.get(1).unwrap_or(&0) * t[1]) as f64 / l;
                    vec[j] += Complex64::from_polar(1.0, phase);
                }
                let nrm = vec.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
                if nrm > 1e-8 {
                    vec.iter_mut().for_each(|c| *c /= nrm);
                    basis.push(vec);
                }
            }
            if basis.is_empty() {
                return Err(Error::Invalid(format!("no {k}-flip states with momentum {q:?}")));
            }
            let b = DMatrix::from_fn(dim, basis.len(), |r, c| basis[c][r]);
            let vc = v.map(|x| Complex64::new(x, 0.0));
            let proj = b.adjoint() * vc * &b;
            let eig = proj.symmetric_eigen();
            let order = sorted_order(eig.eigenvalues.as_slice());
            let &pick = order.get(spec.level).ok_or_else(|| {
                Error::Invalid(format!("level {} requested but momentum sector has {}", spec.level, order.len()))
            })?;
            let coeffs = &b * eig.eigenvectors.column(pick);
            let invariant = q.iter().all(|&qi| qi % lattice.extent() == 0);
            (eig.eigenvalues[pick], coeffs.iter().copied().collect::<Vec<_>>(), invariant)
        }
        Some(_) => return Err(Error::Unsupported("momentum labels require periodic boundaries".into())),
        None => {
            let eig = v.symmetric_eigen();
            let order = sorted_order(eig.eigenvalues.as_slice());
            let &pick = order.get(spec.level).ok_or_else(|| {
                Error::Invalid(format!("level {} requested but manifold has {dim}", spec.level))
            })?;
            let coeffs = eig.eigenvectors.column(pick).iter().map(|&x| Complex64::new(x, 0.0)).collect();
            (eig.eigenvalues[pick], coeffs, false)
        }
    };

    // Fix the global phase: largest coefficient real and positive.
    let mut lead = 0;
    for (i, c) in coeffs.iter().enumerate() {
        if c.norm() > coeffs[lead].norm() * (1.0 + 1e-9) {
            lead = i;
        }
    }
    let phase = coeffs[lead].conj() / coeffs[lead].norm();
    let terms: Vec<(u64, Complex64)> = masks
        .iter()
        .zip(&coeffs)
        .map(|(&m, &c)| (m, c * phase))
        .filter(|(_, c)| c.norm() > 1e-14)
        .collect();
    let scale = terms.iter().map(|(_, c)| c.norm()).sum();
    Ok(ReferenceState {
        kind: ReferenceKind::DegeneratePt,
        n_sites: n,
        spec: spec.clone(),
        terms,
        scale,
        unperturbed_energy: -(n as f64) + 2.0 * k as f64,
        slope: energy,
        translation_invariant: invariant,
    })
}

fn sorted_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    order
}
