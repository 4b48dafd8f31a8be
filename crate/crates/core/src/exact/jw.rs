//! Free-fermion solution of the periodic transverse-field Ising chain.
//!
//! After the Jordan–Wigner map the spectrum splits into two fermion-parity
//! sectors. Sector `p = 0` (even fermion number) uses antiperiodic momenta
//! `±(2π/N)(l − ½)`; sector `p = 1` (odd) uses `±(2π/N)l` plus the unpaired modes
//! `k = 0, π`, whose Hamiltonian is `2(n₀ + n_π − 1) + 2λ(n_π − n₀)`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Momenta of one parity sector.
#[derive(Clone, Debug, PartialEq)]
pub struct Momenta {
    /// Paired momenta `±k`, ascending.
    pub paired: Vec<f64>,
    /// Unpaired momenta (`0` and `π` in the odd sector).
    pub unpaired: Vec<f64>,
}

impl Momenta {
    /// Positive members of the paired set, one per `(k, −k)` block.
    pub fn positive(&self) -> Vec<f64> {
        self.paired.iter().copied().filter(|&k| k > 0.0).collect()
    }
}

fn check_even(n: usize) -> Result<()> {
    if n == 0 || n % 2 == 1 {
        return Err(Error::Unsupported(format!("chain length must be even and positive, got {n}")));
    }
    Ok(())
}

pub fn jw_momenta(n: usize, parity: u8) -> Result<Momenta> {
    check_even(n)?;
    let step = 2.0 * PI / n as f64;
    let mut paired = Vec::with_capacity(n);
    let mut unpaired = Vec::new();
    match parity {
        0 => {
            for l in 1..=n / 2 {
                let k = step * (l as f64 - 0.5);
                paired.push(k);
                paired.push(-k);
            }
        }
        1 => {
            for l in 1..n / 2 {
                let k = step * l as f64;
                paired.push(k);
                paired.push(-k);
            }
            unpaired.extend([0.0, PI]);
        }
        _ => return Err(Error::Invalid(format!("parity must be 0 or 1, got {parity}"))),
    }
    paired.sort_by(f64::total_cmp);
    Ok(Momenta { paired, unpaired })
}

/// `ε_k = √((1 − λ cos k)² + λ² sin² k)`.
pub fn dispersion(k: f64, lambda: f64) -> f64 {
    let (s, c) = k.sin_cos();
    ((1.0 - lambda * c).powi(2) + (lambda * s).powi(2)).sqrt()
}

/// Bogoliubov angle with `cos θ = A/ε`, `sin θ = B/ε`.
pub fn bogoliubov_angle(k: f64, lambda: f64) -> f64 {
    let (s, c) = k.sin_cos();
    (lambda * s).atan2(1.0 - lambda * c)
}

/// Per-sector quantities of the Bogoliubov solution.
#[derive(Clone, Debug)]
pub struct ExactSolution1D {
    pub n: usize,
    pub lambda: f64,
    pub parity: u8,
    pub momenta: Momenta,
    /// Positive paired momenta and, index-aligned, the per-block quantities below.
    pub k: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub cos_theta: Vec<f64>,
    pub sin_theta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl ExactSolution1D {
    pub fn new(n: usize, lambda: f64, parity: u8) -> Result<Self> {
        let momenta = jw_momenta(n, parity)?;
        let k = momenta.positive();
        let a: Vec<f64> = k.iter().map(|&k| 1.0 - lambda * k.cos()).collect();
        let b: Vec<f64> = k.iter().map(|&k| lambda * k.sin()).collect();
        let epsilon: Vec<f64> = k.iter().map(|&k| dispersion(k, lambda)).collect();
        let theta: Vec<f64> = k.iter().map(|&k| bogoliubov_angle(k, lambda)).collect();
        Ok(Self {
            n,
            lambda,
            parity,
            momenta,
            cos_theta: theta.iter().map(|t| t.cos()).collect(),
            sin_theta: theta.iter().map(|t| t.sin()).collect(),
            u: theta.iter().map(|t| (t / 2.0).cos()).collect(),
            v: theta.iter().map(|t| (t / 2.0).sin()).collect(),
            k,
            epsilon,
            a,
            b,
        })
    }

    /// Energy of the paired-mode Bogoliubov vacuum, `−Σ_{k>0} 2ε_k`.
    pub fn vacuum_energy(&self) -> f64 {
        -2.0 * self.epsilon.iter().sum::<f64>()
    }
}

#[derive(PartialEq)]
struct Node {
    sum: f64,
    last: usize,
    parity: u8,
}

impl Eq for Node {}

impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        other.sum.total_cmp(&self.sum).then_with(|| other.last.cmp(&self.last))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Lowest `count` levels of one parity sector.
fn sector_levels(n: usize, lambda: f64, parity: u8, count: usize) -> Result<Vec<f64>> {
    let sol = ExactSolution1D::new(n, lambda, parity)?;
    let mut base = sol.vacuum_energy();
    let mut reference_parity = 0u8;
    let mut costs: Vec<f64> = sol.epsilon.iter().flat_map(|&e| [2.0 * e, 2.0 * e]).collect();
    if parity == 1 {
        base -= 2.0;
        for e in [2.0 - 2.0 * lambda, 2.0 + 2.0 * lambda] {
            if e < 0.0 {
                base += e;
                reference_parity ^= 1;
                costs.push(-e);
            } else {
                costs.push(e);
            }
        }
    }
    costs.sort_by(f64::total_cmp);

    // Subsets of mode excitations in nondecreasing total cost.
    let mut out = Vec::with_capacity(count);
    if reference_parity == parity {
        out.push(base);
    }
    let mut heap = BinaryHeap::new();
    if !costs.is_empty() {
        heap.push(Node { sum: costs[0], last: 0, parity: 1 });
    }
    while out.len() < count {
        let Some(node) = heap.pop() else { break };
        if reference_parity ^ node.parity == parity {
            out.push(base + node.sum);
        }
        if node.last + 1 < costs.len() {
            let next = costs[node.last + 1];
            heap.push(Node { sum: node.sum + next, last: node.last + 1, parity: node.parity ^ 1 });
            heap.push(Node { sum: node.sum - costs[node.last] + next, last: node.last + 1, parity: node.parity });
        }
    }
    Ok(out)
}

/// Lowest `count` many-body levels of the periodic chain, merged over both sectors.
pub fn exact_low_spectrum_1d(n: usize, lambda: f64, count: usize) -> Result<Vec<f64>> {
    check_even(n)?;
    if n > 64 {
        return Err(Error::Unsupported(format!("chain length {n} exceeds 64")));
    }
    if count == 0 || (n < 64 && count as u128 > 1u128 << n) {
        return Err(Error::Invalid(format!("cannot return {count} levels of a {n}-site chain")));
    }
    let mut levels = sector_levels(n, lambda, 0, count)?;
    levels.extend(sector_levels(n, lambda, 1, count)?);
    levels.sort_by(f64::total_cmp);
    levels.truncate(count);
    Ok(levels)
}

pub fn ground_energy_1d(n: usize, lambda: f64) -> Result<f64> {
    Ok(exact_low_spectrum_1d(n, lambda, 1)?[0])
}

/// `E₁ − E₀` of the periodic chain.
pub fn gap_1d(n: usize, lambda: f64) -> Result<f64> {
    let s = exact_low_spectrum_1d(n, lambda, 2)?;
    Ok(s[1] - s[0])
}

/// Ground-state fidelity susceptibility `−∂²_ϵ ln F₀(λ, λ+ϵ)` of the chain,
/// where `F₀` is the squared ground-state overlap. Each `(k, −k)` block contributes
/// `(dθ_k/dλ)²/2 = sin²k / (2ε_k⁴)`.
pub fn chi0_exact_1d(n: usize, lambda: f64) -> Result<f64> {
    let sol = ExactSolution1D::new(n, lambda, 0)?;
    Ok(sol
        .k
        .iter()
        .zip(&sol.epsilon)
        .map(|(k, e)| k.sin().powi(2) / (2.0 * e.powi(4)))
        .sum())
}

/// Squared overlap of the even-sector Bogoliubov vacua at `λ₁` and `λ₂`,
/// `Π_{k>0} cos²((θ_k(λ₁) − θ_k(λ₂))/2)`.
pub fn bogoliubov_fidelity(n: usize, lambda1: f64, lambda2: f64) -> Result<f64> {
    Ok(ln_bogoliubov_fidelity(n, lambda1, lambda2)?.exp())
}

/// `ln F₀`, accurate for nearby couplings.
pub(crate) fn ln_bogoliubov_fidelity(n: usize, lambda1: f64, lambda2: f64) -> Result<f64> {
    let m = jw_momenta(n, 0)?;
    let mut acc = 0.0;
    for k in m.positive() {
        let (s, c) = k.sin_cos();
        let (a1, b1) = (1.0 - lambda1 * c, lambda1 * s);
        let (a2, b2) = (1.0 - lambda2 * c, lambda2 * s);
        // Angle between (a1, b1) and (a2, b2) without cancellation.
        let dtheta = (s * (lambda2 - lambda1)).atan2(a1 * a2 + b1 * b2);
        let h = (dtheta / 4.0).sin();
        acc += 2.0 * (-2.0 * h * h).ln_1p();
    }
    Ok(acc)
}

/// Coefficient of `σˣ_k` in the adiabatic gauge potential of block `k`,
/// `−sin k / (2ε_k²)`.
pub fn agp_coefficient(k: f64, lambda: f64) -> Result<f64> {
    let e = dispersion(k, lambda);
    if e == 0.0 {
        return Err(Error::Undefined(format!("gauge potential is singular at k = {k}, λ = {lambda}")));
    }
    Ok(-k.sin() / (2.0 * e * e))
}
