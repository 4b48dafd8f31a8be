//! Diagnostics of variational states: V-scores, overlaps with exact eigenspaces,
//! fidelities between states, fidelity susceptibility and magnetization moments.

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ansatz::Ansatz;
use crate::error::{Error, Result};
use crate::lattice::{bits_config, magnetization};
use crate::par;
use crate::sampler::{expectation, expectation_values, Estimate, SampleBatch, FULL_SUMMATION_MAX_SITES};

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableRecord {
    pub lambda: f64,
    pub label: String,
    pub energy: f64,
    pub energy_stderr: f64,
    pub variance: f64,
    pub v_score: f64,
    pub infidelity: Option<f64>,
    pub m2: Option<f64>,
    pub m4: Option<f64>,
}

/// `N Var(H) / E²`.
pub fn v_score(energy: f64, variance: f64, n_sites: usize) -> Result<f64> {
    if energy == 0.0 {
        return Err(Error::Undefined("V-score at zero energy".into()));
    }
    Ok(n_sites as f64 * variance / (energy * energy))
}

/// Normalized amplitudes over the full basis, indexed by bit pattern.
pub fn full_wavefunction<A: Ansatz + ?Sized>(ansatz: &A, params: &[f64]) -> Result<DVector<Complex64>> {
    let n = ansatz.n_sites();
    if n > FULL_SUMMATION_MAX_SITES {
        return Err(Error::Unsupported(format!("full summation on {n} sites")));
    }
    let logs: Vec<Complex64> = par::map_range(1usize << n, |b| ansatz.log_amplitude(params, &bits_config(b as u64, n)));
    if let Some(b) = logs.iter().position(|l| l.re.is_nan() || l.re == f64::INFINITY || !l.im.is_finite()) {
        return Err(Error::NonFinite { config: bits_config(b as u64, n) });
    }
    let max = logs.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Invalid("wavefunction vanishes everywhere".into()));
    }
    let mut psi = DVector::from_iterator(logs.len(), logs.iter().map(|l| (l - max).exp()));
    let norm = psi.norm();
    psi /= Complex64::new(norm, 0.0);
    Ok(psi)
}

/// `1 − Σ_i |⟨v_i|Ψ⟩|²` for an orthonormal real basis `{v_i}` of an exact eigenspace.
pub fn manifold_infidelity<A: Ansatz + ?Sized>(ansatz: &A, params: &[f64], basis: &[DVector<f64>]) -> Result<f64> {
    let psi = full_wavefunction(ansatz, params)?;
    infidelity_against(&psi, basis)
}

/// Infidelity of a normalized state against an orthonormal basis.
pub fn infidelity_against(psi: &DVector<Complex64>, basis: &[DVector<f64>]) -> Result<f64> {
    if basis.is_empty() {
        return Err(Error::Invalid("empty manifold basis".into()));
    }
    for (i, a) in basis.iter().enumerate() {
        if a.len() != psi.len() {
            return Err(Error::Shape(format!("basis vector of length {}, state of length {}", a.len(), psi.len())));
        }
        for b in &basis[..=i] {
            let target = if std::ptr::eq(a, b) { 1.0 } else { 0.0 };
            if (a.dot(b) - target).abs() > 1e-8 {
                return Err(Error::Invalid("manifold basis is not orthonormal".into()));
            }
        }
    }
    let captured: f64 = basis
        .iter()
        .map(|v| v.iter().zip(psi.iter()).map(|(a, p)| p * *a).sum::<Complex64>().norm_sqr())
        .sum();
    Ok((1.0 - captured).clamp(0.0, 1.0))
}

/// Exact `|⟨A|B⟩|² / (⟨A|A⟩⟨B|B⟩)` by full summation.
pub fn nqs_fidelity_exact<A: Ansatz + ?Sized, B: Ansatz + ?Sized>(
    a: &A,
    pa: &[f64],
    b: &B,
    pb: &[f64],
) -> Result<f64> {
    if a.n_sites() != b.n_sites() {
        return Err(Error::Shape("states live on different lattices".into()));
    }
    let x = full_wavefunction(a, pa)?;
    let y = full_wavefunction(b, pb)?;
    Ok(x.dotc(&y).norm_sqr().min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidelityEstimate {
    pub value: f64,
    pub stderr: f64,
    /// Both cross ratios vanished: the sampled supports do not overlap.
    pub disjoint: bool,
}

fn complex_mean(batch: &SampleBatch, values: &[Complex64]) -> Result<(Complex64, f64)> {
    let re: Vec<f64> = values.iter().map(|v| v.re).collect();
    let im: Vec<f64> = values.iter().map(|v| v.im).collect();
    let r = expectation_values(batch, &re)?;
    let i = expectation_values(batch, &im)?;
    Ok((Complex64::new(r.mean, i.mean), r.stderr.hypot(i.stderr)))
}

fn cross_ratio<A: Ansatz + ?Sized, B: Ansatz + ?Sized>(
    num: &A,
    pnum: &[f64],
    den: &B,
    pden: &[f64],
    batch: &SampleBatch,
) -> Result<(Complex64, f64)> {
    let n = batch.n_sites();
    let values = par::map(batch.bits(), |&bits| {
        let x = bits_config(bits, n);
        (num.log_amplitude(pnum, &x) - den.log_amplitude(pden, &x)).exp()
    });
    if let Some(i) = values.iter().position(|v| !(v.re.is_finite() && v.im.is_finite())) {
        return Err(Error::NonFinite { config: batch.configuration(i) });
    }
    complex_mean(batch, &values)
}

/// `Re(E_{|A|²}[ψ_B/ψ_A] · E_{|B|²}[ψ_A/ψ_B])` with each batch drawn from its own state.
/// With full-summation batches this is the exact fidelity.
pub fn nqs_fidelity<A: Ansatz + ?Sized, B: Ansatz + ?Sized>(
    a: &A,
    pa: &[f64],
    batch_a: &SampleBatch,
    b: &B,
    pb: &[f64],
    batch_b: &SampleBatch,
) -> Result<FidelityEstimate> {
    let (m1, s1) = cross_ratio(b, pb, a, pa, batch_a)?;
    let (m2, s2) = cross_ratio(a, pa, b, pb, batch_b)?;
    if m1.norm() < 1e-12 && m2.norm() < 1e-12 {
        return Ok(FidelityEstimate { value: 0.0, stderr: 0.0, disjoint: true });
    }
    let stderr = ((m2.norm() * s1).powi(2) + (m1.norm() * s2).powi(2)).sqrt();
    let value = (m1 * m2).re.clamp(0.0, 1.0 + stderr);
    Ok(FidelityEstimate { value, stderr, disjoint: false })
}

/// `−ln(F(λ−ϵ) F(λ+ϵ)) / ϵ²`.
pub fn fidelity_susceptibility(f_minus: f64, f_plus: f64, epsilon: f64) -> Result<f64> {
    if !(f_minus > 0.0 && f_plus > 0.0) {
        return Err(Error::Invalid(format!("fidelities must be positive, got {f_minus} and {f_plus}")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Invalid("epsilon must be positive".into()));
    }
    Ok(-(f_minus.ln() + f_plus.ln()) / (epsilon * epsilon))
}

/// Stderr of the susceptibility from the stderrs of the two fidelities.
pub fn fidelity_susceptibility_stderr(f_minus: FidelityEstimate, f_plus: FidelityEstimate, epsilon: f64) -> f64 {
    ((f_minus.stderr / f_minus.value).powi(2) + (f_plus.stderr / f_plus.value).powi(2)).sqrt() / (epsilon * epsilon)
}

/// `⟨m²⟩` and `⟨m⁴⟩` with `m = (1/N) Σ σᶻ`.
pub fn magnetization_moments(batch: &SampleBatch) -> Result<(Estimate, Estimate)> {
    let m2 = expectation(batch, |x| magnetization(x).powi(2))?;
    let m4 = expectation(batch, |x| magnetization(x).powi(4))?;
    Ok((m2, m4))
}

/// `U = 1 − ⟨m⁴⟩ / (3⟨m²⟩²)`.
pub fn binder_from_moments(m2: f64, m4: f64) -> Result<f64> {
    if m2 == 0.0 {
        return Err(Error::Undefined("Binder cumulant with vanishing ⟨m²⟩".into()));
    }
    Ok(1.0 - m4 / (3.0 * m2 * m2))
}

pub fn binder_cumulant(batch: &SampleBatch) -> Result<f64> {
    let (m2, m4) = magnetization_moments(batch)?;
    binder_from_moments(m2.mean, m4.mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ansatz::FullAmplitude;
    use crate::exact::dense_diagonalize;
    use crate::lattice::{Lattice, TfimHamiltonian};
    use crate::sampler::{sample, SamplerConfig};

    fn eigvecs(l: usize, lambda: f64, k: usize) -> (Vec<f64>, Vec<DVector<f64>>) {
        let h = TfimHamiltonian::new(Lattice::chain(l).unwrap(), lambda).unwrap();
        let ed = dense_diagonalize(&h, k).unwrap();
        (ed.eigenvalues, ed.eigenvectors)
    }

    #[test]
    fn v_score_examples() {
        assert_eq!(v_score(-3.0, 0.0, 4).unwrap(), 0.0);
        assert!((v_score(-80.0, 1e-3, 64).unwrap() - 1e-5).abs() < 1e-18);
        assert!(v_score(0.0, 1.0, 4).is_err());
        let c = 3.7;
        assert!((v_score(-2.0 * c, 0.3 * c * c, 8).unwrap() - v_score(-2.0, 0.3, 8).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn infidelity_limits() {
        let (_, v) = eigvecs(4, 0.6, 3);
        let net = FullAmplitude::new(4).unwrap();
        let p: Vec<f64> = v[1].iter().map(|x| 2.5 * x).collect();
        assert!(manifold_infidelity(&net, &p, &v[1..2]).unwrap() < 1e-14);
        assert!((manifold_infidelity(&net, &p, &v[0..1]).unwrap() - 1.0).abs() < 1e-14);
        let bad = vec![v[0].clone(), &v[0] * 2.0];
        assert!(manifold_infidelity(&net, &p, &bad).is_err());
    }

    #[test]
    fn infidelity_ignores_basis_rotation() {
        let (_, v) = eigvecs(4, 0.5, 4);
        // Levels 2 and 3 are degenerate at this coupling.
        let net = FullAmplitude::new(4).unwrap();
        let p: Vec<f64> = (0..16).map(|i| v[2][i] + 0.3 * v[3][i] + 0.05 * v[0][i]).collect();
        let (c, s) = (0.6f64, 0.8f64);
        let rotated = vec![&v[2] * c + &v[3] * s, &v[2] * (-s) + &v[3] * c];
        let a = manifold_infidelity(&net, &p, &v[2..4]).unwrap();
        let b = manifold_infidelity(&net, &p, &rotated).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn fidelity_of_ed_vectors() {
        let (_, va) = eigvecs(6, 0.5, 1);
        let (_, vb) = eigvecs(6, 0.7, 1);
        let net = FullAmplitude::new(6).unwrap();
        let pa: Vec<f64> = va[0].iter().copied().collect();
        let pb: Vec<f64> = vb[0].iter().copied().collect();
        let dense = va[0].dot(&vb[0]).powi(2);
        assert!((nqs_fidelity_exact(&net, &pa, &net, &pb).unwrap() - dense).abs() < 1e-10);
        let fs = SamplerConfig::full_summation();
        let ba = sample(&net, &pa, &fs, None).unwrap();
        let bb = sample(&net, &pb, &fs, None).unwrap();
        let f = nqs_fidelity(&net, &pa, &ba, &net, &pb, &bb).unwrap();
        assert!((f.value - dense).abs() < 1e-10);
        assert_eq!(f.stderr, 0.0);
        let same = nqs_fidelity(&net, &pa, &ba, &net, &pa, &ba).unwrap();
        assert!((same.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampled_fidelity_is_symmetric() {
        let (_, va) = eigvecs(6, 0.8, 1);
        let (_, vb) = eigvecs(6, 1.0, 1);
        let net = FullAmplitude::new(6).unwrap();
        let pa: Vec<f64> = va[0].iter().copied().collect();
        let pb: Vec<f64> = vb[0].iter().copied().collect();
        let ba = sample(&net, &pa, &SamplerConfig::metropolis(8, 300, 1), None).unwrap();
        let bb = sample(&net, &pb, &SamplerConfig::metropolis(8, 300, 2), None).unwrap();
        let ab = nqs_fidelity(&net, &pa, &ba, &net, &pb, &bb).unwrap();
        let ba2 = nqs_fidelity(&net, &pb, &bb, &net, &pa, &ba).unwrap();
        assert!((ab.value - ba2.value).abs() <= 1e-12 + 2.0 * ab.stderr);
        let exact = va[0].dot(&vb[0]).powi(2);
        assert!((ab.value - exact).abs() < 4.0 * ab.stderr + 1e-9, "{} vs {exact} ± {}", ab.value, ab.stderr);
    }

    #[test]
    fn disjoint_support() {
        let net = FullAmplitude::new(2).unwrap();
        let pa = vec![1.0, 0.0, 0.0, 0.0];
        let pb = vec![0.0, 0.0, 0.0, 1.0];
        let fs = SamplerConfig::full_summation();
        let ba = sample(&net, &pa, &fs, None).unwrap();
        let bb = sample(&net, &pb, &fs, None).unwrap();
        let f = nqs_fidelity(&net, &pa, &ba, &net, &pb, &bb).unwrap();
        assert!(f.disjoint);
        assert_eq!(f.value, 0.0);
    }

    #[test]
    fn susceptibility_examples() {
        assert_eq!(fidelity_susceptibility(1.0, 1.0, 0.1).unwrap(), 0.0);
        let (chi, eps) = (3.2, 0.05);
        let f = (-chi * eps * eps / 2.0f64).exp();
        assert!((fidelity_susceptibility(f, f, eps).unwrap() - chi).abs() < 1e-12);
        assert!(fidelity_susceptibility(0.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn binder_limits() {
        // m = ±1 with equal weight.
        let batch = SampleBatch::from_weighted(4, vec![0, 15], vec![1.0, 1.0]).unwrap();
        assert!((binder_cumulant(&batch).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(binder_from_moments(0.5, 0.75).unwrap(), 0.0);
        assert!(binder_from_moments(0.0, 0.0).is_err());
    }

    #[test]
    fn binder_matches_ed_moments() {
        let (_, v) = eigvecs(8, 0.9, 1);
        let net = FullAmplitude::new(8).unwrap();
        let p: Vec<f64> = v[0].iter().copied().collect();
        let exact = sample(&net, &p, &SamplerConfig::full_summation(), None).unwrap();
        let (m2, m4) = magnetization_moments(&exact).unwrap();
        let mut w2 = 0.0;
        let mut w4 = 0.0;
        for b in 0..256u64 {
            let m = magnetization(&bits_config(b, 8));
            w2 += p[b as usize].powi(2) * m * m;
            w4 += p[b as usize].powi(2) * m.powi(4);
        }
        assert!((m2.mean - w2).abs() < 1e-12 && (m4.mean - w4).abs() < 1e-12);
        let mc = sample(&net, &p, &SamplerConfig::metropolis(8, 500, 4), None).unwrap();
        let (s2, _) = magnetization_moments(&mc).unwrap();
        assert!((s2.mean - w2).abs() < 4.0 * s2.stderr);
    }
}
