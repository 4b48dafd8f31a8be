//! Lattices, spin configurations and the transverse-field Ising Hamiltonian
//! `H = -λ Σ_<ij> σᶻᵢσᶻⱼ - Σ_i σˣᵢ` in the σᶻ basis.
//!
//! Basis index convention used throughout the crate: bit `i` of the index is set
//! exactly when spin `i` is down (`-1`), so the all-up configuration is index 0.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest lattice for which configurations fit in a `u64` bit pattern.
pub const MAX_SITES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Periodic,
    Open,
}

/// A 1D chain or a square 2D lattice with nearest-neighbor bonds.
///
/// For a periodic chain with `L = 2` both bonds join the same pair of sites and are
/// kept once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lattice {
    dimension: usize,
    extent: usize,
    boundary: Boundary,
    bonds: Vec<(usize, usize)>,
}

impl Lattice {
    pub fn new(dimension: usize, extent: usize, boundary: Boundary) -> Result<Self> {
        if dimension != 1 && dimension != 2 {
            return Err(Error::Invalid(format!("dimension must be 1 or 2, got {dimension}")));
        }
        if extent < 2 {
            return Err(Error::Invalid(format!("extent must be at least 2, got {extent}")));
        }
        let n = extent.pow(dimension as u32);
        if n > MAX_SITES {
            return Err(Error::Unsupported(format!("{n} sites exceeds the {MAX_SITES}-site limit")));
        }
        let mut set = BTreeSet::new();
        let mut push = |a: usize, b: usize| {
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        };
        let l = extent;
        let wrap = boundary == Boundary::Periodic;
        match dimension {
            1 => {
                for i in 0..l {
                    if i + 1 < l {
                        push(i, i + 1);
                    } else if wrap {
                        push(i, 0);
                    }
                }
            }
            _ => {
                for y in 0..l {
                    for x in 0..l {
                        let s = y * l + x;
                        if x + 1 < l {
                            push(s, s + 1);
                        } else if wrap {
                            push(s, y * l);
                        }
                        if y + 1 < l {
                            push(s, s + l);
                        } else if wrap {
                            push(s, x);
                        }
                    }
                }
            }
        }
        Ok(Self { dimension, extent, boundary, bonds: set.into_iter().collect() })
    }

    pub fn chain(extent: usize) -> Result<Self> {
        Self::new(1, extent, Boundary::Periodic)
    }

    pub fn square(extent: usize) -> Result<Self> {
        Self::new(2, extent, Boundary::Periodic)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn n_sites(&self) -> usize {
        self.extent.pow(self.dimension as u32)
    }

    pub fn bonds(&self) -> &[(usize, usize)] {
        &self.bonds
    }

    pub fn is_periodic(&self) -> bool {
        self.boundary == Boundary::Periodic
    }

    /// Coordinates `[x, y]` of a site (`y = 0` in 1D).
    pub fn coords(&self, site: usize) -> [usize; 2] {
        [site % self.extent, site / self.extent]
    }

    pub fn site(&self, coords: [usize; 2]) -> usize {
        match self.dimension {
            1 => coords[0] % self.extent,
            _ => (coords[1] % self.extent) * self.extent + coords[0] % self.extent,
        }
    }

    /// All lattice translation vectors (periodic wrap assumed).
    pub fn translation_vectors(&self) -> Vec<[usize; 2]> {
        let l = self.extent;
        match self.dimension {
            1 => (0..l).map(|dx| [dx, 0]).collect(),
            _ => (0..l * l).map(|t| [t % l, t / l]).collect(),
        }
    }

    /// Image of `site` under translation by `v`.
    pub fn translate_site(&self, site: usize, v: [usize; 2]) -> usize {
        let [x, y] = self.coords(site);
        self.site([x + v[0], y + v[1]])
    }

    /// Translated configuration: `out[site + v] = x[site]`.
    pub fn translate(&self, x: &[i8], v: [usize; 2]) -> Vec<i8> {
        let mut out = vec![0; x.len()];
        for (s, &xi) in x.iter().enumerate() {
            out[self.translate_site(s, v)] = xi;
        }
        out
    }

    /// Translates a bit pattern by `v`.
    pub fn translate_bits(&self, bits: u64, v: [usize; 2]) -> u64 {
        let n = self.n_sites();
        let l = self.extent;
        match self.dimension {
            1 => rotate(bits, v[0] % l, n),
            _ => {
                let dx = v[0] % l;
                let rows = if dx == 0 {
                    bits
                } else {
                    let mut lo = 0u64;
                    for y in 0..l {
                        lo |= ((1u64 << dx) - 1) << (y * l);
                    }
                    let hi = full_mask(n) & !lo;
                    ((bits << dx) & hi) | ((bits >> (l - dx)) & lo)
                };
                rotate(rows, (v[1] % l) * l, n)
            }
        }
    }

    /// Smallest bit pattern in the translation orbit of `bits`.
    pub fn canonical_bits(&self, bits: u64) -> u64 {
        let n = self.n_sites();
        let l = self.extent;
        let mut best = bits;
        match self.dimension {
            1 => {
                for s in 1..n {
                    best = best.min(rotate(bits, s, n));
                }
            }
            _ => {
                for dx in 0..l {
                    let shifted = self.translate_bits(bits, [dx, 0]);
                    for dy in 0..l {
                        best = best.min(rotate(shifted, dy * l, n));
                    }
                }
            }
        }
        best
    }
}

fn full_mask(n: usize) -> u64 {
    if n == 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

fn rotate(bits: u64, s: usize, n: usize) -> u64 {
    if s == 0 {
        bits
    } else {
        ((bits << s) | (bits >> (n - s))) & full_mask(n)
    }
}

/// Bit pattern of a configuration (bit set where the spin is down).
pub fn config_bits(x: &[i8]) -> u64 {
    x.iter().enumerate().fold(0u64, |acc, (i, &s)| if s < 0 { acc | (1 << i) } else { acc })
}

/// Inverse of [`config_bits`].
pub fn bits_config(bits: u64, n: usize) -> Vec<i8> {
    (0..n).map(|i| if bits >> i & 1 == 1 { -1 } else { 1 }).collect()
}

/// A σᶻ-basis configuration with entries ±1.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpinConfiguration(Vec<i8>);

impl SpinConfiguration {
    pub fn new(spins: Vec<i8>) -> Result<Self> {
        if let Some(bad) = spins.iter().find(|&&s| s != 1 && s != -1) {
            return Err(Error::Invalid(format!("spin value {bad} is not ±1")));
        }
        Ok(Self(spins))
    }

    pub fn all_up(n: usize) -> Self {
        Self(vec![1; n])
    }

    pub fn from_index(index: u64, n: usize) -> Self {
        Self(bits_config(index, n))
    }

    pub fn index(&self) -> u64 {
        config_bits(&self.0)
    }

    pub fn spins(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flipped(&self, site: usize) -> Self {
        let mut s = self.0.clone();
        s[site] = -s[site];
        Self(s)
    }

    /// Magnetization per site.
    pub fn magnetization(&self) -> f64 {
        magnetization(&self.0)
    }
}

pub fn magnetization(x: &[i8]) -> f64 {
    x.iter().map(|&s| s as f64).sum::<f64>() / x.len() as f64
}

/// The transverse-field Ising Hamiltonian on a lattice at coupling `λ`.
#[derive(Clone, Debug, PartialEq)]
pub struct TfimHamiltonian {
    lattice: Lattice,
    coupling: f64,
}

impl TfimHamiltonian {
    pub fn new(lattice: Lattice, coupling: f64) -> Result<Self> {
        if !(coupling.is_finite() && coupling >= 0.0) {
            return Err(Error::Invalid(format!("coupling must be finite and ≥ 0, got {coupling}")));
        }
        Ok(Self { lattice, coupling })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn coupling(&self) -> f64 {
        self.coupling
    }

    pub fn n_sites(&self) -> usize {
        self.lattice.n_sites()
    }

    pub fn with_coupling(&self, coupling: f64) -> Result<Self> {
        Self::new(self.lattice.clone(), coupling)
    }

    pub(crate) fn check(&self, x: &[i8]) -> Result<()> {
        if x.len() != self.n_sites() {
            return Err(Error::Shape(format!(
                "configuration has {} spins, lattice has {} sites",
                x.len(),
                self.n_sites()
            )));
        }
        Ok(())
    }

    /// `Σ_<ij> xᵢxⱼ`.
    pub fn bond_sum(&self, x: &[i8]) -> i64 {
        self.lattice.bonds().iter().map(|&(i, j)| (x[i] * x[j]) as i64).sum()
    }

    /// Diagonal element `-λ Σ_<ij> xᵢxⱼ`.
    pub fn diagonal(&self, x: &[i8]) -> f64 {
        -self.coupling * self.bond_sum(x) as f64
    }

    /// The diagonal pair followed by one `(flip_i(x), -1)` entry per site.
    pub fn connected_configurations(
        &self,
        x: &SpinConfiguration,
    ) -> Result<Vec<(SpinConfiguration, f64)>> {
        self.check(x.spins())?;
        let mut out = Vec::with_capacity(self.n_sites() + 1);
        out.push((x.clone(), self.diagonal(x.spins())));
        for i in 0..self.n_sites() {
            out.push((x.flipped(i), -1.0));
        }
        Ok(out)
    }

    /// `E_loc(x) = Σ_x' H_xx' exp(lnψ(x') - lnψ(x))`.
    pub fn local_energy<F>(&self, logpsi: F, x: &SpinConfiguration) -> Result<Complex64>
    where
        F: Fn(&[i8]) -> Complex64,
    {
        self.check(x.spins())?;
        let finite = |v: Complex64, c: &[i8]| {
            if v.re.is_finite() && v.im.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite { config: c.to_vec() })
            }
        };
        let l0 = finite(logpsi(x.spins()), x.spins())?;
        let mut e = Complex64::new(self.diagonal(x.spins()), 0.0);
        let mut y = x.spins().to_vec();
        for i in 0..y.len() {
            y[i] = -y[i];
            let l1 = finite(logpsi(&y), &y)?;
            e -= (l1 - l0).exp();
            y[i] = -y[i];
        }
        Ok(e)
    }

    /// Diagonal of `dH/dλ`: `-Σ_<ij> xᵢxⱼ`.
    pub fn dh_dlambda_local(&self, x: &SpinConfiguration) -> Result<f64> {
        self.check(x.spins())?;
        Ok(-(self.bond_sum(x.spins()) as f64))
    }

    /// Diagonal of `H` over the full basis, by index.
    pub fn diagonal_table(&self) -> Vec<f64> {
        let n = self.n_sites();
        (0..1u64 << n).map(|b| self.diagonal(&bits_config(b, n))).collect()
    }

    /// Dense `2^N × 2^N` matrix. Limited to 14 sites.
    pub fn dense_matrix(&self) -> Result<DMatrix<f64>> {
        let n = self.n_sites();
        if n > 14 {
            return Err(Error::Unsupported(format!("dense matrix for {n} sites")));
        }
        let dim = 1usize << n;
        let diag = self.diagonal_table();
        let mut m = DMatrix::zeros(dim, dim);
        for b in 0..dim {
            m[(b, b)] = diag[b];
            for i in 0..n {
                m[(b ^ (1 << i), b)] = -1.0;
            }
        }
        Ok(m)
    }

    /// Dense diagonal matrix of `dH/dλ`. Limited to 14 sites.
    pub fn dense_dh_dlambda(&self) -> Result<DMatrix<f64>> {
        let n = self.n_sites();
        if n > 14 {
            return Err(Error::Unsupported(format!("dense matrix for {n} sites")));
        }
        let dim = 1usize << n;
        let mut m = DMatrix::zeros(dim, dim);
        for b in 0..dim {
            m[(b, b)] = -(self.bond_sum(&bits_config(b as u64, n)) as f64);
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(s: &[i8]) -> SpinConfiguration {
        SpinConfiguration::new(s.to_vec()).unwrap()
    }

    #[test]
    fn bond_counts() {
        assert_eq!(Lattice::chain(4).unwrap().bonds().len(), 4);
        assert_eq!(Lattice::chain(2).unwrap().bonds(), &[(0, 1)]);
        assert_eq!(Lattice::new(1, 4, Boundary::Open).unwrap().bonds().len(), 3);
        assert_eq!(Lattice::square(3).unwrap().bonds().len(), 18);
        // 2x2 torus: the wrap bonds coincide with the direct ones.
        assert_eq!(Lattice::square(2).unwrap().bonds().len(), 4);
        assert_eq!(Lattice::new(2, 3, Boundary::Open).unwrap().bonds().len(), 12);
        assert!(Lattice::new(3, 2, Boundary::Periodic).is_err());
        assert!(Lattice::chain(1).is_err());
    }

    #[test]
    fn spins_must_be_unit() {
        assert!(SpinConfiguration::new(vec![1, 0, -1]).is_err());
        assert_eq!(SpinConfiguration::from_index(0b0101, 4).spins(), &[-1, 1, -1, 1]);
        assert_eq!(cfg(&[-1, 1, -1, 1]).index(), 0b0101);
    }

    #[test]
    fn connected_uniform_chain() {
        let h = TfimHamiltonian::new(Lattice::chain(4).unwrap(), 0.0).unwrap();
        let c = h.connected_configurations(&cfg(&[1, 1, 1, 1])).unwrap();
        assert_eq!(c.len(), 5);
        assert_eq!(c[0].1, 0.0);
        assert!(c[1..].iter().all(|(_, m)| *m == -1.0));

        let h = h.with_coupling(1.0).unwrap();
        assert_eq!(h.connected_configurations(&cfg(&[1, 1, 1, 1])).unwrap()[0].1, -4.0);
        assert!(h.connected_configurations(&cfg(&[1, 1, 1])).is_err());
    }

    #[test]
    fn torus_diagonal_matches_dense() {
        let h = TfimHamiltonian::new(Lattice::square(2).unwrap(), 0.5).unwrap();
        let x = cfg(&[1, -1, 1, -1]);
        let dense = h.dense_matrix().unwrap();
        let b = x.index() as usize;
        let c = h.connected_configurations(&x).unwrap();
        assert_eq!(c[0].1, dense[(b, b)]);
        // Sites 0,1 | 2,3: columns alternate, rows agree, so two bonds give -1 and two +1.
        assert_eq!(c[0].1, 0.0);
    }

    #[test]
    fn connected_rows_reproduce_dense() {
        for (lat, lam) in [(Lattice::chain(6).unwrap(), 0.7), (Lattice::square(3).unwrap(), 0.3)] {
            let h = TfimHamiltonian::new(lat, lam).unwrap();
            let n = h.n_sites();
            let dense = h.dense_matrix().unwrap();
            for b in 0..1usize << n {
                let x = SpinConfiguration::from_index(b as u64, n);
                let mut row = vec![0.0; 1 << n];
                for (y, m) in h.connected_configurations(&x).unwrap() {
                    row[y.index() as usize] += m;
                }
                for (c, v) in row.iter().enumerate() {
                    assert_eq!(*v, dense[(b, c)]);
                }
            }
        }
    }

    #[test]
    fn local_energy_uniform() {
        let h = TfimHamiltonian::new(Lattice::chain(5).unwrap(), 0.0).unwrap();
        let e = h.local_energy(|_| Complex64::new(0.0, 0.0), &cfg(&[1, -1, 1, 1, -1])).unwrap();
        assert_eq!(e, Complex64::new(-5.0, 0.0));
        let h = TfimHamiltonian::new(Lattice::chain(4).unwrap(), 1.0).unwrap();
        let e = h.local_energy(|_| Complex64::new(0.3, 0.1), &cfg(&[1, 1, 1, 1])).unwrap();
        assert_eq!(e, Complex64::new(-8.0, 0.0));
    }

    #[test]
    fn local_energy_reports_nonfinite() {
        let h = TfimHamiltonian::new(Lattice::chain(3).unwrap(), 1.0).unwrap();
        let err = h
            .local_energy(
                |x| if x[0] < 0 { Complex64::new(f64::NEG_INFINITY, 0.0) } else { Complex64::new(0.0, 0.0) },
                &cfg(&[1, 1, 1]),
            )
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref config } if config == &vec![-1, 1, 1]));
    }

    #[test]
    fn dh_dlambda_examples() {
        let h = TfimHamiltonian::new(Lattice::chain(4).unwrap(), 0.2).unwrap();
        assert_eq!(h.dh_dlambda_local(&cfg(&[1, 1, 1, 1])).unwrap(), -4.0);
        assert_eq!(h.dh_dlambda_local(&cfg(&[1, -1, 1, -1])).unwrap(), 4.0);

        let h = TfimHamiltonian::new(Lattice::square(3).unwrap(), 0.2).unwrap();
        let d = h.dense_dh_dlambda().unwrap();
        for b in [0usize, 5, 77, 300, 511] {
            let x = SpinConfiguration::from_index(b as u64, 9);
            assert_eq!(h.dh_dlambda_local(&x).unwrap(), d[(b, b)]);
        }
    }

    #[test]
    fn dh_dlambda_is_exact_slope() {
        let lat = Lattice::square(3).unwrap();
        let x = SpinConfiguration::from_index(0b1011_0010_1, 9);
        let (lam, delta) = (0.25, 0.5);
        let h0 = TfimHamiltonian::new(lat.clone(), lam).unwrap();
        let h1 = TfimHamiltonian::new(lat, lam + delta).unwrap();
        let zero = |_: &[i8]| Complex64::new(0.0, 0.0);
        let slope = (h1.local_energy(zero, &x).unwrap() - h0.local_energy(zero, &x).unwrap()).re / delta;
        assert_eq!(slope, h0.dh_dlambda_local(&x).unwrap());
    }

    #[test]
    fn bit_translations_match_site_translations() {
        for lat in [Lattice::chain(7).unwrap(), Lattice::square(3).unwrap(), Lattice::square(4).unwrap()] {
            let n = lat.n_sites();
            for bits in [1u64, 0b1011, 0b1_0010_0110, (1 << n) - 3] {
                let bits = bits & ((1 << n) - 1);
                let x = bits_config(bits, n);
                let mut orbit_min = u64::MAX;
                for v in lat.translation_vectors() {
                    let t = config_bits(&lat.translate(&x, v));
                    assert_eq!(lat.translate_bits(bits, v), t);
                    orbit_min = orbit_min.min(t);
                }
                assert_eq!(lat.canonical_bits(bits), orbit_min);
            }
        }
    }
}
