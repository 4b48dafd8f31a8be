use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::lattice::TfimHamiltonian;
use crate::par;

/// Largest lattice handled by the dense path.
pub const DENSE_MAX_SITES: usize = 14;
/// Largest lattice handled by the Lanczos path.
pub const LANCZOS_MAX_SITES: usize = 24;
/// Sizes at or below this use the dense path in [`exact_diagonalize`].
const AUTO_DENSE_SITES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdMethod {
    Dense,
    Lanczos,
}

/// Lowest eigenpairs of a Hamiltonian, eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct EdResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<DVector<f64>>,
    pub method: EdMethod,
    pub requested: usize,
}

impl EdResult {
    /// Indices of the levels degenerate (within `tol`) with `level`.
    pub fn degenerate_group(&self, level: usize, tol: f64) -> std::ops::Range<usize> {
        let e = self.eigenvalues[level];
        let mut lo = level;
        while lo > 0 && (self.eigenvalues[lo - 1] - e).abs() <= tol {
            lo -= 1;
        }
        let mut hi = level + 1;
        while hi < self.eigenvalues.len() && (self.eigenvalues[hi] - e).abs() <= tol {
            hi += 1;
        }
        lo..hi
    }

    /// Orthonormal basis of the degenerate manifold containing `level`.
    ///
    /// Fails when the manifold reaches the last computed level, since it may then be
    /// truncated.
    pub fn manifold(&self, level: usize, tol: f64) -> Result<Vec<DVector<f64>>> {
        if level >= self.eigenvalues.len() {
            return Err(Error::Invalid(format!("level {level} not computed")));
        }
        let group = self.degenerate_group(level, tol);
        if group.end == self.eigenvalues.len() && self.eigenvalues.len() < self.eigenvectors[0].len() {
            return Err(Error::Invalid(format!(
                "manifold of level {level} may extend past the {} computed levels",
                self.eigenvalues.len()
            )));
        }
        Ok(group.map(|i| self.eigenvectors[i].clone()).collect())
    }

    /// Index of the computed level closest to `energy`.
    pub fn nearest_level(&self, energy: f64) -> usize {
        let mut best = 0;
        for (i, e) in self.eigenvalues.iter().enumerate() {
            if (e - energy).abs() < (self.eigenvalues[best] - energy).abs() {
                best = i;
            }
        }
        best
    }
}

/// Lowest `m` eigenpairs; dense for up to 10 sites, Lanczos beyond.
pub fn exact_diagonalize(h: &TfimHamiltonian, m: usize) -> Result<EdResult> {
    if h.n_sites() <= AUTO_DENSE_SITES {
        dense_diagonalize(h, m)
    } else {
        lanczos_diagonalize(h, m, &LanczosConfig::default())
    }
}

pub fn dense_diagonalize(h: &TfimHamiltonian, m: usize) -> Result<EdResult> {
    let n = h.n_sites();
    if n > DENSE_MAX_SITES {
        return Err(Error::Unsupported(format!("dense diagonalization of {n} sites")));
    }
    let dim = 1usize << n;
    check_count(m, dim)?;
    let eig = h.dense_matrix()?.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let order = &order[..m];
    Ok(EdResult {
        eigenvalues: order.iter().map(|&i| eig.eigenvalues[i]).collect(),
        eigenvectors: order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect(),
        method: EdMethod::Dense,
        requested: m,
    })
}

fn check_count(m: usize, dim: usize) -> Result<()> {
    if m == 0 || m > dim {
        return Err(Error::Invalid(format!("requested {m} eigenpairs of a {dim}-dimensional space")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LanczosConfig {
    /// Residual tolerance `‖Hv − θv‖ / max(1, |θ|)` for accepting a Ritz pair.
    pub tol: f64,
    pub max_krylov: usize,
    pub max_rounds: usize,
    pub seed: u64,
}

impl Default for LanczosConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_krylov: 120, max_rounds: 200, seed: 0x5eed }
    }
}

struct Operator {
    n: usize,
    diag: Vec<f64>,
}

impl Operator {
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        const CHUNK: usize = 1 << 12;
        let n = self.n;
        par::for_each_chunk_mut(out, CHUNK, |c, chunk| {
            let base = c * CHUNK;
            for (k, o) in chunk.iter_mut().enumerate() {
                let b = base + k;
                let mut acc = self.diag[b] * v[b];
                for i in 0..n {
                    acc -= v[b ^ (1 << i)];
                }
                *o = acc;
            }
        });
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

fn orthogonalize(w: &mut [f64], against: &[Vec<f64>]) {
    for _ in 0..2 {
        for q in against {
            let c = dot(q, w);
            axpy(-c, q, w);
        }
    }
}

/// Matrix-free Lanczos with full reorthogonalization. Converged Ritz pairs are
/// locked and deflated; further rounds restart from fresh vectors until the lowest
/// eigenvalue of the deflated operator lies above the `m`-th locked eigenvalue.
pub fn lanczos_diagonalize(h: &TfimHamiltonian, m: usize, cfg: &LanczosConfig) -> Result<EdResult> {
    let n = h.n_sites();
    if n > LANCZOS_MAX_SITES {
        return Err(Error::Unsupported(format!("Lanczos diagonalization of {n} sites")));
    }
    let dim = 1usize << n;
    check_count(m, dim)?;
    let op = Operator { n, diag: h.diagonal_table() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut locked_vals: Vec<f64> = Vec::new();
    let mut locked: Vec<Vec<f64>> = Vec::new();
    let mut restart: Option<Vec<f64>> = None;
    let mut w = vec![0.0; dim];
    let mut last_residual = f64::NAN;
    let mut done = false;

    for _round in 0..cfg.max_rounds {
        if locked.len() == dim {
            done = true;
            break;
        }
        let mut v0: Vec<f64> = restart
            .take()
            .unwrap_or_else(|| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect());
        orthogonalize(&mut v0, &locked);
        let nrm = dot(&v0, &v0).sqrt();
        if nrm < 1e-8 {
            continue;
        }
        v0.iter_mut().for_each(|x| *x /= nrm);

        let kmax = cfg.max_krylov.min(dim - locked.len()).max(1);
        let need = m.saturating_sub(locked.len()).max(1);
        let mut basis: Vec<Vec<f64>> = vec![v0];
        let mut alpha: Vec<f64> = Vec::new();
        let mut beta: Vec<f64> = Vec::new();
        let mut ritz: (DVector<f64>, DMatrix<f64>);
        let mut breakdown;
        loop {
            let j = basis.len() - 1;
            op.apply(&basis[j], &mut w);
            let a = dot(&basis[j], &w);
            alpha.push(a);
            axpy(-a, &basis[j], &mut w);
            if j > 0 {
                axpy(-beta[j - 1], &basis[j - 1], &mut w);
            }
            orthogonalize(&mut w, &locked);
            orthogonalize(&mut w, &basis);
            let b = dot(&w, &w).sqrt();
            let k = alpha.len();
            let scale = alpha.iter().chain(beta.iter()).fold(1.0f64, |s, x| s.max(x.abs()));
            breakdown = b < 1e-12 * scale;
            let check = breakdown || k == kmax || k % 10 == 0;
            if check {
                ritz = tridiagonal_eigen(&alpha, &beta);
                let done = breakdown
                    || k == kmax
                    || (0..need.min(k)).all(|i| {
                        b * ritz.1[(k - 1, i)].abs() < cfg.tol * ritz.0[i].abs().max(1.0)
                    });
                if done {
                    beta.push(b);
                    break;
                }
            }
            beta.push(b);
            basis.push(w.iter().map(|x| x / b).collect());
        }
        let k = alpha.len();
        let b_last = if breakdown { 0.0 } else { beta[k - 1] };
        let (theta, s) = ritz;
        let ritz_vector = |i: usize| {
            let mut y = vec![0.0; dim];
            for (j, q) in basis.iter().enumerate().take(k) {
                axpy(s[(j, i)], q, &mut y);
            }
            y
        };
        let converged = |i: usize| b_last * s[(k - 1, i)].abs() < cfg.tol * theta[i].abs().max(1.0);

        if !converged(0) {
            last_residual = b_last * s[(k - 1, 0)].abs();
            restart = Some(ritz_vector(0));
            continue;
        }
        let mut sorted = locked_vals.clone();
        sorted.sort_by(f64::total_cmp);
        if locked.len() >= m && theta[0] >= sorted[m - 1] - cfg.tol {
            done = true;
            break;
        }
        for i in 0..k {
            let threshold = if locked_vals.len() >= m {
                let mut s = locked_vals.clone();
                s.sort_by(f64::total_cmp);
                s[m - 1]
            } else {
                f64::INFINITY
            };
            if theta[i] > threshold || !converged(i) {
                continue;
            }
            let mut y = ritz_vector(i);
            orthogonalize(&mut y, &locked);
            let nrm = dot(&y, &y).sqrt();
            if nrm < 0.5 {
                continue;
            }
            y.iter_mut().for_each(|x| *x /= nrm);
            op.apply(&y, &mut w);
            let rayleigh = dot(&y, &w);
            axpy(-rayleigh, &y, &mut w);
            let res = dot(&w, &w).sqrt();
            last_residual = res;
            if res < 1e-9 * rayleigh.abs().max(1.0) {
                locked_vals.push(rayleigh);
                locked.push(y);
            }
        }
    }
    if !done || locked.len() < m {
        return Err(Error::NoConvergence(format!(
            "Lanczos locked {} of {m} eigenpairs; last residual {last_residual:e}",
            locked.len()
        )));
    }
    let mut order: Vec<usize> = (0..locked.len()).collect();
    order.sort_by(|&a, &b| locked_vals[a].total_cmp(&locked_vals[b]));
    let order = &order[..m];
    Ok(EdResult {
        eigenvalues: order.iter().map(|&i| locked_vals[i]).collect(),
        eigenvectors: order.iter().map(|&i| DVector::from_vec(locked[i].clone())).collect(),
        method: EdMethod::Lanczos,
        requested: m,
    })
}

/// Eigen-decomposition of the symmetric tridiagonal matrix, eigenvalues ascending.
fn tridiagonal_eigen(alpha: &[f64], beta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let k = alpha.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = t.symmetric_eigen();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = DVector::from_iterator(k, order.iter().map(|&i| eig.eigenvalues[i]));
    let vecs = DMatrix::from_fn(k, k, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Lattice;

    fn residual(h: &TfimHamiltonian, e: f64, v: &DVector<f64>) -> f64 {
        let hm = h.dense_matrix().unwrap();
        (hm * v - v * e).norm()
    }

    #[test]
    fn three_site_ring_at_zero_coupling() {
        let h = TfimHamiltonian::new(Lattice::chain(3).unwrap(), 0.0).unwrap();
        let expected = [-3.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 3.0];
        for r in [dense_diagonalize(&h, 8).unwrap(), lanczos_diagonalize(&h, 8, &LanczosConfig::default()).unwrap()] {
            for (e, x) in r.eigenvalues.iter().zip(expected) {
                assert!((e - x).abs() < 1e-12, "{e} vs {x}");
            }
            for (e, v) in r.eigenvalues.iter().zip(&r.eigenvectors) {
                assert!(residual(&h, *e, v) < 1e-9);
            }
        }
    }

    #[test]
    fn lanczos_resolves_degenerate_manifold() {
        let h = TfimHamiltonian::new(Lattice::chain(6).unwrap(), 0.0).unwrap();
        let r = lanczos_diagonalize(&h, 7, &LanczosConfig::default()).unwrap();
        assert!((r.eigenvalues[0] + 6.0).abs() < 1e-10);
        for e in &r.eigenvalues[1..7] {
            assert!((e + 4.0).abs() < 1e-10);
        }
        let basis = r.manifold(1, 1e-8);
        // Level 1 is six-fold degenerate and all six are computed but the group
        // touches the end of the list.
        assert!(basis.is_err());
        for i in 0..7 {
            for j in 0..7 {
                let d = r.eigenvectors[i].dot(&r.eigenvectors[j]);
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dense_and_lanczos_agree_on_torus() {
        let h = TfimHamiltonian::new(Lattice::square(3).unwrap(), 0.329).unwrap();
        let d = dense_diagonalize(&h, 6).unwrap();
        let l = lanczos_diagonalize(&h, 6, &LanczosConfig::default()).unwrap();
        for (a, b) in d.eigenvalues.iter().zip(&l.eigenvalues) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        for (e, v) in l.eigenvalues.iter().zip(&l.eigenvectors) {
            assert!(residual(&h, *e, v) < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_counts() {
        let h = TfimHamiltonian::new(Lattice::chain(3).unwrap(), 0.5).unwrap();
        assert!(dense_diagonalize(&h, 0).is_err());
        assert!(dense_diagonalize(&h, 9).is_err());
    }
}
