//! Finite-size scaling of transported spectra.
//!
//! Tables are flat lists of [`ScalingRow`]s: a linear size `L`, a coupling
//! `λ`, and one measured value (a gap, a Binder cumulant, a fidelity
//! susceptibility) with an optional standard error. Collapses fit
//! `value · L^z` against a single polynomial in `(λ − λc) L^{1/ν}` and score
//! the fit by its sum of squared residuals.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Critical coupling of the chain.
pub const LAMBDA_C_1D: f64 = 1.0;
/// Critical coupling of the square lattice.
pub const LAMBDA_C_2D: f64 = 0.329;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub size: f64,
    pub lambda: f64,
    pub value: f64,
    pub stderr: Option<f64>,
}

impl ScalingRow {
    pub fn new(size: f64, lambda: f64, value: f64) -> Self {
        ScalingRow { size, lambda, value, stderr: None }
    }

    pub fn with_stderr(mut self, stderr: f64) -> Self {
        self.stderr = Some(stderr);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentEstimate {
    pub value: f64,
    pub stderr: f64,
}

fn distinct_sizes(rows: &[ScalingRow]) -> Vec<f64> {
    let mut sizes: Vec<f64> = rows.iter().map(|r| r.size).collect();
    sizes.sort_by(f64::total_cmp);
    sizes.dedup();
    sizes
}

fn check_rows(rows: &[ScalingRow]) -> Result<()> {
    for r in rows {
        if !(r.size > 0.0 && r.size.is_finite()) {
            return Err(Error::Invalid(format!("system size {} must be positive", r.size)));
        }
        if !r.lambda.is_finite() || !r.value.is_finite() {
            return Err(Error::Invalid(format!("non-finite row at L={} λ={}", r.size, r.lambda)));
        }
    }
    Ok(())
}

/// For each size, the row whose coupling is closest to `lambda_c`.
pub fn critical_slice(rows: &[ScalingRow], lambda_c: f64) -> Vec<ScalingRow> {
    let mut best: BTreeMap<u64, ScalingRow> = BTreeMap::new();
    for r in rows {
        let key = r.size.to_bits();
        match best.get(&key) {
            Some(b) if (b.lambda - lambda_c).abs() <= (r.lambda - lambda_c).abs() => {}
            _ => {
                best.insert(key, *r);
            }
        }
    }
    let mut out: Vec<ScalingRow> = best.into_values().collect();
    out.sort_by(|a, b| a.size.total_cmp(&b.size));
    out
}

/// Dynamical exponent from `Δ ∼ L^{−z}`: the negated slope of `ln Δ` against
/// `ln L`. Standard errors, when every row has a positive one, weight the
/// regression through `σ_{ln Δ} = σ/Δ`. The reported uncertainty is the slope
/// standard error scaled by the residual variance.
pub fn fit_z(rows: &[ScalingRow]) -> Result<ExponentEstimate> {
    check_rows(rows)?;
    let sizes = distinct_sizes(rows);
    if sizes.len() < 3 {
        return Err(Error::InsufficientData(format!("fit_z needs at least 3 sizes, got {}", sizes.len())));
    }
    if let Some(r) = rows.iter().find(|r| r.value <= 0.0) {
        return Err(Error::Invalid(format!("non-positive gap {} at L={}", r.value, r.size)));
    }
    let weighted = rows.iter().all(|r| r.stderr.is_some_and(|s| s > 0.0));
    let pts: Vec<(f64, f64, f64)> = rows
        .iter()
        .map(|r| {
            let w = if weighted {
                let s = r.stderr.unwrap() / r.value;
                1.0 / (s * s)
            } else {
                1.0
            };
            (r.size.ln(), r.value.ln(), w)
        })
        .collect();
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = pts.iter().map(|p| p.2 * (p.1 - intercept - slope * p.0).powi(2)).sum();
    let dof = (pts.len() - 2) as f64;
    let stderr = if dof > 0.0 { (ssr / dof / sxx).sqrt() } else { 0.0 };
    Ok(ExponentEstimate { value: -slope, stderr })
}

/// Weighted least-squares polynomial of degree `degree` through `(x, y, w)`.
/// Returns the coefficients in powers of `x` and the weighted SSR.
pub fn polynomial_fit(points: &[(f64, f64, f64)], degree: usize) -> Result<(Vec<f64>, f64)> {
    if points.is_empty() {
        return Err(Error::InsufficientData("no points to fit".into()));
    }
    let scale = points.iter().map(|p| p.0.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let n = points.len();
    let m = degree + 1;
    let mut a = DMatrix::<f64>::zeros(n, m);
    let mut b = DVector::<f64>::zeros(n);
    for (i, &(x, y, w)) in points.iter().enumerate() {
        let sw = w.sqrt();
        let t = x / scale;
        let mut tk = 1.0;
        for k in 0..m {
            a[(i, k)] = sw * tk;
            tk *= t;
        }
        b[i] = sw * y;
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let a_coef = svd
        .solve(&b, smax * 1e-13)
        .map_err(|e| Error::Solver(format!("polynomial least squares: {e}")))?;
    let resid = &a * &a_coef - &b;
    let coefficients = a_coef.iter().enumerate().map(|(k, c)| c / scale.powi(k as i32)).collect();
    Ok((coefficients, resid.norm_squared()))
}

pub fn evaluate_polynomial(coefficients: &[f64], x: f64) -> f64 {
    coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// One point of a data collapse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapsePoint {
    pub size: f64,
    pub lambda: f64,
    /// Scaling variable `(λ − λ_ref) L^{1/ν}`.
    pub x: f64,
    /// Rescaled value `value · L^{z}`.
    pub y: f64,
}

/// Collapse coordinates with the polynomial fit through them. `ssr` and
/// `coefficients` are absent when the table has a single size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Collapse {
    pub points: Vec<CollapsePoint>,
    pub degree: usize,
    pub coefficients: Option<Vec<f64>>,
    pub ssr: Option<f64>,
    /// `ssr` divided by the weighted total sum of squares of `y`; comparable
    /// across different vertical rescalings.
    pub relative_ssr: Option<f64>,
}

/// Scaling variable and vertical rescaling shared by all collapses.
#[derive(Clone, Copy)]
struct Scaling<'a> {
    nu: f64,
    /// `value · L^{power}`.
    power: f64,
    reference: &'a (dyn Fn(f64) -> f64 + Sync),
}

fn collapse_points(rows: &[ScalingRow], s: Scaling<'_>) -> Vec<(CollapsePoint, f64)> {
    let weighted = rows.iter().all(|r| r.stderr.is_some_and(|e| e > 0.0));
    rows.iter()
        .map(|r| {
            let lp = r.size.powf(s.power);
            let x = (r.lambda - (s.reference)(r.size)) * r.size.powf(1.0 / s.nu);
            let w = if weighted {
                let e = r.stderr.unwrap() * lp;
                1.0 / (e * e)
            } else {
                1.0
            };
            (CollapsePoint { size: r.size, lambda: r.lambda, x, y: r.value * lp }, w)
        })
        .collect()
}

fn collapse_ssr(rows: &[ScalingRow], s: Scaling<'_>, degree: usize) -> Result<(Vec<f64>, f64, f64)> {
    let pts: Vec<(f64, f64, f64)> = collapse_points(rows, s).iter().map(|(p, w)| (p.x, p.y, *w)).collect();
    let (coef, ssr) = polynomial_fit(&pts, degree)?;
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let mean = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let tss: f64 = pts.iter().map(|p| p.2 * (p.1 - mean).powi(2)).sum();
    let rel = if tss > 0.0 { ssr / tss } else { 0.0 };
    Ok((coef, ssr, rel))
}

fn build_collapse(rows: &[ScalingRow], s: Scaling<'_>, degree: usize, fit: bool) -> Result<Collapse> {
    check_rows(rows)?;
    let points = collapse_points(rows, s).into_iter().map(|(p, _)| p).collect();
    let (coefficients, ssr, relative_ssr) = if fit {
        let (c, ssr, rel) = collapse_ssr(rows, s, degree)?;
        (Some(c), Some(ssr), Some(rel))
    } else {
        (None, None, None)
    };
    Ok(Collapse { points, degree, coefficients, ssr, relative_ssr })
}

fn require_sizes(rows: &[ScalingRow], what: &str) -> Result<()> {
    let n = distinct_sizes(rows).len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{what} needs at least 2 system sizes, got {n}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseSettings {
    pub degree: usize,
    pub nu_min: f64,
    pub nu_max: f64,
    /// Points in the coarse scan, endpoints included.
    pub grid_points: usize,
    /// Absolute tolerance of the golden-section refinement.
    pub tolerance: f64,
}

impl Default for CollapseSettings {
    fn default() -> Self {
        CollapseSettings { degree: 8, nu_min: 0.3, nu_max: 2.0, grid_points: 69, tolerance: 1e-7 }
    }
}

impl CollapseSettings {
    fn validate(&self) -> Result<()> {
        if self.degree < 1 {
            return Err(Error::config("analysis.degree", "must be at least 1"));
        }
        if !(self.nu_min > 0.0 && self.nu_min < self.nu_max && self.nu_max.is_finite()) {
            return Err(Error::config("analysis.nu_interval", "require 0 < nu_min < nu_max"));
        }
        if self.grid_points < 3 {
            return Err(Error::config("analysis.grid_points", "must be at least 3"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::config("analysis.tolerance", "must be positive"));
        }
        Ok(())
    }
}

/// Refit with one size withheld.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JackknifeSample {
    pub withheld: f64,
    pub nu: f64,
    pub coefficients: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseFit {
    pub nu: f64,
    /// Jackknife over sizes; absent with fewer than three sizes.
    pub stderr: Option<f64>,
    pub z: f64,
    pub lambda_c: f64,
    pub degree: usize,
    pub coefficients: Vec<f64>,
    pub ssr: f64,
    /// Coarse scan `(ν, SSR(ν))`.
    pub ssr_curve: Vec<(f64, f64)>,
    pub jackknife: Vec<JackknifeSample>,
    pub warnings: Vec<String>,
}

/// `SSR(ν)` of the collapse `value · L^z` against `(λ − λc) L^{1/ν}`.
pub fn collapse_ssr_at(rows: &[ScalingRow], z: f64, lambda_c: f64, nu: f64, degree: usize) -> Result<f64> {
    check_rows(rows)?;
    let reference = |_: f64| lambda_c;
    Ok(collapse_ssr(rows, Scaling { nu, power: z, reference: &reference }, degree)?.1)
}

struct Minimum {
    nu: f64,
    curve: Vec<(f64, f64)>,
    warnings: Vec<String>,
}

fn minimize_ssr(rows: &[ScalingRow], z: f64, lambda_c: f64, settings: &CollapseSettings) -> Result<Minimum> {
    let reference = |_: f64| lambda_c;
    scan_minimize(settings, |nu| {
        Ok(collapse_ssr(rows, Scaling { nu, power: z, reference: &reference }, settings.degree)?.1)
    })
}

/// Coarse grid scan of `f` over the ν interval followed by golden-section
/// refinement around the grid minimum. A curve with several grid-local minima,
/// or a minimum on the boundary, returns the grid minimum with a warning.
fn scan_minimize<F>(settings: &CollapseSettings, f: F) -> Result<Minimum>
where
    F: Fn(f64) -> Result<f64> + Sync + Send,
{
    let n = settings.grid_points;
    let grid: Vec<f64> = (0..n)
        .map(|i| settings.nu_min + (settings.nu_max - settings.nu_min) * i as f64 / (n - 1) as f64)
        .collect();
    let values: Vec<Result<f64>> = par::map(&grid, |&nu| f(nu));
    let values: Vec<f64> = values.into_iter().collect::<Result<_>>()?;
    let curve: Vec<(f64, f64)> = grid.iter().copied().zip(values.iter().copied()).collect();

    let mut warnings = Vec::new();
    let best = (0..n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    let local_minima = (0..n)
        .filter(|&i| {
            let left = i == 0 || values[i] < values[i - 1];
            let right = i == n - 1 || values[i] < values[i + 1];
            left && right
        })
        .count();
    if local_minima > 1 {
        warnings.push(format!(
            "SSR(ν) has {local_minima} local minima on [{}, {}]; returning the global grid minimum",
            settings.nu_min, settings.nu_max
        ));
        return Ok(Minimum { nu: grid[best], curve, warnings });
    }
    if best == 0 || best == n - 1 {
        warnings.push(format!("SSR(ν) is minimal at the interval boundary ν = {}", grid[best]));
        return Ok(Minimum { nu: grid[best], curve, warnings });
    }
    let nu = golden_section(grid[best - 1], grid[best + 1], settings.tolerance, &f)?;
    Ok(Minimum { nu, curve, warnings })
}

/// Minimizes a unimodal `f` on `[a, b]`.
pub fn golden_section<F>(a: f64, b: f64, tolerance: f64, f: F) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (a, b);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while (b - a).abs() > tolerance {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    Ok(0.5 * (a + b))
}

/// Correlation-length exponent minimizing the collapse SSR of
/// `Δ L^z = F((λ − λc) L^{1/ν})` with a degree-`D` polynomial `F`.
pub fn fit_nu(rows: &[ScalingRow], z: f64, lambda_c: f64, settings: &CollapseSettings) -> Result<CollapseFit> {
    settings.validate()?;
    check_rows(rows)?;
    require_sizes(rows, "fit_nu")?;
    let min = minimize_ssr(rows, z, lambda_c, settings)?;
    let reference = |_: f64| lambda_c;
    let (coefficients, ssr, _) =
        collapse_ssr(rows, Scaling { nu: min.nu, power: z, reference: &reference }, settings.degree)?;

    let sizes = distinct_sizes(rows);
    let mut jackknife = Vec::new();
    let mut stderr = None;
    if sizes.len() >= 3 {
        for &s in &sizes {
            let kept: Vec<ScalingRow> = rows.iter().filter(|r| r.size != s).copied().collect();
            let m = minimize_ssr(&kept, z, lambda_c, settings)?;
            let (c, _, _) =
                collapse_ssr(&kept, Scaling { nu: m.nu, power: z, reference: &reference }, settings.degree)?;
            jackknife.push(JackknifeSample { withheld: s, nu: m.nu, coefficients: c });
        }
        let k = jackknife.len() as f64;
        let mean = jackknife.iter().map(|j| j.nu).sum::<f64>() / k;
        let var = (k - 1.0) / k * jackknife.iter().map(|j| (j.nu - mean).powi(2)).sum::<f64>();
        stderr = Some(var.sqrt());
    }
    Ok(CollapseFit {
        nu: min.nu,
        stderr,
        z,
        lambda_c,
        degree: settings.degree,
        coefficients,
        ssr,
        ssr_curve: min.curve,
        jackknife,
        warnings: min.warnings,
    })
}

/// Gap collapse coordinates `(λ − λc) L^{1/ν}`, `Δ L^{z}` at fitted exponents.
pub fn gap_collapse(rows: &[ScalingRow], z: f64, nu: f64, lambda_c: f64, degree: usize) -> Result<Collapse> {
    require_sizes(rows, "gap_collapse")?;
    let reference = |_: f64| lambda_c;
    build_collapse(rows, Scaling { nu, power: z, reference: &reference }, degree, true)
}

/// Binder-cumulant collapse `U_L = F_U((λ − λc) L^{1/ν})`, i.e. `z = 0`.
pub fn binder_collapse(rows: &[ScalingRow], nu: f64, lambda_c: f64, degree: usize) -> Result<Collapse> {
    require_sizes(rows, "binder_collapse")?;
    let reference = |_: f64| lambda_c;
    build_collapse(rows, Scaling { nu, power: 0.0, reference: &reference }, degree, true)
}

/// Standard vertical power for the total fidelity susceptibility, `χ_F ∼ L^{2/ν}`.
pub fn chi_scaling_power(nu: f64) -> f64 {
    2.0 / nu
}

/// Fidelity-susceptibility collapse `χ_F L^{−power}` against `(λ − λ*_L) L^{1/ν}`
/// with per-size shifted critical points `shifts = [(L, λ*)]`. A single-size
/// table passes through with coordinates only.
pub fn chi_collapse(
    rows: &[ScalingRow],
    nu: f64,
    shifts: &[(f64, f64)],
    power: f64,
    degree: usize,
) -> Result<Collapse> {
    check_rows(rows)?;
    for s in distinct_sizes(rows) {
        if !shifts.iter().any(|&(l, _)| l == s) {
            return Err(Error::Invalid(format!("no shifted critical point for L={s}")));
        }
    }
    let reference = |l: f64| shifts.iter().find(|&&(s, _)| s == l).map(|&(_, v)| v).unwrap_or(f64::NAN);
    let fit = distinct_sizes(rows).len() >= 2;
    build_collapse(rows, Scaling { nu, power: -power, reference: &reference }, degree, fit)
}

/// Finite-size critical point. In one dimension `λ* = λc − π²/(2N²)`; in two
/// dimensions `λ* = λc + b L^{−1/ν}` with `b` from [`fit_shift_coefficient`].
pub fn shifted_critical_point(size: f64, dimension: usize, lambda_c: f64, nu: f64, b: Option<f64>) -> Result<f64> {
    if !(size > 0.0) {
        return Err(Error::Invalid(format!("system size {size} must be positive")));
    }
    match dimension {
        1 => Ok(lambda_c - std::f64::consts::PI.powi(2) / (2.0 * size * size)),
        2 => {
            let b = b.ok_or_else(|| Error::Invalid("2D shift needs a fitted coefficient b".into()))?;
            Ok(lambda_c + b * size.powf(-1.0 / nu))
        }
        d => Err(Error::Unsupported(format!("dimension {d}"))),
    }
}

/// `A / (1 + ((λ − λ0)/γ)²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lorentzian {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
}

impl Lorentzian {
    pub fn eval(&self, lambda: f64) -> f64 {
        let u = (lambda - self.center) / self.width;
        self.amplitude / (1.0 + u * u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorentzianFit {
    pub curve: Lorentzian,
    pub ssr: f64,
    pub iterations: usize,
}

/// Levenberg–Marquardt fit of a Lorentzian peak to `(λ, χ)` samples.
pub fn fit_lorentzian(points: &[(f64, f64)]) -> Result<LorentzianFit> {
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!("Lorentzian fit needs 3 points, got {}", points.len())));
    }
    let (imax, &(l_peak, y_peak)) = points
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .unwrap();
    let span = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max)
        - points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let half: Vec<f64> = points.iter().filter(|p| p.1 >= 0.5 * y_peak).map(|p| p.0).collect();
    let fwhm = half.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - half.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let width = if fwhm > 0.0 { 0.5 * fwhm } else { 0.25 * span.max(1e-12) };
    let _ = imax;
    let mut p = [y_peak, l_peak, width];

    let residuals = |p: &[f64; 3]| -> Vec<f64> {
        let c = Lorentzian { amplitude: p[0], center: p[1], width: p[2] };
        points.iter().map(|&(l, y)| c.eval(l) - y).collect()
    };
    let ssr_of = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let mut r = residuals(&p);
    let mut ssr = ssr_of(&r);
    let mut mu = 1e-3;
    let scale = y_peak.abs().max(f64::MIN_POSITIVE);
    for it in 0..500 {
        let mut jt_j = [[0.0; 3]; 3];
        let mut jt_r = [0.0; 3];
        for (i, &(l, _)) in points.iter().enumerate() {
            let u = (l - p[1]) / p[2];
            let d = 1.0 + u * u;
            let g = [1.0 / d, p[0] * 2.0 * u / (p[2] * d * d), p[0] * 2.0 * u * u / (p[2] * d * d)];
            for a in 0..3 {
                jt_r[a] += g[a] * r[i];
                for b in 0..3 {
                    jt_j[a][b] += g[a] * g[b];
                }
            }
        }
        let grad = jt_r.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if grad < 1e-14 * scale * scale || ssr < 1e-28 * scale * scale {
            return Ok(LorentzianFit { curve: lorentz(&p), ssr, iterations: it });
        }
        let mut improved = false;
        while mu < 1e12 {
            let mut a = DMatrix::<f64>::zeros(3, 3);
            for i in 0..3 {
                for j in 0..3 {
                    a[(i, j)] = jt_j[i][j];
                }
                a[(i, i)] += mu * jt_j[i][i].max(1e-300);
            }
            let rhs = DVector::from_iterator(3, jt_r.iter().map(|v| -v));
            let Some(step) = a.lu().solve(&rhs) else {
                mu *= 10.0;
                continue;
            };
            let trial = [p[0] + step[0], p[1] + step[1], p[2] + step[2]];
            if !(trial[2].abs() > 0.0) {
                mu *= 10.0;
                continue;
            }
            let rt = residuals(&trial);
            let st = ssr_of(&rt);
            if st.is_finite() && st < ssr {
                let rel = (ssr - st) / ssr.max(f64::MIN_POSITIVE);
                p = trial;
                r = rt;
                ssr = st;
                mu = (mu * 0.3).max(1e-15);
                improved = true;
                if rel < 1e-15 {
                    return Ok(LorentzianFit { curve: lorentz(&p), ssr, iterations: it + 1 });
                }
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            return Ok(LorentzianFit { curve: lorentz(&p), ssr, iterations: it + 1 });
        }
    }
    Err(Error::NoConvergence(format!("Lorentzian fit: residuals {r:?}")))
}

fn lorentz(p: &[f64; 3]) -> Lorentzian {
    Lorentzian { amplitude: p[0], center: p[1], width: p[2].abs() }
}

/// Least-squares `b` in `peak_L = λc + b L^{−1/ν}` from `(L, peak_L)` pairs.
pub fn fit_shift_coefficient(peaks: &[(f64, f64)], lambda_c: f64, nu: f64) -> Result<ExponentEstimate> {
    if peaks.is_empty() {
        return Err(Error::InsufficientData("no peak positions".into()));
    }
    let u: Vec<f64> = peaks.iter().map(|&(l, _)| l.powf(-1.0 / nu)).collect();
    let v: Vec<f64> = peaks.iter().map(|&(_, p)| p - lambda_c).collect();
    let suu: f64 = u.iter().map(|x| x * x).sum();
    let b = u.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() / suu;
    let n = peaks.len();
    let stderr = if n > 1 {
        let ssr: f64 = u.iter().zip(&v).map(|(x, y)| (y - b * x).powi(2)).sum();
        (ssr / (n - 1) as f64 / suu).sqrt()
    } else {
        0.0
    };
    Ok(ExponentEstimate { value: b, stderr })
}
