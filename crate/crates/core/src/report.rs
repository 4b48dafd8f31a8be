//! Exponent fits over archived results tables.
//!
//! An analysis spec names one `results.csv` per system size (and optionally the
//! matching `fidelity.csv`). Gaps are the energy difference between two tracks
//! at equal coupling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    binder_collapse, chi_collapse, chi_scaling_power, critical_slice, fit_lorentzian, fit_nu, fit_z, gap_collapse,
    Collapse, CollapsePoint, CollapseSettings, ExponentEstimate, JackknifeSample, ScalingRow, LAMBDA_C_1D,
    LAMBDA_C_2D,
};
use crate::error::{Error, Result};
use crate::io::{read_fidelity, read_results, ResultRow};
use crate::observables::binder_from_moments;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisInput {
    pub size: usize,
    pub results: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    pub dimension: usize,
    /// Defaults to the critical coupling of the dimension.
    #[serde(default)]
    pub lambda_c: Option<f64>,
    #[serde(default = "default_ground")]
    pub ground: String,
    #[serde(default = "default_excited")]
    pub excited: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub collapse: CollapseSettings,
    pub inputs: Vec<AnalysisInput>,
}

fn default_ground() -> String {
    "ground".into()
}

fn default_excited() -> String {
    "first".into()
}

impl AnalysisSpec {
    /// Parses a spec; relative input paths resolve against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let mut spec: AnalysisSpec = toml::from_str(text).map_err(|e| Error::config("analysis", e.message().to_string()))?;
        for input in &mut spec.inputs {
            input.results = base.join(&input.results);
            if let Some(f) = &input.fidelity {
                input.fidelity = Some(base.join(f));
            }
        }
        if let Some(o) = &spec.output_dir {
            spec.output_dir = Some(base.join(o));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.dimension) {
            return Err(Error::config("analysis.dimension", "must be 1 or 2"));
        }
        if self.lambda_c.is_some_and(|l| !(l.is_finite() && l > 0.0)) {
            return Err(Error::config("analysis.lambda_c", "must be positive"));
        }
        if self.inputs.is_empty() {
            return Err(Error::config("analysis.inputs", "at least one input is required"));
        }
        let mut sizes: Vec<usize> = self.inputs.iter().map(|i| i.size).collect();
        sizes.sort_unstable();
        if sizes.windows(2).any(|w| w[0] == w[1]) || sizes[0] < 2 {
            return Err(Error::config("analysis.inputs.size", "sizes must be distinct and at least 2"));
        }
        if self.ground == self.excited {
            return Err(Error::config("analysis.excited", "must differ from the ground track"));
        }
        Ok(())
    }

    pub fn critical_coupling(&self) -> f64 {
        self.lambda_c.unwrap_or(if self.dimension == 1 { LAMBDA_C_1D } else { LAMBDA_C_2D })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuEstimate {
    pub value: f64,
    /// Jackknife over sizes; absent with fewer than three sizes.
    pub stderr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseQuality {
    pub ssr: Option<f64>,
    pub relative_ssr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSummary {
    /// `(L, λ*)` from a Lorentzian fit around each size's maximum.
    pub peaks: Vec<(f64, f64)>,
    pub power: f64,
    pub quality: CollapseQuality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub dimension: usize,
    pub lambda_c: f64,
    pub sizes: Vec<usize>,
    pub z: ExponentEstimate,
    pub nu: NuEstimate,
    pub degree: usize,
    pub ssr: f64,
    pub ssr_curve: Vec<(f64, f64)>,
    pub jackknife: Vec<JackknifeSample>,
    pub binder: Option<CollapseQuality>,
    pub chi: Option<ChiSummary>,
    pub warnings: Vec<String>,
}

/// Gap rows `E_excited − E_ground` at couplings present in both tracks.
pub fn gap_rows(size: usize, rows: &[ResultRow], ground: &str, excited: &str) -> Result<Vec<ScalingRow>> {
    let by_lambda = |label: &str| -> BTreeMap<u64, &ResultRow> {
        rows.iter().filter(|r| r.track == label).map(|r| (r.lambda.to_bits(), r)).collect()
    };
    let (g, e) = (by_lambda(ground), by_lambda(excited));
    if g.is_empty() || e.is_empty() {
        let missing = if g.is_empty() { ground } else { excited };
        return Err(Error::Invalid(format!("no rows for track `{missing}` at L={size}")));
    }
    let mut out: Vec<ScalingRow> = g
        .iter()
        .filter_map(|(k, a)| e.get(k).map(|b| (a, b)))
        .map(|(a, b)| {
            let row = ScalingRow::new(size as f64, a.lambda, b.energy - a.energy);
            let se = a.energy_stderr.hypot(b.energy_stderr);
            if se > 0.0 { row.with_stderr(se) } else { row }
        })
        .collect();
    out.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    Ok(out)
}

fn binder_rows(size: usize, rows: &[ResultRow], ground: &str) -> Option<Vec<ScalingRow>> {
    let mut out = Vec::new();
    for r in rows.iter().filter(|r| r.track == ground) {
        let u = binder_from_moments(r.m2?, r.m4?).ok()?;
        out.push(ScalingRow::new(size as f64, r.lambda, u));
    }
    (!out.is_empty()).then_some(out)
}

fn chi_peak(size: usize, rows: &[ScalingRow]) -> Result<f64> {
    let max = rows.iter().map(|r| r.value).fold(f64::NEG_INFINITY, f64::max);
    let window: Vec<(f64, f64)> = rows.iter().filter(|r| r.value >= 0.5 * max).map(|r| (r.lambda, r.value)).collect();
    if window.len() < 3 {
        return Err(Error::InsufficientData(format!("fewer than 3 points around the χ_F maximum at L={size}")));
    }
    Ok(fit_lorentzian(&window)?.curve.center)
}

/// Output of [`run_analysis`]: the report plus collapse coordinates for plotting.
#[derive(Clone, Debug)]
pub struct AnalysisOutput {
    pub report: AnalysisReport,
    pub gap: Collapse,
    pub binder: Option<Collapse>,
    pub chi: Option<Collapse>,
}

pub fn run_analysis(spec: &AnalysisSpec) -> Result<AnalysisOutput> {
    spec.validate()?;
    let lambda_c = spec.critical_coupling();
    let mut gaps = Vec::new();
    let mut binder = Some(Vec::new());
    let mut chi = Some(Vec::new());
    let mut inputs = spec.inputs.clone();
    inputs.sort_by_key(|i| i.size);
    for input in &inputs {
        let rows = read_results(&input.results)?;
        gaps.extend(gap_rows(input.size, &rows, &spec.ground, &spec.excited)?);
        binder = match (binder, binder_rows(input.size, &rows, &spec.ground)) {
            (Some(mut acc), Some(b)) => {
                acc.extend(b);
                Some(acc)
            }
            _ => None,
        };
        chi = match (chi, &input.fidelity) {
            (Some(mut acc), Some(path)) => {
                let table = read_fidelity(path)?;
                acc.extend(
                    table
                        .iter()
                        .filter(|r| r.track == spec.ground && r.chi_f.is_finite())
                        .map(|r| ScalingRow::new(input.size as f64, r.lambda, r.chi_f)),
                );
                Some(acc)
            }
            _ => None,
        };
    }
    if inputs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "data collapse is undefined for a single system size (L={})",
            inputs[0].size
        )));
    }

    let z = fit_z(&critical_slice(&gaps, lambda_c))?;
    let fit = fit_nu(&gaps, z.value, lambda_c, &spec.collapse)?;
    let gap = gap_collapse(&gaps, z.value, fit.nu, lambda_c, fit.degree)?;
    let mut warnings = fit.warnings.clone();

    let binder = binder.map(|rows| binder_collapse(&rows, fit.nu, lambda_c, fit.degree)).transpose()?;
    let mut chi_summary = None;
    let chi = match chi.filter(|rows| !rows.is_empty()) {
        Some(rows) => {
            let mut peaks = Vec::new();
            for input in &inputs {
                let own: Vec<ScalingRow> = rows.iter().filter(|r| r.size == input.size as f64).copied().collect();
                match chi_peak(input.size, &own) {
                    Ok(p) => peaks.push((input.size as f64, p)),
                    Err(e) => warnings.push(format!("χ_F peak at L={}: {e}", input.size)),
                }
            }
            if peaks.len() == inputs.len() {
                let power = chi_scaling_power(fit.nu);
                let c = chi_collapse(&rows, fit.nu, &peaks, power, fit.degree)?;
                chi_summary = Some(ChiSummary {
                    peaks,
                    power,
                    quality: CollapseQuality { ssr: c.ssr, relative_ssr: c.relative_ssr },
                });
                Some(c)
            } else {
                None
            }
        }
        None => None,
    };

    let report = AnalysisReport {
        dimension: spec.dimension,
        lambda_c,
        sizes: inputs.iter().map(|i| i.size).collect(),
        z,
        nu: NuEstimate { value: fit.nu, stderr: fit.stderr },
        degree: fit.degree,
        ssr: fit.ssr,
        ssr_curve: fit.ssr_curve,
        jackknife: fit.jackknife,
        binder: binder.as_ref().map(|b| CollapseQuality { ssr: b.ssr, relative_ssr: b.relative_ssr }),
        chi: chi_summary,
        warnings,
    };
    Ok(AnalysisOutput { report, gap, binder, chi })
}

fn write_points(path: &Path, points: &[CollapsePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    if points.is_empty() {
        w.write_record(["size", "lambda", "x", "y"])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.json` and one `*_collapse.csv` per available collapse.
pub fn write_analysis(output: &AnalysisOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(&output.report).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(dir.join("report.json"), json + "\n")?;
    write_points(&dir.join("gap_collapse.csv"), &output.gap.points)?;
    if let Some(b) = &output.binder {
        write_points(&dir.join("binder_collapse.csv"), &b.points)?;
    }
    if let Some(c) = &output.chi {
        write_points(&dir.join("chi_collapse.csv"), &c.points)?;
    }
    Ok(())
}
