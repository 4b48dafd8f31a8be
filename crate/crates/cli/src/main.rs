use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nqs_transport::exact::{chi0_exact_1d, exact_diagonalize, exact_low_spectrum_1d, gap_1d};
use nqs_transport::io::{run_transport, RunConfig, TransportOptions};
use nqs_transport::lattice::{Boundary, Lattice, TfimHamiltonian};
use nqs_transport::report::{run_analysis, write_analysis, AnalysisSpec};
use nqs_transport::sampler::SamplerMode;
use nqs_transport::Error;

#[derive(Parser)]
#[command(name = "nqs-transport", version, about = "Adiabatic transport of neural quantum states for the transverse-field Ising model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Transport every configured track from lambda0 to lambda_final.
    Transport {
        #[arg(long)]
        config: PathBuf,
        /// Continue each track from its latest checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Exact expectation values over all 2^N configurations instead of Metropolis sampling.
        #[arg(long)]
        full_summation: bool,
    },
    /// Exact curves: 1D from the free-fermion solution, 2D spectra and gaps from diagonalization.
    Exact {
        #[command(flatten)]
        system: SystemArgs,
        #[arg(long, value_enum)]
        what: Quantity,
        /// Number of levels for `spectrum`.
        #[arg(long, default_value_t = 4)]
        levels: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fit z and ν (plus Binder and χ_F collapses when available) from results tables.
    Analyze {
        /// Analysis spec (TOML) listing one results table per system size.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Lowest eigenvalues by exact diagonalization.
    Ed {
        #[command(flatten)]
        system: SystemArgs,
        #[arg(long, default_value_t = 4)]
        levels: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct SystemArgs {
    #[arg(long, default_value_t = 1)]
    dimension: usize,
    /// Linear size L (N = L^dimension sites).
    #[arg(long)]
    extent: usize,
    #[arg(long, value_enum, default_value_t = BoundaryArg::Periodic)]
    boundary: BoundaryArg,
    /// Comma-separated couplings.
    #[arg(long, value_delimiter = ',', conflicts_with = "grid")]
    lambda: Vec<f64>,
    /// Uniform grid `start,stop,steps`.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    grid: Option<Vec<f64>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundaryArg {
    Periodic,
    Open,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Quantity {
    Spectrum,
    Chi0,
    Gap,
}

impl SystemArgs {
    fn lattice(&self) -> nqs_transport::Result<Lattice> {
        let boundary = match self.boundary {
            BoundaryArg::Periodic => Boundary::Periodic,
            BoundaryArg::Open => Boundary::Open,
        };
        Lattice::new(self.dimension, self.extent, boundary)
    }

    fn couplings(&self) -> nqs_transport::Result<Vec<f64>> {
        let out = match &self.grid {
            Some(g) => {
                if g.len() != 3 || g[2] < 1.0 || g[2].fract() != 0.0 {
                    return Err(Error::config("grid", "expected start,stop,steps with integer steps >= 1"));
                }
                nqs_transport::transport::uniform_grid(g[0], g[1], g[2] as usize)?
            }
            None => self.lambda.clone(),
        };
        if out.is_empty() {
            return Err(Error::config("lambda", "give --lambda or --grid"));
        }
        Ok(out)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Configuration and input-schema problems exit with 2, everything else with 1.
fn exit_code(e: &Error) -> ExitCode {
    match e {
        Error::Config { .. } | Error::Schema { .. } | Error::Unsupported(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run(cli: Cli) -> nqs_transport::Result<ExitCode> {
    match cli.command {
        Command::Transport { config, resume, seed, output_dir, full_summation } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if full_summation {
                cfg.sampler.mode = SamplerMode::FullSummation;
            }
            cfg.validate()?;
            let dir = output_dir
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("runs").join(cfg.run_id()));
            let report = run_transport(&cfg, &dir, &TransportOptions { resume })?;
            println!("{} rows written to {}", report.rows.len(), dir.join("results.csv").display());
            if report.failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for (track, message) in &report.failures {
                    eprintln!("track `{track}` failed: {message}");
                }
                Ok(ExitCode::from(1))
            }
        }
        Command::Exact { system, what, levels, output } => {
            let lattice = system.lattice()?;
            let lambdas = system.couplings()?;
            let mut out = String::new();
            if what == Quantity::Spectrum {
                out.push_str("lambda,level,energy,stderr\n");
            } else {
                out.push_str("lambda,value,stderr\n");
            }
            for &l in &lambdas {
                let n = lattice.n_sites();
                let one_d = lattice.dimension() == 1 && lattice.is_periodic();
                match what {
                    Quantity::Spectrum => {
                        let energies = if one_d { exact_low_spectrum_1d(n, l, levels)? } else { ed_levels(&lattice, l, levels)? };
                        for (i, e) in energies.iter().enumerate() {
                            out.push_str(&format!("{l},{i},{e},0\n"));
                        }
                    }
                    Quantity::Gap => {
                        let gap = if one_d {
                            gap_1d(n, l)?
                        } else {
                            let e = ed_levels(&lattice, l, 2)?;
                            e[1] - e[0]
                        };
                        out.push_str(&format!("{l},{gap},0\n"));
                    }
                    Quantity::Chi0 => {
                        if !one_d {
                            return Err(Error::Unsupported(
                                "chi0 has a closed form only for the periodic chain (dimension 1)".into(),
                            ));
                        }
                        out.push_str(&format!("{l},{},0\n", chi0_exact_1d(n, l)?));
                    }
                }
            }
            emit(output.as_deref(), &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Ed { system, levels, output } => {
            let lattice = system.lattice()?;
            let mut out = String::from("lambda,level,energy\n");
            for l in system.couplings()? {
                for (i, e) in ed_levels(&lattice, l, levels)?.iter().enumerate() {
                    out.push_str(&format!("{l},{i},{e}\n"));
                }
            }
            emit(output.as_deref(), &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze { spec, output_dir } => {
            let spec = AnalysisSpec::load(&spec)?;
            let dir = output_dir.or_else(|| spec.output_dir.clone()).unwrap_or_else(|| PathBuf::from("analysis"));
            let out = run_analysis(&spec)?;
            write_analysis(&out, &dir)?;
            let r = &out.report;
            println!("z  = {:.4} ± {:.4}", r.z.value, r.z.stderr);
            match r.nu.stderr {
                Some(s) => println!("nu = {:.4} ± {:.4}", r.nu.value, s),
                None => println!("nu = {:.4}", r.nu.value),
            }
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            println!("report written to {}", dir.join("report.json").display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn ed_levels(lattice: &Lattice, lambda: f64, levels: usize) -> nqs_transport::Result<Vec<f64>> {
    let h = TfimHamiltonian::new(lattice.clone(), lambda)?;
    Ok(exact_diagonalize(&h, levels.min(1 << lattice.n_sites()))?.eigenvalues)
}

fn emit(path: Option<&Path>, text: &str) -> nqs_transport::Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}
