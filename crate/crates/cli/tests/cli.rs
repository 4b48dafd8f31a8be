use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nqs-transport"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Splits CSV rows below the header into cells.
fn rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

const L4_FULL: &str = "seed = 11
[model]
dimension = 1
extent = 4
steps = 3
lambda_final = 0.35
[solver]
max_iterations = 400
eta_initial = 0.05
eta_final = 0.05
s_cutoff = 1e-6
variance_cutoff = 1e-13
[sampler]
mode = \"full-summation\"
";

const L4_SAMPLED: &str = "seed = 3
[model]
dimension = 1
extent = 4
steps = 4
lambda_final = 0.6
[solver]
max_iterations = 30
[sampler]
n_chains = 4
samples_per_chain = 64
";

#[test]
fn malformed_config_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[model]\ndimension = 1\nextent = 4\nsteps = 0\n");
    let o = run(&["transport", "--config", &cfg, "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.steps"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "[model]\ndimension = 1\nextent = 4\n[solver]\nmax_iteration = 3\n");
    let o = run(&["transport", "--config", &cfg, "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("max_iteration"), "{}", stderr(&o));
}

#[test]
fn full_summation_transport_matches_ed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), L4_FULL);
    let out = dir.path().join("out");
    let o = run(&["transport", "--config", &cfg, "--output-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(text.starts_with("run_id,track,lambda,energy,energy_stderr,variance,v_score,infidelity,m2,m4,converged,iterations\n"));
    let table = rows(&text);
    for track in ["ground", "first"] {
        assert_eq!(table.iter().filter(|r| r[1] == track).count(), 4, "S+1 rows for {track}");
    }
    for r in table.iter().filter(|r| r[1] == "ground") {
        let lambda = &r[2];
        let e: f64 = r[3].parse().unwrap();
        let ed = run(&["ed", "--extent", "4", "--lambda", lambda, "--levels", "1"]);
        let e0: f64 = rows(&stdout(&ed))[0][2].parse().unwrap();
        assert!((e - e0).abs() < 1e-6, "λ={lambda}: {e} vs {e0}");
    }
    for f in ["config.toml", "run.log", "fidelity.csv", "checkpoints/ground/step_0003.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), L4_SAMPLED);
    let mut tables = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&["transport", "--config", &cfg, "--output-dir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        tables.push(fs::read(out.join("results.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);

    let out = dir.path().join("c");
    let o = run(&["transport", "--config", &cfg, "--seed", "4", "--output-dir", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_ne!(fs::read(out.join("results.csv")).unwrap(), tables[0]);
}

#[test]
fn resume_after_kill_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), L4_SAMPLED);
    let reference = dir.path().join("reference");
    let o = run(&["transport", "--config", &cfg, "--output-dir", reference.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let out = dir.path().join("killed");
    let mut child = bin().args(["transport", "--config", &cfg, "--output-dir", out.to_str().unwrap()]).spawn().unwrap();
    let marker = out.join("checkpoints/ground/step_0001.ckpt");
    let start = Instant::now();
    while !marker.exists() && start.elapsed() < Duration::from_secs(120) {
        std::thread::sleep(Duration::from_millis(2));
    }
    let _ = child.kill();
    let _ = child.wait();
    // If the run finished before the kill, drop its later steps to force a real resume.
    for track in ["ground", "first"] {
        for step in 2..=4 {
            let _ = fs::remove_file(out.join(format!("checkpoints/{track}/step_{step:04}.ckpt")));
        }
    }
    let _ = fs::remove_file(out.join("results.csv"));

    let o = run(&["transport", "--config", &cfg, "--output-dir", out.to_str().unwrap(), "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(out.join("results.csv")).unwrap(), fs::read(reference.join("results.csv")).unwrap());

    let o = run(&["transport", "--config", &cfg, "--output-dir", out.to_str().unwrap(), "--resume", "--seed", "9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("refusing to resume"), "{}", stderr(&o));
}

#[test]
fn exact_subcommand_values() {
    let o = run(&["exact", "--extent", "2", "--lambda", "0", "--what", "chi0"]);
    assert!(o.status.success());
    let chi: f64 = rows(&stdout(&o))[0][1].parse().unwrap();
    assert!((chi - 0.5).abs() < 1e-12);

    let o = run(&["exact", "--extent", "6", "--lambda", "0", "--what", "gap"]);
    assert_eq!(rows(&stdout(&o))[0][1], "2");

    let jw = run(&["exact", "--extent", "8", "--lambda", "1", "--what", "spectrum", "--levels", "5"]);
    let ed = run(&["ed", "--extent", "8", "--lambda", "1", "--levels", "5"]);
    for (a, b) in rows(&stdout(&jw)).iter().zip(rows(&stdout(&ed))) {
        let (x, y): (f64, f64) = (a[2].parse().unwrap(), b[2].parse().unwrap());
        assert!((x - y).abs() < 1e-9, "{x} vs {y}");
    }

    let o = run(&["exact", "--extent", "8", "--grid", "0.5,1.0,5", "--what", "gap"]);
    assert_eq!(rows(&stdout(&o)).len(), 6);

    let o = run(&["exact", "--dimension", "2", "--extent", "3", "--lambda", "0.3", "--what", "chi0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unsupported"));
}

/// Results tables whose two tracks carry the exact ground and first-excited energies.
fn jw_results(dir: &Path, n: usize) -> String {
    let mut text = String::from("run_id,track,lambda,energy,energy_stderr,variance,v_score,infidelity,m2,m4,converged,iterations\n");
    let o = run(&["exact", "--extent", &n.to_string(), "--grid", "0.8,1.2,40", "--what", "spectrum", "--levels", "2"]);
    for r in rows(&stdout(&o)) {
        let track = if r[1] == "0" { "ground" } else { "first" };
        text.push_str(&format!("jw,{track},{},{},0,0,0,,,,true,0\n", r[0], r[2]));
    }
    let p = dir.join(format!("L{n}.csv"));
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn analyze_recovers_unit_exponents_from_exact_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = String::from("dimension = 1\noutput_dir = \"report\"\n");
    for n in [8, 12, 16, 24, 32] {
        spec.push_str(&format!("[[inputs]]\nsize = {n}\nresults = \"{}\"\n", jw_results(dir.path(), n)));
    }
    let spec_path = dir.path().join("analysis.toml");
    fs::write(&spec_path, spec).unwrap();
    let o = run(&["analyze", "--spec", spec_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("report/report.json")).unwrap();
    let value = |key: &str, field: &str| -> f64 {
        let start = report.find(&format!("\"{key}\": {{")).unwrap();
        let rest = &report[start..];
        let f = rest.find(&format!("\"{field}\": ")).unwrap() + field.len() + 4;
        rest[f..].split([',', '\n', '}']).next().unwrap().trim().parse().unwrap()
    };
    assert!((value("z", "value") - 1.0).abs() < 0.02);
    assert!((value("nu", "value") - 1.0).abs() < 0.05);
    assert!(value("z", "stderr") >= 0.0 && value("nu", "stderr") >= 0.0);
    assert!(dir.path().join("report/gap_collapse.csv").exists());
}

#[test]
fn analyze_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let one = jw_results(dir.path(), 8);
    let spec_path = dir.path().join("single.toml");
    fs::write(&spec_path, format!("dimension = 1\n[[inputs]]\nsize = 8\nresults = \"{one}\"\n")).unwrap();
    let o = run(&["analyze", "--spec", spec_path.to_str().unwrap(), "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("single system size"), "{}", stderr(&o));

    let broken = dir.path().join("broken.csv");
    fs::write(&broken, "run_id,track,lambda,energy\nx,ground,1.0,-1.0\n").unwrap();
    let spec_path = dir.path().join("broken.toml");
    fs::write(
        &spec_path,
        format!("dimension = 1\n[[inputs]]\nsize = 8\nresults = \"{}\"\n[[inputs]]\nsize = 12\nresults = \"{one}\"\n", broken.display()),
    )
    .unwrap();
    let o = run(&["analyze", "--spec", spec_path.to_str().unwrap(), "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for column in ["energy_stderr", "variance", "converged", "iterations"] {
        assert!(err.contains(column), "{err}");
    }
}
