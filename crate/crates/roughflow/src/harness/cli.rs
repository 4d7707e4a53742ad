//! The `roughflow` command line.
//!
//! Seven subcommands over one flat config file: `lift`, `solve`, `flow`,
//! `wongzakai`, `support`, `ldp`, `foliated-demo`. Global flags `--config`,
//! `--seed` and `--out` override the defaults; `ROUGHFLOW_OUT` overrides
//! the config's output directory (an explicit `--out` beats both). Exit
//! codes: 0 success, 1 usage or validation problems (the config schema is
//! printed), 2 failures inside the numerical kernels.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use nalgebra::DVector;

use super::config::ExperimentConfig;
use super::experiments::{
    ldp_experiment, ramp_path, support_skeleton_demo, wong_zakai_experiment,
};
use super::io::{
    driver_hash, resolve_out, write_foliated_csv, write_json, write_trajectory_csv,
    write_wongzakai_csv, FoliatedManifest, RoughPathJson, SolveManifest,
};
use super::suites::{
    base_point, describe_space, flat_family, invariant_leafwise_family, make_space,
};
use super::{HarnessError, SCHEMA_VERSION};
use crate::foliated::{leaf_check, solve_rde_foliated, LeafPoint};
use crate::rde_solver::{inverse_flow_point, solve_rde, SolveConfig};
use crate::rough_lift::{
    brownian_rough_path, lift_piecewise_linear, read_path_csv, CameronMartinPath,
};
use crate::rough_lift::fmt_f64;
use crate::tensor_algebra::GridRoughPath;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "roughflow", about = "Deterministic rough-path experiments")]
struct Cli {
    /// Flat `key = value` config file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory (beats ROUGHFLOW_OUT).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Lift a driver to a level-2 rough path and emit it as JSON.
    Lift {
        /// Knot CSV `t,w1,...,wd`; a seeded Brownian sample when omitted.
        #[arg(long, value_name = "CSV")]
        input: Option<PathBuf>,
    },
    /// Solve the configured suite along a driver; emit CSV and a manifest.
    Solve {
        /// Knot CSV `t,w1,...,wd`; a seeded Brownian sample when omitted.
        #[arg(long, value_name = "CSV")]
        input: Option<PathBuf>,
    },
    /// Round-trip a grid of initial points through the flow and its inverse.
    Flow,
    /// Wong-Zakai convergence table across dyadic levels.
    Wongzakai,
    /// Support skeleton: rough solve along lift(h) against an ODE oracle.
    Support {
        /// Cameron-Martin knot CSV; the unit ramp h_t = t when omitted.
        #[arg(long = "h-file", value_name = "CSV")]
        h_file: Option<PathBuf>,
    },
    /// Exact rate values J(h) and small-noise concentration counts.
    Ldp {
        /// Cameron-Martin knot CSV; the unit ramp h_t = t when omitted.
        #[arg(long = "h-file", value_name = "CSV")]
        h_file: Option<PathBuf>,
    },
    /// Solve on the configured suspension space and emit the leaf record.
    FoliatedDemo,
}

/// Parses `argv` and runs one subcommand. Returns the process exit code
/// instead of exiting, so it can be driven from tests.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            if code != 0 {
                eprintln!("{}", ExperimentConfig::schema());
            }
            return code;
        }
    };

    let mut cfg = match cli.config.as_deref().map_or_else(
        || Ok(ExperimentConfig::default()),
        ExperimentConfig::from_file,
    ) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", ExperimentConfig::schema());
            return 1;
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        eprintln!("{}", ExperimentConfig::schema());
        return 1;
    }
    let out = resolve_out(&cfg, cli.out);

    match run_command(&cli.cmd, &cfg, &out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run_command(cmd: &Cmd, cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out)?;
    match cmd {
        Cmd::Lift { input } => run_lift(cfg, out, input.as_deref()),
        Cmd::Solve { input } => run_solve(cfg, out, input.as_deref()),
        Cmd::Flow => run_flow(cfg, out),
        Cmd::Wongzakai => run_wongzakai(cfg, out),
        Cmd::Support { h_file } => run_support(cfg, out, h_file.as_deref()),
        Cmd::Ldp { h_file } => run_ldp(cfg, out, h_file.as_deref()),
        Cmd::FoliatedDemo => run_foliated_demo(cfg, out),
    }
}

/// The driver every subcommand shares: an input CSV when given, otherwise
/// the seeded Brownian sample at the config's finest level.
fn load_driver(
    cfg: &ExperimentConfig,
    input: Option<&Path>,
) -> Result<GridRoughPath, HarnessError> {
    match input {
        Some(path) => {
            let knots = read_path_csv(File::open(path)?)?;
            if knots.dim() != cfg.d {
                return Err(HarnessError::Config(format!(
                    "driver file has dimension {}, the config says d = {}",
                    knots.dim(),
                    cfg.d
                )));
            }
            Ok(lift_piecewise_linear(&knots, cfg.alpha)?)
        }
        None => Ok(brownian_rough_path(
            cfg.d,
            cfg.horizon,
            cfg.m_hi,
            cfg.seed,
            cfg.alpha,
        )?),
    }
}

/// The Cameron-Martin input: a knot CSV when given, otherwise the unit
/// ramp h_t = t in driver coordinate 1.
fn load_h(cfg: &ExperimentConfig, input: Option<&Path>) -> Result<CameronMartinPath, HarnessError> {
    match input {
        Some(path) => Ok(CameronMartinPath::new(read_path_csv(File::open(path)?)?)),
        None => ramp_path(cfg.d, cfg.horizon, 1.0),
    }
}

fn solve_config(cfg: &ExperimentConfig) -> SolveConfig {
    SolveConfig {
        alpha: cfg.alpha,
        base_subdiv: 4,
        refine: true,
        step_tol: 1e-9,
        explosion_radius: 1e6,
    }
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>, HarnessError> {
    Ok(BufWriter::new(File::create(out.join(name))?))
}

pub(crate) fn ldp_summary_line(rate_j: f64) -> String {
    format!("J = {rate_j}")
}

fn run_lift(
    cfg: &ExperimentConfig,
    out: &Path,
    input: Option<&Path>,
) -> Result<(), HarnessError> {
    let driver = load_driver(cfg, input)?;
    let json = RoughPathJson::from_path(&driver);
    let target = out.join("rough_path.json");
    write_json(&target, &json)?;
    println!(
        "wrote {} ({} cells, alpha = {})",
        target.display(),
        json.times.len() - 1,
        json.alpha
    );
    Ok(())
}

fn run_solve(
    cfg: &ExperimentConfig,
    out: &Path,
    input: Option<&Path>,
) -> Result<(), HarnessError> {
    let driver = load_driver(cfg, input)?;
    let fields = flat_family(cfg.field_suite, cfg.p, cfg.d)?;
    let x0 = DVector::from_element(cfg.p, 0.5);
    let traj = solve_rde(&driver, &x0, &fields, &solve_config(cfg), None)?;
    write_trajectory_csv(create(out, "trajectory.csv")?, &traj)?;
    let manifest = SolveManifest {
        schema_version: SCHEMA_VERSION,
        command: "solve",
        config: cfg,
        driver_sha256: driver_hash(&driver),
        achieved_subdiv: traj.achieved_subdiv(),
        samples: traj.len(),
        outputs: vec!["trajectory.csv".into()],
    };
    write_json(&out.join("solve.json"), &manifest)?;
    println!(
        "wrote {} ({} samples, subdiv {})",
        out.join("trajectory.csv").display(),
        traj.len(),
        traj.achieved_subdiv()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct FlowManifest<'a> {
    schema_version: u32,
    command: &'static str,
    config: &'a ExperimentConfig,
    driver_sha256: String,
    points: usize,
    max_roundtrip: f64,
    outputs: Vec<String>,
}

fn run_flow(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    let driver = load_driver(cfg, None)?;
    let fields = flat_family(cfg.field_suite, cfg.p, cfg.d)?;
    let scfg = solve_config(cfg);
    let mut rows = Vec::new();
    let mut max_roundtrip = 0.0f64;
    for level in [0.2, 0.4, 0.6, 0.8] {
        let x0 = DVector::from_element(cfg.p, level);
        let traj = solve_rde(&driver, &x0, &fields, &scfg, None)?;
        let eta = traj.endpoint().clone();
        let back = inverse_flow_point(&driver, &eta, &fields, &scfg, cfg.horizon)?;
        let roundtrip = (&back - &x0).norm();
        max_roundtrip = max_roundtrip.max(roundtrip);
        rows.push((x0, eta, roundtrip));
    }
    {
        let mut w = create(out, "flow.csv")?;
        use std::io::Write;
        let mut header = String::new();
        for a in 1..=cfg.p {
            header.push_str(&format!("x0_{a},"));
        }
        for a in 1..=cfg.p {
            header.push_str(&format!("xT_{a},"));
        }
        header.push_str("roundtrip");
        writeln!(w, "{header}")?;
        for (x0, eta, roundtrip) in &rows {
            let mut line = String::new();
            for a in 0..cfg.p {
                line.push_str(&fmt_f64(x0[a]));
                line.push(',');
            }
            for a in 0..cfg.p {
                line.push_str(&fmt_f64(eta[a]));
                line.push(',');
            }
            line.push_str(&fmt_f64(*roundtrip));
            writeln!(w, "{line}")?;
        }
    }
    let manifest = FlowManifest {
        schema_version: SCHEMA_VERSION,
        command: "flow",
        config: cfg,
        driver_sha256: driver_hash(&driver),
        points: rows.len(),
        max_roundtrip,
        outputs: vec!["flow.csv".into()],
    };
    write_json(&out.join("flow.json"), &manifest)?;
    println!(
        "wrote {} (max roundtrip {:.3e})",
        out.join("flow.csv").display(),
        max_roundtrip
    );
    Ok(())
}

fn run_wongzakai(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    let table = wong_zakai_experiment(cfg)?;
    write_wongzakai_csv(create(out, "wongzakai.csv")?, &table)?;
    write_json(&out.join("wongzakai.json"), &table)?;
    for row in &table.rows {
        println!(
            "m = {:2}  d_alpha = {:.6e}  flat = {:.6e}  foliated = {:.6e}  roundtrip = {:.6e}",
            row.m, row.driver_dalpha, row.flat_sup, row.foliated_sup, row.roundtrip
        );
    }
    println!("wrote {}", out.join("wongzakai.csv").display());
    Ok(())
}

fn run_support(
    cfg: &ExperimentConfig,
    out: &Path,
    h_file: Option<&Path>,
) -> Result<(), HarnessError> {
    let h = load_h(cfg, h_file)?;
    let report = support_skeleton_demo(cfg, &h)?;
    write_json(&out.join("support.json"), &report)?;
    println!("ode match = {:.3e}", report.ode_match);
    println!(
        "min endpoint distance over {} seeds = {:.3e}",
        report.n_seeds, report.min_endpoint_distance
    );
    println!(
        "skeleton winding = {} (predicted {})",
        report.skeleton_winding, report.predicted_winding
    );
    println!("wrote {}", out.join("support.json").display());
    Ok(())
}

fn run_ldp(
    cfg: &ExperimentConfig,
    out: &Path,
    h_file: Option<&Path>,
) -> Result<(), HarnessError> {
    let h = load_h(cfg, h_file)?;
    let report = ldp_experiment(cfg, &h)?;
    write_json(&out.join("ldp.json"), &report)?;
    println!("{}", ldp_summary_line(report.rate_j));
    for row in &report.rows {
        println!(
            "epsilon = {}: q = {} ({} of {})",
            row.epsilon, row.exceed_fraction, row.exceed_count, report.n_seeds
        );
    }
    println!("wrote {}", out.join("ldp.json").display());
    Ok(())
}

fn run_foliated_demo(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    let driver = load_driver(cfg, None)?;
    let space = make_space(cfg.transversal, cfg.p)?;
    let family = invariant_leafwise_family(cfg.transversal, &space, cfg.d)?;
    let m0 = LeafPoint::new(
        DVector::from_element(cfg.p, 0.25),
        base_point(cfg.transversal),
    )?;
    let traj = solve_rde_foliated(&space, &m0, &driver, &family, &solve_config(cfg), None)?;
    let history = leaf_check(&space, &traj)?;
    write_foliated_csv(create(out, "foliated.csv")?, &traj)?;
    let manifest = FoliatedManifest::new(
        cfg,
        describe_space(cfg.transversal),
        &driver,
        &traj,
        vec!["foliated.csv".into()],
    );
    write_json(&out.join("foliated.json"), &manifest)?;
    println!(
        "leaf check ok ({} transitions, final winding {})",
        history.len(),
        traj.endpoint().winding()
    );
    println!("wrote {}", out.join("foliated.csv").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rough_lift::{write_path_csv, PiecewisePath};
    use tempfile::tempdir;

    fn run(args: &[&str]) -> i32 {
        cli_dispatch(args.iter().map(|s| s.to_string()))
    }

    fn write_config(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("run.cfg");
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn usage_and_config_errors_exit_one() {
        assert_eq!(run(&["roughflow", "frobnicate"]), 1);
        assert_eq!(run(&["roughflow"]), 1);
        assert_eq!(run(&["roughflow", "--help"]), 0);

        let dir = tempdir().unwrap();
        let bad = write_config(dir.path(), "wat = 3\n");
        let out = dir.path().join("out");
        assert_eq!(
            run(&[
                "roughflow",
                "solve",
                "--config",
                bad.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]),
            1
        );
        assert!(!out.exists(), "failed runs must not create output");

        let invalid = write_config(dir.path(), "alpha = 0.9\n");
        assert_eq!(
            run(&[
                "roughflow",
                "solve",
                "--config",
                invalid.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]),
            1
        );
    }

    #[test]
    fn zero_field_solves_emit_a_constant_trajectory() {
        let dir = tempdir().unwrap();
        let cfg = write_config(dir.path(), "suite = zero\nm_hi = 6\n");
        let out = dir.path().join("out");
        assert_eq!(
            run(&[
                "roughflow",
                "solve",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]),
            0
        );
        let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
        let half = fmt_f64(0.5);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,x1");
        let mut rows = 0;
        for line in lines {
            assert_eq!(line.split(',').nth(1).unwrap(), half);
            rows += 1;
        }
        assert!(rows >= 2);

        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("solve.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["schema_version"], 1);
        assert_eq!(manifest["command"], "solve");
        assert_eq!(manifest["driver_sha256"].as_str().unwrap().len(), 64);
    }

    #[test]
    fn wongzakai_reruns_are_byte_identical() {
        let dir = tempdir().unwrap();
        let cfg = write_config(dir.path(), "suite = additive\nm_lo = 6\nm_hi = 8\n");
        let (out_a, out_b) = (dir.path().join("a"), dir.path().join("b"));
        for out in [&out_a, &out_b] {
            assert_eq!(
                run(&[
                    "roughflow",
                    "wongzakai",
                    "--seed",
                    "42",
                    "--config",
                    cfg.to_str().unwrap(),
                    "--out",
                    out.to_str().unwrap(),
                ]),
                0
            );
        }
        for name in ["wongzakai.csv", "wongzakai.json"] {
            let a = std::fs::read(out_a.join(name)).unwrap();
            let b = std::fs::read(out_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out_a.join("wongzakai.json")).unwrap())
                .unwrap();
        assert_eq!(json["seed"], 42);
    }

    #[test]
    fn the_default_ldp_input_prints_the_half_rate() {
        assert_eq!(ldp_summary_line(0.5), "J = 0.5");
        assert_eq!(ldp_summary_line(2.0), "J = 2");

        let dir = tempdir().unwrap();
        let cfg = write_config(dir.path(), "suite = zero\nepsilons = 0.4\n");
        let out = dir.path().join("out");
        assert_eq!(
            run(&[
                "roughflow",
                "ldp",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]),
            0
        );
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("ldp.json")).unwrap()).unwrap();
        assert_eq!(report["rate_j"], 0.5);
        assert_eq!(report["rows"][0]["exceed_count"], 0);
    }

    #[test]
    fn exploding_solves_exit_two() {
        let dir = tempdir().unwrap();
        let driver = dir.path().join("driver.csv");
        let path = PiecewisePath::new(
            vec![0.0, 1.0],
            vec![DVector::zeros(1), DVector::from_element(1, 1e9)],
        )
        .unwrap();
        write_path_csv(&path, File::create(&driver).unwrap()).unwrap();
        let out = dir.path().join("out");
        assert_eq!(
            run(&[
                "roughflow",
                "solve",
                "--input",
                driver.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]),
            2
        );
    }

    #[test]
    fn the_remaining_subcommands_emit_their_files() {
        let dir = tempdir().unwrap();
        let cfg = write_config(dir.path(), "m_lo = 5\nm_hi = 6\n");
        let out = dir.path().join("out");
        let cfg_s = cfg.to_str().unwrap();
        let out_s = out.to_str().unwrap();

        assert_eq!(run(&["roughflow", "lift", "--config", cfg_s, "--out", out_s]), 0);
        assert!(out.join("rough_path.json").exists());

        assert_eq!(run(&["roughflow", "flow", "--config", cfg_s, "--out", out_s]), 0);
        let flow = std::fs::read_to_string(out.join("flow.csv")).unwrap();
        assert!(flow.starts_with("x0_1,xT_1,roundtrip"));

        assert_eq!(
            run(&["roughflow", "support", "--config", cfg_s, "--out", out_s]),
            0
        );
        let support: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("support.json")).unwrap())
                .unwrap();
        assert!(support["ode_match"].as_f64().unwrap() <= 1e-6);

        assert_eq!(
            run(&["roughflow", "foliated-demo", "--config", cfg_s, "--out", out_s]),
            0
        );
        let foliated = std::fs::read_to_string(out.join("foliated.csv")).unwrap();
        assert!(foliated.starts_with("t,y1,z_repr,winding"));
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("foliated.json")).unwrap())
                .unwrap();
        assert!(manifest["space"].as_str().unwrap().contains("circle"));
    }
}
