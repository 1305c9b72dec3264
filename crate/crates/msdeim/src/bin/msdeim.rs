//! Command-line front end: offline basis construction, the four experiments,
//! and a quick verification suite.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use msdeim::harness::{
    build_offline_bundle, run_experiment, run_full_only, verify_suite, write_outputs, Experiment,
    RunConfig,
};
use msdeim::Error;

#[derive(Parser)]
#[command(name = "msdeim", version, about = "Reduced-order multiscale PDE solver")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (and offline-bundle location).
    #[arg(long, default_value = "msdeim_out")]
    out: PathBuf,
    /// Nonlinearity evaluation: "full" or "msdeim".
    #[arg(long, default_value = "msdeim")]
    mode: String,
    /// Fix the interpolation size to a single point count per region.
    #[arg(long)]
    m: Option<usize>,
    /// Contrast exponent override.
    #[arg(long)]
    eta: Option<f64>,
    /// Permeability preset override: case1, case2, or homogeneous.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build and persist the offline multiscale basis.
    Offline(Common),
    /// Nonlinear function approximation errors over the interpolation size.
    Approx(Common),
    /// Steady nonlinear-forcing solve, full vs interpolated.
    Steady(Common),
    /// Backward-Euler parabolic solve, full vs interpolated.
    Parabolic(Common),
    /// Parameter sweep: train on sampled parameters, test on a held-out one.
    Sweep(Common),
    /// Run the built-in property checks.
    Verify(Common),
}

fn load_config(common: &Common, experiment: Experiment) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_toml(&std::fs::read_to_string(path)?)?,
        None => RunConfig::defaults(experiment),
    };
    cfg.experiment = experiment;
    if let Some(m) = common.m {
        cfg.m_min = m;
        cfg.m_max = m;
    }
    if let Some(eta) = common.eta {
        cfg.eta = eta;
    }
    if let Some(preset) = &common.preset {
        cfg.preset = preset.clone();
    }
    match common.mode.as_str() {
        "full" | "msdeim" => {}
        other => return Err(Error::Config(format!("unknown mode '{other}'"))),
    }
    // Reuse a previously persisted bundle when present.
    if cfg.bundle_dir.is_none() && common.out.join("basis.txt").exists() {
        cfg.bundle_dir = Some(common.out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn experiment_cmd(common: &Common, experiment: Experiment) -> Result<(), Error> {
    let cfg = load_config(common, experiment)?;
    let out = if common.mode == "full" {
        run_full_only(&cfg)?
    } else {
        run_experiment(&cfg)?
    };
    write_outputs(&common.out, &cfg, &out)?;
    for t in &out.tables {
        for r in &t.rows {
            println!(
                "{} m={} l2={:.6e} energy={:.6e}",
                t.label, r.m, r.l2, r.energy
            );
        }
    }
    for n in &out.notes {
        println!("note: {n}");
    }
    println!("wrote {}", common.out.display());
    Ok(())
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Offline(c) => {
            // Any experiment works for grid/field parameters; steady defaults.
            let cfg = load_config(c, Experiment::Steady)?;
            build_offline_bundle(&cfg, &c.out)?;
            println!("offline bundle written to {}", c.out.display());
            Ok(())
        }
        Cmd::Approx(c) => experiment_cmd(c, Experiment::FnApprox),
        Cmd::Steady(c) => experiment_cmd(c, Experiment::Steady),
        Cmd::Parabolic(c) => experiment_cmd(c, Experiment::Parabolic),
        Cmd::Sweep(c) => experiment_cmd(c, Experiment::ParamSweep),
        Cmd::Verify(_) => {
            let results = verify_suite();
            let mut all_ok = true;
            for (name, ok) in &results {
                println!("{}: {}", name, if *ok { "pass" } else { "FAIL" });
                all_ok &= ok;
            }
            if all_ok {
                Ok(())
            } else {
                Err(Error::Config("verification failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::NewtonDiverged { .. } | Error::SolverDiverged { .. })) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
