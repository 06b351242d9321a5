//! Batch front end: run | ensemble | verify | study.
//!
//! Exit codes: 0 success, 1 failed verification, 2 invalid configuration or
//! usage, 3 solver failure.

mod config;
mod output;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stofsi_core::driver::{run_path, ShiftField};
use stofsi_core::harness::{
    difference_study, penalty_study, refinement_study, run_ensemble, stopping_stats, EnsembleSpec,
};
use stofsi_core::CoreError;

use config::RunConfigFile;

#[derive(Parser)]
#[command(
    name = "stofsi",
    version,
    about = "Stochastic fluid-structure interaction splitting simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (or the STOFSI_OUT environment variable).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for path-parallel work (or STOFSI_WORKERS).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one trajectory and write its ledger and field snapshots.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Wiener-path seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Simulate a seeded ensemble and write the statistics report.
    Ensemble {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of paths (overrides the config).
        #[arg(long)]
        paths: Option<usize>,
        /// Master seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Also write per-path ledgers under paths/<index>/energies.csv.
        #[arg(long)]
        dump_paths: bool,
    },
    /// Run the invariant suite and print a PASS/FAIL table.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Parameter studies: penalty | refinement | timeshift | difference | stopping.
    Study {
        kind: String,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

struct CmdError {
    code: u8,
    message: String,
}

fn config_err(message: impl Into<String>) -> CmdError {
    CmdError {
        code: 2,
        message: message.into(),
    }
}

fn from_core(e: CoreError) -> CmdError {
    let code = match e {
        CoreError::Solver { .. } => 3,
        CoreError::Config(_) | CoreError::Shape(_) | CoreError::Range(_) => 2,
        CoreError::DegenerateFrame(_) => 3,
        CoreError::Io(_) => 1,
    };
    CmdError {
        code,
        message: e.to_string(),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfigFile, CmdError> {
    match path {
        None => Ok(RunConfigFile::defaults()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
            RunConfigFile::from_json(&text).map_err(config_err)
        }
    }
}

fn resolve_out(out: &Option<PathBuf>) -> Result<PathBuf, CmdError> {
    let dir = out
        .clone()
        .or_else(|| std::env::var_os("STOFSI_OUT").map(PathBuf::from))
        .ok_or_else(|| config_err("no output directory: pass --out or set STOFSI_OUT"))?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| config_err(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn resolve_workers(workers: Option<usize>) -> Option<usize> {
    workers.or_else(|| {
        std::env::var("STOFSI_WORKERS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
}

fn write_stats_json<T: serde::Serialize>(dir: &Path, value: &T) -> Result<(), CmdError> {
    let text = serde_json::to_string_pretty(value).expect("stats serialize");
    std::fs::write(dir.join("stats.json"), text)
        .map_err(|e| config_err(format!("cannot write stats.json: {e}")))?;
    Ok(())
}

fn write_table_csv(dir: &Path, table: &str) -> Result<(), CmdError> {
    std::fs::write(dir.join("table.csv"), table)
        .map_err(|e| config_err(format!("cannot write table.csv: {e}")))?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<ExitCode, CmdError> {
    match cli.cmd {
        Cmd::Run { common, seed } => cmd_run(common, seed),
        Cmd::Ensemble {
            common,
            paths,
            seed,
            dump_paths,
        } => cmd_ensemble(common, paths, seed, dump_paths),
        Cmd::Verify { common } => cmd_verify(common),
        Cmd::Study {
            kind,
            common,
            paths,
            seed,
        } => cmd_study(&kind, common, paths, seed),
    }
}

fn cmd_run(common: CommonArgs, seed: u64) -> Result<ExitCode, CmdError> {
    let cfg = load_config(&common.config)?;
    let out = resolve_out(&common.out)?;
    let ctx = cfg.scheme.build().map_err(from_core)?;
    if ctx.le.coercivity_warning {
        eprintln!("warning: all elastic coefficients are zero; the operator is not coercive");
    }
    let traj = run_path(&ctx, seed).map_err(from_core)?;

    let mut outputs = vec!["energies.csv".to_string()];
    output::write_energy_csv(&out.join("energies.csv"), &traj)
        .map_err(|e| config_err(format!("write energies.csv: {e}")))?;
    let mut snaps = output::write_snapshots(&out, &traj, &ctx.spaces.mesh, &ctx.spaces.smesh)
        .map_err(|e| config_err(format!("write snapshots: {e}")))?;
    outputs.append(&mut snaps);
    output::write_manifest(&out, "run", &cfg, seed, 1, None, &outputs)
        .map_err(|e| config_err(format!("write manifest: {e}")))?;

    println!(
        "run: {} steps, dt = {:.6}; E0 = {:.6e}, E_final = {:.6e}, n_stop = {}, stopping time = {:.6}",
        traj.steps,
        traj.dt,
        traj.ledger.energy[0],
        traj.ledger.energy[traj.steps],
        traj.n_stop,
        traj.stopping_time
    );
    println!(
        "audits: max structure residual {:.2e}, max fluid residual {:.2e}, max combined {:.2e}",
        traj.ledger
            .struct_residual
            .iter()
            .cloned()
            .fold(0.0, f64::max),
        traj.ledger
            .fluid_residual
            .iter()
            .cloned()
            .fold(0.0, f64::max),
        traj.ledger
            .combined_residual
            .iter()
            .cloned()
            .fold(0.0, f64::max),
    );
    println!("wrote {} artifacts to {}", outputs.len() + 1, out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_ensemble(
    common: CommonArgs,
    paths: Option<usize>,
    seed: Option<u64>,
    dump_paths: bool,
) -> Result<ExitCode, CmdError> {
    let cfg = load_config(&common.config)?;
    let out = resolve_out(&common.out)?;
    let paths = paths.unwrap_or(cfg.ensemble.paths);
    if paths == 0 {
        return Err(config_err("ensemble needs --paths >= 1"));
    }
    let master_seed = seed.unwrap_or(cfg.ensemble.master_seed);
    let workers = resolve_workers(common.workers).or(cfg.ensemble.workers);
    let report = run_ensemble(&EnsembleSpec {
        config: cfg.scheme.clone(),
        paths,
        master_seed,
        workers,
    })
    .map_err(from_core)?;
    write_stats_json(&out, &report)?;
    let mut outputs = vec!["stats.json".to_string()];
    if dump_paths {
        // counter-based seeding makes each path reproducible on its own
        let ctx = cfg.scheme.build().map_err(from_core)?;
        for (i, &path_seed) in report.seeds.iter().enumerate() {
            if report.excluded.iter().any(|e| e.index == i) {
                continue;
            }
            let traj = run_path(&ctx, path_seed).map_err(from_core)?;
            let dir = out.join(format!("paths/{i}"));
            std::fs::create_dir_all(&dir)
                .map_err(|e| config_err(format!("cannot create {}: {e}", dir.display())))?;
            output::write_energy_csv(&dir.join("energies.csv"), &traj)
                .map_err(|e| config_err(format!("write path ledger: {e}")))?;
            outputs.push(format!("paths/{i}/energies.csv"));
        }
    }
    output::write_manifest(&out, "ensemble", &cfg, master_seed, paths, workers, &outputs)
        .map_err(|e| config_err(format!("write manifest: {e}")))?;
    println!(
        "ensemble: {} paths ({} excluded), E[max E] = {:.6e} (se {:.1e}), E[sum D] = {:.6e} (se {:.1e})",
        report.paths,
        report.excluded.len(),
        report.max_energy.mean,
        report.max_energy.std_error,
        report.total_dissipation.mean,
        report.total_dissipation.std_error
    );
    println!(
        "stopping: fraction with n_stop >= 1: {:.3}; worst combined residual {:.2e}",
        report.fraction_nstop_at_least_one, report.max_combined_residual
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(common: CommonArgs) -> Result<ExitCode, CmdError> {
    let cfg = load_config(&common.config)?;
    let checks = verify::run_all(&cfg.scheme);
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut all_pass = true;
    for c in &checks {
        all_pass &= c.pass;
        println!(
            "{:<width$}  {}  {}",
            c.name,
            if c.pass { "PASS" } else { "FAIL" },
            c.detail,
            width = width
        );
    }
    println!(
        "verify: {}/{} checks passed",
        checks.iter().filter(|c| c.pass).count(),
        checks.len()
    );
    Ok(if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_study(
    kind: &str,
    common: CommonArgs,
    paths: Option<usize>,
    seed: Option<u64>,
) -> Result<ExitCode, CmdError> {
    let cfg = load_config(&common.config)?;
    let out = resolve_out(&common.out)?;
    let paths = paths.unwrap_or(cfg.ensemble.paths).max(1);
    let master_seed = seed.unwrap_or(cfg.ensemble.master_seed);
    let workers = resolve_workers(common.workers).or(cfg.ensemble.workers);
    match kind {
        "penalty" => {
            let study = penalty_study(
                &cfg.scheme,
                &cfg.studies.penalty_kappas,
                paths,
                master_seed,
                workers,
            )
            .map_err(from_core)?;
            let mut table = String::from("kappa,mean_div_l2l2,std_error\n");
            for r in &study.rows {
                table += &format!("{},{:.6e},{:.2e}\n", r.kappa, r.mean_div_l2l2, r.std_error);
            }
            print!("{table}");
            println!(
                "slope = {:.4}{}",
                study.slope,
                if study.floored { " (floor)" } else { "" }
            );
            write_table_csv(&out, &table)?;
            write_stats_json(&out, &study)?;
        }
        "refinement" => {
            let study = refinement_study(
                &cfg.scheme,
                &cfg.studies.refinement_steps,
                paths,
                master_seed,
                workers,
            )
            .map_err(from_core)?;
            let mut table = String::from("steps,max_energy,se,total_dissipation,se\n");
            for r in &study.rows {
                table += &format!(
                    "{},{:.6e},{:.1e},{:.6e},{:.1e}\n",
                    r.steps,
                    r.max_energy.mean,
                    r.max_energy.std_error,
                    r.total_dissipation.mean,
                    r.total_dissipation.std_error
                );
            }
            print!("{table}");
            println!(
                "spreads: energy {:.3}, dissipation {:.3} (limit {}){}",
                study.energy_spread,
                study.dissipation_spread,
                study.growth_limit,
                if study.flagged { " FLAGGED" } else { "" }
            );
            write_table_csv(&out, &table)?;
            write_stats_json(&out, &study)?;
        }
        "timeshift" => {
            let study = stofsi_core::harness::timeshift_study(
                &cfg.scheme,
                &cfg.studies.timeshift_multiples,
                &[ShiftField::UPlus, ShiftField::VSharp],
                paths,
                master_seed,
                workers,
            )
            .map_err(from_core)?;
            let mut table = String::from("field,h,modulus\n");
            for fit in &study.fits {
                println!(
                    "{:?}: slope = {:.4} ({})",
                    fit.field,
                    fit.slope,
                    if fit.degenerate {
                        "degenerate"
                    } else if fit.pass {
                        "PASS"
                    } else {
                        "FAIL"
                    }
                );
                for (h, m) in &fit.rows {
                    println!("  h = {h:.6}: modulus {m:.6e}");
                    table += &format!("{:?},{h},{m:.6e}\n", fit.field);
                }
            }
            write_table_csv(&out, &table)?;
            write_stats_json(&out, &study)?;
        }
        "difference" => {
            let study = difference_study(
                &cfg.scheme,
                &cfg.studies.difference_steps,
                paths,
                master_seed,
                workers,
            )
            .map_err(from_core)?;
            let mut table =
                String::from("steps,u_pc_vs_lin,u_pc_vs_plus,eta_pc_vs_lin,v_pc_vs_sharp\n");
            for r in &study.rows {
                table += &format!(
                    "{},{:.6e},{:.6e},{:.6e},{:.6e}\n",
                    r.steps,
                    r.means.u_pc_vs_lin,
                    r.means.u_pc_vs_plus,
                    r.means.eta_pc_vs_lin,
                    r.means.v_pc_vs_sharp
                );
            }
            print!("{table}");
            println!(
                "min decay factor per doubling = {:.3}",
                study.min_decay_factor
            );
            write_table_csv(&out, &table)?;
            write_stats_json(&out, &study)?;
        }
        "stopping" => {
            let stats =
                stopping_stats(&cfg.scheme, paths, master_seed, workers).map_err(from_core)?;
            println!(
                "paths = {}, fraction with stopping time >= dt: {:.3}, full horizon: {:.3}",
                stats.paths, stats.fraction_at_least_dt, stats.fraction_full_horizon
            );
            write_stats_json(&out, &stats)?;
        }
        other => {
            return Err(config_err(format!(
                "unknown study kind '{other}' (expected penalty | refinement | timeshift | difference | stopping)"
            )));
        }
    }
    let mut outputs = vec!["stats.json".to_string()];
    if out.join("table.csv").exists() {
        outputs.push("table.csv".to_string());
    }
    output::write_manifest(
        &out,
        &format!("study {kind}"),
        &cfg,
        master_seed,
        paths,
        workers,
        &outputs,
    )
    .map_err(|e| config_err(format!("write manifest: {e}")))?;
    Ok(ExitCode::SUCCESS)
}
