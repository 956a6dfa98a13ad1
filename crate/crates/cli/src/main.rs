use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use tiltlab::harness::audit::run_audit;
use tiltlab::harness::sweep::{sweep, write_sweep_csv, SweepAxis};
use tiltlab::harness::{error_json, init_threads, io, Experiment, Problem};
use tiltlab::{Error, Result};

/// Reward-tilted sampling experiments on analytic mixtures.
#[derive(Parser)]
#[command(name = "tiltlab", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Obtain guidance, sample, evaluate and write every artifact.
    Run {
        config: PathBuf,
        /// Output directory (default: the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured network and write network.json plus its report.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample only: samples.csv and stats.json.
    Sample {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a samples CSV against the config's tilted target.
    Eval {
        config: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid over one or more axes, e.g. `--axis eta=0.1,0.5,1 --axis beta=0.5,1`.
    Sweep {
        config: PathBuf,
        /// `name=v1,v2,...` with name one of beta, eta, k, n, steps, method, strength.
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
        /// CSV path (default: <output_dir>/sweep.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient and oracle audits; uses the config's network file when given.
    Audit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the summary here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(exp: &Experiment, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| exp.output_dir())
}

fn print(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("summary serializes"));
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Run { config, out } => {
            let exp = Experiment::load(&config)?;
            let dir = out_dir(&exp, out);
            let o = exp.run(&dir)?;
            let e = &o.report.eval;
            print(&json!({
                "output_dir": dir,
                "config_hash": exp.config_hash,
                "seed": exp.seed(),
                "mean_reward": e.reward.mean,
                "reward_se": e.reward.se,
                "closed_form_reward": e.reward.closed_form,
                "mmd": e.mmd.as_ref().map(|m| m.statistic),
                "mmd_threshold": e.mmd.as_ref().map(|m| m.threshold),
                "mmd_rejects": e.mmd.as_ref().map(|m| m.rejects()),
                "warnings": e.warnings,
            }));
        }
        Cmd::Train { config, out } => {
            let exp = Experiment::load(&config)?;
            let dir = out_dir(&exp, out);
            let t = exp.train()?;
            exp.write_training(&dir, &t)?;
            print(&json!({ "output_dir": dir, "config_hash": exp.config_hash, "seed": exp.seed() }));
        }
        Cmd::Sample { config, out } => {
            let exp = Experiment::load(&config)?;
            let dir = out_dir(&exp, out);
            let (g, trained) = exp.resolve_guidance()?;
            if let Some(t) = &trained {
                exp.write_training(&dir, t)?;
            }
            let batch = exp.sample_with(&g)?;
            exp.write_samples(&dir, &batch)?;
            print(&json!({ "output_dir": dir, "n": batch.stats.n, "warnings": batch.stats.warnings }));
        }
        Cmd::Eval { config, samples, out } => {
            let exp = Experiment::load(&config)?;
            let dir = out_dir(&exp, out);
            let (xs, prov) = io::read_samples_csv(&samples)?;
            let mut rep = exp.evaluate(&xs, None)?;
            match prov {
                Some(p) if p.config_hash != exp.config_hash => rep
                    .warnings
                    .push(format!("samples were produced by config {} (this config is {})", p.config_hash, exp.config_hash)),
                None => rep.warnings.push("samples file carries no provenance line".into()),
                _ => {}
            }
            std::fs::create_dir_all(&dir)?;
            io::write_json(&dir.join("report.json"), &exp.stamp(&rep))?;
            print(&json!({ "output_dir": dir, "report": rep }));
        }
        Cmd::Sweep { config, axes, out } => {
            let exp = Experiment::load(&config)?;
            let axes = axes.iter().map(|a| SweepAxis::parse(a)).collect::<Result<Vec<_>>>()?;
            let rows = sweep(&exp, &axes)?;
            let path = match out {
                Some(p) => p,
                None => {
                    let d = exp.output_dir();
                    std::fs::create_dir_all(&d)?;
                    d.join("sweep.csv")
                }
            };
            write_sweep_csv(&path, &rows)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            print(&json!({ "csv": path, "cells": rows.len(), "failed": failed }));
        }
        Cmd::Audit { config, seed, out } => {
            let exp = config.as_deref().map(Experiment::load).transpose()?;
            let target = match &exp {
                Some(e) => match (&e.problem, e.network()) {
                    (Problem::Diffusion(p), Some(n)) => Some((n, p)),
                    _ => None,
                },
                None => None,
            };
            let summary = run_audit(target, seed)?;
            if let Some(p) = out {
                write_parent(&p)?;
                io::write_json(&p, &summary)?;
            }
            print(&serde_json::to_value(&summary)?);
            return Ok(summary.pass);
        }
    }
    Ok(true)
}

fn write_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Input(_) | Error::Validation(_) | Error::Json(_) | Error::Usage(_) | Error::Dimension { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| run(cli.cmd));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
