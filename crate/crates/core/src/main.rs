use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coldsim::harness::{
    certificate_from_metadata, certify_records, parse_config_with, parse_pairs, read_trace, run_experiment, run_sweep,
    RunOutcome,
};
use coldsim::theory::TheoremId;

#[derive(Parser)]
#[command(name = "coldsim", version, about = "Compressed decentralized optimization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config and write trace CSVs plus summary.csv.
    Run {
        config: PathBuf,
        /// Run even if the compressor lacks the contract the algorithm needs.
        #[arg(long)]
        force: bool,
        /// Omit the timestamp header line.
        #[arg(long)]
        reproducible: bool,
        /// Output directory (overrides `output=`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a trace against the rate certificate in its header.
    Certify {
        trace: PathBuf,
        #[arg(long)]
        theorem: TheoremId,
        /// Leading rows ignored when fitting a mean-square rate.
        #[arg(long, default_value_t = 10)]
        burn_in: usize,
        /// Allowed excess of the fitted factor over the certified one.
        #[arg(long, default_value_t = 0.02)]
        slack: f64,
    },
    /// Rerun a config once per value of one key.
    Sweep {
        config: PathBuf,
        /// `key=v1,v2,...`; defaults to the config's `vary=` line.
        #[arg(long)]
        vary: Option<String>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        reproducible: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_text(path: &PathBuf) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn report(outcome: &RunOutcome) -> bool {
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    if let Some(c) = &outcome.certificate {
        println!("certificate {} rate={:?} valid={}", c.theorem, c.rate, c.valid);
    }
    if let Some(s) = &outcome.summary {
        for (eps, bits, iters, hit, total) in &s.bits_to_eps {
            match (bits, iters) {
                (Some(b), Some(k)) => println!("{} <= {eps:e}: {hit}/{total} seeds, mean bits {b:.6e}, mean iters {k:.1}", s.metric),
                _ => println!("{} <= {eps:e}: not reached", s.metric),
            }
        }
    }
    for (seed, e) in &outcome.failures {
        eprintln!("seed {seed}: {e}");
    }
    outcome.failures.is_empty()
}

fn run(cli: Cli) -> Result<bool, String> {
    match cli.command {
        Command::Run {
            config,
            force,
            reproducible,
            out,
        } => {
            let cfg = parse_config_with(&read_text(&config)?, force).map_err(|e| e.to_string())?;
            let dir = out.unwrap_or_else(|| cfg.output.clone());
            let outcome = run_experiment(&cfg, &dir, reproducible).map_err(|e| e.to_string())?;
            Ok(report(&outcome))
        }
        Command::Certify {
            trace,
            theorem,
            burn_in,
            slack,
        } => {
            let (meta, records) = read_trace(&trace).map_err(|e| e.to_string())?;
            let cert = certificate_from_metadata(&meta)
                .ok_or_else(|| format!("{} carries no certificate (run with stepsizes=theorem)", trace.display()))?
                .map_err(|e| e.to_string())?;
            if cert.theorem != theorem {
                return Err(format!("trace is certified by {}, not {theorem}", cert.theorem));
            }
            if !cert.valid {
                println!("certificate invalid: {}", cert.reasons.join("; "));
                return Ok(false);
            }
            let reports = certify_records(&records, &cert, burn_in, slack).map_err(|e| e.to_string())?;
            let mut ok = true;
            for (col, r) in &reports {
                println!("{} {col}: {}", if r.passed { "PASS" } else { "FAIL" }, r.detail);
                ok &= r.passed;
            }
            Ok(ok)
        }
        Command::Sweep {
            config,
            vary,
            force,
            reproducible,
            out,
        } => {
            let raw = parse_pairs(&read_text(&config)?).map_err(|e| e.to_string())?;
            let spec = vary
                .or_else(|| raw.get("vary").cloned())
                .ok_or("sweep needs --vary key=v1,v2,... or a `vary=` line")?;
            let (key, values) = spec
                .split_once('=')
                .ok_or_else(|| format!("--vary must look like key=v1,v2, got `{spec}`"))?;
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
            let dir = out.unwrap_or_else(|| PathBuf::from(raw.get("output").map(String::as_str).unwrap_or("out")));
            let points = run_sweep(&raw, key.trim(), &values, force, &dir, reproducible).map_err(|e| e.to_string())?;
            let mut ok = true;
            for p in &points {
                println!("== {key}={}", p.value);
                match &p.outcome {
                    Ok(o) => ok &= report(o),
                    Err(e) => {
                        eprintln!("{key}={}: {e}", p.value);
                        ok = false;
                    }
                }
            }
            println!("wrote {}", dir.join("sweep.csv").display());
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
