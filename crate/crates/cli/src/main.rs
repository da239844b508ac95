use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use cpc::experiment::{
    self, generate_falls, run_balance_trial, run_trials, summarize, sweep_nf, trial_seed, write_falls, write_trials_csv,
    ExperimentConfig, Policy, TrackConfig, TrialRecord,
};
use cpc::target_store::{load_dataset, TargetStore};
use cpc::verify::{run_all, VerifyOptions};

#[derive(Parser, Debug)]
#[command(name = "cpc", version, about = "Configuration path control experiments on a simulated acrobot")]
struct Cli {
    /// TOML file with `[experiment]` and `[track]` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default, Clone)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Disturbance strength in units of sigma0.
    #[arg(long)]
    noise_mult: Option<f64>,
    #[arg(long)]
    n_falls: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record falls from upright rest into a JSON Lines dataset.
    GenerateFalls {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Balance trials; each trial draws fresh falls unless a dataset is given.
    Balance {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Apply no control torque (baseline).
        #[arg(long)]
        passive: bool,
        /// CSV output; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Balance trials over the list of fall counts.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated fall counts.
        #[arg(long, value_delimiter = ',')]
        n_f: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fully actuated two-link tracking demo.
    TrackDemo,
    /// Run the property suites; exits non-zero on any failure.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Break the null covector used for the ball-tree bounds.
        #[arg(long)]
        mutate: bool,
        /// Sweep measurements as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Smaller sample counts for a quick check.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    experiment: ExperimentConfig,
    track: TrackConfig,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(ConfigFile::default()),
    }
}

fn apply(mut cfg: ExperimentConfig, o: &Overrides) -> Result<ExperimentConfig> {
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.t_max {
        cfg.t_max = v;
    }
    if let Some(v) = o.trials {
        cfg.trials = v;
    }
    if let Some(v) = o.noise_mult {
        cfg.noise_mult = v;
    }
    if let Some(v) = o.n_falls {
        cfg.n_falls = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn report(groups: &[(usize, Vec<TrialRecord>)], cfg: &ExperimentConfig) {
    for (n_f, records) in groups {
        let s = summarize(records, cfg.t_max);
        eprintln!(
            "n_f = {n_f:>4}: mean t_f = {:.2} s, survived {:.0}%, unstable fraction {:.3}",
            s.mean_t_f,
            100.0 * s.survived_fraction,
            s.unstable_fraction
        );
    }
}

fn balance(cfg: &ExperimentConfig, dataset: Option<&Path>, passive: bool) -> Result<Vec<TrialRecord>> {
    let policy = if passive { Policy::Passive } else { Policy::Cpc };
    if dataset.is_none() && policy == Policy::Cpc {
        return Ok(run_trials(cfg, cfg.n_falls, "balance")?);
    }
    let (store, n_f) = match dataset {
        Some(p) => {
            let (header, points) = load_dataset(p)?;
            (TargetStore::new(points)?, header.n_episodes)
        }
        None => (TargetStore::new(generate_falls(cfg, cfg.n_falls, cfg.seed)?)?, cfg.n_falls),
    };
    (0..cfg.trials)
        .map(|i| {
            let seed = trial_seed(cfg.seed, "balance", i as u64);
            let (t_f, fell) = run_balance_trial(&store, cfg, cfg.noise_amp(), seed, policy)?;
            Ok(TrialRecord { trial_id: i, n_f, seed, noise_multiplier: cfg.noise_mult, t_f, fell })
        })
        .collect()
}

fn run(cli: Cli) -> Result<bool> {
    let file = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenerateFalls { overrides, out } => {
            let cfg = apply(file.experiment, &overrides)?;
            let points = generate_falls(&cfg, cfg.n_falls, cfg.seed)?;
            write_falls(&out, &cfg, cfg.n_falls, &points)?;
            eprintln!("wrote {} points from {} falls to {}", points.len(), cfg.n_falls, out.display());
        }
        Command::Balance { overrides, dataset, passive, out } => {
            let cfg = apply(file.experiment, &overrides)?;
            let records = balance(&cfg, dataset.as_deref(), passive)?;
            let n_f = records.first().map_or(cfg.n_falls, |r| r.n_f);
            let groups = vec![(n_f, records)];
            report(&groups, &cfg);
            write_trials_csv(output(out.as_deref())?, &cfg, &groups)?;
        }
        Command::Sweep { overrides, n_f, out } => {
            let mut cfg = apply(file.experiment, &overrides)?;
            if let Some(list) = n_f {
                cfg.n_f_list = list;
            }
            let groups = sweep_nf(&cfg)?;
            report(&groups, &cfg);
            write_trials_csv(output(out.as_deref())?, &cfg, &groups)?;
        }
        Command::TrackDemo => {
            let r = experiment::track_demo(&file.track)?;
            println!("max error starting on the reference: {:.3e}", r.on_reference_max_error);
            println!("max deviation from the damped envelope: {:.3}%", 100.0 * r.envelope_max_rel_dev);
            println!(
                "feedforward only: error {:.3e} -> {:.3e}",
                r.zero_gain_initial_error, r.zero_gain_final_error
            );
        }
        Command::Verify { seed, mutate, out, quick } => {
            let mut opts = VerifyOptions { seed, mutate, ..VerifyOptions::default() };
            if quick {
                opts.sandwich_pairs = 100;
                opts.sandwich_samples = 100;
                opts.invariance_cases = 5;
                opts.quadrature_instances = 20;
            }
            let (results, records) = run_all(&opts);
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if let Some(p) = out {
                records.write_csv(File::create(&p).with_context(|| format!("creating {}", p.display()))?)?;
            }
            return Ok(results.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
