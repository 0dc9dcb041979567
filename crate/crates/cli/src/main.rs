use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use loko::harness::{
    compare, log_grid, manifest_config, prepare_data, run, sweep_beta, sweep_p0, ExperimentConfig, BETA_GRID,
    DEFAULT_PROBE_STEPS,
};
use loko::model::InitScheme;
use loko::Error;

#[derive(Parser)]
#[command(name = "loko", version, about = "Low-rank Kalman optimizer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Overrides every seed in the config (model, p0, shuffle).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for run artifacts and reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel runs for sweeps and comparisons.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write CSV, checkpoint and manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run several configurations over three consecutive seeds each.
    Compare {
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Train once per forgetting factor.
    SweepBeta {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = BETA_GRID)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Probe initial-variance scales for both initialization methods and four weight inits.
    SweepP0 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        lo: f64,
        #[arg(long, default_value_t = 10.0)]
        hi: f64,
        #[arg(long, default_value_t = 3)]
        per_decade: usize,
        #[arg(long, default_value_t = DEFAULT_PROBE_STEPS)]
        steps: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run the configuration recorded in a run manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let cfg = ExperimentConfig::load(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn write_report(out: Option<&Path>, name: &str, body: &str) -> Result<(), Error> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{:.4}", x))
}

fn execute(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Train { config, common } => {
            let cfg = load(&config, common.seed)?;
            let data = prepare_data(&cfg.data)?;
            let s = run(&cfg, &data, common.out.as_deref())?;
            println!(
                "{}: steps={} acc_top1={:.4} acc_top5={:.4} moving_loss={:.4} test={} wall={:.1}s",
                s.optimizer,
                s.steps,
                s.acc_top1,
                s.acc_top5,
                s.moving_loss,
                fmt_opt(s.test_accuracy),
                s.wall_time_secs
            );
            if let Some(reason) = &s.divergence_reason {
                eprintln!("diverged at step {:?}: {reason}", s.diverged_at);
            }
            Ok(s.diverged)
        }
        Command::Compare { configs, seeds, common } => {
            let cfgs = configs
                .iter()
                .map(|p| load(p, common.seed))
                .collect::<Result<Vec<_>, _>>()?;
            let data = prepare_data(&cfgs[0].data)?;
            let rows = compare(&cfgs, &data, seeds, common.workers)?;
            let mut report = String::from("name,acc_mean,acc_std,test_mean\n");
            for r in &rows {
                let tests: Vec<f64> = r.runs.iter().filter_map(|s| s.test_accuracy).collect();
                let test = (!tests.is_empty()).then(|| tests.iter().sum::<f64>() / tests.len() as f64);
                println!(
                    "{:<24} {:.4} ± {:.4}  test {}",
                    r.name,
                    r.acc_mean,
                    r.acc_std,
                    fmt_opt(test)
                );
                report.push_str(&format!("{},{},{},{}\n", r.name, r.acc_mean, r.acc_std, fmt_opt(test)));
            }
            write_report(common.out.as_deref(), "compare.csv", &report)?;
            Ok(false)
        }
        Command::SweepBeta {
            config,
            values,
            seeds,
            common,
        } => {
            let cfg = load(&config, common.seed)?;
            let data = prepare_data(&cfg.data)?;
            let rows = sweep_beta(&cfg, &data, &values, seeds, common.workers)?;
            let mut report = String::from("beta,acc_mean,acc_std,test_mean,diverged\n");
            for r in &rows {
                println!(
                    "beta={:<6} acc {:.4} ± {:.4} test {} {}",
                    r.beta,
                    r.acc_mean,
                    r.acc_std,
                    fmt_opt(r.test_mean),
                    if r.diverged { "diverged" } else { "" }
                );
                report.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.beta,
                    r.acc_mean,
                    r.acc_std,
                    fmt_opt(r.test_mean),
                    r.diverged
                ));
            }
            write_report(common.out.as_deref(), "sweep_beta.csv", &report)?;
            Ok(false)
        }
        Command::SweepP0 {
            config,
            lo,
            hi,
            per_decade,
            steps,
            common,
        } => {
            let cfg = load(&config, common.seed)?;
            let data = prepare_data(&cfg.data)?;
            let grid = log_grid(lo, hi, per_decade)?;
            let report = sweep_p0(&cfg, &data, &grid, &InitScheme::SWEEP, steps, common.workers)?;
            let mut probes = String::from("p0,init,value,acc_top1,diverged\n");
            for p in &report.probes {
                probes.push_str(&format!(
                    "{},{},{:e},{},{}\n",
                    p.p0,
                    p.init.name(),
                    p.value,
                    p.acc_top1,
                    p.diverged
                ));
            }
            let mut bounds = String::from("p0,init,min,max\n");
            for b in &report.bounds {
                let (lo, hi) = b
                    .interval
                    .map_or(("-".into(), "-".into()), |(a, b)| (format!("{a:e}"), format!("{b:e}")));
                println!("{:<9} {:<16} [{lo}, {hi}]", b.p0, b.init.name());
                bounds.push_str(&format!("{},{},{lo},{hi}\n", b.p0, b.init.name()));
            }
            write_report(common.out.as_deref(), "sweep_p0_probes.csv", &probes)?;
            write_report(common.out.as_deref(), "sweep_p0_bounds.csv", &bounds)?;
            Ok(false)
        }
        Command::Replay { manifest, out } => {
            let cfg = manifest_config(&manifest)?;
            let data = prepare_data(&cfg.data)?;
            let s = run(&cfg, &data, Some(&out))?;
            println!("replayed {} steps into {}", s.steps, out.display());
            Ok(s.diverged)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
