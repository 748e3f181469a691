use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sumgp_core::bench::{emit_outputs, parse_grid, run_experiment, ExperimentConfig, ModelKind};
use sumgp_core::datasets::{self, PendulumParams};

#[derive(Parser)]
#[command(name = "sumgp", version, about = "Multitask GPs with linear and nonlinear sum constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-iteration training traces.
        #[arg(long)]
        trace: bool,
    },
    /// Generate a synthetic data set as CSV.
    Gen {
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0.0)]
        drop: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a double-pendulum recording segment to scaled states.
    DpIngest {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = 500.0)]
        frame_rate: f64,
        #[arg(long, default_value_t = 6.5)]
        mass_ratio: f64,
        /// `start:len` in frames.
        #[arg(long)]
        segment: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep noise level and drop probability for one experiment.
    Table {
        #[arg(long)]
        experiment: String,
        #[arg(long, default_value = "sigma=0.1;fd=0")]
        grid: String,
        #[arg(long)]
        out: PathBuf,
        /// Optional base config; its experiment must match.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_summary(report: &sumgp_core::bench::Report) {
    for kind in report.models() {
        let a = report.aggregate(kind);
        println!(
            "{:<28} n={:<3} failed={:<3} rmse={:.4e} ± {:.2e}  |dC|={:.4e} ± {:.2e}",
            kind.key(),
            a.n,
            a.failed,
            a.rmse_mean,
            a.rmse_std,
            a.delta_c_mean,
            a.delta_c_std
        );
    }
    println!("config {} finished in {:.1} s", report.config_hash, report.seconds);
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, seed, out, trace } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.trace |= trace;
            let out = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
            let report = run_experiment(&cfg)?;
            print_summary(&report);
            for p in emit_outputs(&report, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Gen { dataset, noise, drop, seed, out } => {
            let cfg = ExperimentConfig { noise_sigma_n: Some(noise), drop_prob_fd: drop, ..ExperimentConfig::new(&dataset, "constrained") };
            if dataset == "dp" {
                bail!("use dp-ingest for the double pendulum");
            }
            cfg.validate()?;
            let data = sumgp_core::bench::generate_for(&cfg, seed)?;
            datasets::write_dataset_csv(&out, &data.train, datasets::units_of(&dataset))?;
            println!("wrote {} ({} points)", out.display(), data.train.n_points());
        }
        Command::DpIngest { csv, frame_rate, mass_ratio, segment, out } => {
            let (s, l) = segment.split_once(':').context("segment must be start:len")?;
            let seg = (s.trim().parse::<usize>()?, l.trim().parse::<usize>()?);
            let p = PendulumParams { frame_rate, mass_ratio, ..Default::default() };
            let loaded = datasets::load_double_pendulum(&csv, &p, seg)?;
            datasets::write_dataset_csv(&out, &loaded.data, "m/20;m/s/sqrt10/5")?;
            println!("wrote {} ({} frames, energy {:.6})", out.display(), loaded.data.n_points(), loaded.constraint.constant_parts().map(|(_, s)| s[0]).unwrap_or(f64::NAN));
        }
        Command::Table { experiment, grid, out, config, replicates, seed } => {
            let base = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => {
                    let models = if experiment == "triangle" {
                        "constrained,unconstrained,transformed-unconstrained"
                    } else {
                        "constrained,unconstrained"
                    };
                    ExperimentConfig { replicates, seed, figures: false, ..ExperimentConfig::new(&experiment, models) }
                }
            };
            if base.experiment != experiment {
                bail!("config experiment '{}' does not match '{experiment}'", base.experiment);
            }
            let mut w = csv::Writer::from_path(&out).with_context(|| out.display().to_string())?;
            w.write_record(["sigma_n", "fd", "model", "n", "failed", "rmse", "rmse_std", "delta_c", "delta_c_std"])?;
            for (sigma, fd) in parse_grid(&grid)? {
                let cfg = ExperimentConfig { noise_sigma_n: Some(sigma), drop_prob_fd: fd, ..base.clone() };
                println!("sigma_n={sigma} fd={fd}");
                let report = run_experiment(&cfg)?;
                print_summary(&report);
                for kind in cfg.models()? {
                    let a = report.aggregate(kind);
                    w.write_record([
                        sigma.to_string(),
                        fd.to_string(),
                        ModelKind::key(&kind).to_string(),
                        a.n.to_string(),
                        a.failed.to_string(),
                        format!("{:.6e}", a.rmse_mean),
                        format!("{:.6e}", a.rmse_std),
                        format!("{:.6e}", a.delta_c_mean),
                        format!("{:.6e}", a.delta_c_std),
                    ])?;
                }
            }
            w.flush()?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
