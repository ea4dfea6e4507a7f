use std::path::PathBuf;

use clap::{Parser, Subcommand};

use panlab_cli::config::{ExperimentConfig, Variant};
use panlab_cli::{report, run_ablation_suite, run_experiment, run_reduced_supervision_sweep};

#[derive(Parser)]
#[command(
    name = "panlab",
    about = "Desk-scale continual panoptic segmentation experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one continual experiment end to end (resumable).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue an interrupted run in the same output directory.
        #[arg(long)]
        resume: bool,
        /// Override run.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Force a mechanism variant regardless of the config switches.
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        /// Stop after this protocol step (for staged or interrupted runs).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Run the four-variant component ablation over both streams.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reduced-supervision sweep over subsample fractions, both streams.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated fractions in (0, 1], e.g. 1.0,0.57,0.14.
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
    },
    /// Regenerate all tables from the records in an output directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse and validate a config, printing the derived protocol.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Run { config, out, resume, seed, variant, stop_after } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.run.seed = seed;
            }
            if let Some(variant) = variant {
                cfg.apply_variant(variant);
            }
            let run = run_experiment(&cfg, &out, resume, stop_after)?;
            let done = run.steps.len();
            println!("completed {done}/{} steps -> {}", run.num_steps, out.display());
            if let Some(last) = run.steps.last() {
                println!(
                    "final val: pq_base={} pq_new={} pq_all={}",
                    fmt(last.val.pq_base),
                    fmt(last.val.pq_new),
                    fmt(last.val.pq_all)
                );
            }
        }
        Cmd::Ablate { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let table = run_ablation_suite(&cfg, &out)?;
            println!("variant    rc    kfr   overlap_pq_all  disjoint_pq_all  avg");
            for row in &table.rows {
                println!(
                    "{:<10} {:<5} {:<5} {:>14} {:>16} {:>6}",
                    row.variant,
                    row.rc,
                    row.kfr,
                    fmt(row.overlap.pq_all),
                    fmt(row.disjoint.pq_all),
                    fmt(row.avg_pq_all)
                );
            }
            println!("written to {}", out.join("ablation.csv").display());
        }
        Cmd::Sweep { config, out, fractions } => {
            let cfg = ExperimentConfig::load(&config)?;
            if fractions.is_empty() {
                anyhow::bail!("pass at least one fraction via --fractions");
            }
            let table = run_reduced_supervision_sweep(&cfg, &fractions, &out)?;
            for row in &table.rows {
                println!(
                    "fraction {:>5} {:<9} pq_all {}",
                    row.fraction,
                    row.stream,
                    fmt(row.pq_all)
                );
            }
            println!("written to {}", out.join("sweep.csv").display());
        }
        Cmd::Report { out } => {
            if !report::render_dir(&out)? {
                anyhow::bail!("no run, ablation, or sweep records found in {}", out.display());
            }
            println!("reports regenerated under {}", out.display());
        }
        Cmd::ValidateConfig { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let k = cfg.dataset.num_classes();
            let increments = (k as usize - cfg.schedule.base_count)
                .div_ceil(cfg.schedule.increment_size);
            println!("config ok: hash {}", cfg.hash());
            println!(
                "K={k}, base={}, increments of {} -> T={}",
                cfg.schedule.base_count,
                cfg.schedule.increment_size,
                1 + increments
            );
            println!(
                "stream: {:?}, subsample fraction {}",
                cfg.stream.mode, cfg.stream.subsample_fraction
            );
            println!(
                "mechanisms: rc={} kfr={} aux={}",
                cfg.future_aware.rc, cfg.future_aware.kfr, cfg.future_aware.aux.enabled
            );
        }
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}
