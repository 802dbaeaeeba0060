use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use fedpeft::harness::{
    backbone_path, load_config, partition_reports, prepare_backbone, run_grid, summarize, ExperimentGrid,
    RunOptions,
};

#[derive(Parser)]
#[command(name = "fedpeft", version, about = "Federated parameter-efficient fine-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment grid in TOML; omitted tables take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the grid seeds (or the pre-training seed for `pretrain`).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the grid's backbones and cache them under <out>/backbones.
    Pretrain(Common),
    /// Write client label distribution reports under <out>/partitions.
    Partition(Common),
    /// Execute every cell of the grid.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Stop each federated run at its convergence round.
        #[arg(long)]
        stop_at_convergence: bool,
    },
    /// Rebuild summary.csv and cost.csv from the cell manifests in <out>.
    Summarize {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn grid_for(common: &Common) -> fedpeft::Result<ExperimentGrid> {
    match &common.config {
        Some(path) => load_config(path),
        None => Ok(ExperimentGrid::default()),
    }
}

fn execute(cli: Cli) -> fedpeft::Result<bool> {
    match cli.command {
        Command::Pretrain(common) => {
            let mut grid = grid_for(&common)?;
            if let Some(seed) = common.seed {
                grid.pretrain.seed = seed;
            }
            let dir = common.out.join("backbones");
            std::fs::create_dir_all(&dir)?;
            for &b in &grid.grid.backbones {
                let params = prepare_backbone(&grid, b)?;
                let path = backbone_path(&dir, b);
                params.save(&path)?;
                info!("wrote {}", path.display());
            }
            Ok(true)
        }
        Command::Partition(common) => {
            let mut grid = grid_for(&common)?;
            if let Some(seed) = common.seed {
                grid.grid.seeds = vec![seed];
            }
            let dir = common.out.join("partitions");
            for r in partition_reports(&grid, &dir)? {
                println!(
                    "{} seed {}: mean pairwise TV {:.4}, mean label entropy {:.4}, empty clients {}",
                    r.setting, r.seed, r.metrics.mean_pairwise_tv, r.metrics.mean_label_entropy, r.metrics.empty_clients
                );
            }
            Ok(true)
        }
        Command::Run {
            common,
            jobs,
            stop_at_convergence,
        } => {
            let grid = grid_for(&common)?;
            let opts = RunOptions {
                out: Some(common.out.clone()),
                jobs,
                stop_at_convergence,
                backbone_cache: Some(common.out.join("backbones")),
                seed: common.seed,
            };
            let report = run_grid(&grid, &opts)?;
            for row in &report.summary {
                match row.final_acc {
                    Some(acc) => println!("{:<64} {:.4}", row.cell_id, acc),
                    None => println!("{:<64} {}", row.cell_id, row.status),
                }
            }
            if report.failures > 0 {
                error!("{} of {} cells failed", report.failures, report.summary.len());
            }
            Ok(report.failures == 0)
        }
        Command::Summarize { out } => {
            let rows = summarize(&out)?;
            println!("summarized {} cells into {}", rows.len(), out.join("summary.csv").display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            error!("{e}");
            ExitCode::from(2)
        }
    }
}
