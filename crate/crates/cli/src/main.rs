use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use ocnet_cli::pipeline;
use ocnet_cli::RunConfig;

#[derive(Parser)]
#[command(name = "ocnet", version, about = "Occluded person re-identification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (flat TOML).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to evaluate; defaults to `<out_dir>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides `data_seed` for gen-data and `seed` otherwise.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData(Common),
    /// Train and write a checkpoint plus a loss log.
    Train(Common),
    /// Evaluate a checkpoint on the query/gallery split.
    Evaluate(Common),
    /// Train and evaluate the six-leg ablation grid.
    Ablate(Common),
    /// Write the top-k ranking for one query.
    ExportRanking {
        #[command(flatten)]
        common: Common,
        /// Query position in the query split.
        #[arg(long)]
        query: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Also render an image grid.
        #[arg(long)]
        grid: bool,
    },
}

fn load(common: &Common, data_seed: bool) -> Result<RunConfig> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        if data_seed {
            config.data_seed = seed;
        } else {
            config.seed = seed;
        }
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let config = load(&c, true)?;
            let out = pipeline::gen_data(&config)?;
            println!(
                "generated {} images in {}",
                out.index.samples.len(),
                config.data_dir.display()
            );
        }
        Command::Train(c) => {
            let config = load(&c, false)?;
            let out = pipeline::train(&config)?;
            if let Some(last) = out.losses.last() {
                println!("step {} L_total {}", last.step, last.total);
            }
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Evaluate(c) => {
            let config = load(&c, false)?;
            let r = pipeline::evaluate(&config, c.checkpoint.as_deref())?;
            println!("rank1 {:.4} map {:.4}", r.overall.rank1, r.overall.map);
            println!("report {}", r.report_path.display());
        }
        Command::Ablate(c) => {
            let config = load(&c, false)?;
            let rows = pipeline::ablate(&config)?;
            print!("{}", pipeline::ablation_table(&rows));
        }
        Command::ExportRanking { common, query, k, grid } => {
            let config = load(&common, false)?;
            let out = pipeline::export_ranking(&config, common.checkpoint.as_deref(), query, k, grid)?;
            println!("ranking {}", out.tsv_path.display());
            if let Some(p) = out.grid_path {
                println!("grid {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
