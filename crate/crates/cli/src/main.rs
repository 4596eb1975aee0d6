use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use planepose_core::harness::{self, checkpoint, Config, EvalReport};
use planepose_core::volume::{generate_phantom, io, SliceGrid};
use planepose_core::Error;

#[derive(Parser)]
#[command(
    name = "planepose",
    version,
    about = "Slice-to-volume plane pose regression with uncertainty"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Line-oriented `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom volume.
    GenerateVolume {
        #[command(flatten)]
        common: Common,
        /// Volume dimensions as D,H,W.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample augmented slices from a volume as 16-bit PGM plus JSON sidecars.
    SampleSlices {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model and write a checkpoint directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate checkpoints on the test volumes and write a metrics CSV.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directories; one summary row each.
        #[arg(long, required_unless_present = "ground_truth")]
        checkpoint: Vec<PathBuf>,
        /// Score the ground-truth poses against themselves.
        #[arg(long)]
        ground_truth: bool,
        /// Summary CSV path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-slice CSV path.
        #[arg(long)]
        per_slice: Option<PathBuf>,
    },
    /// Predict poses of slice images and print them as JSON.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON output path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// 16-bit PGM slices.
        inputs: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> planepose_core::Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::from_file(p)?,
        None => Config::desk_default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
        cfg.phantom_seed = seed;
    }
    Ok(cfg)
}

fn write_or_print(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateVolume { common, dims, out } => {
            let cfg = load_config(&common)?;
            let dims = match dims {
                Some(d) => <[usize; 3]>::try_from(d).map_err(|_| {
                    Error::InvalidConfig("--dims expects three values D,H,W".into())
                })?,
                None => cfg.phantom_dims,
            };
            let v = generate_phantom(cfg.phantom_seed, dims)?;
            io::write_volume(&out, &v)?;
            log::info!(
                "wrote {}x{}x{} phantom to {}",
                dims[0],
                dims[1],
                dims[2],
                out.display()
            );
        }
        Command::SampleSlices {
            common,
            volume,
            n,
            out_dir,
        } => {
            let cfg = load_config(&common)?;
            let v = io::read_volume(&volume)?;
            let grid = SliceGrid::new(cfg.train.model.half_extent, cfg.slice_resolution)?;
            let n = n.unwrap_or(cfg.n_slices);
            let slices = harness::sample_slices(&v, n, &cfg.train.augment, grid, cfg.train.seed)?;
            fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            for (i, s) in slices.iter().enumerate() {
                io::write_slice(&out_dir, &format!("slice_{i:04}"), s, grid.half_extent)?;
            }
            log::info!("wrote {} slices to {}", slices.len(), out_dir.display());
        }
        Command::Train { common, out } => {
            let cfg = load_config(&common)?;
            let outcome = harness::train(&cfg.train, Some(&out))?;
            for r in &outcome.records {
                log::info!(
                    "member {}: best epoch {} of {}",
                    r.index,
                    r.best_epoch,
                    r.epochs_run
                );
            }
        }
        Command::Evaluate {
            common,
            checkpoint: dirs,
            ground_truth,
            out,
            per_slice,
        } => {
            let cfg = load_config(&common)?;
            let mut reports: Vec<EvalReport> = Vec::new();
            if ground_truth {
                let volumes = harness::config::load_all(&cfg.eval.test_volumes)?;
                let grid = SliceGrid::new(cfg.train.model.half_extent, cfg.train.model.input_size)?;
                reports.push(harness::evaluate_ground_truth(
                    &volumes,
                    &cfg.train.augment,
                    grid,
                    &cfg.eval,
                )?);
            }
            for dir in &dirs {
                let ckpt = checkpoint::load(dir)?;
                reports.push(harness::evaluate(&ckpt, &cfg.eval)?);
            }
            write_or_print(out.as_deref(), &harness::summary_csv(&reports))?;
            if let Some(p) = per_slice {
                let mut text = String::new();
                for (i, r) in reports.iter().enumerate() {
                    let csv = r.per_slice_csv();
                    // Keep a single header across reports.
                    text.push_str(if i == 0 {
                        &csv
                    } else {
                        csv.split_once('\n').map_or("", |x| x.1)
                    });
                }
                write_or_print(Some(&p), &text)?;
            }
        }
        Command::Predict {
            common,
            checkpoint: dir,
            out,
            inputs,
        } => {
            let cfg = load_config(&common)?;
            let ckpt = checkpoint::load(&dir)?;
            let records = harness::predict_files(&ckpt, &inputs, cfg.eval.seed)?;
            let mut text = serde_json::to_string_pretty(&records)?;
            text.push('\n');
            write_or_print(out.as_deref(), &text)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
