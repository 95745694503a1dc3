use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use sili_core::data::{self, Dataset, DatasetLayout, SweepSpec};
use sili_core::harness::checkpoint::{self, METRIC_CONVENTION};
use sili_core::harness::config::OUTPUT_DIR_ENV;
use sili_core::harness::eval::{self, write_csv};
use sili_core::harness::{plot, TrainConfig, Trainer};
use sili_core::image::ImageTensor;

#[derive(Parser)]
#[command(name = "sili", version, about = "Cross-resolution change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tile a source dataset into the A/B/label layout with split files.
    Prepare {
        /// Source root (A/, B/, label/ or train|val|test/{A,B,label}).
        #[arg(long, required_unless_present = "synthetic")]
        src: Option<PathBuf>,
        #[arg(long)]
        dst: PathBuf,
        #[arg(long, default_value_t = 256)]
        tile_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write N procedural tiles instead of reading a source.
        #[arg(long, value_name = "N")]
        synthetic: Option<usize>,
    },
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint directory written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split at one ratio.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[command(flatten)]
        common: EvalArgs,
    },
    /// Evaluate a checkpoint over several ratios.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated, strictly increasing; defaults to the config's sweep.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[command(flatten)]
        common: EvalArgs,
    },
    /// Predict a change mask for one image pair.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        post: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resolution ratio between the images; inferred from sizes if omitted.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Plot F1 against ratio for one or more result files.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Dataset root; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Config the checkpoint must match.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Result CSV path; defaults to the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_checkpoint(ckpt: &PathBuf, config: &Option<PathBuf>) -> anyhow::Result<checkpoint::Checkpoint> {
    let ck = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if let Some(c) = config {
        let cfg = TrainConfig::load(c)?;
        ck.manifest.check_model(&cfg)?;
    }
    Ok(ck)
}

fn eval_samples(ck: &checkpoint::Checkpoint, args: &EvalArgs) -> anyhow::Result<Dataset> {
    let root = args.dataset.clone().unwrap_or_else(|| ck.manifest.config.dataset.clone());
    Ok(Dataset::load_hr(&DatasetLayout::new(root), &args.split)?)
}

fn output_path(ck: &checkpoint::Checkpoint, args: &EvalArgs, name: &str) -> PathBuf {
    args.out
        .clone()
        .unwrap_or_else(|| ck.manifest.config.resolved_output_dir().join(name))
}

fn run_sweep(ckpt: &PathBuf, ratios: Vec<f64>, args: &EvalArgs, name: &str) -> anyhow::Result<()> {
    let ck = load_checkpoint(ckpt, &args.config)?;
    let model = ck.build_model()?;
    let data = eval_samples(&ck, args)?;
    let cfg = &ck.manifest.config;
    let spec = SweepSpec::new(ratios, cfg.sweep.degraded_slot)?;
    let results = eval::sweep(&model, &data.samples, &spec, cfg.batch_size)?;
    let out = output_path(&ck, args, name);
    write_csv(&out, &results)?;
    let (h, w) = data
        .samples
        .first()
        .map(|s| (s.label.height(), s.label.width()))
        .unwrap_or((0, 0));
    let meta = serde_json::json!({
        "checkpoint": ckpt,
        "config_hash": ck.manifest.config_hash,
        "params_sha256": ck.manifest.params_sha256,
        "split": args.split,
        "degraded_slot": spec.degraded_slot,
        "metric_convention": METRIC_CONVENTION,
        "lr_sizes": spec.ratios.iter().map(|&r| {
            let (lh, lw) = data::sweep_lr_size(h, w, r);
            serde_json::json!({"ratio": r, "height": lh, "width": lw})
        }).collect::<Vec<_>>(),
    });
    std::fs::write(out.with_extension("json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    for r in &results {
        println!(
            "ratio {:>5} precision {:.4} recall {:.4} f1 {:.4} iou {:.4} oa {:.4}",
            r.ratio, r.report.precision, r.report.recall, r.report.f1, r.report.iou, r.report.oa
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Prepare {
            src,
            dst,
            tile_size,
            seed,
            synthetic,
        } => {
            let layout = match (synthetic, src) {
                (Some(n), _) => data::write_synthetic_fixture(&dst, n, 64, seed)?,
                (None, Some(src)) => data::prepare(&src, &dst, tile_size, seed)?,
                (None, None) => bail!("either --src or --synthetic is required"),
            };
            for split in data::SPLITS {
                println!("{split}: {} tiles", layout.read_split(split)?.len());
            }
        }
        Command::Train { config, resume } => {
            let cfg = TrainConfig::load(&config)?;
            let mut trainer = match resume {
                Some(dir) => Trainer::resume(cfg, &dir)?,
                None => Trainer::new(cfg)?,
            };
            log::info!(
                "training {} parameters for {} steps into {} (override with {OUTPUT_DIR_ENV})",
                trainer.model.num_params(),
                trainer.total_steps(),
                trainer.out_dir().display()
            );
            trainer.run()?;
            match trainer.best_val_f1 {
                Some(f) => println!("best val f1 {f:.4}"),
                None => println!("no validation result"),
            }
        }
        Command::Eval { ckpt, ratio, common } => {
            run_sweep(&ckpt, vec![ratio], &common, &format!("eval_r{ratio}.csv"))?;
        }
        Command::Sweep { ckpt, ratios, common } => {
            let ratios = match ratios {
                Some(r) => r,
                None => checkpoint::load(&ckpt)?.manifest.config.sweep.ratios,
            };
            run_sweep(&ckpt, ratios, &common, "sweep.csv")?;
        }
        Command::Infer {
            ckpt,
            pre,
            post,
            out,
            ratio,
        } => {
            let ck = checkpoint::load(&ckpt)?;
            let model = ck.build_model()?;
            let a = ImageTensor::load_png(&pre)?;
            let b = ImageTensor::load_png(&post)?;
            let mask = model.predict_pair(&a, &b, ratio)?;
            mask.save_png(&out)?;
            println!("wrote {} ({} changed pixels)", out.display(), mask.count_ones());
        }
        Command::Plot { csv, out } => {
            let series = plot::plot_curves(&csv, &out)?;
            println!("wrote {} with {} series", out.display(), series.len());
        }
    }
    Ok(())
}
