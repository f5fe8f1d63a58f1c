use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mitree_core::data::{synth_generate, SynthConfig};
use mitree_core::encoder::predict_records;
use mitree_core::numerics::load_checkpoint;
use mitree_core::training::{
    ablate, load_records, load_trained, render_table, rn_eco_grid, save_outcome, train_from, write_predictions_csv,
    Dataset, Variant,
};
use mitree_core::{Error, ErrorKind, Mitree, RunConfig, Split};

mod help;

#[derive(Parser, Debug)]
#[command(
    name = "mitree",
    version,
    about = "Multi-input transformer for species encounter rates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// JSON run config; every key is optional
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        Ok(match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        })
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset
    #[command(after_help = help::config_help())]
    Synth {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        hotspots: usize,
        /// Defaults to data.species
        #[arg(long)]
        species: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and write the best-validation checkpoint
    #[command(after_help = help::config_help())]
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Dataset directory or manifest; defaults to data.root
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.epochs
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides train.seed
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint whose tensors replace initial parameters of the same name and shape
        #[arg(long)]
        init_weights: Option<PathBuf>,
    },
    /// Score a checkpoint on one split
    #[command(after_help = help::config_help())]
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write predicted encounter rates for every manifest row
    #[command(after_help = help::config_help())]
    Predict {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train each grid variant and tabulate metrics
    #[command(after_help = help::config_help())]
    Ablate {
        #[command(flatten)]
        cfg: ConfigArg,
        /// JSON list of {"name", "model": {overrides}}, or `rn-eco` for the built-in 2x2 grid
        #[arg(long)]
        grid: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn data_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    match (flag, &cfg.data.root) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(r)) => Ok(PathBuf::from(r)),
        (None, None) => Err(Error::Config("no dataset: pass --data or set data.root".into()).into()),
    }
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(())
}

fn apply_overrides(cfg: &mut RunConfig, epochs: Option<usize>, seed: Option<u64>) {
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            cfg,
            out,
            hotspots,
            species,
            seed,
        } => {
            let cfg = cfg.load()?;
            let synth = SynthConfig {
                hotspots,
                species: species.unwrap_or(cfg.data.species),
                ecoregion_counts: cfg.model.ecoregion_counts,
                modalities: cfg.data.modalities.clone(),
                oracle: cfg.synth.clone(),
            };
            let summary = synth_generate(&synth, seed, &out)?;
            println!("manifest: {}", summary.manifest.display());
            println!("hotspots: {} species: {}", summary.hotspots, summary.species);
            for (split, n) in &summary.split_counts {
                println!("  {}: {}", split, n);
            }
            println!("zero-rate fraction: {:.4}", summary.zero_fraction);
        }
        Command::Train {
            cfg,
            data,
            out,
            epochs,
            seed,
            init_weights,
        } => {
            let mut cfg = cfg.load()?;
            apply_overrides(&mut cfg, epochs, seed);
            let model = Mitree::new(cfg.architecture()?);
            let records = load_records(&data_path(&data, &cfg)?, &model.arch)?;
            let dataset = Dataset::from_records(&records)?;
            let mut params = model.init_params::<f32>(cfg.train.seed)?;
            if let Some(dir) = init_weights {
                let loaded = load_checkpoint(&dir, None)?;
                let n = params.overlay(&loaded, "")?;
                println!("loaded {} tensors from {}", n, dir.display());
            }
            create_out(&out)?;
            let outcome = train_from(&model, &dataset, &cfg.train, params)?;
            save_outcome(&out, &outcome, &dataset.stats)?;
            let r = &outcome.record;
            println!(
                "epochs: {} best epoch: {} best valid loss: {:.6}",
                r.epochs.len(),
                r.best_epoch,
                r.best_valid_loss
            );
            println!("train loss: {:.6} -> {:.6}", r.initial_train_loss, r.final_train_loss());
            println!("checkpoint: {}", out.join("checkpoint").display());
        }
        Command::Eval {
            cfg,
            data,
            checkpoint,
            split,
            out,
        } => {
            let cfg = cfg.load()?;
            let model = Mitree::new(cfg.architecture()?);
            let (params, stats) = load_trained(&checkpoint, &model.arch)?;
            let records = load_records(&data_path(&data, &cfg)?, &model.arch)?;
            let dataset = Dataset::with_stats(&records, stats)?;
            let ev = mitree_core::training::evaluate(&model, &params, dataset.split(split), cfg.train.batch_size)?;
            create_out(&out)?;
            ev.report.save_json(&out.join(format!("report_{}.json", split)))?;
            ev.report
                .save_hotspot_csv(&out.join(format!("hotspots_{}.csv", split)))?;
            let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.4}", x));
            let r = &ev.report;
            println!(
                "{}: mae {:.6} mse {:.6} top10 {} top30 {} topk {} ({} hotspots, {} scored)",
                split,
                r.mae,
                r.mse,
                opt(r.top10),
                opt(r.top30),
                opt(r.topk),
                r.hotspots,
                r.scored
            );
        }
        Command::Predict {
            cfg,
            checkpoint,
            manifest,
            out,
        } => {
            let cfg = cfg.load()?;
            let model = Mitree::new(cfg.architecture()?);
            let (params, stats) = load_trained(&checkpoint, &model.arch)?;
            let records = load_records(&manifest, &model.arch)?;
            let normalized = records
                .iter()
                .map(|r| mitree_core::data::normalize(r, &stats))
                .collect::<mitree_core::Result<Vec<_>>>()?;
            let preds = predict_records(&model, &params, &normalized, cfg.train.batch_size)?;
            create_out(&out)?;
            let path = out.join("predictions.csv");
            let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
            write_predictions_csv(&path, &ids, &preds)?;
            println!("{} predictions: {}", preds.len(), path.display());
        }
        Command::Ablate {
            cfg,
            grid,
            data,
            out,
            epochs,
            seed,
        } => {
            let mut cfg = cfg.load()?;
            apply_overrides(&mut cfg, epochs, seed);
            let variants: Vec<Variant> = if grid == "rn-eco" {
                rn_eco_grid()
            } else {
                let text = fs::read_to_string(&grid).map_err(|e| Error::io(Path::new(&grid), e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("grid {}: {}", grid, e)))?
            };
            let arch = cfg.architecture()?;
            let records = load_records(&data_path(&data, &cfg)?, &arch)?;
            let dataset = Dataset::from_records(&records)?;
            create_out(&out)?;
            let rows = ablate(&variants, &arch, &dataset, &cfg.train)?;
            let table = render_table(&rows)?;
            let path = out.join("ablation.csv");
            fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
            print!("{}", table);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Io => 3,
                ErrorKind::Numerical => 4,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("mitree failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
