//! Seeded training and evaluation loops plus the ablation harness.

mod ablate;
mod artifacts;

pub use ablate::{ablate, apply_override, render_table, rn_eco_grid, AblationRow, Variant};
pub use artifacts::{load_trained, save_outcome, write_predictions_csv};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Architecture, TrainConfig};
use crate::data::{fit_normalization, load_manifest, normalize, HotspotRecord, NormalizationStats, Split, TrainSplit};
use crate::encoder::{cross_entropy_loss, predict_records, Batch, Mitree, Prediction};
use crate::error::{Error, Result};
use crate::metrics::{top_k_adaptive, MetricReport, ScoreInput};
use crate::numerics::{adam_step, plateau_step, AdamState, ParamStore, PlateauState, Tape};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const STATS_FILE: &str = "normalization.json";
pub const RUN_FILE: &str = "run.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Accepts a dataset directory (containing `manifest.csv`) or a manifest path.
/// Returns the manifest path and the root that relative raster paths resolve against.
pub fn resolve_manifest(data: &Path) -> (PathBuf, PathBuf) {
    let manifest = if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    };
    let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    (manifest, root)
}

pub fn load_records(data: &Path, arch: &Architecture) -> Result<Vec<HotspotRecord>> {
    let (manifest, root) = resolve_manifest(data);
    load_manifest(&manifest, &root, &arch.schema())
}

/// Normalized records grouped by split. Statistics come from the train split only.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<HotspotRecord>,
    pub valid: Vec<HotspotRecord>,
    pub test: Vec<HotspotRecord>,
    pub stats: NormalizationStats,
}

impl Dataset {
    pub fn from_records(records: &[HotspotRecord]) -> Result<Self> {
        let stats = fit_normalization(TrainSplit::of(records))?;
        Self::with_stats(records, stats)
    }

    pub fn with_stats(records: &[HotspotRecord], stats: NormalizationStats) -> Result<Self> {
        let mut ds = Dataset {
            train: vec![],
            valid: vec![],
            test: vec![],
            stats,
        };
        for r in records {
            let n = normalize(r, &ds.stats)?;
            match r.split {
                Split::Train => ds.train.push(n),
                Split::Valid => ds.valid.push(n),
                Split::Test => ds.test.push(n),
            }
        }
        Ok(ds)
    }

    pub fn split(&self, split: Split) -> &[HotspotRecord] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Metrics and mean per-hotspot loss of a parameter set on labelled records.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub report: MetricReport,
    pub predictions: Vec<Prediction>,
}

pub fn evaluate(
    model: &Mitree,
    params: &ParamStore<f32>,
    records: &[HotspotRecord],
    batch_size: usize,
) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let truths = records
        .iter()
        .map(|r| {
            r.target
                .as_ref()
                .ok_or_else(|| Error::MissingTarget { id: r.id.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let predictions = predict_records(model, params, records, batch_size)?;
    let mut loss = 0.0;
    for (p, t) in predictions.iter().zip(&truths) {
        loss += cross_entropy_loss(p, t)?;
    }
    let level = model.arch.model.ecoregion_level;
    let inputs: Vec<ScoreInput> = records
        .iter()
        .zip(&predictions)
        .zip(&truths)
        .map(|((r, p), t)| ScoreInput {
            hotspot_id: &r.id,
            ecoregion: r.ecoregion_label(level),
            pred: &p.rates,
            truth: t.rates(),
        })
        .collect();
    Ok(Evaluation {
        loss: loss / records.len() as f64,
        report: MetricReport::compute(&inputs)?,
        predictions,
    })
}

/// Mean and standard deviation of adaptive top-k when predictions are
/// reassigned to random hotspots. Breaks any input/target association
/// while keeping the marginal prediction distribution.
pub fn permutation_baseline(preds: &[Vec<f64>], truths: &[Vec<f64>], rounds: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..preds.len()).collect();
    let mut means = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        order.shuffle(&mut rng);
        let (mut s, mut n) = (0.0, 0usize);
        for (i, &j) in order.iter().enumerate() {
            if let Some(v) = top_k_adaptive(&preds[j], &truths[i])? {
                s += v;
                n += 1;
            }
        }
        means.push(if n == 0 { 0.0 } else { s / n as f64 });
    }
    let m = means.iter().sum::<f64>() / rounds.max(1) as f64;
    let var = means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / rounds.max(1) as f64;
    Ok((m, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-hotspot loss over the epoch's batches.
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub valid_mae: Option<f64>,
    pub valid_mse: Option<f64>,
    pub valid_topk: Option<f64>,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    /// Train and validation loss of the initial parameters.
    pub initial_train_loss: f64,
    pub initial_valid_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// 0 when no epoch beat the initialization.
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub stopped_early: bool,
    pub test: Option<MetricReport>,
}

impl RunRecord {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_train_loss, |e| e.train_loss)
    }

    /// One JSON object per epoch.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.epochs {
            let line = serde_json::to_string(e)?;
            writeln!(out, "{}", line).map_err(|e| Error::io(Path::new(RUN_FILE), e))?;
        }
        Ok(())
    }
}

/// Best-validation parameters and the run history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub record: RunRecord,
}

fn numeric_context(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::NonFiniteLoss {
            epoch,
            batch,
            detail: format!("non-finite output from {}", op),
        },
        Error::NonFiniteGradient(name) => Error::NonFiniteLoss {
            epoch,
            batch,
            detail: format!("non-finite gradient for {}", name),
        },
        other => other,
    }
}

/// Adam on the cross-entropy, reduce-on-plateau on validation loss, keeping
/// the parameters with the lowest validation loss. Everything is seeded by `cfg.seed`.
pub fn train(model: &Mitree, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(model, data, cfg, model.init_params(cfg.seed)?)
}

/// [`train`] starting from `params` instead of the seeded initialization.
pub fn train_from(
    model: &Mitree,
    data: &Dataset,
    cfg: &TrainConfig,
    mut params: ParamStore<f32>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if data.valid.is_empty() {
        return Err(Error::Config("the valid split is empty".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut adam = AdamState::new(cfg.adam());
    let mut plateau = PlateauState::new(cfg.lr, cfg.plateau);

    let initial_train_loss = evaluate(model, &params, &data.train, cfg.batch_size)?.loss;
    let initial_valid_loss = evaluate(model, &params, &data.valid, cfg.batch_size)?.loss;
    let mut best = (0usize, initial_valid_loss, params.clone());
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;
    let use_dropout = model.arch.model.dropout > 0.0;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let lr = plateau.lr;
        adam.set_lr(lr);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let ctx = numeric_context(epoch, b);
            let refs: Vec<&HotspotRecord> = idx.iter().map(|&i| &data.train[i]).collect();
            let batch = Batch::from_records(&refs, &model.arch)?;
            let targets = batch
                .targets
                .as_ref()
                .ok_or_else(|| Error::MissingTarget { id: refs[0].id.clone() })?
                .cast::<f32>();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let rng = if use_dropout { Some(&mut dropout_rng) } else { None };
            let out = model.forward(&mut tape, &bound, &batch, rng).map_err(&ctx)?;
            let loss = tape.bce_with_logits(out.logits, &targets).map_err(&ctx)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(ctx(Error::NonFinite { op: "cross-entropy" }));
            }
            loss_sum += value * refs.len() as f64;
            tape.backward(loss).map_err(&ctx)?;
            let grads = params.collect_grads(&tape, &bound);
            adam_step(&mut params, &grads, &mut adam).map_err(&ctx)?;
        }
        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            valid_loss: None,
            valid_mae: None,
            valid_mse: None,
            valid_topk: None,
            lr,
        };
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let ev = evaluate(model, &params, &data.valid, cfg.batch_size)?;
            record.valid_loss = Some(ev.loss);
            record.valid_mae = Some(ev.report.mae);
            record.valid_mse = Some(ev.report.mse);
            record.valid_topk = ev.report.topk;
            if ev.loss < best.1 {
                best = (epoch, ev.loss, params.clone());
            }
            let was_at_floor = plateau.at_floor();
            let next = plateau_step(&plateau, ev.loss);
            let triggered = next.since_improvement == 0 && next.best == plateau.best;
            plateau = next;
            epochs.push(record);
            if cfg.early_stop && was_at_floor && triggered {
                stopped_early = true;
                break;
            }
        } else {
            epochs.push(record);
        }
    }

    let (best_epoch, best_valid_loss, best_params) = best;
    let test = if data.test.is_empty() || data.test.iter().any(|r| r.target.is_none()) {
        None
    } else {
        Some(evaluate(model, &best_params, &data.test, cfg.batch_size)?.report)
    };
    Ok(TrainOutcome {
        params: best_params,
        record: RunRecord {
            config_hash: model.arch.config_hash(),
            initial_train_loss,
            initial_valid_loss,
            epochs,
            best_epoch,
            best_valid_loss,
            stopped_early,
            test,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{synth_generate, ModalitySpec, SynthConfig};

    fn small_data(dir: &Path, hotspots: usize) -> (Mitree, Dataset) {
        let cfg = SynthConfig {
            hotspots,
            species: 6,
            ..SynthConfig::default()
        };
        synth_generate(&cfg, 11, dir).unwrap();
        let arch = Architecture::new(ModelConfig::tiny(), 6, ModalitySpec::canonical()).unwrap();
        let records = load_records(dir, &arch).unwrap();
        (Mitree::new(arch), Dataset::from_records(&records).unwrap())
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            lr: 1e-3,
            epochs,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let (model, data) = small_data(dir.path(), 20);
        let out = train(&model, &data, &quick(0)).unwrap();
        assert_eq!(out.params, model.init_params::<f32>(0).unwrap());
        assert!(out.record.epochs.is_empty());
        assert_eq!(out.record.best_epoch, 0);
    }

    #[test]
    fn training_is_deterministic_and_lr_non_increasing() {
        let dir = tempfile::tempdir().unwrap();
        let (model, data) = small_data(dir.path(), 20);
        let a = train(&model, &data, &quick(3)).unwrap();
        let b = train(&model, &data, &quick(3)).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.params, b.params);
        assert!(a.record.epochs.windows(2).all(|w| w[1].lr <= w[0].lr));
        let best = a
            .record
            .epochs
            .iter()
            .filter_map(|e| e.valid_loss)
            .fold(a.record.initial_valid_loss, f64::min);
        assert_eq!(best, a.record.best_valid_loss);
        assert!(a.record.test.is_some());
    }

    #[test]
    fn evaluation_is_pure_and_needs_targets() {
        let dir = tempfile::tempdir().unwrap();
        let (model, data) = small_data(dir.path(), 20);
        let params = model.init_params::<f32>(0).unwrap();
        let a = evaluate(&model, &params, &data.valid, 2).unwrap();
        let b = evaluate(&model, &params, &data.valid, 3).unwrap();
        assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
        let mut unlabeled = data.valid.clone();
        unlabeled[0].target = None;
        assert!(matches!(
            evaluate(&model, &params, &unlabeled, 2),
            Err(Error::MissingTarget { .. })
        ));
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (model, mut data) = small_data(dir.path(), 20);
        data.train.clear();
        assert!(matches!(train(&model, &data, &quick(1)), Err(Error::EmptyTrainingSet)));
    }

    #[test]
    fn permutation_baseline_is_seeded() {
        let preds = vec![vec![0.9, 0.1, 0.5], vec![0.1, 0.9, 0.5], vec![0.5, 0.5, 0.9]];
        let truths = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let a = permutation_baseline(&preds, &truths, 50, 1).unwrap();
        assert_eq!(a, permutation_baseline(&preds, &truths, 50, 1).unwrap());
        assert!(a.0 > 0.0 && a.0 < 1.0 && a.1 > 0.0);
    }
}
