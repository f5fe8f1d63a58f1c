//! On-disk layout of a training run:
//!
//! ```text
//! <out>/checkpoint/params.json, *.rst, normalization.json
//! <out>/run.jsonl      one line per epoch
//! <out>/summary.json   the full run record
//! ```

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use super::{TrainOutcome, CHECKPOINT_DIR, RUN_FILE, STATS_FILE, SUMMARY_FILE};
use crate::config::Architecture;
use crate::data::NormalizationStats;
use crate::encoder::Prediction;
use crate::error::{Error, Result};
use crate::numerics::{load_checkpoint, save_checkpoint, ParamStore};

pub fn save_outcome(out: &Path, outcome: &TrainOutcome, stats: &NormalizationStats) -> Result<()> {
    let ckpt = out.join(CHECKPOINT_DIR);
    save_checkpoint(&ckpt, &outcome.params, &outcome.record.config_hash)?;
    stats.save(&ckpt.join(STATS_FILE))?;
    let run = out.join(RUN_FILE);
    let f = fs::File::create(&run).map_err(|e| Error::io(&run, e))?;
    outcome.record.write_jsonl(BufWriter::new(f))?;
    let summary = out.join(SUMMARY_FILE);
    fs::write(&summary, serde_json::to_string_pretty(&outcome.record)? + "\n").map_err(|e| Error::io(&summary, e))
}

/// Parameters and normalization statistics, checked against `arch`'s hash.
pub fn load_trained(checkpoint: &Path, arch: &Architecture) -> Result<(ParamStore<f32>, NormalizationStats)> {
    let params = load_checkpoint(checkpoint, Some(&arch.config_hash()))?;
    let stats = NormalizationStats::load(&checkpoint.join(STATS_FILE))?;
    Ok((params, stats))
}

/// `hotspot_id,s0,…,s{S−1}` with predicted encounter rates.
pub fn write_predictions_csv(path: &Path, ids: &[String], preds: &[Prediction]) -> Result<()> {
    let species = preds.first().map_or(0, |p| p.rates.len());
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    let mut header = vec!["hotspot_id".to_string()];
    header.extend((0..species).map(|s| format!("s{}", s)));
    w.write_record(&header)?;
    for (id, p) in ids.iter().zip(preds) {
        let mut row = vec![id.clone()];
        row.extend(p.rates.iter().map(|r| r.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
