use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{evaluate, train, Dataset, RunRecord};
use crate::config::{Architecture, ModelConfig, TrainConfig};
use crate::encoder::Mitree;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// A named set of model-config overrides, e.g. `{"name": "no-eco", "model": {"use_ecoregion": false}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub model: serde_json::Map<String, Value>,
}

/// Applies `patch` key by key; unknown keys are rejected.
pub fn apply_override(base: &ModelConfig, patch: &serde_json::Map<String, Value>) -> Result<ModelConfig> {
    let mut v = serde_json::to_value(base)?;
    let obj = v.as_object_mut().expect("model config serializes to an object");
    for (k, val) in patch {
        obj.insert(k.clone(), val.clone());
    }
    let cfg: ModelConfig = serde_json::from_value(v).map_err(|e| Error::Config(format!("override: {}", e)))?;
    cfg.validate()?;
    Ok(cfg)
}

/// The 2×2 grid of satellite tokenizer {residual, conv} × ecoregion token {on, off}.
pub fn rn_eco_grid() -> Vec<Variant> {
    let mut grid = Vec::new();
    for (tok, tname) in [("residual", "rn"), ("conv", "conv")] {
        for (eco, ename) in [(true, "eco"), (false, "noeco")] {
            let mut model = serde_json::Map::new();
            model.insert("satellite_tokenizer".into(), Value::from(tok));
            model.insert("use_ecoregion".into(), Value::from(eco));
            grid.push(Variant {
                name: format!("{}-{}", tname, ename),
                model,
            });
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub valid: MetricReport,
    pub test: Option<MetricReport>,
    pub record: RunRecord,
}

/// Trains every variant with the same data, seed and schedule.
pub fn ablate(grid: &[Variant], base: &Architecture, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for v in grid {
        let model_cfg = apply_override(&base.model, &v.model)?;
        let arch = Architecture::new(model_cfg, base.species, base.modalities.clone())?;
        let model = Mitree::new(arch);
        let out = train(&model, data, cfg)?;
        let valid = evaluate(&model, &out.params, &data.valid, cfg.batch_size)?.report;
        rows.push(AblationRow {
            name: v.name.clone(),
            valid,
            test: out.record.test.clone(),
            record: out.record,
        });
    }
    Ok(rows)
}

/// `variant,split,mae,mse,top10,top30,topk`, one line per variant and split.
pub fn render_table(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "split", "mae", "mse", "top10", "top30", "topk"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let splits = std::iter::once(("valid", &r.valid)).chain(r.test.as_ref().map(|t| ("test", t)));
        for (split, rep) in splits {
            w.write_record([
                r.name.clone(),
                split.to_string(),
                rep.mae.to_string(),
                rep.mse.to_string(),
                opt(rep.top10),
                opt(rep.top30),
                opt(rep.topk),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
