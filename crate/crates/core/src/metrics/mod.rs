//! Encounter-rate evaluation: MAE, MSE, top-10, top-30, adaptive top-k,
//! species-wise MSE comparison and per-ecoregion aggregation.
//!
//! Top metrics compare the highest-ranked predicted species against the
//! highest-ranked observed (non-zero) species. Ties rank the lower species
//! index first. Hotspots with no observed species are skipped by the top
//! metrics but still count for MAE and MSE.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_len(a: usize, b: usize, op: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            op,
            detail: format!("prediction has {} entries, truth has {}", a, b),
        });
    }
    Ok(())
}

/// Mean absolute and mean squared error over species.
pub fn mae_mse(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    check_len(pred.len(), truth.len(), "mae-mse")?;
    if pred.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let d = p - t;
        abs += d.abs();
        sq += d * d;
    }
    let n = pred.len() as f64;
    Ok((abs / n, sq / n))
}

/// Indices sorted by descending value; equal values keep ascending index order.
pub fn ranking(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Overlap between the top-`m` observed species and the same number of top
/// predicted species, as a fraction of the observed list. `None` when nothing
/// was observed.
pub fn top_m(pred: &[f64], truth: &[f64], m: usize) -> Result<Option<f64>> {
    check_len(pred.len(), truth.len(), "top-m")?;
    if m == 0 {
        return Err(Error::Config("top-m needs m >= 1".into()));
    }
    let observed: Vec<usize> = ranking(truth).into_iter().filter(|&i| truth[i] > 0.0).take(m).collect();
    if observed.is_empty() {
        return Ok(None);
    }
    let mut in_g = vec![false; truth.len()];
    for &i in &observed {
        in_g[i] = true;
    }
    let hits = ranking(pred)
        .into_iter()
        .take(observed.len())
        .filter(|&i| in_g[i])
        .count();
    Ok(Some(hits as f64 / observed.len() as f64))
}

/// `top_m` with `m` equal to the number of observed species.
pub fn top_k_adaptive(pred: &[f64], truth: &[f64]) -> Result<Option<f64>> {
    check_len(pred.len(), truth.len(), "top-k")?;
    let k = truth.iter().filter(|&&t| t > 0.0).count();
    if k == 0 {
        return Ok(None);
    }
    top_m(pred, truth, k)
}

/// Group-by mean of per-hotspot scores.
pub fn by_ecoregion(scores: &[f64], labels: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "by-ecoregion",
            detail: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (&s, &l) in scores.iter().zip(labels) {
        let e = acc.entry(l).or_default();
        e.0 += s;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect())
}

/// One hotspot to be scored.
#[derive(Debug, Clone, Copy)]
pub struct ScoreInput<'a> {
    pub hotspot_id: &'a str,
    pub ecoregion: usize,
    pub pred: &'a [f64],
    pub truth: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotspotMetrics {
    pub hotspot_id: String,
    pub ecoregion: usize,
    pub mae: f64,
    pub mse: f64,
    pub top10: Option<f64>,
    pub top30: Option<f64>,
    pub topk: Option<f64>,
}

/// Dataset-level metrics. Top aggregates are `None` when no hotspot had an
/// observed species.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub hotspots: usize,
    /// Hotspots that entered the top metrics.
    pub scored: usize,
    pub mae: f64,
    pub mse: f64,
    pub top10: Option<f64>,
    pub top30: Option<f64>,
    pub topk: Option<f64>,
    pub per_species_mse: Vec<f64>,
    pub per_ecoregion_topk: BTreeMap<usize, f64>,
    #[serde(skip)]
    pub per_hotspot: Vec<HotspotMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricReport {
    pub fn compute(inputs: &[ScoreInput<'_>]) -> Result<Self> {
        let species = inputs.first().map_or(0, |i| i.truth.len());
        let mut per_hotspot = Vec::with_capacity(inputs.len());
        let mut species_sq = vec![0.0; species];
        for inp in inputs {
            check_len(inp.pred.len(), inp.truth.len(), "report")?;
            check_len(inp.truth.len(), species, "report")?;
            let (mae, mse) = mae_mse(inp.pred, inp.truth)?;
            for (acc, (p, t)) in species_sq.iter_mut().zip(inp.pred.iter().zip(inp.truth)) {
                *acc += (p - t) * (p - t);
            }
            per_hotspot.push(HotspotMetrics {
                hotspot_id: inp.hotspot_id.to_string(),
                ecoregion: inp.ecoregion,
                mae,
                mse,
                top10: top_m(inp.pred, inp.truth, 10)?,
                top30: top_m(inp.pred, inp.truth, 30)?,
                topk: top_k_adaptive(inp.pred, inp.truth)?,
            });
        }
        let n = inputs.len().max(1) as f64;
        let scored: Vec<&HotspotMetrics> = per_hotspot.iter().filter(|h| h.topk.is_some()).collect();
        let topk: Vec<f64> = scored.iter().filter_map(|h| h.topk).collect();
        let labels: Vec<usize> = scored.iter().map(|h| h.ecoregion).collect();
        Ok(MetricReport {
            hotspots: inputs.len(),
            scored: scored.len(),
            mae: mean(per_hotspot.iter().map(|h| h.mae)).unwrap_or(0.0),
            mse: mean(per_hotspot.iter().map(|h| h.mse)).unwrap_or(0.0),
            top10: mean(per_hotspot.iter().filter_map(|h| h.top10)),
            top30: mean(per_hotspot.iter().filter_map(|h| h.top30)),
            topk: mean(topk.iter().copied()),
            per_species_mse: species_sq.into_iter().map(|s| s / n).collect(),
            per_ecoregion_topk: by_ecoregion(&topk, &labels)?,
            per_hotspot,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// `hotspot_id,ecoregion,mae,mse,top10,top30,topk`; skipped scores are empty.
    pub fn write_hotspot_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["hotspot_id", "ecoregion", "mae", "mse", "top10", "top30", "topk"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for h in &self.per_hotspot {
            w.write_record([
                h.hotspot_id.clone(),
                h.ecoregion.to_string(),
                h.mae.to_string(),
                h.mse.to_string(),
                opt(h.top10),
                opt(h.top30),
                opt(h.topk),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))
    }

    pub fn save_hotspot_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_hotspot_csv(std::io::BufWriter::new(f))
    }
}

/// Species-wise comparison of two reports on the same hotspots.
/// `delta[s] = mse_b[s] − mse_a[s]`; positive means model A did better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsedComparison {
    pub delta: Vec<f64>,
    pub a_wins: usize,
    pub b_wins: usize,
    pub ties: usize,
    /// Mean and max of |delta| over the species each model won; zero when it won none.
    pub a_mean: f64,
    pub a_max: f64,
    pub b_mean: f64,
    pub b_max: f64,
}

pub fn species_msed(a: &MetricReport, b: &MetricReport) -> Result<MsedComparison> {
    if a.per_species_mse.len() != b.per_species_mse.len() || a.hotspots != b.hotspots {
        return Err(Error::Shape {
            op: "species-msed",
            detail: format!(
                "reports cover {}x{} and {}x{} (hotspots x species)",
                a.hotspots,
                a.per_species_mse.len(),
                b.hotspots,
                b.per_species_mse.len()
            ),
        });
    }
    let delta: Vec<f64> = a
        .per_species_mse
        .iter()
        .zip(&b.per_species_mse)
        .map(|(x, y)| y - x)
        .collect();
    let summarize = |wins: Vec<f64>| {
        let n = wins.len();
        let mean = if n == 0 {
            0.0
        } else {
            wins.iter().sum::<f64>() / n as f64
        };
        (n, mean, wins.into_iter().fold(0.0, f64::max))
    };
    let (a_wins, a_mean, a_max) = summarize(delta.iter().filter(|&&d| d > 0.0).copied().collect());
    let (b_wins, b_mean, b_max) = summarize(delta.iter().filter(|&&d| d < 0.0).map(|d| -d).collect());
    Ok(MsedComparison {
        ties: delta.len() - a_wins - b_wins,
        delta,
        a_wins,
        b_wins,
        a_mean,
        a_max,
        b_mean,
        b_max,
    })
}
