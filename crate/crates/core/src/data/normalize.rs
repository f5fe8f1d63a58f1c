use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::{HotspotRecord, Split};
use super::raster::RasterPatch;
use crate::error::{Error, Result};

/// Lower bound on a channel's standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub modalities: BTreeMap<String, Vec<ChannelStats>>,
}

/// Training-split records. The only way to obtain one is by filtering on
/// [`Split::Train`], so statistics can never see validation or test rasters.
#[derive(Debug, Clone, Copy)]
pub struct TrainSplit<'a> {
    records: &'a [HotspotRecord],
}

impl<'a> TrainSplit<'a> {
    pub fn of(records: &'a [HotspotRecord]) -> Self {
        TrainSplit { records }
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a HotspotRecord> {
        self.records.iter().filter(|r| r.split == Split::Train)
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-channel population mean and standard deviation over the training split.
pub fn fit_normalization(train: TrainSplit<'_>) -> Result<NormalizationStats> {
    let first = train.iter().next().ok_or(Error::EmptyTrainingSet)?;
    let mut modalities = BTreeMap::new();
    for (name, patch) in &first.rasters {
        let mut stats = Vec::with_capacity(patch.channels());
        for c in 0..patch.channels() {
            let mut count = 0usize;
            let mut sum = 0.0f64;
            for r in train.iter() {
                let ch = r.raster(name)?.channel(c);
                count += ch.len();
                sum += ch.iter().map(|&v| v as f64).sum::<f64>();
            }
            let mean = sum / count as f64;
            let mut ss = 0.0f64;
            for r in train.iter() {
                ss += r
                    .raster(name)?
                    .channel(c)
                    .iter()
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>();
            }
            let std = (ss / count as f64).sqrt().max(STD_FLOOR);
            stats.push(ChannelStats { mean, std });
        }
        modalities.insert(name.clone(), stats);
    }
    Ok(NormalizationStats { modalities })
}

fn normalize_patch(patch: &RasterPatch, stats: &[ChannelStats], name: &str) -> Result<RasterPatch> {
    if stats.len() != patch.channels() {
        return Err(Error::Config(format!(
            "modality `{}` has {} channels but statistics cover {}",
            name,
            patch.channels(),
            stats.len()
        )));
    }
    let mut out = patch.clone();
    for (c, s) in stats.iter().enumerate() {
        for v in out.channel_mut(c) {
            *v = ((*v as f64 - s.mean) / s.std) as f32;
        }
    }
    Ok(out)
}

/// Standardizes every raster channel; targets and labels are untouched.
pub fn normalize(record: &HotspotRecord, stats: &NormalizationStats) -> Result<HotspotRecord> {
    let mut out = record.clone();
    for (name, patch) in out.rasters.iter_mut() {
        let s = stats
            .modalities
            .get(name)
            .ok_or_else(|| Error::MissingModality(name.clone()))?;
        *patch = normalize_patch(patch, s, name)?;
    }
    Ok(out)
}

impl NormalizationStats {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
