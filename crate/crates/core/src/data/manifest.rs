//! Manifest CSV (`hotspot_id,lat,lon,eco1..eco4,split,sat_path,ped_path,bio_path,target_path`)
//! and the in-memory hotspot records it describes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::raster::{read_raster, read_target, EncounterVector, ModalitySpec, RasterPatch};
use super::raster::{BIOCLIMATE, PEDOLOGIC, SATELLITE};
use crate::error::{Error, Result};

pub const COLUMNS: [&str; 12] = [
    "hotspot_id",
    "lat",
    "lon",
    "eco1",
    "eco2",
    "eco3",
    "eco4",
    "split",
    "sat_path",
    "ped_path",
    "bio_path",
    "target_path",
];

/// Raster column for each modality name.
pub const MODALITY_COLUMNS: [(&str, &str); 3] = [
    (SATELLITE, "sat_path"),
    (PEDOLOGIC, "ped_path"),
    (BIOCLIMATE, "bio_path"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(other.to_string()),
        }
    }
}

/// One manifest line, with file references left unresolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub hotspot_id: String,
    pub lat: f64,
    pub lon: f64,
    pub ecoregion: [usize; 4],
    pub split: Split,
    pub sat_path: String,
    pub ped_path: String,
    pub bio_path: String,
    pub target_path: Option<String>,
}

impl ManifestRow {
    pub fn raster_path(&self, modality: &str) -> Option<&str> {
        match modality {
            SATELLITE => Some(&self.sat_path),
            PEDOLOGIC => Some(&self.ped_path),
            BIOCLIMATE => Some(&self.bio_path),
            _ => None,
        }
    }
}

/// What a dataset must look like for a given model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSchema {
    pub modalities: Vec<ModalitySpec>,
    pub species: usize,
    pub ecoregion_counts: [usize; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct HotspotRecord {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    /// Labels for ecoregion levels I through IV.
    pub ecoregion: [usize; 4],
    pub split: Split,
    pub rasters: BTreeMap<String, RasterPatch>,
    pub target: Option<EncounterVector>,
}

impl HotspotRecord {
    pub fn raster(&self, modality: &str) -> Result<&RasterPatch> {
        self.rasters
            .get(modality)
            .ok_or_else(|| Error::MissingModality(modality.to_string()))
    }

    /// Label at ecoregion `level` (1..=4).
    pub fn ecoregion_label(&self, level: usize) -> usize {
        self.ecoregion[level - 1]
    }
}

fn parse_field<T: FromStr>(row: usize, column: &str, raw: &str) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::BadRow {
        row,
        detail: format!("cannot parse `{}` in column {}", raw, column),
    })
}

/// Parses manifest rows. `target_path` may be absent entirely (prediction-only manifests).
pub fn read_manifest_rows(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut idx = BTreeMap::new();
    for name in &COLUMNS[..11] {
        idx.insert(*name, col(name).ok_or_else(|| Error::MissingColumn(name.to_string()))?);
    }
    let target_col = col("target_path");
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let get = |name: &str| rec.get(idx[name]).unwrap_or("");
        let split_raw = get("split");
        let split = split_raw
            .trim()
            .parse::<Split>()
            .map_err(|tag| Error::UnknownSplit { row, tag })?;
        let mut ecoregion = [0usize; 4];
        for (l, slot) in ecoregion.iter_mut().enumerate() {
            let name = COLUMNS[3 + l];
            *slot = parse_field(row, name, get(name))?;
        }
        let target_path = target_col
            .and_then(|c| rec.get(c))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_owned);
        rows.push(ManifestRow {
            hotspot_id: get("hotspot_id").to_string(),
            lat: parse_field(row, "lat", get("lat"))?,
            lon: parse_field(row, "lon", get("lon"))?,
            ecoregion,
            split,
            sat_path: get("sat_path").to_string(),
            ped_path: get("ped_path").to_string(),
            bio_path: get("bio_path").to_string(),
            target_path,
        });
    }
    Ok(rows)
}

pub fn render_manifest(rows: &[ManifestRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for r in rows {
        let eco: Vec<String> = r.ecoregion.iter().map(|e| e.to_string()).collect();
        w.write_record([
            r.hotspot_id.as_str(),
            &r.lat.to_string(),
            &r.lon.to_string(),
            &eco[0],
            &eco[1],
            &eco[2],
            &eco[3],
            &r.split.to_string(),
            &r.sat_path,
            &r.ped_path,
            &r.bio_path,
            r.target_path.as_deref().unwrap_or(""),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_manifest_rows(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let text = render_manifest(rows)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn resolve(root: &Path, row: usize, rel: &str) -> Result<PathBuf> {
    let p = root.join(rel);
    if rel.is_empty() || !p.is_file() {
        return Err(Error::DanglingReference { row, path: p });
    }
    Ok(p)
}

/// Reads the manifest and every raster/target it references under `root`.
pub fn load_manifest(path: &Path, root: &Path, schema: &DataSchema) -> Result<Vec<HotspotRecord>> {
    let rows = read_manifest_rows(path)?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| load_row(r, i + 1, root, schema))
        .collect()
}

fn load_row(r: &ManifestRow, row: usize, root: &Path, schema: &DataSchema) -> Result<HotspotRecord> {
    for (l, (&label, &count)) in r.ecoregion.iter().zip(&schema.ecoregion_counts).enumerate() {
        if label >= count {
            return Err(Error::EcoregionOutOfRange {
                row,
                level: l + 1,
                label,
                count,
            });
        }
    }
    let mut rasters = BTreeMap::new();
    for spec in &schema.modalities {
        let rel = r
            .raster_path(&spec.name)
            .ok_or_else(|| Error::Config(format!("modality `{}` has no manifest column", spec.name)))?;
        let patch = read_raster(&resolve(root, row, rel)?)?;
        if !patch.matches(spec) {
            return Err(Error::ModalityShape {
                modality: spec.name.clone(),
                expected: spec.shape(),
                found: patch.shape(),
            });
        }
        rasters.insert(spec.name.clone(), patch);
    }
    let target = match &r.target_path {
        Some(rel) => {
            let t = read_target(&resolve(root, row, rel)?)?;
            if t.len() != schema.species {
                return Err(Error::BadRow {
                    row,
                    detail: format!("target has {} species, expected {}", t.len(), schema.species),
                });
            }
            Some(t)
        }
        None => None,
    };
    Ok(HotspotRecord {
        id: r.hotspot_id.clone(),
        lat: r.lat,
        lon: r.lon,
        ecoregion: r.ecoregion,
        split: r.split,
        rasters,
        target,
    })
}
