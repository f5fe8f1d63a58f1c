//! Fixtures shared by the benchmarks.

use std::collections::BTreeMap;

use mitree_core::data::{EncounterVector, ModalitySpec, RasterPatch, Split};
use mitree_core::HotspotRecord;

/// Cheap deterministic values in `[-1, 1)`.
pub fn wave(n: usize, phase: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (((i * 7919 + phase * 104729) % 2000) as f32) / 1000.0 - 1.0)
        .collect()
}

/// A normalized-looking record with canonical raster shapes.
pub fn record(i: usize, species: usize) -> HotspotRecord {
    let mut rasters = BTreeMap::new();
    for spec in ModalitySpec::canonical() {
        let patch = RasterPatch::new(spec.shape(), wave(spec.numel(), i)).expect("shape");
        rasters.insert(spec.name.clone(), patch);
    }
    let rates = wave(species, i + 1).iter().map(|v| v.abs().min(1.0) as f64).collect();
    HotspotRecord {
        id: format!("h{:05}", i),
        lat: 0.0,
        lon: 0.0,
        ecoregion: [i % 8; 4],
        split: Split::Train,
        rasters,
        target: Some(EncounterVector::new(rates).expect("rates in range")),
    }
}
