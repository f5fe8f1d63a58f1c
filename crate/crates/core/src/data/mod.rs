//! Hotspot data model, RST1/manifest I/O, normalization and synthetic datasets.

pub mod manifest;
pub mod normalize;
pub mod raster;
pub mod rst1;
pub mod synth;

pub use manifest::{
    load_manifest, read_manifest_rows, write_manifest_rows, DataSchema, HotspotRecord, ManifestRow, Split,
};
pub use normalize::{fit_normalization, normalize, ChannelStats, NormalizationStats, TrainSplit, STD_FLOOR};
pub use raster::{read_raster, write_raster, EncounterVector, ModalitySpec, RasterPatch};
pub use raster::{BIOCLIMATE, PEDOLOGIC, SATELLITE};
pub use synth::{synth_generate, OracleConfig, SatFeature, SynthConfig, SynthSummary, VarianceShare};
