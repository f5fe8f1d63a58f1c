//! Multi-input transformer encoder for species encounter-rate prediction.
//!
//! Satellite, pedologic and bioclimatic rasters are tokenized at their native
//! resolutions, joined with an ecoregion token, encoded with self-attention
//! across all tokens and mapped to per-species encounter rates.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod tokenizers;
pub mod training;

pub use config::{Architecture, DataConfig, ModelConfig, RunConfig, SatelliteTokenizer, TrainConfig};
pub use data::{EncounterVector, HotspotRecord, ModalitySpec, RasterPatch, Split};
pub use encoder::{Batch, Mitree, Prediction};
pub use error::{Error, ErrorKind, Result};
pub use metrics::MetricReport;
pub use numerics::{ParamStore, Tape, Tensor};
pub use tokenizers::{Modality, TokenSequence};
pub use training::{Dataset, RunRecord, TrainOutcome};
