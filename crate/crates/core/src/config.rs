//! Model and run configuration shared by the library and the CLI.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DataSchema, ModalitySpec, OracleConfig};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, PlateauConfig};
use crate::tokenizers::residual::{ResidualPreset, ResidualStackConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SatelliteTokenizer {
    /// Residual stack followed by a width projection.
    Residual,
    /// Single ViT-style patch convolution (kernel = stride = 16).
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    pub satellite_tokenizer: SatelliteTokenizer,
    pub residual_preset: ResidualPreset,
    pub pedologic_patch: usize,
    pub use_ecoregion: bool,
    pub ecoregion_level: usize,
    pub ecoregion_counts: [usize; 4],
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 512,
            heads: 8,
            layers: 12,
            mlp_ratio: 4,
            head_hidden: 512,
            satellite_tokenizer: SatelliteTokenizer::Residual,
            residual_preset: ResidualPreset::R18,
            pedologic_patch: 2,
            use_ecoregion: true,
            ecoregion_level: 3,
            ecoregion_counts: [8, 8, 8, 8],
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: D=32, 4 heads, 2 layers, tiny residual stack.
    pub fn tiny() -> Self {
        ModelConfig {
            dim: 32,
            heads: 4,
            layers: 2,
            mlp_ratio: 4,
            head_hidden: 64,
            residual_preset: ResidualPreset::Tiny,
            ..ModelConfig::default()
        }
    }

    pub fn residual_stack(&self) -> ResidualStackConfig {
        ResidualStackConfig::preset(self.residual_preset)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return bad(format!("model.dim must be a positive multiple of 4, got {}", self.dim));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model.dim {} not divisible by model.heads {}",
                self.dim, self.heads
            ));
        }
        if self.mlp_ratio == 0 || self.head_hidden == 0 {
            return bad("model.mlp_ratio and model.head_hidden must be >= 1".into());
        }
        if self.pedologic_patch == 0 {
            return bad("model.pedologic_patch must be >= 1".into());
        }
        if !(1..=4).contains(&self.ecoregion_level) {
            return bad(format!(
                "model.ecoregion_level must be 1..4, got {}",
                self.ecoregion_level
            ));
        }
        if self.ecoregion_counts.contains(&0) {
            return bad("model.ecoregion_counts entries must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("model.dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Everything that determines parameter shapes and forward semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub model: ModelConfig,
    pub species: usize,
    pub modalities: Vec<ModalitySpec>,
}

impl Architecture {
    pub fn new(model: ModelConfig, species: usize, modalities: Vec<ModalitySpec>) -> Result<Self> {
        model.validate()?;
        if species == 0 {
            return Err(Error::Config("data.species must be >= 1".into()));
        }
        for m in &modalities {
            m.validate()?;
        }
        Ok(Architecture {
            model,
            species,
            modalities,
        })
    }

    pub fn modality(&self, name: &str) -> Result<&ModalitySpec> {
        self.modalities
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::MissingModality(name.to_string()))
    }

    pub fn schema(&self) -> DataSchema {
        DataSchema {
            modalities: self.modalities.clone(),
            species: self.species,
            ecoregion_counts: self.model.ecoregion_counts,
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("architecture serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<String>,
    pub species: usize,
    pub modalities: Vec<ModalitySpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            species: 32,
            modalities: ModalitySpec::canonical(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Stop once the learning rate sits at `min_lr` and patience runs out again.
    pub early_stop: bool,
    pub plateau: PlateauConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 1e-4,
            epochs: 200,
            seed: 0,
            eval_every: 1,
            early_stop: true,
            plateau: PlateauConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        let p = &self.plateau;
        if !(p.factor > 0.0 && p.factor < 1.0) || p.min_lr < 0.0 {
            return Err(Error::Config(
                "train.plateau.factor must be in (0,1) and min_lr >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// The single JSON document accepted by every CLI command.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: OracleConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(self.model.clone(), self.data.species, self.data.modalities.clone())
    }
}
