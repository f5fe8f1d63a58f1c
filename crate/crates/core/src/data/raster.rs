use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rst1;
use crate::error::{Error, Result};

pub const SATELLITE: &str = "satellite";
pub const PEDOLOGIC: &str = "pedologic";
pub const BIOCLIMATE: &str = "bioclimate";

/// Shape and ground sampling distance of one input modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Meters per pixel; informational only.
    pub gsd_m: f64,
}

impl ModalitySpec {
    pub fn new(name: &str, channels: usize, height: usize, width: usize, gsd_m: f64) -> Self {
        ModalitySpec {
            name: name.to_string(),
            channels,
            height,
            width,
            gsd_m,
        }
    }

    /// R, G, B, NIR at 10 m/pixel, 64×64.
    pub fn satellite() -> Self {
        Self::new(SATELLITE, 4, 64, 64, 10.0)
    }

    pub fn pedologic() -> Self {
        Self::new(PEDOLOGIC, 8, 4, 4, 100.0)
    }

    pub fn bioclimate() -> Self {
        Self::new(BIOCLIMATE, 19, 1, 1, 1000.0)
    }

    pub fn canonical() -> Vec<Self> {
        vec![Self::satellite(), Self::pedologic(), Self::bioclimate()]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "modality `{}` needs channels, height, width >= 1",
                self.name
            )));
        }
        Ok(())
    }
}

/// A `[channels][height][width]` grid stored at native resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterPatch {
    shape: [usize; 3],
    values: Vec<f32>,
}

impl RasterPatch {
    pub fn new(shape: [usize; 3], values: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape {
                op: "raster",
                detail: format!(
                    "shape {:?} needs {} values, got {}",
                    shape,
                    shape.iter().product::<usize>(),
                    values.len()
                ),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "raster" });
        }
        Ok(RasterPatch { shape, values })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn pixels_per_channel(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.pixels_per_channel();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixels_per_channel();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn matches(&self, spec: &ModalitySpec) -> bool {
        self.shape == spec.shape()
    }
}

pub fn read_raster(path: &Path) -> Result<RasterPatch> {
    let (shape, values) = rst1::read(path)?;
    let shape: [usize; 3] = shape.as_slice().try_into().map_err(|_| Error::ShapeLength {
        path: path.into(),
        detail: format!("raster header must be [C,H,W], got {:?}", shape),
    })?;
    RasterPatch::new(shape, values)
}

pub fn write_raster(path: &Path, patch: &RasterPatch) -> Result<()> {
    rst1::write(path, &patch.shape, &patch.values)
}

/// Per-species encounter rates in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncounterVector {
    rates: Vec<f64>,
}

impl EncounterVector {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if let Some((index, &value)) = rates.iter().enumerate().find(|(_, r)| !(0.0..=1.0).contains(*r)) {
            return Err(Error::RateOutOfRange { index, value });
        }
        Ok(EncounterVector { rates })
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }
}

/// Targets are stored as RST1 rasters of shape `[S, 1, 1]`.
pub fn read_target(path: &Path) -> Result<EncounterVector> {
    let patch = read_raster(path)?;
    let [s, h, w] = patch.shape();
    if h != 1 || w != 1 {
        return Err(Error::ShapeLength {
            path: path.into(),
            detail: format!("target must have shape [S,1,1], got [{},{},{}]", s, h, w),
        });
    }
    EncounterVector::new(patch.values().iter().map(|&v| v as f64).collect())
}

pub fn write_target(path: &Path, target: &EncounterVector) -> Result<()> {
    let values: Vec<f32> = target.rates().iter().map(|&v| v as f32).collect();
    rst1::write(path, &[values.len(), 1, 1], &values)
}
