//! Seeded synthetic-niche datasets with a known target-generating oracle.
//!
//! Each hotspot gets a level-III ecoregion, bioclimate covariates drawn around
//! an ecoregion mean, and satellite/pedologic rasters made of an ecoregion base
//! colour, a per-hotspot shift and pixel noise. Species encounter rates are
//! `σ(w_s·b + u_{s,e} + v_s·m + c_s)` where `b` is the bioclimate vector and `m`
//! the per-channel satellite means, floored to zero below `zero_floor`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest_rows, ManifestRow, Split};
use super::raster::{write_raster, write_target, EncounterVector, ModalitySpec, RasterPatch};
use super::raster::{BIOCLIMATE, PEDOLOGIC, SATELLITE};
use crate::error::{Error, Result};

/// Stored-value affine maps (`offset + scale·latent`) per modality.
const SAT_AFFINE: (f64, f64) = (1000.0, 300.0);
const PED_AFFINE: (f64, f64) = (20.0, 5.0);
const BIO_AFFINE: (f64, f64) = (15.0, 10.0);

/// Which satellite statistic drives the oracle's satellite term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SatFeature {
    /// Per-channel pixel mean; the per-hotspot shift moves the mean.
    #[default]
    Mean,
    /// Per-channel log pixel spread; the per-hotspot shift scales the noise
    /// and channel means carry only the ecoregion base.
    Texture,
}

/// Knobs of the target-generating oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Rates below this are set to exactly zero.
    pub zero_floor: f64,
    /// Standard deviation of each logit term across hotspots.
    pub bio_weight: f64,
    pub eco_weight: f64,
    pub sat_weight: f64,
    /// Species intercepts `c_s ~ N(bias_mean, bias_std²)`.
    pub bias_mean: f64,
    pub bias_std: f64,
    /// Spread of per-ecoregion means (bioclimate, base colours).
    pub eco_spread: f64,
    pub bio_noise: f64,
    /// Per-hotspot per-channel shift of satellite/pedologic rasters.
    pub raster_shift: f64,
    pub pixel_noise: f64,
    pub sat_feature: SatFeature,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            zero_floor: 0.05,
            bio_weight: 1.5,
            eco_weight: 1.5,
            sat_weight: 1.5,
            bias_mean: -1.0,
            bias_std: 1.0,
            eco_spread: 1.0,
            bio_noise: 0.5,
            raster_shift: 0.5,
            pixel_noise: 1.0,
            sat_feature: SatFeature::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub hotspots: usize,
    pub species: usize,
    pub ecoregion_counts: [usize; 4],
    pub modalities: Vec<ModalitySpec>,
    pub oracle: OracleConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            hotspots: 300,
            species: 32,
            ecoregion_counts: [8, 8, 8, 8],
            modalities: ModalitySpec::canonical(),
            oracle: OracleConfig::default(),
        }
    }
}

/// Fraction of logit variance carried by each oracle term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceShare {
    pub bioclimate: f64,
    pub ecoregion: f64,
    pub satellite: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub hotspots: usize,
    pub species: usize,
    pub split_counts: BTreeMap<Split, usize>,
    pub zero_fraction: f64,
    pub variance_share: VarianceShare,
}

impl SynthConfig {
    fn modality(&self, name: &str) -> Result<&ModalitySpec> {
        self.modalities
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::Config(format!("synthetic data needs a `{}` modality", name)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.hotspots == 0 {
            return Err(Error::Config("hotspot count must be >= 1".into()));
        }
        if self.species == 0 {
            return Err(Error::Config("species count must be >= 1".into()));
        }
        if self.ecoregion_counts.contains(&0) {
            return Err(Error::Config("ecoregion counts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.oracle.zero_floor) {
            return Err(Error::Config("zero_floor must lie in [0, 1)".into()));
        }
        for m in &self.modalities {
            m.validate()?;
        }
        for name in [SATELLITE, PEDOLOGIC, BIOCLIMATE] {
            self.modality(name)?;
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normals(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| normal(rng) * std).collect()
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Multi-channel raster: ecoregion base + per-hotspot shift + pixel noise, then the
/// stored-value affine map. In texture mode the shift scales the noise instead.
fn draw_raster(
    rng: &mut ChaCha8Rng,
    spec: &ModalitySpec,
    base: &[f64],
    shift_std: f64,
    noise_std: f64,
    affine: (f64, f64),
    feature: SatFeature,
) -> RasterPatch {
    let n = spec.height * spec.width;
    let mut values = Vec::with_capacity(spec.numel());
    for &b in base.iter().take(spec.channels) {
        let shift = normal(rng) * shift_std;
        let (mean, spread) = match feature {
            SatFeature::Mean => (b + shift, noise_std),
            SatFeature::Texture => (b, noise_std * shift.exp()),
        };
        for _ in 0..n {
            let latent = mean + normal(rng) * spread;
            values.push((affine.0 + affine.1 * latent) as f32);
        }
    }
    RasterPatch::new(spec.shape(), values).expect("shape matches spec")
}

/// Per-channel latent statistic recovered from the stored raster values.
fn latent_channel_feature(patch: &RasterPatch, affine: (f64, f64), feature: SatFeature, noise_std: f64) -> Vec<f64> {
    (0..patch.channels())
        .map(|c| {
            let ch: Vec<f64> = patch
                .channel(c)
                .iter()
                .map(|&v| (v as f64 - affine.0) / affine.1)
                .collect();
            let mean = ch.iter().sum::<f64>() / ch.len() as f64;
            match feature {
                SatFeature::Mean => mean,
                SatFeature::Texture => {
                    let var = ch.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / ch.len() as f64;
                    (var.sqrt().max(1e-12) / noise_std.max(1e-12)).ln()
                }
            }
        })
        .collect()
}

/// Writes `manifest.csv` plus `sat/`, `ped/`, `bio/`, `targets/` under `out`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64, out: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let sat = cfg.modality(SATELLITE)?.clone();
    let ped = cfg.modality(PEDOLOGIC)?.clone();
    let bio = cfg.modality(BIOCLIMATE)?.clone();
    let o = &cfg.oracle;
    let n_eco = cfg.ecoregion_counts[2];
    let n4 = cfg.ecoregion_counts[3];
    let s_count = cfg.species;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Ecoregion-conditioned means.
    let bio_means: Vec<Vec<f64>> = (0..n_eco)
        .map(|_| normals(&mut rng, bio.channels, o.eco_spread))
        .collect();
    let sat_base: Vec<Vec<f64>> = (0..n_eco)
        .map(|_| normals(&mut rng, sat.channels, o.eco_spread))
        .collect();
    let ped_base: Vec<Vec<f64>> = (0..n_eco)
        .map(|_| normals(&mut rng, ped.channels, o.eco_spread))
        .collect();
    let centers: Vec<(f64, f64)> = (0..n4)
        .map(|_| (rng.gen_range(26.0..48.0), rng.gen_range(-122.0..-70.0)))
        .collect();

    // Oracle weights, scaled so each term has standard deviation ≈ its weight.
    let bio_feature_std = (o.eco_spread.powi(2) + o.bio_noise.powi(2)).sqrt().max(1e-12);
    let sat_feature_std = match o.sat_feature {
        SatFeature::Mean => (o.eco_spread.powi(2) + o.raster_shift.powi(2)).sqrt(),
        SatFeature::Texture => o.raster_shift,
    }
    .max(1e-12);
    let w: Vec<Vec<f64>> = (0..s_count)
        .map(|_| {
            normals(
                &mut rng,
                bio.channels,
                o.bio_weight / (bio_feature_std * (bio.channels as f64).sqrt()),
            )
        })
        .collect();
    let u: Vec<Vec<f64>> = (0..s_count).map(|_| normals(&mut rng, n_eco, o.eco_weight)).collect();
    let v: Vec<Vec<f64>> = (0..s_count)
        .map(|_| {
            normals(
                &mut rng,
                sat.channels,
                o.sat_weight / (sat_feature_std * (sat.channels as f64).sqrt()),
            )
        })
        .collect();
    let c: Vec<f64> = (0..s_count)
        .map(|_| o.bias_mean + normal(&mut rng) * o.bias_std)
        .collect();

    let mut order: Vec<usize> = (0..cfg.hotspots).collect();
    order.shuffle(&mut rng);
    let n_train = ((cfg.hotspots as f64) * 0.70).round() as usize;
    let n_valid = ((cfg.hotspots as f64) * 0.15).round() as usize;
    let mut splits = vec![Split::Test; cfg.hotspots];
    for (rank, &h) in order.iter().enumerate() {
        splits[h] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }

    let mut rows = Vec::with_capacity(cfg.hotspots);
    let mut terms = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let mut logits_all = Vec::new();
    let mut zeros = 0usize;
    for h in 0..cfg.hotspots {
        let l4 = rng.gen_range(0..n4);
        let mut eco = [0usize; 4];
        for (k, slot) in eco.iter_mut().enumerate() {
            *slot = l4 * cfg.ecoregion_counts[k] / n4;
        }
        let e = eco[2];
        let (clat, clon) = centers[l4];
        let lat = ((clat + normal(&mut rng) * 0.5) * 1e4).round() / 1e4;
        let lon = ((clon + normal(&mut rng) * 0.5) * 1e4).round() / 1e4;

        let bio_values: Vec<f32> = bio_means[e]
            .iter()
            .map(|&mu| (BIO_AFFINE.0 + BIO_AFFINE.1 * (mu + normal(&mut rng) * o.bio_noise)) as f32)
            .collect();
        let bio_patch = RasterPatch::new(bio.shape(), bio_values).expect("bioclimate shape");
        let sat_patch = draw_raster(
            &mut rng,
            &sat,
            &sat_base[e],
            o.raster_shift,
            o.pixel_noise,
            SAT_AFFINE,
            o.sat_feature,
        );
        let ped_patch = draw_raster(
            &mut rng,
            &ped,
            &ped_base[e],
            o.raster_shift,
            o.pixel_noise,
            PED_AFFINE,
            SatFeature::Mean,
        );

        let b_lat: Vec<f64> = bio_patch
            .values()
            .iter()
            .map(|&x| (x as f64 - BIO_AFFINE.0) / BIO_AFFINE.1)
            .collect();
        let m_lat = latent_channel_feature(&sat_patch, SAT_AFFINE, o.sat_feature, o.pixel_noise);
        let mut rates = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let tb: f64 = w[s].iter().zip(&b_lat).map(|(a, b)| a * b).sum();
            let te = u[s][e];
            let tm: f64 = v[s].iter().zip(&m_lat).map(|(a, b)| a * b).sum();
            let logit = tb + te + tm + c[s];
            terms[0].push(tb);
            terms[1].push(te);
            terms[2].push(tm);
            terms[3].push(c[s]);
            logits_all.push(logit);
            let mut r = sigmoid(logit);
            if r < o.zero_floor {
                r = 0.0;
                zeros += 1;
            }
            rates.push(r);
        }

        let id = format!("h{:05}", h);
        let row = ManifestRow {
            hotspot_id: id.clone(),
            lat,
            lon,
            ecoregion: eco,
            split: splits[h],
            sat_path: format!("sat/{}.rst", id),
            ped_path: format!("ped/{}.rst", id),
            bio_path: format!("bio/{}.rst", id),
            target_path: Some(format!("targets/{}.rst", id)),
        };
        write_raster(&out.join(&row.sat_path), &sat_patch)?;
        write_raster(&out.join(&row.ped_path), &ped_patch)?;
        write_raster(&out.join(&row.bio_path), &bio_patch)?;
        let target = EncounterVector::new(rates.iter().map(|&r| r as f32 as f64).collect())?;
        write_target(&out.join(row.target_path.as_deref().expect("set above")), &target)?;
        rows.push(row);
    }
    let manifest = out.join("manifest.csv");
    write_manifest_rows(&manifest, &rows)?;

    let total_var = variance(&logits_all).max(1e-300);
    let share = |i: usize| variance(&terms[i]) / total_var;
    let mut split_counts = BTreeMap::new();
    for s in &splits {
        *split_counts.entry(*s).or_insert(0) += 1;
    }
    Ok(SynthSummary {
        manifest,
        hotspots: cfg.hotspots,
        species: s_count,
        split_counts,
        zero_fraction: zeros as f64 / (cfg.hotspots * s_count) as f64,
        variance_share: VarianceShare {
            bioclimate: share(0),
            ecoregion: share(1),
            satellite: share(2),
            intercept: share(3),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{load_manifest, DataSchema};

    fn small(hotspots: usize) -> SynthConfig {
        SynthConfig {
            hotspots,
            species: 6,
            ..SynthConfig::default()
        }
    }

    fn schema(cfg: &SynthConfig) -> DataSchema {
        DataSchema {
            modalities: cfg.modalities.clone(),
            species: cfg.species,
            ecoregion_counts: cfg.ecoregion_counts,
        }
    }

    fn dir_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn deterministic_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = small(12);
        synth_generate(&cfg, 5, a.path()).unwrap();
        synth_generate(&cfg, 5, b.path()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    }

    #[test]
    fn rates_in_range_and_zero_inflated() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(100);
        let summary = synth_generate(&cfg, 1, dir.path()).unwrap();
        let recs = load_manifest(&summary.manifest, dir.path(), &schema(&cfg)).unwrap();
        assert_eq!(recs.len(), 100);
        let mut zeros = 0;
        for r in &recs {
            for &x in r.target.as_ref().unwrap().rates() {
                assert!((0.0..=1.0).contains(&x));
                zeros += (x == 0.0) as usize;
            }
        }
        assert!(zeros > 0);
        assert!(summary.zero_fraction > 0.0);
        assert_eq!(summary.split_counts[&Split::Train], 70);
        assert_eq!(summary.split_counts[&Split::Valid], 15);
        assert_eq!(summary.split_counts[&Split::Test], 15);
    }

    #[test]
    fn eco_weight_controls_variance_share() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(60);
        cfg.oracle.bio_weight = 0.3;
        cfg.oracle.sat_weight = 0.3;
        cfg.oracle.bias_std = 0.2;
        cfg.oracle.eco_weight = 2.0;
        let s = synth_generate(&cfg, 2, dir.path()).unwrap();
        assert!(s.variance_share.ecoregion > 0.5, "{:?}", s.variance_share);
    }

    #[test]
    fn zero_hotspots_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            synth_generate(&small(0), 0, dir.path()),
            Err(Error::Config(_))
        ));
    }
}
