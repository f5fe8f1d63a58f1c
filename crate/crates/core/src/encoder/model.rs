use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{encode, init_encoder, pool, predict_head};
use crate::config::Architecture;
use crate::data::{HotspotRecord, BIOCLIMATE, PEDOLOGIC, SATELLITE};
use crate::error::{Error, Result};
use crate::numerics::{Bound, Element, ParamStore, Tape, Tensor, Var};
use crate::tokenizers::{
    assemble, bioclim_tokenize, conv_patch_tokenize, ecoregion_encode, init_tokenizers, satellite_tokenize, Modality,
    TokenSequence,
};

/// Logits and rates for one hotspot.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub rates: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let rates = logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        Prediction { logits, rates }
    }
}

/// Stacked model inputs for a group of normalized records.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[N, C, H, W]` per modality.
    pub inputs: BTreeMap<String, Tensor<f32>>,
    pub ecoregion: Vec<[usize; 4]>,
    /// `[N, S]` when every record carries a target.
    pub targets: Option<Tensor<f64>>,
}

impl Batch {
    pub fn from_records(records: &[&HotspotRecord], arch: &Architecture) -> Result<Self> {
        let n = records.len();
        let mut inputs = BTreeMap::new();
        for spec in &arch.modalities {
            let mut data = Vec::with_capacity(n * spec.numel());
            for r in records {
                let patch = r.raster(&spec.name)?;
                if !patch.matches(spec) {
                    return Err(Error::ModalityShape {
                        modality: spec.name.clone(),
                        expected: spec.shape(),
                        found: patch.shape(),
                    });
                }
                data.extend_from_slice(patch.values());
            }
            let shape = vec![n, spec.channels, spec.height, spec.width];
            inputs.insert(spec.name.clone(), Tensor::new(shape, data)?);
        }
        let targets = if records.iter().all(|r| r.target.is_some()) && n > 0 {
            let mut data = Vec::with_capacity(n * arch.species);
            for r in records {
                let t = r.target.as_ref().expect("checked above");
                if t.len() != arch.species {
                    return Err(Error::Shape {
                        op: "batch",
                        detail: format!("hotspot {} has {} species, expected {}", r.id, t.len(), arch.species),
                    });
                }
                data.extend_from_slice(t.rates());
            }
            Some(Tensor::new(vec![n, arch.species], data)?)
        } else {
            None
        };
        Ok(Batch {
            ids: records.iter().map(|r| r.id.clone()).collect(),
            inputs,
            ecoregion: records.iter().map(|r| r.ecoregion).collect(),
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn input(&self, name: &str) -> Result<&Tensor<f32>> {
        self.inputs
            .get(name)
            .ok_or_else(|| Error::MissingModality(name.to_string()))
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub tokens: TokenSequence,
    pub encoded: Var,
    pub attention: Vec<Var>,
    /// `[N, S]`.
    pub logits: Var,
}

/// The multi-input encoder: tokenizers, transformer, pooling and head.
#[derive(Debug, Clone, PartialEq)]
pub struct Mitree {
    pub arch: Architecture,
}

impl Mitree {
    pub fn new(arch: Architecture) -> Self {
        Mitree { arch }
    }

    /// Seeded initialization; the same seed gives the same values in any precision.
    pub fn init_params<T: Element>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_tokenizers(&mut store, &mut rng, &self.arch)?;
        init_encoder(&mut store, &mut rng, &self.arch.model, self.arch.species);
        Ok(store)
    }

    pub fn tokenize<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, batch: &Batch) -> Result<TokenSequence> {
        let m = &self.arch.model;
        let sat = tape.constant(batch.input(SATELLITE)?.cast());
        let ped = tape.constant(batch.input(PEDOLOGIC)?.cast());
        let bio = tape.constant(batch.input(BIOCLIMATE)?.cast());
        let mut fragments = vec![
            satellite_tokenize(tape, p, sat, &self.arch)?,
            conv_patch_tokenize(tape, p, "ped.patch", ped, m.pedologic_patch, Modality::Pedologic)?,
            bioclim_tokenize(tape, p, bio)?,
        ];
        if m.use_ecoregion {
            let level = m.ecoregion_level;
            let labels: Vec<usize> = batch.ecoregion.iter().map(|e| e[level - 1]).collect();
            fragments.push(ecoregion_encode(
                tape,
                p,
                &labels,
                level,
                m.ecoregion_counts[level - 1],
            )?);
        }
        assemble(tape, fragments)
    }

    /// Encoder, pooling and head applied to already assembled tokens.
    pub fn forward_tokens<T: Element, R: Rng>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: Var,
        rng: Option<&mut R>,
    ) -> Result<(Var, Vec<Var>, Var)> {
        let enc = encode(tape, p, tokens, &self.arch.model, rng)?;
        let pooled = pool(tape, enc.output)?;
        let logits = predict_head(tape, p, pooled)?;
        Ok((enc.output, enc.attention, logits))
    }

    /// Full pipeline. Dropout is active only when `rng` is given.
    pub fn forward<T: Element, R: Rng>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        batch: &Batch,
        rng: Option<&mut R>,
    ) -> Result<ForwardOutput> {
        let tokens = self.tokenize(tape, p, batch)?;
        let (encoded, attention, logits) = self.forward_tokens(tape, p, tokens.tokens, rng)?;
        Ok(ForwardOutput {
            tokens,
            encoded,
            attention,
            logits,
        })
    }

    /// [`Mitree::forward`] without dropout.
    pub fn forward_eval<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, batch: &Batch) -> Result<ForwardOutput> {
        self.forward::<T, ChaCha8Rng>(tape, p, batch, None)
    }

    /// Inference on a batch, one [`Prediction`] per hotspot.
    pub fn predict<T: Element>(&self, params: &ParamStore<T>, batch: &Batch) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let out = self.forward_eval(&mut tape, &p, batch)?;
        let logits = tape.value(out.logits).to_f64_vec();
        Ok(logits
            .chunks(self.arch.species)
            .map(|z| Prediction::from_logits(z.to_vec()))
            .collect())
    }
}

/// Predictions for `records` in order, evaluated `batch_size` at a time.
pub fn predict_records<T: Element>(
    model: &Mitree,
    params: &ParamStore<T>,
    records: &[HotspotRecord],
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&HotspotRecord> = chunk.iter().collect();
        out.extend(model.predict(params, &Batch::from_records(&refs, &model.arch)?)?);
    }
    Ok(out)
}
