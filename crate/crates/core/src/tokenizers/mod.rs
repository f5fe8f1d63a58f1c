//! Per-modality tokenizers. Each input is embedded at its native resolution
//! into D-wide tokens; 2D modalities additionally get fixed sine-cosine
//! position codes. The ecoregion label becomes a single global token.

pub mod posembed;
pub mod residual;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Architecture, SatelliteTokenizer};
use crate::data::{BIOCLIMATE, PEDOLOGIC, SATELLITE};
use crate::error::{Error, Result};
use crate::numerics::init::xavier_uniform;
use crate::numerics::{Bound, Conv2dGeom, Element, ParamStore, Tape, Tensor, Var};

pub use posembed::sincos_posembed_2d;
pub use residual::{residual_stack, ResidualPreset, ResidualStackConfig};

/// Kernel and stride of the single-convolution satellite tokenizer.
pub const SAT_CONV_PATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Satellite,
    Pedologic,
    Bioclimate,
    Ecoregion,
}

/// `[batch, tokens, dim]` tokens with the modality of each token position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Var,
    pub provenance: Vec<Modality>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

fn linear_params<T: Element, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) {
    store.insert(
        format!("{}.weight", name),
        xavier_uniform(rng, &[fan_in, fan_out], fan_in, fan_out),
    );
    store.insert(format!("{}.bias", name), Tensor::zeros(vec![fan_out]));
}

fn patch_params<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, c: usize, d: usize, k: usize) {
    let w = xavier_uniform(rng, &[d, c, k, k], c * k * k, d);
    store.insert(format!("{}.weight", name), w);
    store.insert(format!("{}.bias", name), Tensor::zeros(vec![d]));
}

/// Registers every tokenizer parameter for `arch`.
pub fn init_tokenizers<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, arch: &Architecture) -> Result<()> {
    let m = &arch.model;
    let d = m.dim;
    let sat = arch.modality(SATELLITE)?;
    match m.satellite_tokenizer {
        SatelliteTokenizer::Residual => {
            let rs = m.residual_stack();
            rs.validate()?;
            residual::init_residual_stack(store, rng, "sat.res", sat.channels, &rs);
            if rs.out_width() != d {
                linear_params(store, rng, "sat.proj", rs.out_width(), d);
            }
        }
        SatelliteTokenizer::Conv => patch_params(store, rng, "sat.patch", sat.channels, d, SAT_CONV_PATCH),
    }
    let ped = arch.modality(PEDOLOGIC)?;
    patch_params(store, rng, "ped.patch", ped.channels, d, m.pedologic_patch);
    let bio = arch.modality(BIOCLIMATE)?;
    linear_params(store, rng, "bio.proj", bio.numel(), d);
    if m.use_ecoregion {
        let level = m.ecoregion_level;
        linear_params(store, rng, &format!("eco.l{}", level), m.ecoregion_counts[level - 1], d);
    }
    Ok(())
}

fn add_posembed<T: Element>(tape: &mut Tape<T>, tokens: Var, h_tok: usize, w_tok: usize) -> Result<Var> {
    let d = tape.shape(tokens)[2];
    let pe = tape.constant(sincos_posembed_2d(h_tok, w_tok, d)?);
    tape.add(tokens, pe)
}

/// `[n, d, h, w]` feature map → `[n, h·w, d]` row-major tokens.
fn grid_to_tokens<T: Element>(tape: &mut Tape<T>, fmap: Var) -> Result<(Var, usize, usize)> {
    let s = tape.shape(fmap).to_vec();
    let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
    let t = tape.permute(fmap, &[0, 2, 3, 1])?;
    Ok((tape.reshape(t, &[n, h * w, d])?, h, w))
}

fn check_input<T: Element>(tape: &Tape<T>, x: Var, name: &str, channels: usize) -> Result<[usize; 4]> {
    let s = tape.shape(x);
    if s.len() != 4 || s[1] != channels {
        return Err(Error::Shape {
            op: "tokenize",
            detail: format!("{} input {:?} does not have {} channels", name, s, channels),
        });
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Single convolution with kernel = stride = `patch`, then 2D position codes.
pub fn conv_patch_tokenize<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    patch: usize,
    modality: Modality,
) -> Result<TokenSequence> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || patch == 0 || !s[2].is_multiple_of(patch) || !s[3].is_multiple_of(patch) {
        return Err(Error::Shape {
            op: "tokenize",
            detail: format!(
                "{:?} input {:?} not divisible into {}x{} patches",
                modality, s, patch, patch
            ),
        });
    }
    let w = p.get(&format!("{}.weight", prefix))?;
    let b = p.get(&format!("{}.bias", prefix))?;
    let fmap = tape.conv2d(
        x,
        w,
        Some(b),
        Conv2dGeom {
            stride: patch,
            padding: 0,
        },
    )?;
    let (tokens, h, wd) = grid_to_tokens(tape, fmap)?;
    let tokens = add_posembed(tape, tokens, h, wd)?;
    Ok(TokenSequence {
        tokens,
        provenance: vec![modality; h * wd],
    })
}

/// Satellite tokens from the configured tokenizer (residual stack or patch convolution).
pub fn satellite_tokenize<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    x: Var,
    arch: &Architecture,
) -> Result<TokenSequence> {
    let spec = arch.modality(SATELLITE)?;
    let [n, _, h, w] = check_input(tape, x, SATELLITE, spec.channels)?;
    match arch.model.satellite_tokenizer {
        SatelliteTokenizer::Conv => conv_patch_tokenize(tape, p, "sat.patch", x, SAT_CONV_PATCH, Modality::Satellite),
        SatelliteTokenizer::Residual => {
            let rs = arch.model.residual_stack();
            let f = rs.downsampling();
            if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
                return Err(Error::Shape {
                    op: "tokenize",
                    detail: format!("satellite size {}x{} not divisible by {}", h, w, f),
                });
            }
            let fmap = residual_stack(tape, p, "sat.res", x, &rs)?;
            let (mut tokens, ht, wt) = grid_to_tokens(tape, fmap)?;
            if rs.out_width() != arch.model.dim {
                let pw = p.get("sat.proj.weight")?;
                let pb = p.get("sat.proj.bias")?;
                tokens = tape.matmul(tokens, pw)?;
                tokens = tape.add(tokens, pb)?;
            }
            let tokens = add_posembed(tape, tokens, ht, wt)?;
            debug_assert_eq!(tape.shape(tokens)[0], n);
            Ok(TokenSequence {
                tokens,
                provenance: vec![Modality::Satellite; ht * wt],
            })
        }
    }
}

/// Linear map of a `1×1` raster's channels to one token (no position code).
pub fn bioclim_tokenize<T: Element>(tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<TokenSequence> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[2] != 1 || s[3] != 1 {
        return Err(Error::Shape {
            op: "tokenize",
            detail: format!("bioclimate input {:?} must be 1x1 spatially", s),
        });
    }
    let flat = tape.reshape(x, &[s[0], s[1]])?;
    let w = p.get("bio.proj.weight")?;
    let b = p.get("bio.proj.bias")?;
    let y = tape.matmul(flat, w)?;
    let y = tape.add(y, b)?;
    let d = tape.shape(y)[1];
    let tokens = tape.reshape(y, &[s[0], 1, d])?;
    Ok(TokenSequence {
        tokens,
        provenance: vec![Modality::Bioclimate],
    })
}

/// One token per hotspot: row `label` of the level's table plus bias
/// (a one-hot vector through a linear layer, computed as a gather).
pub fn ecoregion_encode<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    labels: &[usize],
    level: usize,
    count: usize,
) -> Result<TokenSequence> {
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= count) {
        return Err(Error::EcoregionOutOfRange {
            row: row + 1,
            level,
            label,
            count,
        });
    }
    let table = p.get(&format!("eco.l{}.weight", level))?;
    let bias = p.get(&format!("eco.l{}.bias", level))?;
    let rows = tape.gather(table, labels)?;
    let y = tape.add(rows, bias)?;
    let d = tape.shape(y)[1];
    let tokens = tape.reshape(y, &[labels.len(), 1, d])?;
    Ok(TokenSequence {
        tokens,
        provenance: vec![Modality::Ecoregion],
    })
}

/// Concatenates fragments in the fixed order satellite, pedologic, bioclimate, ecoregion.
pub fn assemble<T: Element>(tape: &mut Tape<T>, mut fragments: Vec<TokenSequence>) -> Result<TokenSequence> {
    fragments.sort_by_key(|f| f.provenance.first().copied());
    let first = fragments.first().ok_or_else(|| Error::Shape {
        op: "assemble",
        detail: "no fragments".into(),
    })?;
    let fs = tape.shape(first.tokens).to_vec();
    for f in &fragments {
        let s = tape.shape(f.tokens);
        if s.len() != 3 || s[0] != fs[0] || s[2] != fs[2] {
            return Err(Error::Shape {
                op: "assemble",
                detail: format!("fragment {:?} does not match {:?}", s, fs),
            });
        }
    }
    let vars: Vec<Var> = fragments.iter().map(|f| f.tokens).collect();
    let tokens = tape.concat(&vars, 1)?;
    let provenance = fragments.into_iter().flat_map(|f| f.provenance).collect();
    Ok(TokenSequence { tokens, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::ModalitySpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch(model: ModelConfig) -> Architecture {
        Architecture::new(model, 4, ModalitySpec::canonical()).unwrap()
    }

    fn store(a: &Architecture) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_tokenizers(&mut s, &mut ChaCha8Rng::seed_from_u64(0), a).unwrap();
        s
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn pedologic_patch_matches_unfold_then_linear() {
        let a = arch(ModelConfig::tiny());
        let mut s = store(&a);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        s.insert("ped.patch.bias", random(&mut rng, &[32]));
        let x = random(&mut rng, &[1, 8, 4, 4]);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let seq = conv_patch_tokenize(&mut tape, &p, "ped.patch", xv, 2, Modality::Pedologic).unwrap();
        assert_eq!(tape.shape(seq.tokens), &[1, 4, 32]);
        let w = s.get("ped.patch.weight").unwrap().data();
        let b = s.get("ped.patch.bias").unwrap().data();
        let pe = sincos_posembed_2d::<f64>(2, 2, 32).unwrap();
        let got = tape.value(seq.tokens).data();
        for (t, (pr, pc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            // unfold the patch in (c, ky, kx) order, matching the weight layout
            let mut unfolded = Vec::new();
            for c in 0..8 {
                for ky in 0..2 {
                    for kx in 0..2 {
                        unfolded.push(x.data()[c * 16 + (2 * pr + ky) * 4 + 2 * pc + kx]);
                    }
                }
            }
            for o in 0..32 {
                let dot: f64 = unfolded.iter().enumerate().map(|(i, u)| u * w[o * 32 + i]).sum();
                let want = dot + b[o] + pe.data()[t * 32 + o];
                assert!((got[t * 32 + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_leaves_position_codes() {
        let a = arch(ModelConfig::tiny());
        let s = store(&a);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let xv = tape.constant(Tensor::zeros(vec![1, 8, 4, 4]));
        let seq = conv_patch_tokenize(&mut tape, &p, "ped.patch", xv, 2, Modality::Pedologic).unwrap();
        let pe = sincos_posembed_2d::<f64>(2, 2, 32).unwrap();
        assert_eq!(tape.value(seq.tokens).data(), pe.data());
        let bad = tape.constant(Tensor::zeros(vec![1, 8, 5, 4]));
        assert!(conv_patch_tokenize(&mut tape, &p, "ped.patch", bad, 2, Modality::Pedologic).is_err());
    }

    #[test]
    fn bioclimate_token_is_affine_in_input() {
        let a = arch(ModelConfig::tiny());
        let s = store(&a);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[1, 19, 1, 1]);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let seq = bioclim_tokenize(&mut tape, &p, xv).unwrap();
        assert_eq!(tape.shape(seq.tokens), &[1, 1, 32]);
        let w = s.get("bio.proj.weight").unwrap().data();
        for o in 0..32 {
            let want: f64 = (0..19).map(|i| x.data()[i] * w[i * 32 + o]).sum();
            assert!((tape.value(seq.tokens).data()[o] - want).abs() < 1e-12);
        }
        let zero = tape.constant(Tensor::zeros(vec![1, 19, 1, 1]));
        let z = bioclim_tokenize(&mut tape, &p, zero).unwrap();
        assert!(tape.value(z.tokens).data().iter().all(|&v| v == 0.0));
        let wide = tape.constant(Tensor::zeros(vec![1, 19, 2, 1]));
        assert!(bioclim_tokenize(&mut tape, &p, wide).is_err());
    }

    #[test]
    fn ecoregion_gather_equals_one_hot_product() {
        let a = arch(ModelConfig::tiny());
        let s = store(&a);
        let table = s.get("eco.l3.weight").unwrap().clone();
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let seq = ecoregion_encode(&mut tape, &p, &[0, 1, 5], 3, 8).unwrap();
        let got = tape.value(seq.tokens).data().to_vec();
        for (row, label) in [0usize, 1, 5].into_iter().enumerate() {
            let one_hot: Vec<f64> = (0..8).map(|i| if i == label { 1.0 } else { 0.0 }).collect();
            for o in 0..32 {
                let prod: f64 = (0..8).map(|i| one_hot[i] * table.data()[i * 32 + o]).sum();
                assert_eq!(got[row * 32 + o], prod);
            }
        }
        assert_ne!(got[..32], got[32..64]);
        assert!(matches!(
            ecoregion_encode(&mut tape, &p, &[8], 3, 8),
            Err(Error::EcoregionOutOfRange { label: 8, .. })
        ));
    }

    #[test]
    fn ecoregion_gradient_touches_only_its_row() {
        let a = arch(ModelConfig::tiny());
        let s = store(&a);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let seq = ecoregion_encode(&mut tape, &p, &[6], 3, 8).unwrap();
        let sq = tape.mul(seq.tokens, seq.tokens).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(p.get("eco.l3.weight").unwrap()).unwrap();
        for (i, row) in g.data().chunks(32).enumerate() {
            assert_eq!(row.iter().any(|&v| v != 0.0), i == 6, "row {}", i);
        }
    }

    #[test]
    fn satellite_tokens_depend_on_image() {
        let a = arch(ModelConfig::tiny());
        let s = store(&a);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let x = tape.constant(random(&mut rng, &[2, 4, 64, 64]));
        let seq = satellite_tokenize(&mut tape, &p, x, &a).unwrap();
        assert_eq!(tape.shape(seq.tokens), &[2, 4, 32]);
        let v = tape.value(seq.tokens).data();
        assert!(v[..128].iter().zip(&v[128..]).any(|(a, b)| a != b));
        let wrong = tape.constant(Tensor::zeros(vec![1, 3, 64, 64]));
        assert!(satellite_tokenize(&mut tape, &p, wrong, &a).is_err());
        let odd = tape.constant(Tensor::zeros(vec![1, 4, 48, 48]));
        assert!(satellite_tokenize(&mut tape, &p, odd, &a).is_err());
    }

    #[test]
    fn assemble_orders_fragments_and_checks_width() {
        let mut tape = Tape::<f64>::new();
        let frag = |tape: &mut Tape<f64>, t: usize, d: usize, m: Modality| TokenSequence {
            tokens: tape.constant(Tensor::zeros(vec![1, t, d])),
            provenance: vec![m; t],
        };
        let eco = frag(&mut tape, 1, 8, Modality::Ecoregion);
        let sat = frag(&mut tape, 4, 8, Modality::Satellite);
        let bio = frag(&mut tape, 1, 8, Modality::Bioclimate);
        let ped = frag(&mut tape, 4, 8, Modality::Pedologic);
        let seq = assemble(&mut tape, vec![eco, bio, sat, ped]).unwrap();
        assert_eq!(seq.len(), 10);
        assert_eq!(seq.provenance[0], Modality::Satellite);
        assert_eq!(seq.provenance[4], Modality::Pedologic);
        assert_eq!(seq.provenance[9], Modality::Ecoregion);
        let a = frag(&mut tape, 4, 8, Modality::Satellite);
        let b = frag(&mut tape, 1, 6, Modality::Bioclimate);
        assert!(assemble(&mut tape, vec![a, b]).is_err());
    }
}
