//! Transformer encoder over the assembled tokens, mean pooling, the
//! prediction head and the encounter-rate cross-entropy.

mod model;

pub use model::{predict_records, Batch, ForwardOutput, Mitree, Prediction};

use rand::Rng;

use crate::config::ModelConfig;
use crate::data::EncounterVector;
use crate::error::{Error, Result};
use crate::numerics::init::xavier_uniform;
use crate::numerics::{Bound, Element, ParamStore, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Clamp applied only when the loss is computed from rates instead of logits.
pub const RATE_CLAMP: f64 = 1e-7;

pub(crate) fn init_linear<T: Element, R: Rng>(
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

fn init_layer_norm<T: Element>(store: &mut ParamStore<T>, name: &str, d: usize) {
    store.insert(format!("{}.gamma", name), Tensor::full(vec![d], T::one()));
    store.insert(format!("{}.beta", name), Tensor::zeros(vec![d]));
}

/// Transformer blocks (`enc.l{i}.*`) and the head (`head.fc1`, `head.fc2`).
pub fn init_encoder<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &ModelConfig, species: usize) {
    let d = cfg.dim;
    for l in 0..cfg.layers {
        let p = format!("enc.l{}", l);
        init_layer_norm(store, &format!("{}.ln1", p), d);
        for proj in ["q", "k", "v", "o"] {
            init_linear(store, rng, &format!("{}.attn.{}", p, proj), d, d);
        }
        init_layer_norm(store, &format!("{}.ln2", p), d);
        init_linear(store, rng, &format!("{}.mlp.fc1", p), d, d * cfg.mlp_ratio);
        init_linear(store, rng, &format!("{}.mlp.fc2", p), d * cfg.mlp_ratio, d);
    }
    init_linear(store, rng, "head.fc1", d, cfg.head_hidden);
    init_linear(store, rng, "head.fc2", cfg.head_hidden, species);
}

/// `x · W + b` over the last axis.
pub fn linear<T: Element>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{}.weight", name))?;
    let b = p.get(&format!("{}.bias", name))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn layer_norm<T: Element>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let g = p.get(&format!("{}.gamma", name))?;
    let b = p.get(&format!("{}.beta", name))?;
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

fn maybe_dropout<T: Element, R: Rng>(tape: &mut Tape<T>, x: Var, p: f64, rng: &mut Option<&mut R>) -> Result<Var> {
    match rng {
        Some(r) if p > 0.0 => tape.dropout(x, p, *r),
        _ => Ok(x),
    }
}

/// Encoder output plus the per-layer attention maps `[N, heads, T, T]`.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub output: Var,
    pub attention: Vec<Var>,
}

fn self_attention<T: Element>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var, heads: usize) -> Result<(Var, Var)> {
    let s = tape.shape(x).to_vec();
    let (n, t, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let split = |tape: &mut Tape<T>, v: Var, axes: &[usize]| -> Result<Var> {
        let v = tape.reshape(v, &[n, t, heads, dh])?;
        tape.permute(v, axes)
    };
    let q = linear(tape, p, &format!("{}.q", name), x)?;
    let k = linear(tape, p, &format!("{}.k", name), x)?;
    let v = linear(tape, p, &format!("{}.v", name), x)?;
    let q = split(tape, q, &[0, 2, 1, 3])?;
    let kt = split(tape, k, &[0, 2, 3, 1])?;
    let v = split(tape, v, &[0, 2, 1, 3])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = tape.softmax(scores, 3)?;
    let ctx = tape.matmul(attn, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[n, t, d])?;
    Ok((linear(tape, p, &format!("{}.o", name), ctx)?, attn))
}

/// Pre-norm blocks: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`, with full
/// bidirectional attention over every token.
pub fn encode<T: Element, R: Rng>(
    tape: &mut Tape<T>,
    p: &Bound,
    tokens: Var,
    cfg: &ModelConfig,
    mut rng: Option<&mut R>,
) -> Result<Encoded> {
    let s = tape.shape(tokens);
    if s.len() != 3 || s[2] != cfg.dim {
        return Err(Error::Shape {
            op: "encode",
            detail: format!("tokens {:?} do not have model dim {}", s, cfg.dim),
        });
    }
    let mut x = tokens;
    let mut attention = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let pre = format!("enc.l{}", l);
        let h = layer_norm(tape, p, &format!("{}.ln1", pre), x)?;
        let (a, attn) = self_attention(tape, p, &format!("{}.attn", pre), h, cfg.heads)?;
        attention.push(attn);
        let a = maybe_dropout(tape, a, cfg.dropout, &mut rng)?;
        x = tape.add(x, a)?;
        let h = layer_norm(tape, p, &format!("{}.ln2", pre), x)?;
        let h = linear(tape, p, &format!("{}.mlp.fc1", pre), h)?;
        let h = tape.gelu(h)?;
        let h = linear(tape, p, &format!("{}.mlp.fc2", pre), h)?;
        let h = maybe_dropout(tape, h, cfg.dropout, &mut rng)?;
        x = tape.add(x, h)?;
    }
    Ok(Encoded { output: x, attention })
}

/// Mean over the token axis: `[N, T, D] → [N, D]`.
pub fn pool<T: Element>(tape: &mut Tape<T>, encoded: Var) -> Result<Var> {
    let s = tape.shape(encoded);
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::Shape {
            op: "pool",
            detail: format!("cannot pool {:?}", s),
        });
    }
    tape.mean(encoded, 1)
}

/// Linear, relu, linear: `[N, D] → [N, S]` logits.
pub fn predict_head<T: Element>(tape: &mut Tape<T>, p: &Bound, pooled: Var) -> Result<Var> {
    let h = linear(tape, p, "head.fc1", pooled)?;
    let h = tape.relu(h)?;
    linear(tape, p, "head.fc2", h)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            op: "cross-entropy",
            detail: format!("{} predictions vs {} targets", a, b),
        });
    }
    Ok(())
}

/// `Σ_s max(z,0) − z·y + ln(1 + e^{−|z|})` for one hotspot, in f64.
pub fn cross_entropy_loss(pred: &Prediction, truth: &EncounterVector) -> Result<f64> {
    check_lengths(pred.logits.len(), truth.len())?;
    Ok(pred
        .logits
        .iter()
        .zip(truth.rates())
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum())
}

/// Mean of per-hotspot sums over the batch.
pub fn batch_cross_entropy(preds: &[Prediction], truths: &[EncounterVector]) -> Result<f64> {
    check_lengths(preds.len(), truths.len())?;
    if preds.is_empty() {
        return Err(Error::Shape {
            op: "cross-entropy",
            detail: "empty batch".into(),
        });
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(truths) {
        total += cross_entropy_loss(p, t)?;
    }
    Ok(total / preds.len() as f64)
}

/// Cross-entropy from rates, clamped to `[RATE_CLAMP, 1 − RATE_CLAMP]`.
pub fn cross_entropy_from_rates(rates: &[f64], truth: &EncounterVector) -> Result<f64> {
    check_lengths(rates.len(), truth.len())?;
    Ok(rates
        .iter()
        .zip(truth.rates())
        .map(|(&p, &y)| {
            let p = p.clamp(RATE_CLAMP, 1.0 - RATE_CLAMP);
            -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig::tiny()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn store(seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        init_encoder(&mut s, &mut rng, &tiny_cfg(), 5);
        s
    }

    #[test]
    fn zero_weights_give_identity() {
        let mut s = store(0);
        let names: Vec<String> = s.names().filter(|n| n.starts_with("enc.")).map(String::from).collect();
        for n in names {
            let t = s.get_mut(&n).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, &[2, 10, 32]);
        let xv = tape.constant(x.clone());
        let out = encode::<f64, ChaCha8Rng>(&mut tape, &p, xv, &tiny_cfg(), None).unwrap();
        assert_eq!(tape.value(out.output), &x);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let s = store(2);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = tape.constant(random_tensor(&mut rng, &[2, 10, 32]));
        let out = encode::<f64, ChaCha8Rng>(&mut tape, &p, xv, &tiny_cfg(), None).unwrap();
        assert_eq!(out.attention.len(), 2);
        for a in &out.attention {
            assert_eq!(tape.shape(*a), &[2, 4, 10, 10]);
            for row in tape.value(*a).data().chunks(10) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(tape.shape(out.output), &[2, 10, 32]);
    }

    #[test]
    fn permuting_tokens_permutes_rows() {
        let s = store(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, &[1, 6, 32]);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut xp = x.clone();
        for (i, &j) in perm.iter().enumerate() {
            xp.data_mut()[i * 32..(i + 1) * 32].copy_from_slice(&x.data()[j * 32..(j + 1) * 32]);
        }
        let run = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let p = s.bind(&mut tape);
            let xv = tape.constant(x);
            let e = encode::<f64, ChaCha8Rng>(&mut tape, &p, xv, &tiny_cfg(), None).unwrap();
            let pooled = pool(&mut tape, e.output).unwrap();
            let logits = predict_head(&mut tape, &p, pooled).unwrap();
            (tape.value(e.output).clone(), tape.value(logits).clone())
        };
        let (e0, l0) = run(x);
        let (e1, l1) = run(xp);
        for (i, &j) in perm.iter().enumerate() {
            for c in 0..32 {
                assert!((e1.data()[i * 32 + c] - e0.data()[j * 32 + c]).abs() < 1e-10);
            }
        }
        assert!(l0.max_abs_diff(&l1) < 1e-10);
    }

    #[test]
    fn pool_means_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 2, 3], &[0.0, 0.0, 0.0, 2.0, 2.0, 2.0]).unwrap());
        let m = pool(&mut tape, x).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 1.0, 1.0]);
        let empty = tape.constant(Tensor::zeros(vec![1, 0, 3]));
        assert!(pool(&mut tape, empty).is_err());
    }

    #[test]
    fn head_matches_dense_pipeline() {
        let s = store(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, &[1, 32]);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let logits = predict_head(&mut tape, &p, xv).unwrap();
        let (w1, b1) = (s.get("head.fc1.weight").unwrap(), s.get("head.fc1.bias").unwrap());
        let (w2, b2) = (s.get("head.fc2.weight").unwrap(), s.get("head.fc2.bias").unwrap());
        let h: Vec<f64> = (0..64)
            .map(|j| {
                let z = b1.data()[j] + (0..32).map(|i| x.data()[i] * w1.data()[i * 64 + j]).sum::<f64>();
                z.max(0.0)
            })
            .collect();
        for k in 0..5 {
            let z = b2.data()[k] + (0..64).map(|j| h[j] * w2.data()[j * 5 + k]).sum::<f64>();
            assert!((z - tape.value(logits).data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_logits_give_ln2_per_species() {
        let pred = Prediction::from_logits(vec![0.0, 0.0]);
        assert_eq!(pred.rates, vec![0.5, 0.5]);
        for t in [[0.0, 1.0], [0.3, 0.9]] {
            let l = cross_entropy_loss(&pred, &EncounterVector::new(t.to_vec()).unwrap()).unwrap();
            assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_matches_scalar_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let truth: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
        let pred = Prediction::from_logits(logits);
        let naive: f64 = pred
            .rates
            .iter()
            .zip(&truth)
            .map(|(p, y)| -y * p.ln() - (1.0 - y) * (1.0 - p).ln())
            .sum();
        let t = EncounterVector::new(truth).unwrap();
        assert!((cross_entropy_loss(&pred, &t).unwrap() - naive).abs() < 1e-9);
        assert!((cross_entropy_from_rates(&pred.rates, &t).unwrap() - naive).abs() < 1e-6);
        let tiny = Prediction::from_logits(vec![-40.0]);
        let zero = EncounterVector::new(vec![0.0]).unwrap();
        assert!(cross_entropy_loss(&tiny, &zero).unwrap() < 1e-15);
    }

    #[test]
    fn logit_gradient_is_rate_minus_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = random_tensor(&mut rng, &[3, 4]);
        let y = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let zv = tape.param(z.clone());
        let loss = tape.bce_with_logits(zv, &y).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(zv).unwrap();
        for i in 0..12 {
            let p = 1.0 / (1.0 + (-z.data()[i]).exp());
            assert!((g.data()[i] - (p - y.data()[i]) / 3.0).abs() < 1e-12);
        }
    }
}
