//! ResNet-18-style residual stack used as the satellite patch embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::init::kaiming_normal_fan_out;
use crate::numerics::{Bound, Conv2dGeom, Element, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualPreset {
    /// Widths 64, 128, 256, 512.
    R18,
    /// Widths 8, 16, 32, 64 with the same topology.
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualStackConfig {
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub strides: Vec<usize>,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub pool_stride: usize,
}

impl ResidualStackConfig {
    pub fn preset(p: ResidualPreset) -> Self {
        let widths = match p {
            ResidualPreset::R18 => vec![64, 128, 256, 512],
            ResidualPreset::Tiny => vec![8, 16, 32, 64],
        };
        ResidualStackConfig {
            widths,
            blocks: vec![2, 2, 2, 2],
            strides: vec![1, 2, 2, 2],
            stem_kernel: 7,
            stem_stride: 2,
            pool_stride: 2,
        }
    }

    pub fn downsampling(&self) -> usize {
        self.stem_stride * self.pool_stride * self.strides.iter().product::<usize>()
    }

    pub fn out_width(&self) -> usize {
        *self.widths.last().expect("at least one stage")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty()
            || self.widths.len() != self.blocks.len()
            || self.widths.len() != self.strides.len()
            || self
                .widths
                .iter()
                .chain(&self.blocks)
                .chain(&self.strides)
                .any(|&v| v == 0)
        {
            return Err(Error::Config(
                "residual stack needs matching non-zero widths/blocks/strides".into(),
            ));
        }
        Ok(())
    }

    /// `(name, has_downsample, in_ch, out_ch, stride)` for every block.
    fn block_plan(&self, prefix: &str) -> Vec<(String, bool, usize, usize, usize)> {
        let mut plan = Vec::new();
        let mut in_ch = self.widths[0];
        for (s, (&w, (&nb, &stride))) in self
            .widths
            .iter()
            .zip(self.blocks.iter().zip(&self.strides))
            .enumerate()
        {
            for b in 0..nb {
                let st = if b == 0 { stride } else { 1 };
                let down = st != 1 || in_ch != w;
                plan.push((format!("{}.s{}.b{}", prefix, s, b), down, in_ch, w, st));
                in_ch = w;
            }
        }
        plan
    }
}

fn conv_params<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, o: usize, c: usize, k: usize) {
    store.insert(format!("{}.weight", name), kaiming_normal_fan_out(rng, &[o, c, k, k]));
    store.insert(format!("{}.bias", name), Tensor::zeros(vec![o]));
}

pub fn init_residual_stack<T: Element, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    in_channels: usize,
    cfg: &ResidualStackConfig,
) {
    conv_params(
        store,
        rng,
        &format!("{}.stem", prefix),
        cfg.widths[0],
        in_channels,
        cfg.stem_kernel,
    );
    for (name, down, cin, cout, _) in cfg.block_plan(prefix) {
        conv_params(store, rng, &format!("{}.conv1", name), cout, cin, 3);
        conv_params(store, rng, &format!("{}.conv2", name), cout, cout, 3);
        if down {
            conv_params(store, rng, &format!("{}.down", name), cout, cin, 1);
        }
    }
}

fn conv<T: Element>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
    let w = p.get(&format!("{}.weight", name))?;
    let b = p.get(&format!("{}.bias", name))?;
    tape.conv2d(x, w, Some(b), Conv2dGeom { stride, padding })
}

/// `[n, c, h, w]` → `[n, out_width, h/32, w/32]` for the default topology.
pub fn residual_stack<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    cfg: &ResidualStackConfig,
) -> Result<Var> {
    let stem_pad = cfg.stem_kernel / 2;
    let mut h = conv(tape, p, &format!("{}.stem", prefix), x, cfg.stem_stride, stem_pad)?;
    h = tape.relu(h)?;
    h = tape.max_pool2d(h, 3, cfg.pool_stride, 1)?;
    for (name, down, _, _, stride) in cfg.block_plan(prefix) {
        let mut y = conv(tape, p, &format!("{}.conv1", name), h, stride, 1)?;
        y = tape.relu(y)?;
        y = conv(tape, p, &format!("{}.conv2", name), y, 1, 1)?;
        let shortcut = if down {
            conv(tape, p, &format!("{}.down", name), h, stride, 0)?
        } else {
            h
        };
        let sum = tape.add(y, shortcut)?;
        h = tape.relu(sum)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn downsampling_factor_is_32() {
        assert_eq!(ResidualStackConfig::preset(ResidualPreset::R18).downsampling(), 32);
        assert_eq!(ResidualStackConfig::preset(ResidualPreset::Tiny).downsampling(), 32);
    }

    #[test]
    fn tiny_stack_output_shape() {
        let cfg = ResidualStackConfig::preset(ResidualPreset::Tiny);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        init_residual_stack(&mut store, &mut rng, "sat.res", 4, &cfg);
        // stem + 8 blocks × 2 convs + 3 downsample convs, weight and bias each
        assert_eq!(store.len(), 2 * (1 + 16 + 3));
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::full(vec![2, 4, 64, 64], 0.5));
        let y = residual_stack(&mut tape, &bound, "sat.res", x, &cfg).unwrap();
        assert_eq!(tape.shape(y), &[2, 64, 2, 2]);
    }
}
