use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// One-dimensional sine-cosine code of `pos` with `dim` entries:
/// `[2i] = sin(pos / 10000^(2i/dim))`, `[2i+1] = cos(pos / 10000^(2i/dim))`.
pub fn sincos_1d(pos: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let angle = pos / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// Fixed 2D embedding for an `h_tok × w_tok` token grid in row-major token order.
/// The first `dim/2` entries encode the row, the second half the column.
pub fn sincos_posembed_2d<T: Element>(h_tok: usize, w_tok: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "positional embedding width must be a positive multiple of 4, got {}",
            dim
        )));
    }
    let mut data = Vec::with_capacity(h_tok * w_tok * dim);
    for r in 0..h_tok {
        let row = sincos_1d(r as f64, dim / 2);
        for c in 0..w_tok {
            let col = sincos_1d(c as f64, dim / 2);
            data.extend(row.iter().chain(&col).map(|&v| T::lit(v)));
        }
    }
    Tensor::new(vec![h_tok * w_tok, dim], data)
}
