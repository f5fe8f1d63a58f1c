//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value and the
//! information its backward rule needs. [`Tape::backward`] walks the tape in
//! reverse and accumulates gradients into every node that requires them.

use rand::Rng;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, split_axis, strides, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
enum Bcast {
    Same,
    /// Operand repeats with period `len` over the output.
    Suffix(usize),
    Map(Vec<usize>),
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Add {
        a: Var,
        b: Var,
        ba: Bcast,
        bb: Bcast,
    },
    Mul {
        a: Var,
        b: Var,
        ba: Bcast,
        bb: Bcast,
    },
    Scale {
        a: Var,
        c: T,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Mean {
        a: Var,
        axis: usize,
    },
    Sum {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
        rows: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation graph recorded in evaluation order.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn bcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::Shape {
                op,
                detail: format!("cannot broadcast {:?} with {:?}", a, b),
            });
        };
    }
    Ok(out)
}

fn bcast_plan(out: &[usize], input: &[usize]) -> Bcast {
    if out == input {
        return Bcast::Same;
    }
    let len: usize = input.iter().product();
    let k = input.len();
    if k <= out.len() && out[out.len() - k..] == *input {
        return Bcast::Suffix(len);
    }
    let rank = out.len();
    let in_strides = strides(input);
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        let mut off = 0;
        for (d, &i) in idx.iter().enumerate() {
            if d + k >= rank {
                let id = d + k - rank;
                if input[id] != 1 {
                    off += i * in_strides[id];
                }
            }
        }
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Bcast::Map(map)
}

impl Bcast {
    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix(len) => i % len,
            Bcast::Map(m) => m[i],
        }
    }
}

fn reduce_to<T: Element>(g: &[T], plan: &Bcast, len: usize) -> Vec<T> {
    match plan {
        Bcast::Same => g.to_vec(),
        _ => {
            let mut out = vec![T::zero(); len];
            for (i, &v) in g.iter().enumerate() {
                let j = plan.index(i);
                out[j] = out[j] + v;
            }
            out
        }
    }
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let p = d.ho * d.wo;
    for c in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..d.ho {
                    let ii = (oi * d.stride + ki) as isize - d.pad as isize;
                    for oj in 0..d.wo {
                        let jj = (oj * d.stride + kj) as isize - d.pad as isize;
                        dst[oi * d.wo + oj] = if ii >= 0 && jj >= 0 && (ii as usize) < d.h && (jj as usize) < d.w {
                            x[(c * d.h + ii as usize) * d.w + jj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], d: &ConvDims, dx: &mut [T]) {
    let p = d.ho * d.wo;
    for c in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..d.ho {
                    let ii = (oi * d.stride + ki) as isize - d.pad as isize;
                    if ii < 0 || ii as usize >= d.h {
                        continue;
                    }
                    for oj in 0..d.wo {
                        let jj = (oj * d.stride + kj) as isize - d.pad as isize;
                        if jj < 0 || jj as usize >= d.w {
                            continue;
                        }
                        let t = (c * d.h + ii as usize) * d.w + jj as usize;
                        dx[t] = dx[t] + src[oi * d.wo + oj];
                    }
                }
            }
        }
    }
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, node_op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input leaf; gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// `a[..., m, k] · b[k, n]` or batched `a[..., m, k] · b[..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("operands need rank >= 2, got {:?} and {:?}", sa, sb),
            });
        }
        let k = sa[sa.len() - 1];
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("inner dimensions differ: {:?} x {:?}", sa, sb),
            });
        }
        let shared_b = sb.len() == 2;
        let (batch, m) = if shared_b {
            (1, sa[..sa.len() - 1].iter().product())
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::Shape {
                    op: "matmul",
                    detail: format!("batch dimensions differ: {:?} x {:?}", sa, sb),
                });
            }
            (sa[..sa.len() - 2].iter().product(), sa[sa.len() - 2])
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let bs = if shared_b { 0 } else { bi * k * n };
            gemm_nn(
                &av[bi * m * k..(bi + 1) * m * k],
                &bv[bs..bs + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            &[a, b],
        )
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, mul: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = bcast_shape(name, &sa, &sb)?;
        let ba = bcast_plan(&out_shape, &sa);
        let bb = bcast_plan(&out_shape, &sb);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let numel: usize = out_shape.iter().product();
        let out: Vec<T> = (0..numel)
            .map(|i| {
                let (x, y) = (av[ba.index(i)], bv[bb.index(i)]);
                if mul {
                    x * y
                } else {
                    x + y
                }
            })
            .collect();
        let value = Tensor::new(out_shape, out)?;
        let op = if mul {
            Op::Mul { a, b, ba, bb }
        } else {
            Op::Add { a, b, ba, bb }
        };
        self.push(name, value, op, &[a, b])
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, false)
    }

    /// Elementwise product with right-aligned broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("multiply", a, b, true)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let value = self.map_value(a, |x| x * c);
        self.push("scale", value, Op::Scale { a, c }, &[a])
    }

    fn map_value(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.map_value(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", value, Op::Relu { a }, &[a])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let value = self.map_value(a, |x| half * x * (T::one() + (x * inv_sqrt2).erf()));
        self.push("gelu", value, Op::Gelu { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.map_value(a, sigmoid);
        self.push("sigmoid", value, Op::Sigmoid { a }, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "softmax",
                detail: format!("axis {} out of range for {:?}", axis, shape),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(x[base + j * inner]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (x[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("softmax", value, Op::Softmax { a, axis }, &[a])
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` of that length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape {
            op: "layer-norm",
            detail: "scalar input".into(),
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape {
                op: "layer-norm",
                detail: format!(
                    "affine parameters {:?}/{:?} do not match width {}",
                    self.shape(gamma),
                    self.shape(beta),
                    d
                ),
            });
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d.max(1);
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |acc, &v| acc + v) / dn;
            let var = row.iter().fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "layer-norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Mean along `axis`; the axis is removed from the output shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Shape {
                op: "mean",
                detail: format!("cannot average axis {} of {:?}", axis, shape),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let n = T::lit(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v / n;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        self.push("mean", value, Op::Mean { a, axis }, &[a])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push("sum", Tensor::scalar(total), Op::Sum { a }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes
                .iter()
                .all(|&ax| ax < shape.len() && !std::mem::replace(&mut seen[ax], true));
        if !valid {
            return Err(Error::Shape {
                op: "transpose",
                detail: format!("axes {:?} are not a permutation for {:?}", axes, shape),
            });
        }
        let (out_shape, out) = permute_data(self.value(a).data(), &shape, axes);
        let value = Tensor::new(out_shape, out)?;
        self.push("transpose", value, Op::Permute { a, axes: axes.to_vec() }, &[a])
    }

    /// Selects rows of a `[rows, width]` table.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "embedding-gather",
                detail: format!("table must be rank 2, got {:?}", shape),
            });
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape {
                op: "embedding-gather",
                detail: format!("index {} out of range for {} rows", bad, rows),
            });
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&t[i * width..(i + 1) * width]);
        }
        let value = Tensor::new(vec![indices.len(), width], out)?;
        self.push(
            "embedding-gather",
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|&p| self.shape(p).to_vec())
            .ok_or_else(|| Error::Shape {
                op: "concat",
                detail: "no operands".into(),
            })?;
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("axis {} out of range for {:?}", axis, first),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("{:?} incompatible with {:?} along axis {}", s, first, axis),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let t = self.value(a);
        let out = t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("dropout", value, Op::Dropout { a, mask }, &[a])
    }

    /// `x[n, c, h, w]` convolved with `w[o, c, kh, kw]` plus optional `bias[o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: Conv2dGeom) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::Shape {
                op: "convolution-2d",
                detail: format!("input {:?} incompatible with kernel {:?}", sx, sw),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::Shape {
                    op: "convolution-2d",
                    detail: format!("bias {:?} for {} output channels", self.shape(b), sw[0]),
                });
            }
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let (stride, pad) = (geom.stride.max(1), geom.padding);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Shape {
                op: "convolution-2d",
                detail: format!("kernel {}x{} larger than padded input {:?}", kh, kw, sx),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let dims = ConvDims {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        };
        let ckk = c * kh * kw;
        let p = ho * wo;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = bias.map(|b| self.value(b).data());
        let mut cols = vec![T::zero(); ckk * p];
        let mut out = vec![T::zero(); n * o * p];
        for s in 0..n {
            im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], &dims, &mut cols);
            let dst = &mut out[s * o * p..(s + 1) * o * p];
            if let Some(bv) = bv {
                for (oc, &bval) in bv.iter().enumerate() {
                    dst[oc * p..(oc + 1) * p].iter_mut().for_each(|v| *v = bval);
                }
            }
            gemm_nn(wv, &cols, dst, o, ckk, p);
        }
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push("convolution-2d", value, Op::Conv2d { x, w, bias, dims }, &parents)
    }

    /// Max pooling with implicit `-inf` padding; ties resolve to the first window element.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] + 2 * padding < kernel || s[3] + 2 * padding < kernel {
            return Err(Error::Shape {
                op: "max-pool-2d",
                detail: format!("input {:?} with kernel {}", s, kernel),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ho = (h + 2 * padding - kernel) / stride + 1;
        let wo = (w + 2 * padding - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_at = usize::MAX;
                    for ki in 0..kernel {
                        let ii = (oi * stride + ki) as isize - padding as isize;
                        if ii < 0 || ii as usize >= h {
                            continue;
                        }
                        for kj in 0..kernel {
                            let jj = (oj * stride + kj) as isize - padding as isize;
                            if jj < 0 || jj as usize >= w {
                                continue;
                            }
                            let at = base + ii as usize * w + jj as usize;
                            if best_at == usize::MAX || xv[at] > best {
                                best = xv[at];
                                best_at = at;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_at);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push("max-pool-2d", value, Op::MaxPool2d { x, argmax }, &[x])
    }

    /// Binary cross-entropy from logits `[rows, species]`, summed over species and
    /// averaged over rows.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape != targets.shape() || shape.len() != 2 {
            return Err(Error::Shape {
                op: "cross-entropy",
                detail: format!("logits {:?} vs targets {:?}", shape, targets.shape()),
            });
        }
        let rows = shape[0].max(1);
        let z = self.value(logits).data();
        let mut total = T::zero();
        for (&zi, &yi) in z.iter().zip(targets.data()) {
            let term = zi.max(T::zero()) - zi * yi + (T::one() + (-zi.abs()).exp()).ln();
            total = total + term;
        }
        let value = Tensor::scalar(total / T::lit(rows as f64));
        self.push(
            "cross-entropy",
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
                rows,
            },
            &[logits],
        )
    }

    /// Reverse pass from a scalar `root`; replaces gradients of any earlier pass.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("root must be scalar, got {:?}", self.shape(root)),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.shape(root).to_vec();
        grads[root.0] = Some(Tensor::full(shape, T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let shape = self.shape(v).to_vec();
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(data) {
                    *e = *e + d;
                }
            }
            slot @ None => *slot = Some(Tensor::new(shape, data).expect("gradient shape")),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); av.len()];
                    for bi in 0..batch {
                        let bs = if *shared_b { 0 } else { bi * k * n };
                        gemm_nt(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &bv[bs..bs + k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for bi in 0..batch {
                        let bs = if *shared_b { 0 } else { bi * k * n };
                        gemm_tn(
                            &av[bi * m * k..(bi + 1) * m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &mut db[bs..bs + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b, ba, bb } => {
                if self.requires_grad(*a) {
                    let len = self.value(*a).numel();
                    self.accumulate(grads, *a, reduce_to(gd, ba, len));
                }
                if self.requires_grad(*b) {
                    let len = self.value(*b).numel();
                    self.accumulate(grads, *b, reduce_to(gd, bb, len));
                }
            }
            Op::Mul { a, b, ba, bb } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let prod: Vec<T> = gd.iter().enumerate().map(|(j, &gv)| gv * bv[bb.index(j)]).collect();
                    self.accumulate(grads, *a, reduce_to(&prod, ba, av.len()));
                }
                if self.requires_grad(*b) {
                    let prod: Vec<T> = gd.iter().enumerate().map(|(j, &gv)| gv * av[ba.index(j)]).collect();
                    self.accumulate(grads, *b, reduce_to(&prod, bb, bv.len()));
                }
            }
            Op::Scale { a, c } => {
                let d = gd.iter().map(|&v| v * *c).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                let half = T::lit(0.5);
                let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        let cdf = half * (T::one() + (xv * inv_sqrt2).erf());
                        let pdf = (-half * xv * xv).exp() * inv_sqrt_2pi;
                        gv * (cdf + xv * pdf)
                    })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * len * inner + ii;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot = dot + gd[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let t = base + j * inner;
                            d[t] = y[t] * (gd[t] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let dwidth = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                let rows = rstd.len();
                let dn = T::lit(dwidth as f64);
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![T::zero(); dwidth];
                    let mut db = vec![T::zero(); dwidth];
                    for r in 0..rows {
                        for j in 0..dwidth {
                            let t = r * dwidth + j;
                            dg[j] = dg[j] + gd[t] * xhat[t];
                            db[j] = db[j] + gd[t];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for r in 0..rows {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..dwidth {
                            let t = r * dwidth + j;
                            let dxh = gd[t] * gam[j];
                            mean_dxh = mean_dxh + dxh;
                            mean_dxh_xh = mean_dxh_xh + dxh * xhat[t];
                        }
                        mean_dxh = mean_dxh / dn;
                        mean_dxh_xh = mean_dxh_xh / dn;
                        for j in 0..dwidth {
                            let t = r * dwidth + j;
                            let dxh = gd[t] * gam[j];
                            dx[t] = rstd[r] * (dxh - mean_dxh - xhat[t] * mean_dxh_xh);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Mean { a, axis } => {
                let shape = self.shape(*a);
                let (outer, len, inner) = split_axis(shape, *axis);
                let n = T::lit(len as f64);
                let mut d = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for ii in 0..inner {
                            d[(o * len + j) * inner + ii] = gd[o * inner + ii] / n;
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sum { a } => {
                let d = vec![gd[0]; self.value(*a).numel()];
                self.accumulate(grads, *a, d);
            }
            Op::Reshape { a } => {
                self.accumulate(grads, *a, gd.to_vec());
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (_, d) = permute_data(gd, g.shape(), &inverse);
                self.accumulate(grads, *a, d);
            }
            Op::Gather { table, indices } => {
                let shape = self.shape(*table);
                let width = shape[1];
                let mut d = vec![T::zero(); shape[0] * width];
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..width {
                        d[idx * width + j] = d[idx * width + j] + gd[r * width + j];
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[start..start + len * inner]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += len;
                }
            }
            Op::Dropout { a, mask } => {
                let d = gd.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Conv2d { x, w, bias, dims } => {
                let d = *dims;
                let ckk = d.c * d.kh * d.kw;
                let p = d.ho * d.wo;
                let plane = d.c * d.h * d.w;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.requires_grad(*x);
                let need_w = self.requires_grad(*w);
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        let mut db = vec![T::zero(); d.o];
                        for s in 0..d.n {
                            for (oc, dbv) in db.iter_mut().enumerate() {
                                let start = (s * d.o + oc) * p;
                                *dbv = gd[start..start + p].iter().fold(*dbv, |acc, &v| acc + v);
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
                let mut cols = vec![T::zero(); ckk * p];
                let mut dw = if need_w { vec![T::zero(); wv.len()] } else { Vec::new() };
                let mut dx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
                let mut dcols = if need_x { vec![T::zero(); ckk * p] } else { Vec::new() };
                for s in 0..d.n {
                    let gs = &gd[s * d.o * p..(s + 1) * d.o * p];
                    if need_w {
                        im2col(&xv[s * plane..(s + 1) * plane], &d, &mut cols);
                        gemm_nt(gs, &cols, &mut dw, d.o, p, ckk);
                    }
                    if need_x {
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        gemm_tn(wv, gs, &mut dcols, d.o, ckk, p);
                        col2im(&dcols, &d, &mut dx[s * plane..(s + 1) * plane]);
                    }
                }
                if need_w {
                    self.accumulate(grads, *w, dw);
                }
                if need_x {
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (&at, &gv) in argmax.iter().zip(gd) {
                    d[at] = d[at] + gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::BceWithLogits { logits, targets, rows } => {
                let z = self.value(*logits).data();
                let scale = gd[0] / T::lit(*rows as f64);
                let d = z
                    .iter()
                    .zip(targets)
                    .map(|(&zi, &yi)| (sigmoid(zi) - yi) * scale)
                    .collect();
                self.accumulate(grads, *logits, d);
            }
        }
        Ok(())
    }
}
