//! Central finite-difference verification of reverse-mode gradients (64-bit).

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One coordinate of one named parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub probe: Probe,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub results: Vec<ProbeResult>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.results.iter().map(|r| r.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ProbeResult> {
        self.results.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - c| / max(1, |a|, |c|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Shape {
            op: "grad-check",
            detail: format!("objective must be scalar, got {:?}", t.shape()),
        });
    }
    let y = t.data()[0];
    if !y.is_finite() {
        return Err(Error::NonFinite { op: "grad-check" });
    }
    Ok(y)
}

/// Max relative error between the tape gradient of `f` at `x` and central differences
/// with step `h`, over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    scalar_of(&tape, y)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |point: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let y = f(&mut tape, v)?;
        scalar_of(&tape, y)
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check of selected parameter coordinates of a model objective.
pub fn grad_check_params<F>(f: F, params: &ParamStore<f64>, probes: &[Probe], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let y = f(&mut tape, &bound)?;
    scalar_of(&tape, y)?;
    tape.backward(y)?;
    let grads = params.collect_grads(&tape, &bound);
    drop(tape);

    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind_frozen(&mut tape);
        let y = f(&mut tape, &bound)?;
        scalar_of(&tape, y)
    };
    let mut work = params.clone();
    let mut results = Vec::with_capacity(probes.len());
    for probe in probes {
        let original = params
            .get(&probe.name)
            .and_then(|t| t.data().get(probe.index).copied())
            .ok_or_else(|| Error::Config(format!("probe {:?} out of range", probe)))?;
        let set = |w: &mut ParamStore<f64>, v: f64| {
            w.get_mut(&probe.name).expect("probe target").data_mut()[probe.index] = v;
        };
        set(&mut work, original + h);
        let up = eval(&work)?;
        set(&mut work, original - h);
        let down = eval(&work)?;
        set(&mut work, original);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[&probe.name].data()[probe.index];
        results.push(ProbeResult {
            probe: probe.clone(),
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(GradCheckReport { results })
}
