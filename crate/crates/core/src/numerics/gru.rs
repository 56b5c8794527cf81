use rand::Rng;

use super::ops::sigmoid_scalar;
use super::{Parameter, Parameters, Tensor};
use crate::error::{Error, Result};

/// Gated recurrent unit with row-vector convention `x·W + h·U + b`.
///
/// ```text
/// z  = σ(x·Wz + h·Uz + bz)
/// r  = σ(x·Wr + h·Ur + br)
/// h̃  = tanh(x·Wh + (r⊙h)·Uh + bh)
/// h' = (1 − z)⊙h + z⊙h̃
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub wz: Parameter,
    pub wr: Parameter,
    pub wh: Parameter,
    pub uz: Parameter,
    pub ur: Parameter,
    pub uh: Parameter,
    pub bz: Parameter,
    pub br: Parameter,
    pub bh: Parameter,
}

impl GruParams {
    pub fn zeros(prefix: &str, input: usize, hidden: usize) -> Self {
        let p = |n: &str, shape: &[usize]| Parameter::new(format!("{prefix}.{n}"), Tensor::zeros(shape));
        Self {
            wz: p("wz", &[input, hidden]),
            wr: p("wr", &[input, hidden]),
            wh: p("wh", &[input, hidden]),
            uz: p("uz", &[hidden, hidden]),
            ur: p("ur", &[hidden, hidden]),
            uh: p("uh", &[hidden, hidden]),
            bz: p("bz", &[hidden]),
            br: p("br", &[hidden]),
            bh: p("bh", &[hidden]),
        }
    }

    /// Weights uniform in `±1/√hidden`, biases zero.
    pub fn random<R: Rng + ?Sized>(prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut g = Self::zeros(prefix, input, hidden);
        let scale = 1.0 / (hidden as f64).sqrt();
        for p in [&mut g.wz, &mut g.wr, &mut g.wh, &mut g.uz, &mut g.ur, &mut g.uh] {
            p.value = Tensor::random(p.value.shape(), scale, rng);
        }
        g
    }

    pub fn input_size(&self) -> usize {
        self.wz.value.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.wz.value.shape()[1]
    }
}

impl Parameters for GruParams {
    fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.wz, &self.wr, &self.wh, &self.uz, &self.ur, &self.uh, &self.bz, &self.br, &self.bh,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.wz,
            &mut self.wr,
            &mut self.wh,
            &mut self.uz,
            &mut self.ur,
            &mut self.uh,
            &mut self.bz,
            &mut self.br,
            &mut self.bh,
        ]
    }
}

/// `out += x·W` for `W` of shape `[x.len(), out.len()]`.
fn add_vec_mat(out: &mut [f64], x: &[f64], w: &Tensor) {
    let cols = out.len();
    for (i, &xv) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w.data()[i * cols..(i + 1) * cols]) {
            *o += xv * wv;
        }
    }
}

/// `out += W·g`, the input-side gradient of `x·W`.
fn add_mat_vec(out: &mut [f64], w: &Tensor, g: &[f64]) {
    let cols = g.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o += w.data()[i * cols..(i + 1) * cols]
            .iter()
            .zip(g)
            .map(|(a, b)| a * b)
            .sum::<f64>();
    }
}

/// `dW += xᵀ·g`.
fn add_outer(dw: &mut Tensor, x: &[f64], g: &[f64]) {
    let cols = g.len();
    for (i, &xv) in x.iter().enumerate() {
        for (d, &gv) in dw.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(g) {
            *d += xv * gv;
        }
    }
}

fn add(out: &mut Tensor, g: &[f64]) {
    for (o, v) in out.data_mut().iter_mut().zip(g) {
        *o += v;
    }
}

#[derive(Debug, Clone)]
struct Step {
    x: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
}

fn step(p: &GruParams, x: &[f64], h: &[f64]) -> (Vec<f64>, Step) {
    let n = h.len();
    let gate = |w: &Parameter, u: &Parameter, b: &Parameter| {
        let mut a = b.value.data().to_vec();
        add_vec_mat(&mut a, x, &w.value);
        add_vec_mat(&mut a, h, &u.value);
        a.into_iter().map(sigmoid_scalar).collect::<Vec<_>>()
    };
    let z = gate(&p.wz, &p.uz, &p.bz);
    let r = gate(&p.wr, &p.ur, &p.br);
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let mut a = p.bh.value.data().to_vec();
    add_vec_mat(&mut a, x, &p.wh.value);
    add_vec_mat(&mut a, &rh, &p.uh.value);
    let cand: Vec<f64> = a.into_iter().map(f64::tanh).collect();
    let out = (0..n).map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i]).collect();
    (
        out,
        Step {
            x: x.to_vec(),
            h: h.to_vec(),
            z,
            r,
            cand,
        },
    )
}

/// Accumulates parameter gradients; returns `(dx, dh_prev)`.
fn step_backward(p: &mut GruParams, s: &Step, dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = dout.len();
    let mut dx = vec![0.0; s.x.len()];
    let mut dh: Vec<f64> = (0..n).map(|i| dout[i] * (1.0 - s.z[i])).collect();

    let da_h: Vec<f64> = (0..n)
        .map(|i| dout[i] * s.z[i] * (1.0 - s.cand[i] * s.cand[i]))
        .collect();
    let rh: Vec<f64> = s.r.iter().zip(&s.h).map(|(a, b)| a * b).collect();
    add_outer(&mut p.wh.grad, &s.x, &da_h);
    add_outer(&mut p.uh.grad, &rh, &da_h);
    add(&mut p.bh.grad, &da_h);
    add_mat_vec(&mut dx, &p.wh.value, &da_h);
    let mut drh = vec![0.0; n];
    add_mat_vec(&mut drh, &p.uh.value, &da_h);

    let da_z: Vec<f64> = (0..n)
        .map(|i| dout[i] * (s.cand[i] - s.h[i]) * s.z[i] * (1.0 - s.z[i]))
        .collect();
    let da_r: Vec<f64> = (0..n).map(|i| drh[i] * s.h[i] * s.r[i] * (1.0 - s.r[i])).collect();
    for i in 0..n {
        dh[i] += drh[i] * s.r[i];
    }
    for (w, u, b, da) in [
        (&mut p.wz, &mut p.uz, &mut p.bz, &da_z),
        (&mut p.wr, &mut p.ur, &mut p.br, &da_r),
    ] {
        add_outer(&mut w.grad, &s.x, da);
        add_outer(&mut u.grad, &s.h, da);
        add(&mut b.grad, da);
        add_mat_vec(&mut dx, &w.value, da);
        add_mat_vec(&mut dh, &u.value, da);
    }
    (dx, dh)
}

/// One application of the cell.
pub fn gru_cell(p: &GruParams, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if x.len() != p.input_size() || h.len() != p.hidden_size() {
        return Err(Error::Shape(format!(
            "gru_cell: input {}, hidden {} for a {}→{} cell",
            x.len(),
            h.len(),
            p.input_size(),
            p.hidden_size()
        )));
    }
    Ok(step(p, x, h).0)
}

#[derive(Debug, Clone)]
pub struct GruCache {
    steps: Vec<Option<Step>>,
    input_shape: Vec<usize>,
}

/// Runs the cell over the rows of `inputs` from a zero state and returns the last state.
/// Rows whose mask entry is false carry the previous state through unchanged.
pub fn gru_sequence(p: &GruParams, inputs: &Tensor, mask: Option<&[bool]>) -> Result<(Vec<f64>, GruCache)> {
    if inputs.rank() != 2 || inputs.cols() != p.input_size() {
        return Err(Error::Shape(format!(
            "gru_sequence: inputs {:?} for input size {}",
            inputs.shape(),
            p.input_size()
        )));
    }
    let t = inputs.rows();
    if let Some(m) = mask {
        if m.len() != t {
            return Err(Error::Dimension {
                left: m.len(),
                right: t,
            });
        }
    }
    let mut h = vec![0.0; p.hidden_size()];
    let mut steps = Vec::with_capacity(t);
    for i in 0..t {
        if mask.map_or(true, |m| m[i]) {
            let (next, s) = step(p, inputs.row(i), &h);
            h = next;
            steps.push(Some(s));
        } else {
            steps.push(None);
        }
    }
    Ok((
        h,
        GruCache {
            steps,
            input_shape: inputs.shape().to_vec(),
        },
    ))
}

/// Backpropagates through time from the gradient of the last state.
pub fn gru_sequence_backward(p: &mut GruParams, cache: &GruCache, dh_last: &[f64]) -> Result<Tensor> {
    if dh_last.len() != p.hidden_size() {
        return Err(Error::Dimension {
            left: dh_last.len(),
            right: p.hidden_size(),
        });
    }
    let mut dinputs = Tensor::zeros(&cache.input_shape);
    let mut dh = dh_last.to_vec();
    for (i, s) in cache.steps.iter().enumerate().rev() {
        if let Some(s) = s {
            let (dx, dprev) = step_backward(p, s, &dh);
            dinputs.row_mut(i).copy_from_slice(&dx);
            dh = dprev;
        }
    }
    Ok(dinputs)
}
