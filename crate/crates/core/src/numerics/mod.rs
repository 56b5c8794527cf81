//! Dense f64 tensors with hand-written forward and backward passes.
//!
//! Every differentiable op comes as a pair: a forward function that returns
//! its output (plus whatever it needs to remember), and a `*_backward`
//! function that maps the upstream gradient to input gradients. Parameter
//! gradients are accumulated into [`Parameter::grad`].

mod checkpoint;
mod gradcheck;
mod gru;
mod ops;
mod optim;

pub use checkpoint::{
    load_params, read_checkpoint, read_checkpoint_from, save_params, write_checkpoint, write_checkpoint_to, CKPT_MAGIC,
    CKPT_VERSION,
};
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use gru::{gru_cell, gru_sequence, gru_sequence_backward, GruCache, GruParams};
pub use ops::{
    layer_norm, layer_norm_backward, max_pool, max_pool_backward, mean_pool, mean_pool_backward, relu, relu_backward,
    sigmoid, sigmoid_backward, softmax, softmax_backward, tanh, tanh_backward, Axis, LayerNormCache, LAYER_NORM_EPS,
};
pub use optim::{Adam, AdamConfig, Parameter, Parameters};

use rand::Rng;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Panics on an invalid shape; meant for shapes known to be valid.
    pub fn zeros(shape: &[usize]) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Entries drawn uniformly from `[-scale, scale)`.
    pub fn random<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.gen_range(-scale..scale);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            assert!(i < n, "index {i} out of bounds for axis of size {n}");
            acc * n + i
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        same_shape("add", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum of elementwise products.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        same_shape("dot", self, other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!("transpose needs a matrix, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Debug-build check that an op produced only finite values.
    pub(crate) fn debug_finite(self, op: &str) -> Self {
        debug_assert!(self.all_finite(), "{op} produced a non-finite value");
        self
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Shape(format!("rank must be 1..={MAX_RANK}, got {shape:?}")));
    }
    if shape.contains(&0) {
        return Err(Error::Shape(format!("axes must be positive, got {shape:?}")));
    }
    Ok(())
}

pub(crate) fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("{op}: {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// `a · b` for matrices `[n, k] · [k, m]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape(format!("matmul: {:?} x {:?}", a.shape, b.shape)));
    }
    let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    }
    .debug_finite("matmul"))
}

/// Returns `(dA, dB) = (dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    let da = matmul(dc, &b.transpose()?)?;
    let db = matmul(&a.transpose()?, dc)?;
    Ok((da, db))
}

fn split_batch(t: &Tensor) -> Vec<Tensor> {
    let (b, r, c) = (t.shape[0], t.shape[1], t.shape[2]);
    (0..b)
        .map(|i| Tensor {
            shape: vec![r, c],
            data: t.data[i * r * c..(i + 1) * r * c].to_vec(),
        })
        .collect()
}

fn stack(parts: Vec<Tensor>) -> Tensor {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(&parts[0].shape);
    Tensor {
        shape,
        data: parts.into_iter().flat_map(|p| p.data).collect(),
    }
}

/// `[B, n, k] · [B, k, m] → [B, n, m]`.
pub fn batched_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1] {
        return Err(Error::Shape(format!("batched_matmul: {:?} x {:?}", a.shape, b.shape)));
    }
    let parts = split_batch(a)
        .iter()
        .zip(split_batch(b).iter())
        .map(|(x, y)| matmul(x, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(stack(parts))
}

pub fn batched_matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    if dc.rank() != 3 || dc.shape[0] != a.shape[0] {
        return Err(Error::Shape(format!(
            "batched_matmul_backward: upstream {:?}",
            dc.shape
        )));
    }
    let (mut das, mut dbs) = (Vec::new(), Vec::new());
    for ((x, y), g) in split_batch(a).iter().zip(&split_batch(b)).zip(&split_batch(dc)) {
        let (da, db) = matmul_backward(x, y, g)?;
        das.push(da);
        dbs.push(db);
    }
    Ok((stack(das), stack(dbs)))
}
