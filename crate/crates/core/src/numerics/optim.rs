use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns a fixed, ordered list of parameters.
///
/// `params` and `params_mut` must yield the same parameters in the same order.
pub trait Parameters {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::zero_grad);
    }

    fn num_values(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Adds `other`'s gradients into ours; shapes must line up one to one.
    fn accumulate_grads(&mut self, other: &Self) -> Result<()>
    where
        Self: Sized,
    {
        let theirs = other.params();
        let mine = self.params_mut();
        if mine.len() != theirs.len() {
            return Err(Error::Shape(format!(
                "parameter lists differ in length: {} vs {}",
                mine.len(),
                theirs.len()
            )));
        }
        for (p, q) in mine.into_iter().zip(theirs) {
            p.grad.add_assign(&q.grad).map_err(|e| Error::Parameter {
                name: p.name.clone(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Multiplies every gradient by `k`.
    fn scale_grads(&mut self, k: f64) {
        for p in self.params_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
}

impl Parameters for Vec<Parameter> {
    fn params(&self) -> Vec<&Parameter> {
        self.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.iter_mut().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the current gradients, then zeroes them.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P) {
        let mut params = params.params_mut();
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(
            self.m.len(),
            params.len(),
            "optimizer bound to a different parameter list"
        );
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Parameter { value, grad, .. } = &mut **p;
            for (((x, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Vec<Parameter> {
        vec![Parameter::new("theta", Tensor::vector(vec![v]).unwrap())]
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar(0.7);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut p);
        }
        assert_eq!(p[0].value.data(), &[0.7]);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut p = scalar(0.7);
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        });
        p[0].grad.data_mut()[0] = 3.0;
        adam.step(&mut p);
        assert_eq!(p[0].value.data(), &[0.7]);
        assert_eq!(p[0].grad.data(), &[0.0]);
    }

    #[test]
    fn one_step_on_square_decreases() {
        let mut p = scalar(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        p[0].grad.data_mut()[0] = 2.0;
        adam.step(&mut p);
        let x = p[0].value.data()[0];
        assert!(x * x < 1.0);
        // The first bias-corrected step moves by almost exactly lr.
        assert!((1.0 - x - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = vec![Parameter::new("theta", Tensor::vector(vec![1.0, -0.5]).unwrap())];
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        });
        for _ in 0..200 {
            let x = p[0].value.data().to_vec();
            p[0].grad.data_mut().copy_from_slice(&[2.0 * x[0], 4.0 * x[1]]);
            adam.step(&mut p);
        }
        assert!(
            p[0].value.data().iter().all(|x| x.abs() < 1e-2),
            "{:?}",
            p[0].value.data()
        );
    }

    #[test]
    fn accumulate_and_scale() {
        let mut a = scalar(0.0);
        let mut b = scalar(0.0);
        a[0].grad.data_mut()[0] = 1.0;
        b[0].grad.data_mut()[0] = 2.0;
        a.accumulate_grads(&b).unwrap();
        a.scale_grads(0.5);
        assert_eq!(a[0].grad.data(), &[1.5]);
        let c: Vec<Parameter> = Vec::new();
        assert!(a.accumulate_grads(&c).is_err());
    }
}
