use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Parameters;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Step size; the actual step for a coordinate is `epsilon · max(1, |θ|)`.
    pub epsilon: f64,
    /// Coordinates checked per parameter (all of them when the parameter is smaller).
    pub samples_per_param: usize,
    /// Denominator floor of the relative error, so near-zero gradients compare absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            samples_per_param: 32,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares the gradients already stored in `params` with central differences of `f`.
///
/// `f` must be deterministic: it is evaluated twice at the unperturbed point and the
/// two values must agree bit for bit. Parameter values are restored exactly.
pub fn gradient_check<P, F>(params: &mut P, mut f: F, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    P: Parameters,
    F: FnMut(&P) -> Result<f64>,
{
    let first = f(params)?;
    let second = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let count = params.params().len();
    let mut checks = Vec::with_capacity(count);
    for pi in 0..count {
        let (name, len) = {
            let p = &params.params()[pi];
            (p.name.clone(), p.len())
        };
        let coords: Vec<usize> = if len <= config.samples_per_param {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, config.samples_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = ParamCheck {
            name,
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &coords {
            let (orig, analytic) = {
                let p = &params.params()[pi];
                (p.value.data()[i], p.grad.data()[i])
            };
            let h = config.epsilon * orig.abs().max(1.0);
            params.params_mut()[pi].value.data_mut()[i] = orig + h;
            let plus = f(params)?;
            params.params_mut()[pi].value.data_mut()[i] = orig - h;
            let minus = f(params)?;
            params.params_mut()[pi].value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(config.floor);
            if rel > check.max_rel_error || !rel.is_finite() {
                check.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                check.worst_index = i;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        checks.push(check);
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: checks,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Parameter, Tensor};
    use std::cell::Cell;

    fn params(values: Vec<f64>) -> Vec<Parameter> {
        vec![Parameter::new("theta", Tensor::vector(values).unwrap())]
    }

    /// `f(θ) = Σ c_i θ_i²` has gradient `2 c_i θ_i`.
    #[test]
    fn quadratic_is_exact() {
        let c = [1.0, 3.0, 0.5, 7.0];
        let mut p = params(vec![0.3, -1.2, 4.0, 0.01]);
        let grad: Vec<f64> = p[0].value.data().iter().zip(&c).map(|(t, c)| 2.0 * c * t).collect();
        p[0].grad.data_mut().copy_from_slice(&grad);
        let f = |p: &Vec<Parameter>| Ok(p[0].value.data().iter().zip(&c).map(|(t, c)| c * t * t).sum());
        let report = gradient_check(&mut p, f, &GradCheckConfig::default()).unwrap();
        assert!(report.passes(1e-8), "{report:?}");
        assert_eq!(p[0].value.data(), &[0.3, -1.2, 4.0, 0.01]);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut p = params(vec![1.0, 2.0]);
        let report = gradient_check(&mut p, |_| Ok(5.0), &GradCheckConfig::default()).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.params[0].numeric == 0.0 && report.params[0].analytic == 0.0);
    }

    #[test]
    fn wrong_backward_is_reported() {
        let mut p = params(vec![0.5, -0.25]);
        // True gradient is 2θ; store θ instead.
        let wrong = p[0].value.data().to_vec();
        p[0].grad.data_mut().copy_from_slice(&wrong);
        let f = |p: &Vec<Parameter>| Ok(p[0].value.data().iter().map(|t| t * t).sum());
        let report = gradient_check(&mut p, f, &GradCheckConfig::default()).unwrap();
        assert!(!report.passes(1e-4));
        assert!((report.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_deterministic_objective_is_rejected() {
        let calls = Cell::new(0.0);
        let mut p = params(vec![1.0]);
        let f = |_: &Vec<Parameter>| {
            calls.set(calls.get() + 1.0);
            Ok(calls.get())
        };
        assert!(matches!(
            gradient_check(&mut p, f, &GradCheckConfig::default()),
            Err(Error::NonDeterministic { .. })
        ));
    }

    #[test]
    fn samples_large_parameters() {
        let mut p = params(vec![0.0; 100]);
        let report = gradient_check(&mut p, |_| Ok(0.0), &GradCheckConfig::default()).unwrap();
        assert_eq!(report.params[0].checked, 32);
    }
}
