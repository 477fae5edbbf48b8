//! SGD and Adam updates over a named parameter registry, with optional
//! global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::{Algorithm, Tensor};
use std::collections::BTreeMap;

pub use crate::tensor::Algorithm as OptAlgorithm;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Euclidean norm over the concatenation of all present gradients.
pub fn global_grad_norm<'a>(params: impl Iterator<Item = &'a Tensor>) -> f64 {
    let mut sq = 0.0;
    for p in params {
        if let Some(g) = &p.grad {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    sq.sqrt()
}

/// Optimizer state: algorithm, step counter, and per-parameter Adam moments
/// keyed by registry name.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub algorithm: Algorithm,
    pub lr: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(algorithm: Algorithm, lr: f64) -> Self {
        OptimizerState {
            algorithm,
            lr,
            clip_norm: Some(0.8),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_clip(mut self, clip_norm: Option<f64>) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter. All parameters must carry a
    /// gradient; returns the (pre-clip) global gradient norm.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)]) -> Result<f64> {
        for (name, p) in params.iter() {
            match &p.grad {
                None => return Err(Error::MissingGradient(name.clone())),
                Some(g) if g.len() != p.numel() => {
                    return Err(Error::ShapeMismatch(format!(
                        "gradient for '{name}' has {} entries, parameter has {}",
                        g.len(),
                        p.numel()
                    )))
                }
                Some(_) => {}
            }
        }
        let norm = global_grad_norm(params.iter().map(|(_, p)| &**p));
        let scale = match self.clip_norm {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as f64;
        for (name, p) in params.iter_mut() {
            let grad: Vec<f64> = p
                .grad
                .as_ref()
                .expect("checked above")
                .iter()
                .map(|g| g * scale)
                .collect();
            match self.algorithm {
                Algorithm::Sgd => {
                    let data = p.data_mut();
                    for (w, g) in data.iter_mut().zip(&grad) {
                        *w -= self.lr * g;
                    }
                }
                Algorithm::Adam => {
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                    if m.len() != grad.len() {
                        return Err(Error::ShapeMismatch(format!(
                            "adam moments for '{name}' have {} entries, gradient has {}",
                            m.len(),
                            grad.len()
                        )));
                    }
                    let bc1 = 1.0 - ADAM_BETA1.powf(t);
                    let bc2 = 1.0 - ADAM_BETA2.powf(t);
                    let data = p.data_mut();
                    for j in 0..grad.len() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * grad[j];
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * grad[j] * grad[j];
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        data[j] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
            if !p.data().iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("optimizer update of '{name}'")));
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(data: Vec<f64>, grad: Vec<f64>) -> Tensor {
        let mut t = Tensor::vector(data).unwrap().with_grad();
        t.grad = Some(grad);
        t
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        for alg in [Algorithm::Sgd, Algorithm::Adam] {
            let mut p = with_grad(vec![1.0, -2.0], vec![0.0, 0.0]);
            let mut opt = OptimizerState::new(alg, 0.5);
            opt.step(&mut [("p".into(), &mut p)]).unwrap();
            assert_eq!(p.data(), &[1.0, -2.0]);
        }
    }

    #[test]
    fn sgd_unit_lr_subtracts_gradient() {
        let mut p = with_grad(vec![1.0, 2.0], vec![0.25, -0.5]);
        let mut opt = OptimizerState::new(Algorithm::Sgd, 1.0).with_clip(None);
        opt.step(&mut [("p".into(), &mut p)]).unwrap();
        assert_eq!(p.data(), &[0.75, 2.5]);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // bias-corrected first step on g = [1]: m_hat = 1, v_hat = 1,
        // update = lr / (1 + eps)
        let mut p = with_grad(vec![0.0], vec![1.0]);
        let mut opt = OptimizerState::new(Algorithm::Adam, 0.01).with_clip(None);
        opt.step(&mut [("p".into(), &mut p)]).unwrap();
        let expected = -0.01 / (1.0 + ADAM_EPS);
        assert!((p.data()[0] - expected).abs() < 1e-15, "{}", p.data()[0]);
    }

    #[test]
    fn global_norm_clipping_rescales() {
        // grad [3,4] has norm 5; clip 0.5 scales it by 0.1
        let mut p = with_grad(vec![0.0, 0.0], vec![3.0, 4.0]);
        let mut opt = OptimizerState::new(Algorithm::Sgd, 1.0).with_clip(Some(0.5));
        let norm = opt.step(&mut [("p".into(), &mut p)]).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((p.data()[0] + 0.3).abs() < 1e-12);
        assert!((p.data()[1] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::vector(vec![1.0]).unwrap().with_grad();
        let mut opt = OptimizerState::new(Algorithm::Sgd, 0.1);
        assert!(matches!(
            opt.step(&mut [("p".into(), &mut p)]),
            Err(Error::MissingGradient(_))
        ));
    }

    #[test]
    fn default_clip_threshold_is_point_eight() {
        let opt = OptimizerState::new(Algorithm::Adam, 1e-3);
        assert_eq!(opt.clip_norm, Some(0.8));
        assert_eq!(opt.step_count(), 0);
    }
}
