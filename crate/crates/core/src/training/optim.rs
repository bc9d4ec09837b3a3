use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First/second moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    fn matches(&self, params: &ParamStore<T>) -> bool {
        self.m.len() == params.len()
            && self
                .m
                .iter()
                .zip(params.tensors())
                .all(|(m, p)| m.shape() == p.shape())
    }
}

/// Scale `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.scale_inplace(s);
        }
    }
    norm
}

/// One bias-corrected Adam update. `grads[i]` is `None` for parameters that
/// did not take part in the loss (treated as zero gradient).
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptimizerState<T>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(invalid(format!("learning rate {lr} must be positive")));
    }
    if grads.len() != params.len() || !state.matches(params) {
        return Err(invalid("optimizer state or gradients do not match the parameters"));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params.tensors()[i].shape() {
                return Err(invalid(format!("gradient shape mismatch for {}", params.names()[i])));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at step {}",
                    params.names()[i],
                    state.step + 1
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].as_ref().map(Tensor::data);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j].as_f64());
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::from_f64_lossy(mj);
            v[j] = T::from_f64_lossy(vj);
            if mj != 0.0 {
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
                *w = T::from_f64_lossy(w.as_f64() - update);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::default();
        s.push("w", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = store(&[1.0, -2.0]);
        let mut st = OptimizerState::new(&p);
        let g = vec![Some(Tensor::new(vec![2], vec![3.0, -0.5]).unwrap())];
        adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 0.01).unwrap();
        let d = p.tensors()[0].data();
        assert!((d[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((d[1] - (-2.0 + 0.01)).abs() < 1e-9);
    }

    #[test]
    fn zero_grads_leave_params_and_decay_moments() {
        let mut p = store(&[1.0]);
        let mut st = OptimizerState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &[Some(Tensor::new(vec![1], vec![1.0]).unwrap())], &mut st, &cfg, 0.1).unwrap();
        let before = p.clone();
        let m0 = st.m[0].data()[0];
        adam_step(&mut p, &[Some(Tensor::zeros(&[1]))], &mut st, &cfg, 0.1).unwrap();
        assert!((st.m[0].data()[0] - 0.9 * m0).abs() < 1e-15);
        // bias-corrected momentum still moves the weight; only a fresh state stays put
        assert_ne!(p, before);
        let mut q = store(&[1.0]);
        let mut fresh = OptimizerState::new(&q);
        adam_step(&mut q, &[Some(Tensor::zeros(&[1]))], &mut fresh, &cfg, 0.1).unwrap();
        assert_eq!(q, store(&[1.0]));
        assert_eq!(fresh.v[0].data()[0], 0.0);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = store(&[1.0]);
        let mut st = OptimizerState::new(&p);
        let g = vec![Some(Tensor::new(vec![1], vec![f64::NAN]).unwrap())];
        let err = adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 0.1).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Some(Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap()), None];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
    }
}
