use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros = || params.iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        AdamState { m: zeros(), v: zeros(), step: 0 }
    }

    fn check_layout(&self, params: &ParameterStore) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::ParamMismatch("adam state does not match parameter count".into()));
        }
        for ((e, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            if m.shape() != e.value.shape() || v.shape() != e.value.shape() {
                return Err(Error::ParamMismatch(format!("adam moments for {:?} have the wrong shape", e.name)));
            }
        }
        Ok(())
    }

    /// One update using the gradients stored in `params`. Nothing is modified
    /// if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParameterStore, lr: f64) -> Result<()> {
        self.check_layout(params)?;
        for e in params.iter() {
            if !e.grad.is_finite() {
                return Err(Error::NonFinite { context: format!("gradient of parameter {:?}", e.name) });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for ((e, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = e.grad.data();
            let p = e.value.data_mut();
            let m = m.data_mut();
            let v = v.data_mut();
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::scalar(value)).unwrap();
        s.iter_mut().next().unwrap().grad = Tensor::scalar(grad);
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = single(0.5, 1.0);
        let mut adam = AdamState::new(&s);
        adam.step(&mut s, 1e-3).unwrap();
        // m̂ = v̂ = 1, so Δ = -lr / (1 + eps)
        let expected = 0.5 - 1e-3 / (1.0 + EPSILON);
        assert!((s.get("p").unwrap().item() - expected).abs() < 1e-18);
    }

    #[test]
    fn zero_gradients_leave_params() {
        let mut s = single(0.5, 0.0);
        let mut adam = AdamState::new(&s);
        for _ in 0..5 {
            adam.step(&mut s, 1e-2).unwrap();
        }
        assert_eq!(s.get("p").unwrap().item(), 0.5);
        assert_eq!(adam.step, 5);
    }

    #[test]
    fn moments_decay_when_gradient_stops() {
        let mut s = single(0.0, 1.0);
        let mut adam = AdamState::new(&s);
        adam.step(&mut s, 1e-3).unwrap();
        let m1 = adam.m[0].item();
        s.iter_mut().next().unwrap().grad = Tensor::scalar(0.0);
        adam.step(&mut s, 1e-3).unwrap();
        assert!(adam.m[0].item().abs() < m1.abs());
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = single(0.5, f64::NAN);
        let mut adam = AdamState::new(&s);
        let err = adam.step(&mut s, 1e-3).unwrap_err();
        assert!(err.to_string().contains("\"p\""));
        assert_eq!(s.get("p").unwrap().item(), 0.5);
        assert_eq!(adam.step, 0);
    }
}
