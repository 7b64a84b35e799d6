//! Adam with bias correction, operating in place on leaf tensors.

use super::{Element, Value};
use crate::error::{Error, Result};

pub struct Adam<T: Element> {
    params: Vec<Value<T>>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Element> Adam<T> {
    /// Defaults beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(params: Vec<Value<T>>, lr: T) -> Self {
        let m = params.iter().map(|p| vec![T::ZERO; p.len()]).collect();
        let v = params.iter().map(|p| vec![T::ZERO; p.len()]).collect();
        Adam {
            params,
            m,
            v,
            t: 0,
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update from the gradients currently stored on the parameters.
    /// Every managed parameter must have a gradient; a missing one means the
    /// caller stepped the wrong optimizer for this phase.
    pub fn step(&mut self) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        // 1 - beta^t in f64: beta1^t underflows f32 quickly for long runs.
        let bc1 = T::from_f64(1.0 - self.beta1.to_f64().powi(t));
        let bc2 = T::from_f64(1.0 - self.beta2.to_f64().powi(t));
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else {
                return Err(Error::Autodiff(format!(
                    "Adam step with no gradient on parameter {i}"
                )));
            };
            let mut data = p.data().clone();
            for j in 0..data.len() {
                let gj = g[j];
                if !gj.is_finite() {
                    return Err(Error::Numerical("non-finite gradient in Adam step".into()));
                }
                self.m[i][j] = self.beta1 * self.m[i][j] + (T::ONE - self.beta1) * gj;
                self.v[i][j] = self.beta2 * self.v[i][j] + (T::ONE - self.beta2) * gj * gj;
                let m_hat = self.m[i][j] / bc1;
                let v_hat = self.v[i][j] / bc2;
                data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.set_data(&data);
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn with_grad(value: f64, grad: f64) -> Value<f64> {
        let p = Tensor::leaf(&[1], vec![value], true).unwrap();
        p.accumulate_grad(&[grad]);
        p
    }

    #[test]
    fn first_step_from_unit_param() {
        // p = 1, g = 0.5, lr = 1e-3: bias-corrected m_hat = 0.5, v_hat = 0.25,
        // update = lr * 0.5 / (0.5 + 1e-8) ~= lr.
        let p = with_grad(1.0, 0.5);
        let mut opt = Adam::new(vec![p.clone()], 1e-3);
        opt.step().unwrap();
        assert!((p.data()[0] - 0.99900).abs() < 1e-5);
    }

    #[test]
    fn two_steps_match_recurrence() {
        let p = with_grad(1.0, 0.5);
        let mut opt = Adam::new(vec![p.clone()], 1e-3);
        opt.step().unwrap();
        p.zero_grad();
        p.accumulate_grad(&[-0.25]);
        opt.step().unwrap();

        // Hand-rolled recurrence.
        let (b1, b2, lr, eps) = (0.9, 0.999, 1e-3, 1e-8);
        let mut x: f64 = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, 0.5), (2, -0.25)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - f64::powi(b1, t));
            let vh = v / (1.0 - f64::powi(b2, t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p.data()[0] - x).abs() < 1e-7);
    }

    #[test]
    fn constant_gradient_moves_at_lr_rate() {
        // With a constant gradient, bias-corrected Adam steps are ~lr each.
        let p = with_grad(0.0, 1.0);
        let mut opt = Adam::new(vec![p.clone()], 0.01);
        for _ in 0..100 {
            p.zero_grad();
            p.accumulate_grad(&[1.0]);
            opt.step().unwrap();
        }
        assert!((p.data()[0] + 100.0 * 0.01).abs() < 0.02, "{}", p.data()[0]);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let p = Tensor::<f64>::leaf(&[1], vec![1.0], true).unwrap();
        let mut opt = Adam::new(vec![p.clone()], 0.1);
        assert!(opt.step().is_err());
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let p = with_grad(1.0, 0.0);
        let mut opt = Adam::new(vec![p.clone()], 0.1);
        opt.step().unwrap();
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn rejects_nan_gradient() {
        let p = with_grad(1.0, f64::NAN);
        let mut opt = Adam::new(vec![p.clone()], 0.1);
        assert!(opt.step().is_err());
    }
}
