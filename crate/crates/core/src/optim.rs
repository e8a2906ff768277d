//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update in place. Accumulators are allocated on first use.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params vs {} grads", params.len(), grads.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::shape(
                "adam_step",
                "parameter layout changed since the last step",
            ));
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::row(vec![1.0, -2.0, 3.5])];
        let grads = vec![Tensor::zeros(&[1, 3])];
        let mut st = AdamState::new(0.1);
        st.step(&mut params, &grads).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0, 3.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_hand_evaluated() {
        // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1 => 1 - 0.1 / (1 + eps)
        let mut params = vec![Tensor::scalar(1.0)];
        let grads = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(0.1);
        st.step(&mut params, &grads).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((params[0].data()[0] - expected).abs() < 1e-15);
        assert!((params[0].data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut params = vec![Tensor::row(vec![0.3, -0.7])];
            let mut st = AdamState::new(0.01);
            for k in 0..5 {
                let grads = vec![Tensor::row(vec![0.1 * k as f64, -0.2])];
                st.step(&mut params, &grads).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut params = vec![Tensor::row(vec![1.0, 2.0])];
        let grads = vec![Tensor::row(vec![1.0])];
        assert!(AdamState::new(0.1).step(&mut params, &grads).is_err());
    }
}
