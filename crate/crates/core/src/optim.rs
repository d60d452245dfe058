use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction. Moment buffers are matched to parameters by
/// position, so the same parameter list order must be passed every step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter and clears their gradients.
    /// Fails before touching anything if a parameter lacks a gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                let name = if p.name().is_empty() {
                    format!("#{i}")
                } else {
                    p.name().into()
                };
                return Err(Error::MissingGradient { name });
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
                .collect();
        } else if self.moments.len() != params.len()
            || self
                .moments
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.0.len() != p.numel())
        {
            return Err(Error::Config(
                "optimizer state does not match the parameter list".into(),
            ));
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            let g = p.grad().expect("checked above").to_vec();
            let values = p.values_mut();
            for i in 0..values.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                values[i] -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
            p.clear_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap().trainable();
        let mut opt = Adam::new(0.1).unwrap();
        for _ in 0..5 {
            p.zero_grad();
            opt.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.values(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε) = 0.1/(1+1e-8).
        let mut p = Tensor::scalar(0.0).trainable();
        p.accumulate_grad(&[1.0]);
        let mut opt = Adam::new(0.1).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.values()[0] - expected).abs() < 1e-15);
        assert!(p.grad().is_none());
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut x = Tensor::scalar(0.0).trainable();
        let mut opt = Adam::new(0.05).unwrap();
        for _ in 0..500 {
            let mut tape = Tape::new();
            let xv = tape.param(&x);
            let three = tape.constant(&[], vec![3.0]).unwrap();
            let loss = tape.sum_sq_diff(xv, three).unwrap();
            tape.backward(loss).unwrap().accumulate([&mut x]);
            opt.step(&mut [&mut x]).unwrap();
        }
        assert!((x.values()[0] - 3.0).abs() < 1e-3, "{}", x.values()[0]);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut p = Tensor::zeros(&[2]).trainable().with_name("head.0.weight");
        let mut opt = Adam::new(0.1).unwrap();
        assert_eq!(
            opt.step(&mut [&mut p]),
            Err(Error::MissingGradient {
                name: "head.0.weight".into()
            })
        );
        assert!(Adam::new(0.0).is_err());
    }
}
