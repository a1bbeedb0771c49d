use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
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

/// Adam optimizer state over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "adam shape mismatch: state {}, params {}, grads {}",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                context: format!("optimizer step, non-finite gradient at index {i}"),
            });
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(3, AdamConfig::with_lr(0.1));
        let mut p = vec![1.0, -2.0, 3.0];
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        let mut s = AdamState::new(3, AdamConfig::with_lr(0.01));
        let mut p = vec![0.0; 3];
        s.step(&mut p, &[2.5, -0.003, 40.0]).unwrap();
        // m_hat = g, v_hat = g^2 -> update = -lr * g/(|g| + eps)
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-7);
        assert!((p[2] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn two_steps_reduce_quadratic() {
        // f(x) = (x - 3)^2
        let f = |x: f64| (x - 3.0).powi(2);
        let mut s = AdamState::new(1, AdamConfig::with_lr(0.1));
        let mut x = vec![0.0];
        let f0 = f(x[0]);
        for _ in 0..2 {
            let g = 2.0 * (x[0] - 3.0);
            s.step(&mut x, &[g]).unwrap();
        }
        assert!(f(x[0]) < f0);
        assert!((x[0] - 0.199_897_292_585_211).abs() < 1e-12);
    }

    #[test]
    fn shape_and_finiteness_checked() {
        let mut s = AdamState::new(2, AdamConfig::default());
        let mut p = vec![0.0; 2];
        assert!(s.step(&mut p, &[0.0]).is_err());
        assert!(matches!(
            s.step(&mut p, &[f64::NAN, 0.0]),
            Err(Error::Divergence { .. })
        ));
    }
}
