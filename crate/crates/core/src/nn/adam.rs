use serde::{Deserialize, Serialize};

use super::{ParamKind, Real, UNetModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
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

/// Moment estimates for every trainable tensor, in model order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model<T: Real>(config: AdamConfig, model: &UNetModel<T>) -> Self {
        let lens: Vec<usize> = model
            .tensors()
            .into_iter()
            .filter(|t| t.kind == ParamKind::Trainable)
            .map(|t| t.data.len())
            .collect();
        Self::new(config, &lens)
    }

    /// One bias-corrected Adam update over parallel lists of parameters
    /// and gradients.
    pub fn step<T: Real>(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) {
        assert_eq!(params.len(), self.first.len(), "parameter list does not match state");
        assert_eq!(grads.len(), self.first.len(), "gradient list does not match state");
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len(), "gradient shape mismatch");
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for i in 0..p.len() {
                let gi = g[i].as_f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                let updated = p[i].as_f64() - learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                p[i] = T::from_f64(updated);
            }
        }
    }

    /// Update every trainable tensor of `model` from a gradient model of the
    /// same layout.
    pub fn step_model<T: Real>(&mut self, model: &mut UNetModel<T>, grads: &UNetModel<T>) {
        let grad_views: Vec<&[T]> = grads
            .tensors()
            .into_iter()
            .filter(|t| t.kind == ParamKind::Trainable)
            .map(|t| t.data)
            .collect();
        let mut params: Vec<&mut [T]> = model.trainable_mut();
        self.step(&mut params, &grad_views);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut state = AdamState::new(AdamConfig::default(), &[3]);
        let mut p = vec![1.0f64, -2.0, 0.5];
        let g = [0.0f64; 3];
        state.step(&mut [&mut p[..]], &[&g[..]]);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [0.003f64, -4.0, 250.0] {
            let mut state = AdamState::new(AdamConfig::default(), &[1]);
            let mut p = [0.0f64];
            state.step(&mut [&mut p[..]], &[&[g][..]]);
            // m_hat / sqrt(v_hat) = sign(g) up to epsilon.
            let expected = -1e-3 * g.signum() * g.abs() / (g.abs() + 1e-8);
            assert!((p[0] - expected).abs() < 1e-15, "{g}: {}", p[0]);
        }
    }

    #[test]
    fn quadratic_loss_decreases() {
        // f(p) = (p - 3)^2
        let mut state = AdamState::new(AdamConfig::default(), &[1]);
        let mut p = [0.0f64];
        let mut prev = 9.0;
        for _ in 0..2 {
            let g = 2.0 * (p[0] - 3.0);
            state.step(&mut [&mut p[..]], &[&[g][..]]);
            let loss = (p[0] - 3.0f64).powi(2);
            assert!(loss < prev);
            prev = loss;
        }
    }
}
