use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            eta: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_beta = |b: f64| (0.0..1.0).contains(&b);
        if !ok_beta(self.beta1) || !ok_beta(self.beta2) {
            return Err(Error::Config(format!(
                "adam betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eta >= 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config("adam eta must be >= 0 and epsilon > 0".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam. Moments are allocated on the first step to match
/// the parameter slices handed in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("adam parameter groups", params.len(), grads.len()));
        }
        if self.step_count == 0 {
            self.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len() {
            return Err(Error::dim("adam moment groups", self.first_moment.len(), params.len()));
        }
        for ((p, g), m) in params.iter().zip(&grads).zip(&self.first_moment) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::dim("adam parameter group", p.len(), g.len()));
            }
        }

        self.step_count += 1;
        let AdamConfig {
            eta,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= eta * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Convenience wrapper: one Adam step on a set of parameters.
pub fn adam_step(params: Vec<&mut [f64]>, grads: Vec<&[f64]>, state: &mut AdamState) -> Result<()> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut st = AdamState::new(AdamConfig::default());
        let mut p = vec![1.0, -2.0, 3.5];
        for _ in 0..5 {
            adam_step(vec![&mut p], vec![&[0.0, 0.0, 0.0]], &mut st).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_eta_times_sign() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is
        // eta * g / (|g| + eps).
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(cfg);
        let g = [0.37, -5.0];
        let mut p = vec![0.0, 0.0];
        adam_step(vec![&mut p], vec![&g], &mut st).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            let expect = -cfg.eta * gi / (gi.abs() + cfg.epsilon);
            assert!((pi - expect).abs() < 1e-15);
            assert!((pi + cfg.eta * gi.signum()).abs() < 1e-10);
        }
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut st = AdamState::new(AdamConfig::default());
            let mut p = vec![0.1, 0.2];
            for k in 0..50 {
                let g = [(k as f64).sin(), (k as f64 * 0.3).cos()];
                adam_step(vec![&mut p], vec![&g], &mut st).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch() {
        let mut st = AdamState::new(AdamConfig::default());
        let mut p = vec![0.0; 2];
        assert!(adam_step(vec![&mut p], vec![&[1.0]], &mut st).is_err());
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
    }
}
