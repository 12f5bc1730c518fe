//! Full-batch optimizers shared by student distillation and probe training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Update rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    GradientDescent,
    AdaptiveMoment { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub const fn adam() -> Self {
        Optimizer::AdaptiveMoment {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::adam()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            iterations: 100,
            optimizer: Optimizer::default(),
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Probe schedule: learning rate 1e-3 and a tenth of the distillation iterations.
    pub fn for_probe(distill_iterations: usize) -> Self {
        Self {
            iterations: (distill_iterations / 10).max(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // zero is accepted: it freezes the parameters while still reporting the loss
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be nonnegative and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if let Optimizer::AdaptiveMoment { beta1, beta2, epsilon } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || epsilon <= 0.0 {
                return Err(Error::InvalidConfig("adaptive-moment parameters out of range".into()));
            }
        }
        Ok(())
    }
}

/// Optimizer state for a fixed list of parameter tensors ("slots").
#[derive(Debug)]
pub(crate) struct OptimizerState {
    cfg: TrainConfig,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub(crate) fn new(cfg: &TrainConfig, slot_sizes: &[usize]) -> Self {
        let moments = || slot_sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let adaptive = matches!(cfg.optimizer, Optimizer::AdaptiveMoment { .. });
        Self {
            cfg: cfg.clone(),
            step: 0,
            first: if adaptive { moments() } else { Vec::new() },
            second: if adaptive { moments() } else { Vec::new() },
        }
    }

    /// Starts a new iteration; call once before updating the slots of that iteration.
    pub(crate) fn begin_step(&mut self) {
        self.step += 1;
    }

    pub(crate) fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        let lr = self.cfg.learning_rate;
        let wd = self.cfg.weight_decay;
        match self.cfg.optimizer {
            Optimizer::GradientDescent => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * (g + wd * *p);
                }
            }
            Optimizer::AdaptiveMoment { beta1, beta2, epsilon } => {
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
                for i in 0..params.len() {
                    let g = grads[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    // decoupled weight decay
                    params[i] -= lr * (m_hat / (v_hat.sqrt() + epsilon) + wd * params[i]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_descent_step() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            optimizer: Optimizer::GradientDescent,
            ..TrainConfig::default()
        };
        let mut st = OptimizerState::new(&cfg, &[2]);
        let mut p = vec![1.0, -1.0];
        st.begin_step();
        st.update(0, &mut p, &[2.0, -4.0]);
        assert_eq!(p, vec![0.8, -0.6]);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut st = OptimizerState::new(&cfg, &[3]);
        let mut p = vec![0.0; 3];
        st.begin_step();
        st.update(0, &mut p, &[5.0, -0.2, 1e-3]);
        for (x, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * 0.01).abs() < 1e-6, "{x}");
        }
    }

    #[test]
    fn validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_ok());
        cfg.learning_rate = f64::NAN;
        assert!(cfg.validate().is_err());
        cfg.learning_rate = -1e-3;
        assert!(cfg.validate().is_err());
        cfg.learning_rate = 1e-3;
        cfg.weight_decay = -1.0;
        assert!(cfg.validate().is_err());
        assert_eq!(TrainConfig::for_probe(500).iterations, 50);
        assert_eq!(TrainConfig::for_probe(500).learning_rate, 1e-3);
    }
}
