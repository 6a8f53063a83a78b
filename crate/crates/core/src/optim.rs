//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    /// Heavy-ball SGD: `v ← μv + g`, `θ ← θ − ηv`.
    Momentum { step: f64, momentum: f64 },
    Adam { step: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Momentum {
            step: 1e-3,
            momentum: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(step: f64) -> Self {
        OptimizerConfig::Adam {
            step,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Momentum { step, momentum } => step > 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { step, beta1, beta2, eps } => {
                step > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("optimizer: step must be positive and decay rates in [0, 1)"))
        }
    }
}

/// Optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
    scale: f64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, n: usize) -> Result<Self> {
        cfg.validate()?;
        let second = match cfg {
            OptimizerConfig::Adam { .. } => vec![0.0; n],
            OptimizerConfig::Momentum { .. } => Vec::new(),
        };
        Ok(Self {
            cfg,
            first: vec![0.0; n],
            second,
            steps: 0,
            scale: 1.0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Multiplies the configured step size from the next update on.
    pub fn set_step_scale(&mut self, scale: f64) {
        self.scale = scale;
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.first.len() || grad.len() != params.len() {
            return Err(Error::invalid("optimizer: parameter and gradient lengths differ"));
        }
        self.steps += 1;
        match self.cfg {
            OptimizerConfig::Momentum { step, momentum } => {
                let step = step * self.scale;
                for ((p, v), g) in params.iter_mut().zip(&mut self.first).zip(grad) {
                    *v = momentum * *v + g;
                    *p -= step * *v;
                }
            }
            OptimizerConfig::Adam { step, beta1, beta2, eps } => {
                let step = step * self.scale;
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, m), s), g) in params.iter_mut().zip(&mut self.first).zip(&mut self.second).zip(grad) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *s = beta2 * *s + (1.0 - beta2) * g * g;
                    *p -= step * (*m / c1) / ((*s / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_matches_hand_computation() {
        let mut opt = Optimizer::new(OptimizerConfig::default(), 1).unwrap();
        let mut p = [1.0];
        opt.step(&mut p, &[2.0]).unwrap();
        assert_eq!(p[0], 1.0 - 1e-3 * 2.0);
        opt.step(&mut p, &[2.0]).unwrap();
        assert!((p[0] - (1.0 - 1e-3 * 2.0 - 1e-3 * 3.8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_from_rest_leaves_params() {
        for cfg in [OptimizerConfig::default(), OptimizerConfig::adam(1e-2)] {
            let mut opt = Optimizer::new(cfg, 3).unwrap();
            let mut p = [0.5, -1.0, 2.0];
            opt.step(&mut p, &[0.0; 3]).unwrap();
            assert_eq!(p, [0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn minimizes_quadratic() {
        for cfg in [
            OptimizerConfig::Momentum {
                step: 0.05,
                momentum: 0.9,
            },
            OptimizerConfig::adam(0.05),
        ] {
            let mut opt = Optimizer::new(cfg, 2).unwrap();
            let mut p = [3.0, -2.0];
            for _ in 0..2000 {
                let g = [2.0 * p[0], 8.0 * p[1]];
                opt.step(&mut p, &g).unwrap();
            }
            assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3, "{p:?}");
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(Optimizer::new(OptimizerConfig::Momentum { step: 0.0, momentum: 0.9 }, 1).is_err());
        assert!(Optimizer::new(OptimizerConfig::Momentum { step: 1.0, momentum: 1.0 }, 1).is_err());
    }
}
