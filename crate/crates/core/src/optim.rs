//! First-order optimizers as explicit state-update steps over flat parameter
//! slices.
//!
//! Default hyperparameters:
//!
//! | algorithm | lr    | other                          |
//! |-----------|-------|--------------------------------|
//! | sgd       | 0.01  |                                |
//! | momentum  | 0.01  | ρ = 0.9, no dampening/Nesterov |
//! | adam      | 0.001 | β = (0.9, 0.999), ε = 1e-8      |
//! | adamax    | 0.002 | β = (0.9, 0.999), ε = 1e-8      |
//! | adagrad   | 0.01  | ε = 1e-10                      |
//! | rmsprop   | 0.01  | α = 0.99, ε = 1e-8              |

use serde::{Deserialize, Serialize};

use crate::error::{QuineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sgd,
    Momentum,
    Adam,
    Adagrad,
    Adamax,
    Rmsprop,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Sgd,
        Algorithm::Momentum,
        Algorithm::Adam,
        Algorithm::Adagrad,
        Algorithm::Adamax,
        Algorithm::Rmsprop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sgd => "sgd",
            Algorithm::Momentum => "momentum",
            Algorithm::Adam => "adam",
            Algorithm::Adagrad => "adagrad",
            Algorithm::Adamax => "adamax",
            Algorithm::Rmsprop => "rmsprop",
        }
    }

    pub fn defaults(self) -> Hyperparams {
        let (lr, beta1, beta2, eps) = match self {
            Algorithm::Sgd => (0.01, 0.0, 0.0, 0.0),
            Algorithm::Momentum => (0.01, 0.9, 0.0, 0.0),
            Algorithm::Adam => (0.001, 0.9, 0.999, 1e-8),
            Algorithm::Adamax => (0.002, 0.9, 0.999, 1e-8),
            Algorithm::Adagrad => (0.01, 0.0, 0.0, 1e-10),
            Algorithm::Rmsprop => (0.01, 0.0, 0.99, 1e-8),
        };
        Hyperparams { lr, beta1, beta2, eps }
    }

    fn buffers(self) -> usize {
        match self {
            Algorithm::Sgd => 0,
            Algorithm::Momentum | Algorithm::Adagrad | Algorithm::Rmsprop => 1,
            Algorithm::Adam | Algorithm::Adamax => 2,
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = QuineError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| QuineError::InvalidArgument(format!("unknown optimizer '{s}'")))
    }
}

/// Hyperparameters shared by all algorithms. `beta1` doubles as the momentum
/// coefficient ρ; `beta2` as the RMSprop smoothing constant α. Unused fields
/// are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    algorithm: Algorithm,
    hyper: Hyperparams,
    step_count: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn new(algorithm: Algorithm, n_params: usize) -> Self {
        Self::with_hyperparams(algorithm, algorithm.defaults(), n_params)
    }

    pub fn with_hyperparams(algorithm: Algorithm, hyper: Hyperparams, n_params: usize) -> Self {
        let nbuf = algorithm.buffers();
        Self {
            algorithm,
            hyper,
            step_count: 0,
            first: if nbuf >= 1 { vec![0.0; n_params] } else { Vec::new() },
            second: if nbuf >= 2 { vec![0.0; n_params] } else { Vec::new() },
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn hyperparams(&self) -> Hyperparams {
        self.hyper
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Momentum / first-moment / accumulator buffer, depending on the algorithm.
    pub fn first_buffer(&self) -> &[f64] {
        &self.first
    }

    pub fn second_buffer(&self) -> &[f64] {
        &self.second
    }

    pub fn reset(&mut self) {
        self.step_count = 0;
        self.first.fill(0.0);
        self.second.fill(0.0);
    }

    /// Applies one update in place. A non-finite gradient leaves both the
    /// parameters and the state untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(QuineError::InvalidArgument(format!(
                "{} parameters but {} gradient entries",
                params.len(),
                grad.len()
            )));
        }
        let nbuf = self.algorithm.buffers();
        if (nbuf >= 1 && self.first.len() != params.len()) || (nbuf >= 2 && self.second.len() != params.len()) {
            return Err(QuineError::InvalidArgument("optimizer buffers do not match parameter shape".into()));
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(QuineError::NonFiniteGradient(self.algorithm.name()));
        }
        self.step_count += 1;
        let Hyperparams { lr, beta1, beta2, eps } = self.hyper;
        let t = self.step_count as i32;
        match self.algorithm {
            Algorithm::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Algorithm::Momentum => {
                let first_step = t == 1;
                for ((p, g), b) in params.iter_mut().zip(grad).zip(&mut self.first) {
                    *b = if first_step { *g } else { beta1 * *b + g };
                    *p -= lr * *b;
                }
            }
            Algorithm::Adam => {
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.first).zip(&mut self.second) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            Algorithm::Adamax => {
                let step = lr / (1.0 - beta1.powi(t));
                for (((p, g), m), u) in params.iter_mut().zip(grad).zip(&mut self.first).zip(&mut self.second) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *u = (beta2 * *u).max(g.abs() + eps);
                    *p -= step * *m / *u;
                }
            }
            Algorithm::Adagrad => {
                for ((p, g), s) in params.iter_mut().zip(grad).zip(&mut self.first) {
                    *s += g * g;
                    *p -= lr * g / (s.sqrt() + eps);
                }
            }
            Algorithm::Rmsprop => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut self.first) {
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * g / (v.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
