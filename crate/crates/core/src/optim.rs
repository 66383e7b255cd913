//! Plain SGD, Adam and learning-rate schedules.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant {
        rate: f64,
    },
    /// `base · factor^⌊m / interval⌋`.
    StepDecay {
        base: f64,
        factor: f64,
        interval: usize,
    },
}

impl Schedule {
    pub fn constant(rate: f64) -> Self {
        Schedule::Constant { rate }
    }

    pub fn step_decay(base: f64, factor: f64, interval: usize) -> Self {
        Schedule::StepDecay {
            base,
            factor,
            interval,
        }
    }

    pub fn rate(&self, m: usize) -> f64 {
        match *self {
            Schedule::Constant { rate } => rate,
            Schedule::StepDecay {
                base,
                factor,
                interval,
            } => base * factor.powi((m / interval.max(1)) as i32),
        }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            Schedule::Constant { rate } => rate > 0.0 && rate.is_finite(),
            Schedule::StepDecay {
                base,
                factor,
                interval,
            } => {
                base > 0.0 && base.is_finite() && factor > 0.0 && factor.is_finite() && interval > 0
            }
        }
    }
}

/// `θ ← θ − γ g`.
pub fn sgd_step(theta: &mut [f64], grad: &[f64], gamma: f64) {
    assert_eq!(
        theta.len(),
        grad.len(),
        "parameter and gradient lengths differ"
    );
    for (t, g) in theta.iter_mut().zip(grad) {
        *t -= gamma * g;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "AdamConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "AdamConfig::default_beta2")]
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule: Schedule,
}

impl AdamConfig {
    fn default_beta1() -> f64 {
        0.9
    }

    fn default_beta2() -> f64 {
        0.999
    }

    pub fn new(epsilon: f64, schedule: Schedule) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon,
            schedule,
        }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.schedule.is_valid()
    }
}

/// Adam moments and the number of updates taken so far.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub m: usize,
}

impl OptimState {
    pub fn new(nu: usize) -> Self {
        Self {
            first: vec![0.0; nu],
            second: vec![0.0; nu],
            m: 0,
        }
    }
}

/// One Adam update at iteration `state.m`, with bias corrections using
/// `t = m + 1` and `ε` added outside the square root.
pub fn adam_step(state: &mut OptimState, theta: &mut [f64], grad: &[f64], config: &AdamConfig) {
    assert_eq!(
        theta.len(),
        grad.len(),
        "parameter and gradient lengths differ"
    );
    assert_eq!(
        theta.len(),
        state.first.len(),
        "optimizer state length differs"
    );
    let (b1, b2) = (config.beta1, config.beta2);
    let t = (state.m + 1) as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let gamma = config.schedule.rate(state.m);
    let eps = config.epsilon;
    for (((th, g), x), y) in theta
        .iter_mut()
        .zip(grad)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        *x = b1 * *x + (1.0 - b1) * g;
        *y = b2 * *y + (1.0 - b2) * g * g;
        *th -= gamma * (*x / c1) / ((y.abs() / c2).sqrt() + eps);
    }
    state.m += 1;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { schedule: Schedule },
    Adam(AdamConfig),
}

impl OptimizerConfig {
    pub fn schedule(&self) -> &Schedule {
        match self {
            OptimizerConfig::Sgd { schedule } => schedule,
            OptimizerConfig::Adam(a) => &a.schedule,
        }
    }

    pub fn schedule_mut(&mut self) -> &mut Schedule {
        match self {
            OptimizerConfig::Sgd { schedule } => schedule,
            OptimizerConfig::Adam(a) => &mut a.schedule,
        }
    }

    pub fn is_valid(&self) -> bool {
        match self {
            OptimizerConfig::Sgd { schedule } => schedule.is_valid(),
            OptimizerConfig::Adam(a) => a.is_valid(),
        }
    }
}

/// An optimizer bound to its state.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd {
        schedule: Schedule,
        m: usize,
    },
    Adam {
        config: AdamConfig,
        state: OptimState,
    },
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig, nu: usize) -> Self {
        match config {
            OptimizerConfig::Sgd { schedule } => Optimizer::Sgd {
                schedule: schedule.clone(),
                m: 0,
            },
            OptimizerConfig::Adam(c) => Optimizer::Adam {
                config: c.clone(),
                state: OptimState::new(nu),
            },
        }
    }

    pub fn iteration(&self) -> usize {
        match self {
            Optimizer::Sgd { m, .. } => *m,
            Optimizer::Adam { state, .. } => state.m,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Sgd { schedule, m } => {
                sgd_step(theta, grad, schedule.rate(*m));
                *m += 1;
            }
            Optimizer::Adam { config, state } => adam_step(state, theta, grad, config),
        }
    }
}
