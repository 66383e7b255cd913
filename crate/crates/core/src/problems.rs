//! Benchmark equations `∂u/∂t = f(t, x, u, ∇u, Hess u)`, `u(T, ·) = g`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{Diffusion, StartDistribution};
use crate::network::{HeadKind, InitConfig, NetworkConfig};
use crate::optim::{AdamConfig, OptimizerConfig, Schedule};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("unknown problem `{0}`")]
    Unknown(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("config: {0}")]
    Parse(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    /// `X = ξ + W`, one path per step, constant heads.
    Specific,
    /// General dynamics and minibatches.
    General,
}

/// `σ̄(x) = σ_max` for `x ≥ 0`, `σ_min` otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaBar {
    pub max: f64,
    pub min: f64,
}

impl SigmaBar {
    pub fn new(max: f64, min: f64) -> Result<Self, ProblemError> {
        let s = Self { max, min };
        s.validate()?;
        Ok(s)
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x >= 0.0 {
            self.max
        } else {
            self.min
        }
    }

    fn validate(&self) -> Result<(), ProblemError> {
        if !(0.0 < self.min && self.min < self.max && self.max.is_finite()) {
            return Err(ProblemError::Invalid(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Terminal {
    /// `1 / (a + b‖x‖²)`.
    InverseQuadratic {
        a: f64,
        b: f64,
    },
    /// `c‖x‖²`.
    SquaredNorm {
        c: f64,
    },
    /// `ln(½(1 + ‖x‖²))`.
    LogQuadratic,
    /// `1 / (1 + exp(−‖x‖²))`.
    Logistic,
    /// `⟨a, x⟩ + b`.
    Affine {
        a: Vec<f64>,
        b: f64,
    },
    Constant {
        value: f64,
    },
}

impl Terminal {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let sq = || x.iter().map(|v| v * v).sum::<f64>();
        match self {
            Terminal::InverseQuadratic { a, b } => 1.0 / (a + b * sq()),
            Terminal::SquaredNorm { c } => c * sq(),
            Terminal::LogQuadratic => (0.5 * (1.0 + sq())).ln(),
            Terminal::Logistic => 1.0 / (1.0 + (-sq()).exp()),
            Terminal::Affine { a, b } => b + a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>(),
            Terminal::Constant { value } => *value,
        }
    }

    /// `g` on every row of `x`, as a column.
    pub fn eval_rows(&self, x: &Tensor) -> Tensor {
        Tensor::from_fn(x.rows(), 1, |r, _| self.eval(x.row_slice(r)))
    }
}

/// A user-supplied nonlinearity.
///
/// The default tape recording linearizes `f` around the current point by
/// central differences, which gives the exact primal and a first-order
/// accurate gradient.
pub trait Nonlinearity: Send + Sync + fmt::Debug {
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], s: &[f64]) -> f64;

    fn record(
        &self,
        tape: &mut Tape,
        t: f64,
        x: &Tensor,
        y: NodeId,
        z: NodeId,
        s: NodeId,
    ) -> Result<NodeId, TensorError> {
        let h = 1e-6;
        let (yv, zv, sv) = (
            tape.value(y).clone(),
            tape.value(z).clone(),
            tape.value(s).clone(),
        );
        let rows = x.rows();
        let row = |t: &Tensor, r: usize| t.row_slice(if t.rows() == 1 { 0 } else { r }).to_vec();
        let mut gy = Tensor::zeros(rows, 1);
        let mut gz = Tensor::zeros(rows, zv.cols());
        let mut gs = Tensor::zeros(rows, sv.cols());
        let mut offset = Tensor::zeros(rows, 1);
        for r in 0..rows {
            let xr = x.row_slice(if x.rows() == 1 { 0 } else { r });
            let (y0, mut z0, mut s0) = (row(&yv, r)[0], row(&zv, r), row(&sv, r));
            let f0 = self.eval(t, xr, y0, &z0, &s0);
            let dy = (self.eval(t, xr, y0 + h, &z0, &s0) - self.eval(t, xr, y0 - h, &z0, &s0))
                / (2.0 * h);
            let mut lin = dy * y0;
            gy.data_mut()[r] = dy;
            for i in 0..z0.len() {
                let c = z0[i];
                z0[i] = c + h;
                let up = self.eval(t, xr, y0, &z0, &s0);
                z0[i] = c - h;
                let dn = self.eval(t, xr, y0, &z0, &s0);
                z0[i] = c;
                let g = (up - dn) / (2.0 * h);
                gz.data_mut()[r * z0.len() + i] = g;
                lin += g * c;
            }
            for i in 0..s0.len() {
                let c = s0[i];
                s0[i] = c + h;
                let up = self.eval(t, xr, y0, &z0, &s0);
                s0[i] = c - h;
                let dn = self.eval(t, xr, y0, &z0, &s0);
                s0[i] = c;
                let g = (up - dn) / (2.0 * h);
                gs.data_mut()[r * s0.len() + i] = g;
                lin += g * c;
            }
            offset.data_mut()[r] = f0 - lin;
        }
        let (gy, gz, gs, offset) = (
            tape.constant(gy),
            tape.constant(gz),
            tape.constant(gs),
            tape.constant(offset),
        );
        let a = tape.mul(y, gy)?;
        let b = tape.inner(z, gz)?;
        let c = tape.inner(s, gs)?;
        let ab = tape.add(a, b)?;
        let abc = tape.add(ab, c)?;
        tape.add(abc, offset)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Equation {
    /// `−κ Trace(S) − y + y³`.
    AllenCahn { laplacian: f64 },
    /// `−½ Σ x_i² σ̄(S_ii)² S_ii + r (y − ⟨x, z⟩)`.
    Bsb { rate: f64, sigma: SigmaBar },
    /// `−κ Trace(S) + ‖z‖²`.
    Hjb { laplacian: f64 },
    /// `−½ Σ σ̄(S_ii)² S_ii`.
    GBrownian { sigma: SigmaBar },
    #[serde(skip)]
    Custom(Arc<dyn Nonlinearity>),
}

impl PartialEq for Equation {
    fn eq(&self, other: &Self) -> bool {
        use Equation::*;
        match (self, other) {
            (AllenCahn { laplacian: a }, AllenCahn { laplacian: b }) => a == b,
            (Bsb { rate: a, sigma: s }, Bsb { rate: b, sigma: t }) => a == b && s == t,
            (Hjb { laplacian: a }, Hjb { laplacian: b }) => a == b,
            (GBrownian { sigma: a }, GBrownian { sigma: b }) => a == b,
            (Custom(a), Custom(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

fn trace(s: &[f64], d: usize) -> f64 {
    (0..d).map(|i| s[i * d + i]).sum()
}

fn sigma_weighted_diagonal(s: &[f64], d: usize, sigma: &SigmaBar, x: Option<&[f64]>) -> f64 {
    (0..d)
        .map(|i| {
            let sii = s[i * d + i];
            let sb = sigma.eval(sii);
            let xi2 = x.map_or(1.0, |x| x[i] * x[i]);
            -0.5 * xi2 * sb * sb * sii
        })
        .sum()
}

impl Equation {
    /// `f(t, x, y, z, S)` with `S` flattened row-major.
    pub fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], s: &[f64]) -> f64 {
        let d = x.len();
        match self {
            Equation::AllenCahn { laplacian } => -laplacian * trace(s, d) - y + y * y * y,
            Equation::Bsb { rate, sigma } => {
                let xz: f64 = x.iter().zip(z).map(|(a, b)| a * b).sum();
                sigma_weighted_diagonal(s, d, sigma, Some(x)) + rate * (y - xz)
            }
            Equation::Hjb { laplacian } => {
                -laplacian * trace(s, d) + z.iter().map(|v| v * v).sum::<f64>()
            }
            Equation::GBrownian { sigma } => sigma_weighted_diagonal(s, d, sigma, None),
            Equation::Custom(f) => f.eval(t, x, y, z, s),
        }
    }

    /// Records `f` row-wise on the tape; `x` is constant (`1 × d` or `rows × d`),
    /// `y` is `rows × 1`, `z` is `rows × d`, `s` is `rows × d²` (any may have one row).
    pub fn record(
        &self,
        tape: &mut Tape,
        t: f64,
        x: &Tensor,
        y: NodeId,
        z: NodeId,
        s: NodeId,
    ) -> Result<NodeId, TensorError> {
        let d = x.cols();
        let uniform = |w: f64| Tensor::filled(1, d, w);
        match self {
            Equation::AllenCahn { laplacian } => {
                let w = tape.constant(uniform(-laplacian));
                let sd = tape.diagonal(s)?;
                let tr = tape.inner(sd, w)?;
                let y3 = tape.cube(y)?;
                let a = tape.sub(tr, y)?;
                tape.add(a, y3)
            }
            Equation::Hjb { laplacian } => {
                let w = tape.constant(uniform(-laplacian));
                let sd = tape.diagonal(s)?;
                let tr = tape.inner(sd, w)?;
                let zz = tape.inner(z, z)?;
                tape.add(tr, zz)
            }
            Equation::GBrownian { sigma } => {
                let sd = tape.diagonal(s)?;
                let w = tape.constant(sigma_weights(tape.value(sd), sigma, None));
                tape.inner(sd, w)
            }
            Equation::Bsb { rate, sigma } => {
                let sd = tape.diagonal(s)?;
                let w = tape.constant(sigma_weights(tape.value(sd), sigma, Some(x)));
                let diag_term = tape.inner(sd, w)?;
                let xc = tape.constant(x.clone());
                let xz = tape.inner(z, xc)?;
                let gap = tape.sub(y, xz)?;
                let lin = tape.scale(gap, *rate)?;
                tape.add(diag_term, lin)
            }
            Equation::Custom(f) => f.record(tape, t, x, y, z, s),
        }
    }
}

/// Per-row weights `−½ x_i² σ̄(S_ii)²` on the diagonal entries of flattened `S`.
fn sigma_weights(diag: &Tensor, sigma: &SigmaBar, x: Option<&Tensor>) -> Tensor {
    let rows = match x {
        Some(x) => diag.rows().max(x.rows()),
        None => diag.rows(),
    };
    Tensor::from_fn(rows, diag.cols(), |r, i| {
        let sb = sigma.eval(diag.get(if diag.rows() == 1 { 0 } else { r }, i));
        let xi2 = x.map_or(1.0, |x| {
            let v = x.get(if x.rows() == 1 { 0 } else { r }, i);
            v * v
        });
        -0.5 * xi2 * sb * sb
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub value: f64,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSettings {
    pub hidden_layers: usize,
    /// Defaults to the state dimension.
    #[serde(default)]
    pub hidden_width: Option<usize>,
    pub use_batchnorm: bool,
    #[serde(default)]
    pub normalize_input: bool,
    pub heads: HeadKind,
    pub y0_range: (f64, f64),
    #[serde(default = "default_head_scale")]
    pub head_scale: f64,
    /// Fixed factor on the `A_n`, `G_n` outputs.
    #[serde(default = "default_output_gain")]
    pub output_gain: f64,
}

fn default_output_gain() -> f64 {
    1.0
}

fn default_head_scale() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub name: String,
    pub dim: usize,
    pub horizon: f64,
    pub steps: usize,
    pub start: StartDistribution,
    pub terminal: Terminal,
    pub equation: Equation,
    pub diffusion: Diffusion,
    pub framework: Framework,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub iterations: usize,
    pub checkpoints: Vec<usize>,
    pub network: NetworkSettings,
    #[serde(default)]
    pub reference: Option<Reference>,
    /// Set once [`ProblemSpec::to_initial_value_form`] has been applied an odd number of times.
    #[serde(default)]
    pub time_reversed: bool,
}

impl ProblemSpec {
    /// `f` honoring the time reversal flag.
    pub fn f(&self, t: f64, x: &[f64], y: f64, z: &[f64], s: &[f64]) -> f64 {
        if self.time_reversed {
            -self.equation.eval(self.horizon - t, x, y, z, s)
        } else {
            self.equation.eval(t, x, y, z, s)
        }
    }

    pub fn record_f(
        &self,
        tape: &mut Tape,
        t: f64,
        x: &Tensor,
        y: NodeId,
        z: NodeId,
        s: NodeId,
    ) -> Result<NodeId, TensorError> {
        if self.time_reversed {
            let v = self.equation.record(tape, self.horizon - t, x, y, z, s)?;
            tape.scale(v, -1.0)
        } else {
            self.equation.record(tape, t, x, y, z, s)
        }
    }

    pub fn g(&self, x: &[f64]) -> f64 {
        self.terminal.eval(x)
    }

    /// `F(t, …) = −f(T − t, …)`, the form with an initial rather than terminal condition.
    pub fn to_initial_value_form(&self) -> ProblemSpec {
        let mut out = self.clone();
        out.time_reversed = !self.time_reversed;
        out
    }

    pub fn network_config(&self) -> NetworkConfig {
        let n = &self.network;
        NetworkConfig {
            dim: self.dim,
            steps: self.steps,
            hidden_layers: n.hidden_layers,
            hidden_width: n.hidden_width.unwrap_or(self.dim),
            use_batchnorm: n.use_batchnorm,
            output_gain: n.output_gain,
            normalize_input: n.normalize_input,
            heads: n.heads,
            init: InitConfig {
                y0_range: n.y0_range,
                head_scale: n.head_scale,
            },
        }
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        let bad = |m: String| Err(ProblemError::Invalid(m));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.dim == 0 || self.start.dim() != self.dim {
            return bad(format!(
                "start point has dimension {}, expected {}",
                self.start.dim(),
                self.dim
            ));
        }
        if let Terminal::Affine { a, .. } = &self.terminal {
            if a.len() != self.dim {
                return bad("affine terminal coefficient has the wrong dimension".into());
            }
        }
        match &self.equation {
            Equation::Bsb { sigma, .. } | Equation::GBrownian { sigma } => sigma.validate()?,
            _ => {}
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.framework == Framework::Specific {
            if self.diffusion != (Diffusion::Additive { scale: 1.0 }) {
                return bad("the specific framework needs X = ξ + W".into());
            }
            if !self.start.is_deterministic() || self.network.heads != HeadKind::Constant {
                return bad("the specific framework needs a fixed start and constant heads".into());
            }
        }
        if !self.optimizer.is_valid() {
            return bad("optimizer parameters out of range".into());
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return bad("checkpoints must be strictly increasing".into());
        }
        if self
            .checkpoints
            .last()
            .is_some_and(|&c| c > self.iterations)
        {
            return bad("checkpoint beyond the iteration count".into());
        }
        if let Some(r) = &self.reference {
            if !r.value.is_finite() {
                return bad("reference value must be finite".into());
            }
        }
        let (lo, hi) = self.network.y0_range;
        if !(lo <= hi) {
            return bad("y0_range must be ordered".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ProblemError> {
        let spec: ProblemSpec =
            toml::from_str(text).map_err(|e| ProblemError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String, ProblemError> {
        toml::to_string(self).map_err(|e| ProblemError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ProblemError> {
        let text = std::fs::read_to_string(path).map_err(|source| ProblemError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Built-in benchmark by name.
    pub fn by_name(name: &str) -> Result<Self, ProblemError> {
        match name {
            "allen_cahn_20" | "ac20" => Ok(make_allen_cahn_20()),
            "bsb_100" | "bsb" => Ok(make_bsb_100()),
            "hjb_100" | "hjb" => Ok(make_hjb_100()),
            "allen_cahn_50" | "ac50" => Ok(make_allen_cahn_50()),
            "gbm_100" => make_gbm(100),
            "gbm_1" => make_gbm(1),
            other => Err(ProblemError::Unknown(other.to_string())),
        }
    }

    pub const NAMES: [&'static str; 6] = [
        "allen_cahn_20",
        "bsb_100",
        "hjb_100",
        "allen_cahn_50",
        "gbm_100",
        "gbm_1",
    ];
}

fn alternating(d: usize) -> Vec<f64> {
    (0..d).map(|i| if i % 2 == 0 { 1.0 } else { 0.5 }).collect()
}

/// `d` sets the output gain `1/d`.
fn general_network(use_batchnorm: bool, d: usize) -> NetworkSettings {
    NetworkSettings {
        hidden_layers: 2,
        hidden_width: None,
        use_batchnorm,
        normalize_input: false,
        heads: HeadKind::Constant,
        y0_range: (0.0, 1.0),
        head_scale: 0.1,
        output_gain: 1.0 / d as f64,
    }
}

fn reference(value: f64, source: &str) -> Option<Reference> {
    Some(Reference {
        value,
        source: source.to_string(),
    })
}

pub fn make_allen_cahn_20() -> ProblemSpec {
    let d = 20;
    ProblemSpec {
        name: "allen_cahn_20".into(),
        dim: d,
        horizon: 0.3,
        steps: 20,
        start: StartDistribution::Fixed {
            point: vec![0.0; d],
        },
        terminal: Terminal::InverseQuadratic { a: 2.0, b: 0.4 },
        equation: Equation::AllenCahn { laplacian: 0.5 },
        diffusion: Diffusion::Additive { scale: 1.0 },
        framework: Framework::Specific,
        optimizer: OptimizerConfig::Sgd {
            schedule: Schedule::constant(1e-3),
        },
        batch_size: 1,
        iterations: 5000,
        checkpoints: vec![0, 1000, 2000, 3000, 4000, 5000],
        network: NetworkSettings {
            y0_range: (-1.0, 1.0),
            output_gain: 1.0,
            ..general_network(false, 20)
        },
        reference: reference(0.30879, "branching diffusion"),
        time_reversed: false,
    }
}

pub fn make_bsb_100() -> ProblemSpec {
    let d = 100;
    ProblemSpec {
        name: "bsb_100".into(),
        dim: d,
        horizon: 1.0,
        steps: 20,
        start: StartDistribution::Fixed {
            point: alternating(d),
        },
        terminal: Terminal::SquaredNorm { c: 1.0 },
        equation: Equation::Bsb {
            rate: 0.05,
            sigma: SigmaBar { max: 0.4, min: 0.1 },
        },
        diffusion: Diffusion::Geometric { volatility: 0.4 },
        framework: Framework::General,
        optimizer: OptimizerConfig::Adam(AdamConfig::new(
            1e-8,
            Schedule::step_decay(1.0, 0.5, 200),
        )),
        batch_size: 64,
        iterations: 400,
        checkpoints: vec![0, 100, 200, 300, 400],
        network: general_network(true, d),
        reference: reference(62.5 * 0.21f64.exp(), "closed form"),
        time_reversed: false,
    }
}

pub fn make_hjb_100() -> ProblemSpec {
    let d = 100;
    ProblemSpec {
        name: "hjb_100".into(),
        dim: d,
        horizon: 1.0,
        steps: 20,
        start: StartDistribution::Fixed {
            point: vec![0.0; d],
        },
        terminal: Terminal::LogQuadratic,
        equation: Equation::Hjb { laplacian: 1.0 },
        diffusion: Diffusion::Additive { scale: 2f64.sqrt() },
        framework: Framework::General,
        optimizer: OptimizerConfig::Adam(AdamConfig::new(1e-8, Schedule::constant(0.01))),
        batch_size: 64,
        iterations: 2000,
        checkpoints: vec![0, 500, 1000, 1500, 2000],
        network: general_network(true, d),
        reference: reference(4.5901, "Monte Carlo (Cole-Hopf)"),
        time_reversed: false,
    }
}

pub fn make_allen_cahn_50() -> ProblemSpec {
    let d = 50;
    ProblemSpec {
        name: "allen_cahn_50".into(),
        dim: d,
        horizon: 0.3,
        steps: 20,
        start: StartDistribution::Fixed {
            point: vec![0.0; d],
        },
        terminal: Terminal::InverseQuadratic { a: 2.0, b: 0.4 },
        equation: Equation::AllenCahn { laplacian: 1.0 },
        diffusion: Diffusion::Additive { scale: 2f64.sqrt() },
        framework: Framework::General,
        optimizer: OptimizerConfig::Adam(AdamConfig::new(
            1.0,
            Schedule::step_decay(0.1, 0.9, 1000),
        )),
        batch_size: 64,
        iterations: 2000,
        checkpoints: vec![0, 500, 1000, 1500, 2000],
        network: general_network(true, d),
        reference: reference(0.09909, "branching diffusion"),
        time_reversed: false,
    }
}

pub fn make_gbm(d: usize) -> Result<ProblemSpec, ProblemError> {
    let sigma = SigmaBar {
        max: 1.0,
        min: 0.5f64.sqrt(),
    };
    let base = ProblemSpec {
        name: String::new(),
        dim: d,
        horizon: 1.0,
        steps: 20,
        start: StartDistribution::Fixed {
            point: vec![0.0; d],
        },
        terminal: Terminal::SquaredNorm { c: 1.0 },
        equation: Equation::GBrownian { sigma },
        diffusion: Diffusion::Additive { scale: 1.0 },
        framework: Framework::General,
        optimizer: OptimizerConfig::Adam(AdamConfig::new(1e-8, Schedule::constant(0.01))),
        batch_size: 64,
        iterations: 0,
        checkpoints: vec![],
        network: general_network(true, d),
        reference: None,
        time_reversed: false,
    };
    match d {
        100 => Ok(ProblemSpec {
            name: "gbm_100".into(),
            start: StartDistribution::Fixed {
                point: alternating(d),
            },
            optimizer: OptimizerConfig::Adam(AdamConfig::new(
                1e-8,
                Schedule::step_decay(1.0, 0.5, 500),
            )),
            iterations: 1500,
            checkpoints: vec![0, 500, 1000, 1500],
            reference: reference(162.5, "closed form"),
            ..base
        }),
        1 => Ok(ProblemSpec {
            name: "gbm_1".into(),
            start: StartDistribution::Fixed { point: vec![-2.0] },
            terminal: Terminal::Logistic,
            iterations: 500,
            checkpoints: vec![0, 100, 200, 300, 500],
            reference: reference(0.90471, "finite differences"),
            ..base
        }),
        other => Err(ProblemError::Invalid(format!(
            "the G-Brownian benchmark exists for d = 1 and d = 100, not {other}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn identity_flat(d: usize) -> Vec<f64> {
        Tensor::identity(d).into_data()
    }

    #[test]
    fn allen_cahn_20_values() {
        let p = make_allen_cahn_20();
        assert_eq!(p.g(&[0.0; 20]), 0.5);
        assert_relative_eq!(
            p.f(0.0, &[0.0; 20], 0.0, &[0.0; 20], &identity_flat(20)),
            -10.0
        );
        assert_eq!(p.reference.as_ref().unwrap().value, 0.30879);
    }

    #[test]
    fn bsb_values() {
        let p = make_bsb_100();
        let xi = p.start.center().to_vec();
        assert_relative_eq!(p.g(&xi), 62.5);
        let z: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let y: f64 = xi.iter().zip(&z).map(|(a, b)| a * b).sum();
        assert_relative_eq!(
            p.f(0.3, &xi, y, &z, &vec![0.0; 10000]),
            0.0,
            epsilon = 1e-12
        );
        assert!((p.reference.as_ref().unwrap().value - 77.1049).abs() < 5e-5);
    }

    #[test]
    fn hjb_values() {
        let p = make_hjb_100();
        assert_relative_eq!(p.g(&[0.0; 100]), 0.5f64.ln());
        assert_relative_eq!(
            p.f(0.0, &[0.0; 100], 0.0, &[0.0; 100], &identity_flat(100)),
            -100.0
        );
        assert_eq!(p.reference.as_ref().unwrap().value, 4.5901);
    }

    #[test]
    fn allen_cahn_50_values() {
        let p = make_allen_cahn_50();
        assert_eq!(p.g(&[0.0; 50]), 0.5);
        assert_eq!(p.reference.as_ref().unwrap().value, 0.09909);
        let x = Tensor::zeros(1, 50);
        let w = p.diffusion.trace_weights(&x);
        let s: Vec<f64> = (0..2500).map(|i| (i as f64 * 0.37).cos()).collect();
        let half_tr: f64 = 0.5 * (0..50).map(|i| w.get(0, i) * s[i * 50 + i]).sum::<f64>();
        assert_relative_eq!(half_tr, trace(&s, 50), epsilon = 1e-12);
    }

    #[test]
    fn gbm_values() {
        assert_eq!(make_gbm(100).unwrap().reference.unwrap().value, 162.5);
        assert_eq!(make_gbm(1).unwrap().reference.unwrap().value, 0.90471);
        assert!(make_gbm(7).is_err());
        let p = make_gbm(3).err();
        assert!(p.is_some());
        let f = Equation::GBrownian {
            sigma: SigmaBar::new(1.0, 0.5f64.sqrt()).unwrap(),
        };
        let s = [-1.0, 0.3, 0.2, 0.7, -2.0, 0.0, 0.1, 0.9, -0.5];
        let tr = -3.5;
        assert_relative_eq!(
            f.eval(0.0, &[0.0; 3], 0.0, &[0.0; 3], &s),
            -0.25 * tr,
            epsilon = 1e-12
        );
    }

    #[test]
    fn sigma_bar_jump() {
        let s = SigmaBar::new(0.4, 0.1).unwrap();
        assert_eq!(s.eval(0.0), 0.4);
        assert_eq!(s.eval(-1e-300), 0.1);
        assert_eq!(s.eval(5.0), 0.4);
        assert!(SigmaBar::new(0.1, 0.4).is_err());
    }

    #[derive(Debug)]
    struct TimeOnly;
    impl Nonlinearity for TimeOnly {
        fn eval(&self, t: f64, _: &[f64], _: f64, _: &[f64], _: &[f64]) -> f64 {
            t
        }
    }

    #[test]
    fn time_reversal_examples() {
        let mut p = make_allen_cahn_20();
        p.equation = Equation::Custom(Arc::new(TimeOnly));
        let q = p.to_initial_value_form();
        assert_relative_eq!(
            q.f(0.1, &[0.0; 20], 0.0, &[0.0; 20], &[0.0; 400]),
            -(0.3 - 0.1)
        );
        let ac = make_allen_cahn_20();
        let r = ac.to_initial_value_form();
        let s = identity_flat(20);
        assert_relative_eq!(
            r.f(0.2, &[0.1; 20], 0.4, &[0.0; 20], &s),
            -ac.f(0.2, &[0.1; 20], 0.4, &[0.0; 20], &s)
        );
    }

    #[test]
    fn builtin_specs_validate_and_roundtrip() {
        for name in ProblemSpec::NAMES {
            let p = ProblemSpec::by_name(name).unwrap();
            p.validate().unwrap();
            let text = p.to_toml().unwrap();
            assert_eq!(ProblemSpec::from_toml(&text).unwrap(), p, "{name}");
        }
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let text = make_gbm(1).unwrap().to_toml().unwrap();
        let bad = format!("colour = 3\n{text}");
        assert!(matches!(
            ProblemSpec::from_toml(&bad),
            Err(ProblemError::Parse(_))
        ));
        let nested = text.replacen("[network]", "[network]\nwidth_typo = 4", 1);
        assert!(ProblemSpec::from_toml(&nested).is_err());
    }

    #[test]
    fn tape_f_matches_plain_f() {
        let d = 3;
        let x = Tensor::new(2, d, vec![1.0, 0.5, -0.2, 0.3, 2.0, 1.1]).unwrap();
        let yv = Tensor::new(2, 1, vec![0.4, -1.3]).unwrap();
        let zv = Tensor::new(2, d, vec![0.2, -0.1, 0.5, 1.0, 0.0, -0.7]).unwrap();
        let sv = Tensor::from_fn(2, d * d, |r, c| ((r * 9 + c) as f64 * 0.77).sin());
        let sigma = SigmaBar::new(0.4, 0.1).unwrap();
        let eqs = [
            Equation::AllenCahn { laplacian: 0.5 },
            Equation::Hjb { laplacian: 1.0 },
            Equation::GBrownian { sigma },
            Equation::Bsb { rate: 0.05, sigma },
        ];
        for eq in eqs {
            let mut tape = Tape::new();
            let (y, z, s) = (
                tape.parameter(yv.clone()),
                tape.parameter(zv.clone()),
                tape.parameter(sv.clone()),
            );
            let out = eq.record(&mut tape, 0.2, &x, y, z, s).unwrap();
            for r in 0..2 {
                let want = eq.eval(
                    0.2,
                    x.row_slice(r),
                    yv.get(r, 0),
                    zv.row_slice(r),
                    sv.row_slice(r),
                );
                assert_relative_eq!(tape.value(out).get(r, 0), want, epsilon = 1e-12);
            }
        }
    }

    #[derive(Debug)]
    struct Cubic;
    impl Nonlinearity for Cubic {
        fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], s: &[f64]) -> f64 {
            t * x[0] + y * y * y + z[0] * z[1] - s[0]
        }
    }

    #[test]
    fn custom_record_linearization() {
        let eq = Equation::Custom(Arc::new(Cubic));
        let mut tape = Tape::new();
        let x = Tensor::row(vec![2.0, 1.0]);
        let y = tape.parameter(Tensor::scalar(0.5));
        let z = tape.parameter(Tensor::row(vec![3.0, -1.0]));
        let s = tape.parameter(Tensor::row(vec![1.0, 0.0, 0.0, 1.0]));
        let out = eq.record(&mut tape, 0.5, &x, y, z, s).unwrap();
        assert_relative_eq!(
            tape.value(out).item().unwrap(),
            1.0 + 0.125 - 3.0 - 1.0,
            epsilon = 1e-9
        );
        let g = tape.backward(out).unwrap();
        assert_relative_eq!(g.get(y).unwrap().item().unwrap(), 0.75, epsilon = 1e-6);
        assert_relative_eq!(g.get(z).unwrap().get(0, 0), -1.0, epsilon = 1e-6);
        assert_relative_eq!(g.get(s).unwrap().get(0, 0), -1.0, epsilon = 1e-6);
    }

    proptest! {
        #[test]
        fn initial_value_form_is_involution(t in 0.0f64..1.0, y in -5.0f64..5.0,
                                            x in proptest::collection::vec(-3.0f64..3.0, 100),
                                            z in proptest::collection::vec(-3.0f64..3.0, 100),
                                            diag in proptest::collection::vec(-3.0f64..3.0, 100)) {
            let mut s = vec![0.0; 10000];
            for (i, v) in diag.iter().enumerate() { s[i * 100 + i] = *v; }
            for p in [make_bsb_100(), make_hjb_100(), make_gbm(100).unwrap()] {
                let back = p.to_initial_value_form().to_initial_value_form();
                prop_assert_eq!(back.f(t, &x, y, &z, &s).to_bits(), p.f(t, &x, y, &z, &s).to_bits());
            }
        }

        #[test]
        fn benchmark_f_and_g_are_finite(scale in 0.0f64..1e3, seed in 0u64..1000) {
            let mut r = crate::rng::stream(seed, 0);
            let mut unit = |n: usize| {
                let mut v = vec![0.0; n];
                crate::rng::fill_normal(&mut r, &mut v);
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
                v.iter().map(|a| a / norm * scale).collect::<Vec<_>>()
            };
            for name in ProblemSpec::NAMES {
                let p = ProblemSpec::by_name(name).unwrap();
                let d = p.dim;
                let (x, z, s) = (unit(d), unit(d), unit(d * d));
                prop_assert!(p.g(&x).is_finite());
                prop_assert!(p.f(0.1, &x, 0.5, &z, &s).is_finite());
            }
        }
    }
}
