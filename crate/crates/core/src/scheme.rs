//! Forward recursion for `(Y, Z)` and the terminal-mismatch loss.
//!
//! ```text
//! Y_{n+1} = Y_n + Δt [½ Trace(σσ* G_n) + f(t_n, X_n, Y_n, Z_n, G_n)] + ⟨Z_n, ΔX_n⟩
//! Z_{n+1} = Z_n + A_n Δt + G_n ΔX_n
//! ```

use thiserror::Error;

use crate::dynamics::{PathBatch, TimeGrid};
use crate::network::{BnMode, Bound, LayoutError, Network, SubnetId};
use crate::problems::ProblemSpec;
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemeError {
    #[error("Y or Z became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

/// Supplies the initial values and the per-step Hessian and drift approximations.
///
/// Every method returns a tape node with either one row (shared by all
/// paths) or one row per path.
pub trait CoefficientModel {
    /// `1 × 1` or `rows × 1`.
    fn initial_value(&mut self, tape: &mut Tape, start: &Tensor) -> Result<NodeId, SchemeError>;
    /// `1 × d` or `rows × d`.
    fn initial_gradient(&mut self, tape: &mut Tape, start: &Tensor) -> Result<NodeId, SchemeError>;
    /// `G_n(x)` flattened row-major, `1 × d²` or `rows × d²`.
    fn hessian(&mut self, tape: &mut Tape, n: usize, x: &Tensor) -> Result<NodeId, SchemeError>;
    /// `A_n(x)`, `1 × d` or `rows × d`.
    fn drift(&mut self, tape: &mut Tape, n: usize, x: &Tensor) -> Result<NodeId, SchemeError>;
}

/// Coefficients from a bound network.
pub struct NetworkModel<'a> {
    pub network: &'a Network,
    pub bound: &'a Bound,
    pub bn: BnMode<'a>,
}

impl NetworkModel<'_> {
    fn run(&mut self, tape: &mut Tape, id: SubnetId, x: &Tensor) -> Result<NodeId, SchemeError> {
        let x = tape.constant(x.clone());
        Ok(self
            .network
            .forward(tape, self.bound, id, x, &mut self.bn)?)
    }

    fn heads(&self) -> Option<crate::network::BoundHeads> {
        self.bound.heads
    }

    fn scaled_head(&self, tape: &mut Tape, head: NodeId) -> Result<NodeId, SchemeError> {
        match self.network.config().output_gain {
            1.0 => Ok(head),
            k => Ok(tape.scale(head, k)?),
        }
    }
}

impl CoefficientModel for NetworkModel<'_> {
    fn initial_value(&mut self, tape: &mut Tape, start: &Tensor) -> Result<NodeId, SchemeError> {
        match self.heads() {
            Some(h) => Ok(h.y0),
            None => self.run(tape, SubnetId::U, start),
        }
    }

    fn initial_gradient(&mut self, tape: &mut Tape, start: &Tensor) -> Result<NodeId, SchemeError> {
        match self.heads() {
            Some(h) => Ok(h.z0),
            None => self.run(tape, SubnetId::V, start),
        }
    }

    fn hessian(&mut self, tape: &mut Tape, n: usize, x: &Tensor) -> Result<NodeId, SchemeError> {
        match (n, self.heads()) {
            (0, Some(h)) => self.scaled_head(tape, h.g0),
            _ => self.run(tape, SubnetId::G(n), x),
        }
    }

    fn drift(&mut self, tape: &mut Tape, n: usize, x: &Tensor) -> Result<NodeId, SchemeError> {
        match (n, self.heads()) {
            (0, Some(h)) => self.scaled_head(tape, h.a0),
            _ => self.run(tape, SubnetId::A(n), x),
        }
    }
}

/// The exact coefficients of the Black-Scholes-Barenblatt benchmark with
/// `g(x) = c‖x‖²`, where `u(t, x) = c‖x‖² e^{(r + σ_max²)(T − t)}`.
#[derive(Clone, Debug)]
pub struct ExactBsbModel {
    pub c: f64,
    pub rate: f64,
    pub sigma_max: f64,
    pub grid: TimeGrid,
}

impl ExactBsbModel {
    fn growth(&self, t: f64) -> f64 {
        ((self.rate + self.sigma_max * self.sigma_max) * (self.grid.horizon() - t)).exp()
    }
}

impl CoefficientModel for ExactBsbModel {
    fn initial_value(&mut self, tape: &mut Tape, start: &Tensor) -> Result<NodeId, SchemeError> {
        let k = self.c * self.growth(0.0);
        let v = Tensor::from_fn(start.rows(), 1, |r, _| {
            k * start.row_slice(r).iter().map(|x| x * x).sum::<f64>()
        });
        Ok(tape.constant(v))
    }

    fn initial_gradient(&mut self, tape: &mut Tape, start: &Tensor) -> Result<NodeId, SchemeError> {
        let k = 2.0 * self.c * self.growth(0.0);
        Ok(tape.constant(start.map(|x| k * x)))
    }

    fn hessian(&mut self, tape: &mut Tape, n: usize, x: &Tensor) -> Result<NodeId, SchemeError> {
        let d = x.cols();
        let k = 2.0 * self.c * self.growth(self.grid.t(n));
        Ok(tape.constant(Tensor::from_fn(1, d * d, |_, c| {
            if c / d == c % d {
                k
            } else {
                0.0
            }
        })))
    }

    fn drift(&mut self, tape: &mut Tape, n: usize, x: &Tensor) -> Result<NodeId, SchemeError> {
        let lambda = self.rate + self.sigma_max * self.sigma_max;
        let k = -lambda * 2.0 * self.c * self.growth(self.grid.t(n));
        Ok(tape.constant(x.map(|v| k * v)))
    }
}

/// `Y_n` (`rows × 1` or `1 × 1`) and `Z_n` (`rows × d` or `1 × d`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SchemeState {
    pub y: NodeId,
    pub z: NodeId,
}

impl SchemeState {
    pub fn initial(
        tape: &mut Tape,
        model: &mut dyn CoefficientModel,
        start: &Tensor,
    ) -> Result<Self, SchemeError> {
        Ok(Self {
            y: model.initial_value(tape, start)?,
            z: model.initial_gradient(tape, start)?,
        })
    }
}

fn non_finite(step: usize) -> impl Fn(TensorError) -> SchemeError {
    move |e| match e {
        TensorError::NonFinite { .. } => SchemeError::NonFinite { step },
        other => SchemeError::Tensor(other),
    }
}

#[allow(clippy::too_many_arguments)]
fn advance(
    tape: &mut Tape,
    state: SchemeState,
    n: usize,
    grid: &TimeGrid,
    model: &mut dyn CoefficientModel,
    problem: &ProblemSpec,
    x: &Tensor,
    dx: &Tensor,
    trace_weights: Tensor,
) -> Result<SchemeState, SchemeError> {
    let (t, dt) = (grid.t(n), grid.dt(n));
    let g = model.hessian(tape, n, x)?;
    let a = model.drift(tape, n, x)?;
    let wrap = non_finite(n + 1);
    let step = |tape: &mut Tape| -> Result<SchemeState, TensorError> {
        let w = tape.constant(trace_weights);
        let diag = tape.diagonal(g)?;
        let tr = tape.inner(diag, w)?;
        let half_tr = tape.scale(tr, 0.5)?;
        let f = problem.record_f(tape, t, x, state.y, state.z, g)?;
        let integrand = tape.add(half_tr, f)?;
        let drift_y = tape.scale(integrand, dt)?;
        let dxn = tape.constant(dx.clone());
        let zdx = tape.inner(state.z, dxn)?;
        let y1 = tape.add(state.y, drift_y)?;
        let y = tape.add(y1, zdx)?;
        let a_dt = tape.scale(a, dt)?;
        let g_dx = tape.batch_mat_vec(g, dxn)?;
        let z1 = tape.add(state.z, a_dt)?;
        let z = tape.add(z1, g_dx)?;
        Ok(SchemeState { y, z })
    };
    let next = step(tape).map_err(wrap)?;
    if !tape.value(next.y).is_finite() || !tape.value(next.z).is_finite() {
        return Err(SchemeError::NonFinite { step: n + 1 });
    }
    Ok(next)
}

/// One step with `X = ξ + W`: `𝒢_n`, `𝒜_n` are evaluated at `ξ + W_{t_n}` and
/// the trace term is `½ Trace(𝒢_n)`.
#[allow(clippy::too_many_arguments)]
pub fn step_specific(
    tape: &mut Tape,
    state: SchemeState,
    n: usize,
    grid: &TimeGrid,
    model: &mut dyn CoefficientModel,
    problem: &ProblemSpec,
    position: &Tensor,
    dw: &Tensor,
) -> Result<SchemeState, SchemeError> {
    let d = position.cols();
    advance(
        tape,
        state,
        n,
        grid,
        model,
        problem,
        position,
        dw,
        Tensor::filled(1, d, 1.0),
    )
}

/// One step of the general recursion with `½ Trace(σ(X_n)σ(X_n)* 𝒢_n)`.
#[allow(clippy::too_many_arguments)]
pub fn step_general(
    tape: &mut Tape,
    state: SchemeState,
    n: usize,
    grid: &TimeGrid,
    model: &mut dyn CoefficientModel,
    problem: &ProblemSpec,
    x: &Tensor,
    dx: &Tensor,
) -> Result<SchemeState, SchemeError> {
    let weights = problem.diffusion.trace_weights(x);
    advance(tape, state, n, grid, model, problem, x, dx, weights)
}

/// Mean over paths of `(Y_N − g(X_N))²`.
pub fn loss(
    tape: &mut Tape,
    y_terminal: NodeId,
    g_terminal: &Tensor,
) -> Result<NodeId, SchemeError> {
    if g_terminal.rows() == 0 {
        return Err(SchemeError::EmptyBatch);
    }
    let target = tape.constant(g_terminal.clone());
    let gap = tape.sub(y_terminal, target)?;
    let sq = tape.square(gap)?;
    Ok(tape.mean(sq)?)
}

/// The loss node and the terminal values of one rollout.
#[derive(Clone, Copy, Debug)]
pub struct Rollout {
    pub loss: NodeId,
    pub y0: NodeId,
    pub terminal: SchemeState,
}

/// Runs the recursion over a simulated batch and records the loss.
///
/// With `specific` the paths must come from `X = ξ + W`, so that the
/// subnets see `ξ + W_{t_n}` and the increments are `ΔW_n`.
pub fn rollout(
    tape: &mut Tape,
    problem: &ProblemSpec,
    grid: &TimeGrid,
    model: &mut dyn CoefficientModel,
    paths: &PathBatch,
    specific: bool,
) -> Result<Rollout, SchemeError> {
    let start = if problem.start.is_deterministic() {
        Tensor::row(paths.position(0).row_slice(0).to_vec())
    } else {
        paths.position(0).clone()
    };
    let mut state = SchemeState::initial(tape, model, &start)?;
    let y0 = state.y;
    for n in 0..grid.steps() {
        let x = if n == 0 { &start } else { paths.position(n) };
        let dx = paths.increment(n);
        state = if specific {
            step_specific(tape, state, n, grid, model, problem, x, &dx)?
        } else {
            step_general(tape, state, n, grid, model, problem, x, &dx)?
        };
    }
    let g = problem.terminal.eval_rows(paths.terminal());
    let loss = loss(tape, state.y, &g)?;
    Ok(Rollout {
        loss,
        y0,
        terminal: state,
    })
}

/// Empirical loss of the exact BSB coefficients on `paths` fresh paths.
pub fn exact_bsb_loss(
    problem: &ProblemSpec,
    steps: usize,
    paths: usize,
    seed: u64,
) -> Result<f64, crate::Error> {
    let (rate, sigma_max) = match &problem.equation {
        crate::problems::Equation::Bsb { rate, sigma } => (*rate, sigma.max),
        _ => {
            return Err(crate::problems::ProblemError::Invalid(
                "exact coefficients exist only for the BSB equation".into(),
            )
            .into())
        }
    };
    let c = match problem.terminal {
        crate::problems::Terminal::SquaredNorm { c } => c,
        _ => {
            return Err(crate::problems::ProblemError::Invalid(
                "exact coefficients need g = c‖x‖²".into(),
            )
            .into())
        }
    };
    let grid = TimeGrid::uniform(problem.horizon, steps)?;
    let bm = crate::dynamics::sample_brownian(problem.dim, &grid, paths, seed)?;
    let start = problem
        .start
        .sample(paths, crate::rng::derive(seed, &[0x57a7]));
    let pb = crate::dynamics::roll_forward(&start, &problem.diffusion, &grid, &bm)?;
    let mut model = ExactBsbModel {
        c,
        rate,
        sigma_max,
        grid: grid.clone(),
    };
    let mut tape = Tape::new();
    let r = rollout(&mut tape, problem, &grid, &mut model, &pb, false)?;
    Ok(tape.value(r.loss).item().expect("scalar loss"))
}
