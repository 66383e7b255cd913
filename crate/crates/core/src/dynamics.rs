//! Time grid, Brownian increments and the forward state process.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("state became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("batch needs at least one path")]
    EmptyBatch,
}

/// Knots `0 = t_0 < t_1 < … < t_N = T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    knots: Vec<f64>,
}

impl TimeGrid {
    /// `t_i = iT/N`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self, DynamicsError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(DynamicsError::InvalidGrid(format!(
                "horizon {horizon} must be positive"
            )));
        }
        if steps == 0 {
            return Err(DynamicsError::InvalidGrid("need at least one step".into()));
        }
        let knots = (0..=steps)
            .map(|i| {
                if i == steps {
                    horizon
                } else {
                    i as f64 * horizon / steps as f64
                }
            })
            .collect();
        Ok(Self { knots })
    }

    pub fn from_knots(knots: Vec<f64>) -> Result<Self, DynamicsError> {
        if knots.len() < 2 || knots[0] != 0.0 {
            return Err(DynamicsError::InvalidGrid(
                "knots must start at 0 and contain a step".into(),
            ));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(DynamicsError::InvalidGrid(
                "knots must be strictly increasing".into(),
            ));
        }
        Ok(Self { knots })
    }

    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    pub fn t(&self, n: usize) -> f64 {
        self.knots[n]
    }

    pub fn dt(&self, n: usize) -> f64 {
        self.knots[n + 1] - self.knots[n]
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }
}

/// Brownian increments `W_{t_{n+1}} − W_{t_n}` for a batch of paths.
///
/// Path `j` draws from its own substream of `seed`, so its increments do not
/// depend on the batch size.
#[derive(Clone, Debug)]
pub struct BrownianBatch {
    dim: usize,
    paths: usize,
    seed: u64,
    increments: Vec<Tensor>,
}

impl BrownianBatch {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    /// `paths × dim` increments over step `n`.
    pub fn increment(&self, n: usize) -> &Tensor {
        &self.increments[n]
    }

    /// `W_{t_n}` for every path (partial sums of the increments).
    pub fn position(&self, n: usize) -> Tensor {
        let mut acc = Tensor::zeros(self.paths, self.dim);
        for inc in &self.increments[..n] {
            for (a, b) in acc.data_mut().iter_mut().zip(inc.data()) {
                *a += b;
            }
        }
        acc
    }
}

pub fn sample_brownian(
    dim: usize,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
) -> Result<BrownianBatch, DynamicsError> {
    if paths == 0 {
        return Err(DynamicsError::EmptyBatch);
    }
    let steps = grid.steps();
    let mut increments: Vec<Tensor> = (0..steps).map(|_| Tensor::zeros(paths, dim)).collect();
    let mut buf = vec![0.0; dim];
    for j in 0..paths {
        let mut rng = rng::stream(seed, j as u64);
        for (n, inc) in increments.iter_mut().enumerate() {
            let sd = grid.dt(n).sqrt();
            rng::fill_normal(&mut rng, &mut buf);
            for (dst, z) in inc.data_mut()[j * dim..(j + 1) * dim].iter_mut().zip(&buf) {
                *dst = sd * z;
            }
        }
    }
    Ok(BrownianBatch {
        dim,
        paths,
        seed,
        increments,
    })
}

/// One-step transition `H(s, t, x, w)` of the forward process.
pub trait Transition {
    fn step(&self, s: f64, t: f64, x: &[f64], w: &[f64], out: &mut [f64]);
}

impl<F> Transition for F
where
    F: Fn(f64, f64, &[f64], &[f64], &mut [f64]),
{
    fn step(&self, s: f64, t: f64, x: &[f64], w: &[f64], out: &mut [f64]) {
        self(s, t, x, w, out)
    }
}

/// Driftless Euler dynamics used by the benchmarks, with the matching `σ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Diffusion {
    /// `H(s,t,x,w) = x + c·w`, `σ(x) = c·Id`.
    Additive { scale: f64 },
    /// `H(s,t,x,w) = x + c·diag(x)·w`, `σ(x) = c·diag(x)`.
    Geometric { volatility: f64 },
}

impl Diffusion {
    pub fn sigma(&self, x: &[f64]) -> Tensor {
        let d = x.len();
        match *self {
            Diffusion::Additive { scale } => {
                Tensor::from_fn(d, d, |r, c| if r == c { scale } else { 0.0 })
            }
            Diffusion::Geometric { volatility } => {
                Tensor::from_fn(d, d, |r, c| if r == c { volatility * x[r] } else { 0.0 })
            }
        }
    }

    /// Diagonal of `σσ*` row-wise; both diffusions have diagonal `σ`, so
    /// `Trace(σσ* S)` is the inner product of this row with `diag(S)`.
    ///
    /// State-independent diffusions return a single row.
    pub fn trace_weights(&self, x: &Tensor) -> Tensor {
        match *self {
            Diffusion::Additive { scale } => Tensor::filled(1, x.cols(), scale * scale),
            Diffusion::Geometric { volatility } => x.map(|xi| volatility * volatility * xi * xi),
        }
    }
}

impl Transition for Diffusion {
    fn step(&self, _s: f64, _t: f64, x: &[f64], w: &[f64], out: &mut [f64]) {
        match *self {
            Diffusion::Additive { scale } => {
                for ((o, xi), wi) in out.iter_mut().zip(x).zip(w) {
                    *o = xi + scale * wi;
                }
            }
            Diffusion::Geometric { volatility } => {
                for ((o, xi), wi) in out.iter_mut().zip(x).zip(w) {
                    *o = xi + volatility * xi * wi;
                }
            }
        }
    }
}

/// Law of the start point `ξ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StartDistribution {
    Fixed {
        point: Vec<f64>,
    },
    /// Independent uniform coordinates on `center ± half_width`.
    UniformBox {
        center: Vec<f64>,
        half_width: f64,
    },
}

impl StartDistribution {
    pub fn dim(&self) -> usize {
        match self {
            StartDistribution::Fixed { point } => point.len(),
            StartDistribution::UniformBox { center, .. } => center.len(),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, StartDistribution::Fixed { .. })
    }

    /// Representative point (the fixed point or the box center).
    pub fn center(&self) -> &[f64] {
        match self {
            StartDistribution::Fixed { point } => point,
            StartDistribution::UniformBox { center, .. } => center,
        }
    }

    /// One row per path; a fixed start yields a single broadcastable row.
    pub fn sample(&self, paths: usize, seed: u64) -> Tensor {
        use rand::Rng;
        match self {
            StartDistribution::Fixed { point } => Tensor::row(point.clone()),
            StartDistribution::UniformBox { center, half_width } => {
                let d = center.len();
                let mut out = Tensor::zeros(paths, d);
                for j in 0..paths {
                    let mut r = rng::stream(seed, j as u64);
                    for (i, c) in center.iter().enumerate() {
                        out.data_mut()[j * d + i] =
                            c + half_width * (2.0 * r.random::<f64>() - 1.0);
                    }
                }
                out
            }
        }
    }
}

/// Simulated states `X^j_n`, `n = 0..=N`, each a `paths × dim` tensor.
#[derive(Clone, Debug)]
pub struct PathBatch {
    positions: Vec<Tensor>,
}

impl PathBatch {
    pub fn steps(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn paths(&self) -> usize {
        self.positions[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.positions[0].cols()
    }

    pub fn position(&self, n: usize) -> &Tensor {
        &self.positions[n]
    }

    pub fn terminal(&self) -> &Tensor {
        &self.positions[self.positions.len() - 1]
    }

    /// `X_{n+1} − X_n`.
    pub fn increment(&self, n: usize) -> Tensor {
        let a = &self.positions[n];
        let b = &self.positions[n + 1];
        let data = b.data().iter().zip(a.data()).map(|(p, q)| p - q).collect();
        Tensor::new(a.rows(), a.cols(), data).expect("same shape")
    }
}

/// `X_0 = ξ`, `X_{n+1} = H(t_n, t_{n+1}, X_n, ΔW_n)`.
///
/// `start` is `1 × d` (shared) or `paths × d`.
pub fn roll_forward(
    start: &Tensor,
    transition: &dyn Transition,
    grid: &TimeGrid,
    increments: &BrownianBatch,
) -> Result<PathBatch, DynamicsError> {
    let (paths, d) = (increments.paths(), increments.dim());
    if start.cols() != d {
        return Err(DynamicsError::Dimension {
            expected: d,
            got: start.cols(),
        });
    }
    if start.rows() != 1 && start.rows() != paths {
        return Err(DynamicsError::Dimension {
            expected: paths,
            got: start.rows(),
        });
    }
    let first = Tensor::from_fn(paths, d, |r, c| {
        start.get(if start.rows() == 1 { 0 } else { r }, c)
    });
    let mut positions = Vec::with_capacity(grid.steps() + 1);
    positions.push(first);
    for n in 0..grid.steps() {
        let prev = &positions[n];
        let dw = increments.increment(n);
        let mut next = Tensor::zeros(paths, d);
        for j in 0..paths {
            transition.step(
                grid.t(n),
                grid.t(n + 1),
                prev.row_slice(j),
                dw.row_slice(j),
                &mut next.data_mut()[j * d..(j + 1) * d],
            );
        }
        if !next.is_finite() {
            return Err(DynamicsError::NonFinite { step: n + 1 });
        }
        positions.push(next);
    }
    Ok(PathBatch { positions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn uniform_grid_knots() {
        let g = TimeGrid::uniform(0.3, 20).unwrap();
        assert_eq!(g.steps(), 20);
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.horizon(), 0.3);
        assert_relative_eq!(g.t(7), 7.0 * 0.3 / 20.0);
        assert!(g.knots().windows(2).all(|w| w[1] > w[0]));
        assert!(TimeGrid::uniform(1.0, 0).is_err());
        assert!(TimeGrid::from_knots(vec![0.0, 0.5, 0.5]).is_err());
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let g = TimeGrid::uniform(1.0, 5).unwrap();
        let a = sample_brownian(3, &g, 4, 11).unwrap();
        let b = sample_brownian(3, &g, 4, 11).unwrap();
        for n in 0..5 {
            assert_eq!(a.increment(n), b.increment(n));
        }
    }

    #[test]
    fn path_draws_do_not_depend_on_batch_size() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let small = sample_brownian(2, &g, 2, 5).unwrap();
        let large = sample_brownian(2, &g, 9, 5).unwrap();
        for n in 0..4 {
            assert_eq!(
                small.increment(n).row_slice(1),
                large.increment(n).row_slice(1)
            );
        }
    }

    #[test]
    fn increment_moments() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let dt = g.dt(0);
        let m = 1_000_000;
        let b = sample_brownian(1, &g, m, 2024).unwrap();
        let xs = b.increment(0).data();
        let mean = xs.iter().sum::<f64>() / m as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
        let se = (dt / m as f64).sqrt();
        assert!(mean.abs() < 4.0 * se, "mean {mean}");
        assert!((var - dt).abs() < 0.01 * dt, "var {var}");
    }

    #[test]
    fn additive_dynamics_telescope() {
        let g = TimeGrid::uniform(1.0, 6).unwrap();
        let b = sample_brownian(3, &g, 5, 1).unwrap();
        let xi = Tensor::row(vec![0.5, -1.0, 2.0]);
        let p = roll_forward(&xi, &Diffusion::Additive { scale: 1.0 }, &g, &b).unwrap();
        let w_t = b.position(6);
        for j in 0..5 {
            for i in 0..3 {
                assert_relative_eq!(
                    p.terminal().get(j, i),
                    xi.get(0, i) + w_t.get(j, i),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn frozen_dynamics_stay_at_start() {
        let g = TimeGrid::uniform(1.0, 3).unwrap();
        let b = sample_brownian(2, &g, 3, 1).unwrap();
        let frozen = |_: f64, _: f64, x: &[f64], _: &[f64], out: &mut [f64]| out.copy_from_slice(x);
        let xi = Tensor::row(vec![1.0, 2.0]);
        let p = roll_forward(&xi, &frozen, &g, &b).unwrap();
        for n in 0..=3 {
            for j in 0..3 {
                assert_eq!(p.position(n).row_slice(j), &[1.0, 2.0]);
            }
        }
    }

    #[test]
    fn geometric_step_by_hand() {
        let h = Diffusion::Geometric { volatility: 0.4 };
        let mut out = [0.0; 2];
        h.step(0.0, 1.0, &[1.0, 0.5], &[0.1, -0.2], &mut out);
        assert_relative_eq!(out[0], 1.04, epsilon = 1e-12);
        assert_relative_eq!(out[1], 0.46, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_state_names_step() {
        let g = TimeGrid::uniform(1.0, 3).unwrap();
        let b = sample_brownian(1, &g, 1, 1).unwrap();
        let blow = |_: f64, t: f64, x: &[f64], _: &[f64], out: &mut [f64]| {
            out[0] = if t > 0.5 { f64::INFINITY } else { x[0] };
        };
        let err = roll_forward(&Tensor::row(vec![0.0]), &blow, &g, &b).unwrap_err();
        assert_eq!(err, DynamicsError::NonFinite { step: 2 });
    }

    #[test]
    fn scaled_brownian_variance() {
        let g = TimeGrid::uniform(1.0, 20).unwrap();
        let m = 100_000;
        let b = sample_brownian(1, &g, m, 77).unwrap();
        let p = roll_forward(
            &Tensor::row(vec![0.0]),
            &Diffusion::Additive { scale: 2f64.sqrt() },
            &g,
            &b,
        )
        .unwrap();
        let xs = p.terminal().data();
        let mean = xs.iter().sum::<f64>() / m as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1) as f64;
        // std error of a Gaussian sample variance: σ²·sqrt(2/(m-1))
        let se = 2.0 * (2.0 / (m - 1) as f64).sqrt();
        assert!((var - 2.0).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn trace_weights_match_sigma() {
        let x = Tensor::new(2, 2, vec![1.0, 0.5, -2.0, 3.0]).unwrap();
        let h = Diffusion::Geometric { volatility: 0.4 };
        let w = h.trace_weights(&x);
        for r in 0..2 {
            let s = h.sigma(x.row_slice(r));
            for a in 0..2 {
                for b in 0..2 {
                    let ss: f64 = (0..2).map(|k| s.get(a, k) * s.get(b, k)).sum();
                    let expected = if a == b { w.get(r, a) } else { 0.0 };
                    assert_relative_eq!(expected, ss, epsilon = 1e-14);
                }
            }
        }
    }
}
