//! Reference solvers that do not use the neural scheme.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::problems::Terminal;
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("explicit scheme needs at least {required} time steps, got {given}")]
    Unstable { required: usize, given: usize },
    #[error("invalid oracle input: {0}")]
    Invalid(String),
    #[error("every branching sample exceeded the population cap")]
    PopulationExplosion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub value: f64,
    /// Zero for deterministic methods.
    pub std_error: f64,
    pub method: String,
    /// Monte Carlo samples, or spatial points times time steps for grids.
    pub samples: u64,
    /// Branching samples discarded for exceeding the population cap.
    pub aborted: u64,
}

/// `c‖x‖² exp((r + σ_max²)(T − t))`.
pub fn bsb_analytic(t: f64, x: &[f64], c: f64, rate: f64, sigma_max: f64, horizon: f64) -> f64 {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    c * sq * ((rate + sigma_max * sigma_max) * (horizon - t)).exp()
}

/// `c‖x‖² + c d σ_max² (T − t)`.
pub fn gbm_analytic(t: f64, x: &[f64], c: f64, sigma_max: f64, horizon: f64) -> f64 {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    c * sq + c * x.len() as f64 * sigma_max * sigma_max * (horizon - t)
}

/// Samples per Monte Carlo block; each block owns one random stream.
const BLOCK: u64 = 1 << 15;

#[derive(Clone, Copy, Default)]
struct Moments {
    n: u64,
    sum: f64,
    sum_sq: f64,
    aborted: u64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn merge(mut self, o: Moments) -> Moments {
        self.n += o.n;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
        self.aborted += o.aborted;
        self
    }

    fn mean_and_error(&self) -> (f64, f64) {
        let n = self.n as f64;
        let mean = self.sum / n;
        let var = if self.n > 1 {
            ((self.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        (mean, (var / n).sqrt())
    }
}

/// Splits `samples` into fixed blocks, runs them in parallel and merges the
/// block totals in block order, so the result does not depend on threading.
fn blocked<F>(samples: u64, seed: u64, per_block: F) -> Moments
where
    F: Fn(&mut ChaCha8Rng, u64) -> Moments + Sync,
{
    let blocks = samples.div_ceil(BLOCK);
    let parts: Vec<Moments> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let n = BLOCK.min(samples - b * BLOCK);
            let mut r = rng::stream(seed, b);
            per_block(&mut r, n)
        })
        .collect();
    parts.into_iter().fold(Moments::default(), Moments::merge)
}

/// One offspring option of the branching mechanism.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Offspring {
    pub count: usize,
    pub probability: f64,
    pub coefficient: f64,
}

/// Branching representation of `∂_t u + κΔu + λ(Σ_k q_k c_k u^k − u) = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchingConfig {
    pub kappa: f64,
    pub horizon: f64,
    pub rate: f64,
    pub offspring: Vec<Offspring>,
    pub samples: u64,
    pub seed: u64,
    pub population_cap: usize,
}

impl BranchingConfig {
    /// `λ = 1`, `q_1 = q_3 = ½`, `c_1 = 4`, `c_3 = −2`, so the reaction term is `u − u³`.
    pub fn allen_cahn(kappa: f64, horizon: f64, samples: u64, seed: u64) -> Self {
        Self {
            kappa,
            horizon,
            rate: 1.0,
            offspring: vec![
                Offspring {
                    count: 1,
                    probability: 0.5,
                    coefficient: 4.0,
                },
                Offspring {
                    count: 3,
                    probability: 0.5,
                    coefficient: -2.0,
                },
            ],
            samples,
            seed,
            population_cap: 10_000,
        }
    }

    fn validate(&self) -> Result<(), OracleError> {
        let total: f64 = self.offspring.iter().map(|o| o.probability).sum();
        if self.samples == 0 || !(self.horizon > 0.0) || !(self.kappa >= 0.0) || !(self.rate > 0.0)
        {
            return Err(OracleError::Invalid(
                "need samples ≥ 1, T > 0, κ ≥ 0, λ > 0".into(),
            ));
        }
        if (total - 1.0).abs() > 1e-12 || self.offspring.iter().any(|o| o.probability < 0.0) {
            return Err(OracleError::Invalid(
                "offspring probabilities must sum to one".into(),
            ));
        }
        Ok(())
    }
}

/// One branching sample; `None` when the population cap is hit.
fn branching_sample(
    cfg: &BranchingConfig,
    x: &[f64],
    g: &Terminal,
    r: &mut ChaCha8Rng,
    buf: &mut Vec<(Vec<f64>, f64)>,
) -> Option<f64> {
    buf.clear();
    buf.push((x.to_vec(), 0.0));
    let mut weight = 1.0;
    while let Some((mut pos, t)) = buf.pop() {
        let life = -(-r.random::<f64>()).ln_1p() / cfg.rate;
        let remaining = cfg.horizon - t;
        let dt = life.min(remaining);
        let sd = (2.0 * cfg.kappa * dt).sqrt();
        for p in pos.iter_mut() {
            *p += sd * rng::normal(r);
        }
        if life >= remaining {
            weight *= g.eval(&pos);
            continue;
        }
        let u: f64 = r.random();
        let mut acc = 0.0;
        let mut choice = cfg.offspring[cfg.offspring.len() - 1];
        for o in &cfg.offspring {
            acc += o.probability;
            if u < acc {
                choice = *o;
                break;
            }
        }
        weight *= choice.coefficient;
        if buf.len() + choice.count > cfg.population_cap {
            return None;
        }
        for _ in 1..choice.count {
            buf.push((pos.clone(), t + life));
        }
        if choice.count > 0 {
            buf.push((pos, t + life));
        }
    }
    Some(weight)
}

/// Monte Carlo estimate of `u(0, x)` via branching diffusions.
pub fn allen_cahn_branching(
    x: &[f64],
    g: &Terminal,
    cfg: &BranchingConfig,
) -> Result<OracleResult, OracleError> {
    cfg.validate()?;
    let m = blocked(cfg.samples, cfg.seed, |r, n| {
        let mut out = Moments::default();
        let mut buf = Vec::new();
        let mut tries = 0u64;
        while out.n < n {
            tries += 1;
            match branching_sample(cfg, x, g, r, &mut buf) {
                Some(v) => out.push(v),
                None => {
                    out.aborted += 1;
                    if out.aborted > 100 * (out.n + 1) && tries > 1000 {
                        break;
                    }
                }
            }
        }
        out
    });
    if m.n < cfg.samples {
        return Err(OracleError::PopulationExplosion);
    }
    let (value, std_error) = m.mean_and_error();
    Ok(OracleResult {
        value,
        std_error,
        method: "branching diffusion".into(),
        samples: m.n,
        aborted: m.aborted,
    })
}

/// `−ln E[exp(−g(x + √(2T) N))]` for `∂_t u + Δu − ‖∇u‖² = 0`, `u(T) = g`.
pub fn hjb_cole_hopf(
    x: &[f64],
    horizon: f64,
    g: &Terminal,
    samples: u64,
    seed: u64,
) -> Result<OracleResult, OracleError> {
    if samples == 0 || !(horizon >= 0.0) {
        return Err(OracleError::Invalid("need samples ≥ 1 and T ≥ 0".into()));
    }
    let sd = (2.0 * horizon).sqrt();
    let d = x.len();
    let m = blocked(samples, seed, |r, n| {
        let mut out = Moments::default();
        let mut pos = vec![0.0; d];
        for _ in 0..n {
            for (p, x0) in pos.iter_mut().zip(x) {
                *p = x0 + sd * rng::normal(r);
            }
            out.push((-g.eval(&pos)).exp());
        }
        out
    });
    let (mean, err) = m.mean_and_error();
    Ok(OracleResult {
        value: -mean.ln(),
        std_error: err / mean,
        method: "Cole-Hopf Monte Carlo".into(),
        samples: m.n,
        aborted: 0,
    })
}

/// Uniform grid on `[−R, R]` with `K` points and `L` explicit time steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdGrid {
    pub half_width: f64,
    pub points: usize,
    pub steps: usize,
}

impl FdGrid {
    /// Fewest time steps with `L ≥ 2a T (K − 1)² / R²` for diffusivity `a`.
    pub fn min_steps(half_width: f64, points: usize, horizon: f64, diffusivity: f64) -> usize {
        let k = (points - 1) as f64;
        (2.0 * diffusivity * horizon * k * k / (half_width * half_width)).ceil() as usize
    }

    pub fn default_for(horizon: f64, diffusivity: f64) -> Self {
        let (half_width, points) = (10.0, 2001);
        Self {
            half_width,
            points,
            steps: Self::min_steps(half_width, points, horizon, diffusivity).max(1),
        }
    }
}

/// Explicit backward solver for `∂_t u + F(u, ∂²_x u) = 0`, `u(T) = g`,
/// where `|∂F/∂(∂²u)| ≤ diffusivity`. Returns `u(0, x0)` by linear interpolation.
pub fn finite_difference_1d(
    x0: f64,
    horizon: f64,
    g: impl Fn(f64) -> f64,
    grid: FdGrid,
    diffusivity: f64,
    generator: impl Fn(f64, f64) -> f64,
) -> Result<OracleResult, OracleError> {
    let FdGrid {
        half_width,
        points,
        steps,
    } = grid;
    if points < 4 || !(half_width > 0.0) || x0.abs() >= half_width || !(horizon > 0.0) {
        return Err(OracleError::Invalid(
            "grid must have ≥ 4 points and contain x0 in its interior".into(),
        ));
    }
    let required = FdGrid::min_steps(half_width, points, horizon, diffusivity);
    if steps < required || steps == 0 {
        return Err(OracleError::Unstable {
            required: required.max(1),
            given: steps,
        });
    }
    let dx = 2.0 * half_width / (points - 1) as f64;
    let dt = horizon / steps as f64;
    let xs: Vec<f64> = (0..points).map(|i| -half_width + i as f64 * dx).collect();
    let mut u: Vec<f64> = xs.iter().map(|&x| g(x)).collect();
    let mut next = u.clone();
    let inv_dx2 = 1.0 / (dx * dx);
    for _ in 0..steps {
        for i in 1..points - 1 {
            let uxx = (u[i - 1] - 2.0 * u[i] + u[i + 1]) * inv_dx2;
            next[i] = u[i] + dt * generator(u[i], uxx);
        }
        next[0] = 2.0 * next[1] - next[2];
        next[points - 1] = 2.0 * next[points - 2] - next[points - 3];
        std::mem::swap(&mut u, &mut next);
    }
    let s = (x0 + half_width) / dx;
    let i = (s.floor() as usize).min(points - 2);
    let w = s - i as f64;
    Ok(OracleResult {
        value: (1.0 - w) * u[i] + w * u[i + 1],
        std_error: 0.0,
        method: "explicit finite differences".into(),
        samples: (points * steps) as u64,
        aborted: 0,
    })
}

/// `∂_t u + ½ σ̄(∂²_x u)² ∂²_x u = 0`, `u(T) = g`, at `(0, x0)`.
pub fn gbm1d_finite_difference(
    x0: f64,
    horizon: f64,
    sigma_max: f64,
    sigma_min: f64,
    g: impl Fn(f64) -> f64,
    grid: FdGrid,
) -> Result<OracleResult, OracleError> {
    if !(0.0 < sigma_min && sigma_min <= sigma_max) {
        return Err(OracleError::Invalid("need 0 < σ_min ≤ σ_max".into()));
    }
    let (hi, lo) = (0.5 * sigma_max * sigma_max, 0.5 * sigma_min * sigma_min);
    finite_difference_1d(x0, horizon, g, grid, hi, |_, uxx| {
        if uxx >= 0.0 {
            hi * uxx
        } else {
            lo * uxx
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn alternating(d: usize) -> Vec<f64> {
        (0..d).map(|i| if i % 2 == 0 { 1.0 } else { 0.5 }).collect()
    }

    /// Composite Simpson rule for `E[h(Z)]`, `Z ~ N(0, 1)`.
    fn gauss_expectation(h: impl Fn(f64) -> f64) -> f64 {
        let (a, b, n) = (-12.0, 12.0, 20_000);
        let step = (b - a) / n as f64;
        let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = 0.0;
        for i in 0..=n {
            let z = a + i as f64 * step;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            s += w * h(z) * phi(z);
        }
        s * step / 3.0
    }

    #[test]
    fn analytic_terminal_values() {
        let x = [0.3, -1.2, 2.0];
        let sq: f64 = x.iter().map(|v| v * v).sum();
        assert_relative_eq!(bsb_analytic(1.0, &x, 1.0, 0.05, 0.4, 1.0), sq);
        assert_relative_eq!(gbm_analytic(1.0, &x, 1.0, 1.0, 1.0), sq);
    }

    #[test]
    fn analytic_benchmark_values() {
        let xi = alternating(100);
        let b = bsb_analytic(0.0, &xi, 1.0, 0.05, 0.4, 1.0);
        assert!((b - 77.1049).abs() < 5e-5, "{b}");
        assert_eq!(gbm_analytic(0.0, &xi, 1.0, 1.0, 1.0), 162.5);
    }

    #[test]
    fn bsb_closed_form_solves_its_pde() {
        let (r, smax, smin, big_t, d) = (0.05, 0.4, 0.1, 1.0, 5);
        let u = |t: f64, x: &[f64]| bsb_analytic(t, x, 1.0, r, smax, big_t);
        let mut rg = rng::stream(3, 0);
        for _ in 0..20 {
            let t: f64 = rg.random::<f64>() * 0.9 + 0.05;
            let x: Vec<f64> = (0..d).map(|_| 2.0 * rg.random::<f64>() - 1.0).collect();
            let (h, hx) = (1e-5, 1e-3);
            let ut = (u(t + h, &x) - u(t - h, &x)) / (2.0 * h);
            let mut lap_term = 0.0;
            let mut xz = 0.0;
            for i in 0..d {
                let (mut p, mut m) = (x.clone(), x.clone());
                p[i] += hx;
                m[i] -= hx;
                let uxx = (u(t, &p) - 2.0 * u(t, &x) + u(t, &m)) / (hx * hx);
                let ux = (u(t, &p) - u(t, &m)) / (2.0 * hx);
                let sb = if uxx >= 0.0 { smax } else { smin };
                lap_term += 0.5 * x[i] * x[i] * sb * sb * uxx;
                xz += x[i] * ux;
            }
            let v = u(t, &x);
            let residual = ut + lap_term - r * (v - xz);
            assert!(
                residual.abs() <= 1e-4 * (1.0 + v.abs()),
                "residual {residual}"
            );
        }
    }

    #[test]
    fn gbm_closed_form_solves_its_pde() {
        let (smax, smin, d) = (1.0, 0.5f64.sqrt(), 4);
        let u = |t: f64, x: &[f64]| gbm_analytic(t, x, 1.0, smax, 1.0);
        let mut rg = rng::stream(4, 0);
        for _ in 0..20 {
            let t: f64 = rg.random::<f64>() * 0.9 + 0.05;
            let x: Vec<f64> = (0..d).map(|_| 4.0 * rg.random::<f64>() - 2.0).collect();
            let (h, hx) = (1e-5, 1e-3);
            let ut = (u(t + h, &x) - u(t - h, &x)) / (2.0 * h);
            assert_relative_eq!(ut, -(d as f64) * smax * smax, epsilon = 1e-6);
            let mut diag = 0.0;
            for i in 0..d {
                let (mut p, mut m) = (x.clone(), x.clone());
                p[i] += hx;
                m[i] -= hx;
                let uxx = (u(t, &p) - 2.0 * u(t, &x) + u(t, &m)) / (hx * hx);
                let sb = if uxx >= 0.0 { smax } else { smin };
                diag += 0.5 * sb * sb * uxx;
            }
            assert!((ut + diag).abs() <= 1e-4 * (1.0 + u(t, &x).abs()));
        }
    }

    #[test]
    fn cole_hopf_constant_terminal() {
        let r = hjb_cole_hopf(&[0.0; 3], 1.0, &Terminal::Constant { value: 0.7 }, 5000, 1).unwrap();
        assert!((r.value - 0.7).abs() < 1e-14);
        assert_eq!(r.std_error, 0.0);
    }

    #[test]
    fn cole_hopf_matches_quadrature_in_1d() {
        let g = Terminal::LogQuadratic;
        let (x, big_t) = (0.4, 1.0_f64);
        let mean = gauss_expectation(|z| (-g.eval(&[x + (2.0 * big_t).sqrt() * z])).exp());
        let exact = -mean.ln();
        let r = hjb_cole_hopf(&[x], big_t, &g, 4_000_000, 9).unwrap();
        assert!(
            (r.value - exact).abs() < 1e-4 + 4.0 * r.std_error,
            "{} vs {}",
            r.value,
            exact
        );
        assert!(r.std_error < 1e-3);
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let g = Terminal::InverseQuadratic { a: 2.0, b: 0.4 };
        let cfg = BranchingConfig::allen_cahn(0.5, 0.3, 100_000, 17);
        let a = allen_cahn_branching(&[0.0; 4], &g, &cfg).unwrap();
        let b = allen_cahn_branching(&[0.0; 4], &g, &cfg).unwrap();
        assert_eq!(a, b);
        let c = hjb_cole_hopf(&[0.0; 4], 1.0, &Terminal::LogQuadratic, 70_000, 3).unwrap();
        let e = hjb_cole_hopf(&[0.0; 4], 1.0, &Terminal::LogQuadratic, 70_000, 3).unwrap();
        assert_eq!(c, e);
    }

    #[test]
    fn linear_branching_matches_plain_monte_carlo() {
        let g = Terminal::InverseQuadratic { a: 2.0, b: 0.4 };
        let (kappa, big_t, d) = (0.5, 0.3, 3);
        let cfg = BranchingConfig {
            offspring: vec![Offspring {
                count: 1,
                probability: 1.0,
                coefficient: 2.0,
            }],
            ..BranchingConfig::allen_cahn(kappa, big_t, 400_000, 5)
        };
        let b = allen_cahn_branching(&vec![0.0; d], &g, &cfg).unwrap();
        // u = e^T E[g(x + √(2κT) N)]
        let mut r = rng::stream(99, 0);
        let m = 400_000;
        let sd = (2.0 * kappa * big_t).sqrt();
        let mut mo = Moments::default();
        let mut pos = vec![0.0; d];
        for _ in 0..m {
            rng::fill_normal(&mut r, &mut pos);
            pos.iter_mut().for_each(|p| *p *= sd);
            mo.push(big_t.exp() * g.eval(&pos));
        }
        let (plain, plain_se) = mo.mean_and_error();
        let se = (b.std_error.powi(2) + plain_se.powi(2)).sqrt();
        assert!(
            (b.value - plain).abs() <= 3.0 * se,
            "{} vs {} (se {se})",
            b.value,
            plain
        );
    }

    #[test]
    fn population_cap_reports_aborts() {
        let g = Terminal::Constant { value: 1.0 };
        let cfg = BranchingConfig {
            population_cap: 2,
            ..BranchingConfig::allen_cahn(0.5, 3.0, 2000, 1)
        };
        let r = allen_cahn_branching(&[0.0], &g, &cfg).unwrap();
        assert!(r.aborted > 0);
        assert_eq!(r.samples, 2000);
    }

    #[test]
    fn fd_linear_terminal_is_stationary() {
        let grid = FdGrid::default_for(1.0, 0.5);
        let r = gbm1d_finite_difference(-2.0, 1.0, 1.0, 0.5f64.sqrt(), |x| 3.0 * x - 1.0, grid)
            .unwrap();
        assert_relative_eq!(r.value, -7.0, epsilon = 1e-9);
    }

    #[test]
    fn fd_degenerate_rule_is_heat_equation() {
        let g = |x: f64| 1.0 / (1.0 + (-x * x).exp());
        let sigma = 0.8;
        let grid = FdGrid::default_for(1.0, 0.5 * sigma * sigma);
        let fd = gbm1d_finite_difference(-2.0, 1.0, sigma, sigma, g, grid).unwrap();
        let exact = gauss_expectation(|z| g(-2.0 + sigma * z));
        assert!((fd.value - exact).abs() < 1e-4, "{} vs {}", fd.value, exact);
    }

    #[test]
    fn fd_rejects_unstable_grid() {
        let grid = FdGrid {
            half_width: 10.0,
            points: 2001,
            steps: 100,
        };
        let err = gbm1d_finite_difference(0.0, 1.0, 1.0, 0.5, |x| x, grid).unwrap_err();
        assert_eq!(
            err,
            OracleError::Unstable {
                required: 40_000,
                given: 100
            }
        );
    }
}
