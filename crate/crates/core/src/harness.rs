//! Training runs, aggregation over independent runs, and CSV output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::{roll_forward, sample_brownian, TimeGrid};
use crate::network::{BatchNormState, BnMode, Network, ParamVector, SubnetId};
use crate::optim::Optimizer;
use crate::problems::{Framework, ProblemSpec};
use crate::rng;
use crate::scheme::{exact_bsb_loss, rollout, NetworkModel};
use crate::tensor::Tape;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("loss became non-finite at iteration {iteration}; last losses: {tail:?}")]
    Diverged { iteration: usize, tail: Vec<f64> },
    #[error("reference value is zero, so the relative error is undefined")]
    ZeroReference,
    #[error("no reference value for problem `{0}`")]
    NoReference(String),
    #[error("no trajectories to aggregate")]
    Empty,
    #[error("checkpoint {0} was not recorded by every run")]
    MissingCheckpoint(usize),
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(String),
}

/// One training iteration as seen by the recorder.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub m: usize,
    /// `Θ_m^{(1)}` or `𝒰^{Θ_m}(ξ)`.
    pub estimate: f64,
    pub loss: f64,
    /// Seconds since the run started; `None` in deterministic mode.
    pub elapsed: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    /// One record per iteration `m = 0..=iterations`.
    pub records: Vec<Record>,
}

impl Trajectory {
    pub fn at(&self, m: usize) -> Option<&Record> {
        self.records.get(m).filter(|r| r.m == m)
    }

    pub fn final_estimate(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.estimate)
    }
}

/// Keeps freed training buffers in the heap between iterations instead of
/// unmapping and refaulting them.
fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        });
    }
}

const TAG_INIT: u64 = 0x1;
const TAG_BATCH: u64 = 0x2;
const TAG_START: u64 = 0x3;

/// Trains one run for `iterations` steps and records every iteration.
///
/// The record at `m` is taken before the `m`-th update, so `m = 0` shows the
/// initialization and `m = iterations` the final parameters.
pub fn train(
    problem: &ProblemSpec,
    iterations: usize,
    seed: u64,
    timed: bool,
) -> Result<Trajectory, crate::Error> {
    train_with(problem, iterations, seed, timed, |_, _| {})
}

/// As [`train`], handing the final parameters and batch-norm state to `finish`.
pub fn train_with(
    problem: &ProblemSpec,
    iterations: usize,
    seed: u64,
    timed: bool,
    finish: impl FnOnce(&ParamVector, &BatchNormState),
) -> Result<Trajectory, crate::Error> {
    problem.validate()?;
    if problem.time_reversed {
        return Err(HarnessError::Invalid(
            "training needs the terminal-value form of the equation".into(),
        )
        .into());
    }
    let net = Network::new(problem.network_config())?;
    let uses_bn = !net.layout().bn_slots.is_empty();
    if uses_bn && problem.batch_size < 2 {
        return Err(HarnessError::Invalid(
            "batch normalization needs a batch of at least 2 paths".into(),
        )
        .into());
    }
    retain_freed_memory();
    let started = Instant::now();
    let grid = TimeGrid::uniform(problem.horizon, problem.steps)?;
    let mut theta = net.init(rng::derive(seed, &[TAG_INIT]));
    let mut opt = Optimizer::new(&problem.optimizer, net.nu());
    let mut bn = BatchNormState::new(net.layout());
    let specific = problem.framework == Framework::Specific;
    let center = problem.start.center().to_vec();
    let mut records = Vec::with_capacity(iterations + 1);
    let mut flat = Vec::new();
    for m in 0..=iterations {
        let batch_seed = rng::derive(seed, &[TAG_BATCH, m as u64]);
        let bm = sample_brownian(problem.dim, &grid, problem.batch_size, batch_seed)?;
        let start = problem
            .start
            .sample(problem.batch_size, rng::derive(batch_seed, &[TAG_START]));
        let paths = roll_forward(&start, &problem.diffusion, &grid, &bm)?;
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, &theta)?;
        let mut model = NetworkModel {
            network: &net,
            bound: &bound,
            bn: if uses_bn {
                BnMode::Train(&mut bn)
            } else {
                BnMode::Eval(&bn)
            },
        };
        let outcome = rollout(&mut tape, problem, &grid, &mut model, &paths, specific);
        let tail = || {
            records
                .iter()
                .rev()
                .take(10)
                .map(|r: &Record| r.loss)
                .collect::<Vec<_>>()
        };
        let r = match outcome {
            Ok(r) => r,
            Err(crate::scheme::SchemeError::NonFinite { .. }) => {
                return Err(HarnessError::Diverged {
                    iteration: m,
                    tail: tail(),
                }
                .into());
            }
            Err(e) => return Err(e.into()),
        };
        let loss = tape.value(r.loss).item().expect("scalar loss");
        if !loss.is_finite() {
            return Err(HarnessError::Diverged {
                iteration: m,
                tail: tail(),
            }
            .into());
        }
        let estimate = if net.layout().constant_heads {
            theta.as_slice()[0]
        } else {
            net.eval(&theta, SubnetId::U, &center, Some(&bn))?[0]
        };
        records.push(Record {
            m,
            estimate,
            loss,
            elapsed: timed.then(|| started.elapsed().as_secs_f64()),
        });
        if m == iterations {
            break;
        }
        let grads = tape.backward(r.loss)?;
        drop(tape);
        bound.flat_gradient_into(&grads, &mut flat);
        drop(grads);
        opt.step(theta.as_mut_slice(), &flat);
    }
    finish(&theta, &bn);
    Ok(Trajectory { seed, records })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub runs: usize,
    pub seed: u64,
    pub iterations: usize,
    pub checkpoints: Vec<usize>,
    /// Worker threads for independent runs.
    pub jobs: usize,
    /// Omit wall-clock times so output is byte-reproducible.
    pub deterministic: bool,
}

impl ExperimentConfig {
    pub fn new(problem: ProblemSpec) -> Self {
        Self {
            runs: 10,
            seed: 42,
            iterations: problem.iterations,
            checkpoints: problem.checkpoints.clone(),
            jobs: 1,
            deterministic: false,
            problem,
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.runs as u64)
            .map(|r| self.seed.wrapping_add(r))
            .collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.runs == 0 {
            return Err(HarnessError::Invalid("need at least one run".into()));
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HarnessError::Invalid(
                "checkpoints must be strictly increasing".into(),
            ));
        }
        if self
            .checkpoints
            .last()
            .is_some_and(|&c| c > self.iterations)
        {
            return Err(HarnessError::Invalid(
                "checkpoint beyond the iteration count".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the problem description and run settings.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.problem.to_toml().unwrap_or_default().as_bytes());
        h.update(
            format!(
                "{}|{}|{}|{:?}",
                self.runs, self.seed, self.iterations, self.checkpoints
            )
            .as_bytes(),
        );
        h.finalize().iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Runs every seed (in parallel when `jobs > 1`).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<Trajectory>, crate::Error> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let timed = !cfg.deterministic;
    let run = |s: &u64| train(&cfg.problem, cfg.iterations, *s, timed);
    if cfg.jobs <= 1 {
        seeds.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| HarnessError::Invalid(e.to_string()))?;
        pool.install(|| seeds.par_iter().map(run).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatsRow {
    pub m: usize,
    pub mean_estimate: f64,
    pub std_estimate: f64,
    pub rel_l1_error: f64,
    pub std_rel_error: f64,
    pub mean_loss: f64,
    pub std_loss: f64,
    pub runtime_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunStats {
    pub problem: String,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub rows: Vec<StatsRow>,
}

pub const CSV_COLUMNS: [&str; 8] = [
    "m",
    "mean_estimate",
    "std_estimate",
    "rel_l1_error",
    "std_rel_error",
    "mean_loss",
    "std_loss",
    "runtime_s",
];

/// Mean and divide-by-`n` standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Table statistics at every checkpoint.
pub fn aggregate(
    trajectories: &[Trajectory],
    reference: f64,
    checkpoints: &[usize],
    problem: &str,
    config_hash: &str,
) -> Result<RunStats, HarnessError> {
    if trajectories.is_empty() {
        return Err(HarnessError::Empty);
    }
    if reference == 0.0 {
        return Err(HarnessError::ZeroReference);
    }
    let mut rows = Vec::with_capacity(checkpoints.len());
    for &m in checkpoints {
        let recs: Vec<&Record> = trajectories
            .iter()
            .map(|t| t.at(m).ok_or(HarnessError::MissingCheckpoint(m)))
            .collect::<Result<_, _>>()?;
        let est: Vec<f64> = recs.iter().map(|r| r.estimate).collect();
        let rel: Vec<f64> = est
            .iter()
            .map(|e| (e - reference).abs() / reference.abs())
            .collect();
        let loss: Vec<f64> = recs.iter().map(|r| r.loss).collect();
        let (mean_estimate, std_estimate) = mean_std(&est);
        let (rel_l1_error, std_rel_error) = mean_std(&rel);
        let (mean_loss, std_loss) = mean_std(&loss);
        let times: Option<Vec<f64>> = recs.iter().map(|r| r.elapsed).collect();
        rows.push(StatsRow {
            m,
            mean_estimate,
            std_estimate,
            rel_l1_error,
            std_rel_error,
            mean_loss,
            std_loss,
            runtime_s: times.map(|t| mean_std(&t).0),
        });
    }
    Ok(RunStats {
        problem: problem.to_string(),
        seeds: trajectories.iter().map(|t| t.seed).collect(),
        config_hash: config_hash.to_string(),
        rows,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// CSV text: `#` metadata lines, a header, one row per checkpoint.
pub fn to_csv(stats: &RunStats) -> Result<String, HarnessError> {
    let seeds: Vec<String> = stats.seeds.iter().map(u64::to_string).collect();
    let mut out = format!(
        "# problem={}\n# seeds={}\n# config_hash={}\n",
        stats.problem,
        seeds.join(","),
        stats.config_hash
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| HarnessError::Csv(e.to_string());
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in &stats.rows {
        w.write_record([
            r.m.to_string(),
            r.mean_estimate.to_string(),
            r.std_estimate.to_string(),
            r.rel_l1_error.to_string(),
            r.std_rel_error.to_string(),
            r.mean_loss.to_string(),
            r.std_loss.to_string(),
            fmt_opt(r.runtime_s),
        ])
        .map_err(csv_err)?;
    }
    let body = w
        .into_inner()
        .map_err(|e| HarnessError::Csv(e.to_string()))?;
    out.push_str(&String::from_utf8(body).map_err(|e| HarnessError::Csv(e.to_string()))?);
    Ok(out)
}

pub fn emit_csv(stats: &RunStats, path: &Path) -> Result<(), crate::Error> {
    fs::write(path, to_csv(stats)?)?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<RunStats, HarnessError> {
    let mut problem = String::new();
    let mut seeds = Vec::new();
    let mut config_hash = String::new();
    let mut body = String::new();
    for line in text.lines() {
        if let Some(meta) = line.strip_prefix("# ") {
            let (k, v) = meta
                .split_once('=')
                .ok_or_else(|| HarnessError::Csv(format!("bad metadata line `{line}`")))?;
            match k {
                "problem" => problem = v.to_string(),
                "seeds" if !v.is_empty() => {
                    seeds = v
                        .split(',')
                        .map(|s| {
                            s.parse()
                                .map_err(|_| HarnessError::Csv(format!("bad seed `{s}`")))
                        })
                        .collect::<Result<_, _>>()?;
                }
                "seeds" => {}
                "config_hash" => config_hash = v.to_string(),
                other => return Err(HarnessError::Csv(format!("unknown metadata `{other}`"))),
            }
        } else {
            body.push_str(line);
            body.push('\n');
        }
    }
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| HarnessError::Csv(e.to_string()))?
        .clone();
    if headers.iter().ne(CSV_COLUMNS.iter().copied()) {
        return Err(HarnessError::Csv(format!("unexpected header {headers:?}")));
    }
    let num = |s: &str| -> Result<f64, HarnessError> {
        s.parse()
            .map_err(|_| HarnessError::Csv(format!("bad number `{s}`")))
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| HarnessError::Csv(e.to_string()))?;
        rows.push(StatsRow {
            m: rec[0]
                .parse()
                .map_err(|_| HarnessError::Csv(format!("bad iteration `{}`", &rec[0])))?,
            mean_estimate: num(&rec[1])?,
            std_estimate: num(&rec[2])?,
            rel_l1_error: num(&rec[3])?,
            std_rel_error: num(&rec[4])?,
            mean_loss: num(&rec[5])?,
            std_loss: num(&rec[6])?,
            runtime_s: if &rec[7] == "NA" {
                None
            } else {
                Some(num(&rec[7])?)
            },
        });
    }
    Ok(RunStats {
        problem,
        seeds,
        config_hash,
        rows,
    })
}

/// Per-iteration loss curve of one run.
pub fn loss_curve_csv(t: &Trajectory) -> String {
    let mut s = format!("# seed={}\nm,estimate,loss,elapsed_s\n", t.seed);
    for r in &t.records {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.m,
            r.estimate,
            r.loss,
            fmt_opt(r.elapsed)
        );
    }
    s
}

/// Empirical loss of the exact BSB coefficients for each step count.
pub fn consistency(
    problem: &ProblemSpec,
    steps: &[usize],
    paths: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>, crate::Error> {
    steps
        .iter()
        .map(|&n| Ok((n, exact_bsb_loss(problem, n, paths, seed)?)))
        .collect()
}
