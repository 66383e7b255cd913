use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use deep2bsde::harness::{
    aggregate, consistency, loss_curve_csv, run_experiment, to_csv, ExperimentConfig,
};
use deep2bsde::optim::{OptimizerConfig, Schedule};
use deep2bsde::oracles::{
    allen_cahn_branching, bsb_analytic, gbm1d_finite_difference, gbm_analytic, hjb_cole_hopf,
    BranchingConfig, FdGrid, OracleResult,
};
use deep2bsde::problems::{Equation, Framework, ProblemSpec};
use deep2bsde::Diffusion;

#[derive(Parser)]
#[command(
    name = "deep2bsde",
    version,
    about = "Deep 2BSDE experiments and reference solvers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FrameworkArg {
    Specific,
    General,
}

#[derive(Subcommand)]
enum Command {
    /// Train independent runs and write checkpoint statistics as CSV.
    Run {
        /// Built-in problem name.
        #[arg(long, conflicts_with = "config")]
        problem: Option<String>,
        /// TOML problem description.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Time steps N.
        #[arg(long)]
        steps: Option<usize>,
        /// Initial learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Adam epsilon.
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, value_enum)]
        framework: Option<FrameworkArg>,
        /// Comma-separated checkpoint iterations.
        #[arg(long, value_delimiter = ',')]
        checkpoints: Option<Vec<usize>>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Write `NA` runtimes so output is byte-reproducible.
        #[arg(long)]
        deterministic: bool,
        /// Directory for per-run loss curves.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Evaluate the reference solver for a problem.
    Oracle {
        #[arg(long)]
        problem: String,
        /// Monte Carlo sample count.
        #[arg(long, default_value_t = 1_000_000)]
        samples: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Grid points for the 1-d finite-difference solver.
        #[arg(long, default_value_t = 2001)]
        points: usize,
    },
    /// Print a built-in problem as TOML, as accepted by `run --config`.
    Show {
        #[arg(long)]
        problem: String,
    },
    /// Loss of the exact Black-Scholes-Barenblatt coefficients under grid refinement.
    Consistency {
        #[arg(long, default_value = "bsb")]
        problem: String,
        #[arg(long, value_delimiter = ',', default_value = "10,20,40,80")]
        grid: Vec<usize>,
        #[arg(long, default_value_t = 4096)]
        paths: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn load_problem(problem: Option<&str>, config: Option<&PathBuf>) -> Result<ProblemSpec> {
    match (problem, config) {
        (Some(name), None) => Ok(ProblemSpec::by_name(name)?),
        (None, Some(path)) => Ok(ProblemSpec::load(path)?),
        _ => bail!("give exactly one of --problem or --config"),
    }
}

fn oracle_json(r: &OracleResult) -> serde_json::Value {
    json!({
        "value": r.value,
        "std_error": r.std_error,
        "method": r.method,
        "samples": r.samples,
        "aborted": r.aborted,
    })
}

fn run_oracle(p: &ProblemSpec, samples: u64, seed: u64, points: usize) -> Result<OracleResult> {
    let xi = p.start.center().to_vec();
    let exact = |value: f64, method: &str| OracleResult {
        value,
        std_error: 0.0,
        method: method.into(),
        samples: 0,
        aborted: 0,
    };
    Ok(match (&p.equation, &p.diffusion) {
        (Equation::Bsb { rate, sigma }, _) => {
            let c = match p.terminal {
                deep2bsde::Terminal::SquaredNorm { c } => c,
                _ => bail!("closed form needs a squared-norm terminal condition"),
            };
            exact(
                bsb_analytic(0.0, &xi, c, *rate, sigma.max, p.horizon),
                "closed form",
            )
        }
        (Equation::GBrownian { sigma }, _) if p.dim == 1 => {
            let g = |x: f64| p.g(&[x]);
            let diffusivity = 0.5 * sigma.max * sigma.max;
            let mut grid = FdGrid::default_for(p.horizon, diffusivity);
            grid.points = points;
            grid.steps = FdGrid::min_steps(grid.half_width, points, p.horizon, diffusivity).max(1);
            gbm1d_finite_difference(xi[0], p.horizon, sigma.max, sigma.min, g, grid)?
        }
        (Equation::GBrownian { sigma }, _) => match p.terminal {
            deep2bsde::Terminal::SquaredNorm { c } => exact(
                gbm_analytic(0.0, &xi, c, sigma.max, p.horizon),
                "closed form",
            ),
            _ => bail!("closed form needs a squared-norm terminal condition"),
        },
        (Equation::AllenCahn { laplacian }, _) => {
            let cfg = BranchingConfig::allen_cahn(*laplacian, p.horizon, samples, seed);
            allen_cahn_branching(&xi, &p.terminal, &cfg)?
        }
        (Equation::Hjb { laplacian }, Diffusion::Additive { .. }) if *laplacian == 1.0 => {
            hjb_cole_hopf(&xi, p.horizon, &p.terminal, samples, seed)?
        }
        _ => bail!("no reference solver for problem `{}`", p.name),
    })
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            problem,
            config,
            runs,
            seed,
            out,
            iters,
            batch,
            steps,
            lr,
            eps,
            framework,
            checkpoints,
            jobs,
            deterministic,
            curves,
        } => {
            let mut p = load_problem(problem.as_deref(), config.as_ref())?;
            if let Some(k) = iters {
                p.iterations = k;
                p.checkpoints.retain(|&c| c <= k);
                if p.checkpoints.last() != Some(&k) {
                    p.checkpoints.push(k);
                }
            }
            if let Some(j) = batch {
                p.batch_size = j;
            }
            if let Some(n) = steps {
                p.steps = n;
            }
            if let Some(rate) = lr {
                match p.optimizer.schedule_mut() {
                    Schedule::Constant { rate: r } => *r = rate,
                    Schedule::StepDecay { base, .. } => *base = rate,
                }
            }
            if let Some(e) = eps {
                match &mut p.optimizer {
                    OptimizerConfig::Adam(a) => a.epsilon = e,
                    OptimizerConfig::Sgd { .. } => bail!("--eps applies to Adam only"),
                }
            }
            if let Some(f) = framework {
                p.framework = match f {
                    FrameworkArg::Specific => Framework::Specific,
                    FrameworkArg::General => Framework::General,
                };
            }
            if let Some(c) = checkpoints {
                p.checkpoints = c;
            }
            p.validate()?;
            let reference = p
                .reference
                .as_ref()
                .map(|r| r.value)
                .ok_or_else(|| anyhow!("problem `{}` has no reference value", p.name))?;
            let mut cfg = ExperimentConfig::new(p);
            cfg.runs = runs;
            cfg.seed = seed;
            cfg.jobs = jobs;
            cfg.deterministic = deterministic;
            let trajectories = run_experiment(&cfg)?;
            let stats = aggregate(
                &trajectories,
                reference,
                &cfg.checkpoints,
                &cfg.problem.name,
                &cfg.hash(),
            )?;
            fs::write(&out, to_csv(&stats)?)
                .with_context(|| format!("writing {}", out.display()))?;
            if let Some(dir) = curves {
                fs::create_dir_all(&dir)?;
                for t in &trajectories {
                    let path = dir.join(format!("{}_seed{}.csv", cfg.problem.name, t.seed));
                    fs::write(&path, loss_curve_csv(t))
                        .with_context(|| format!("writing {}", path.display()))?;
                }
            }
            let last = stats.rows.last().expect("at least one checkpoint");
            println!(
                "{}: m={} mean={} rel_l1_error={} -> {}",
                stats.problem,
                last.m,
                last.mean_estimate,
                last.rel_l1_error,
                out.display()
            );
        }
        Command::Oracle {
            problem,
            samples,
            seed,
            points,
        } => {
            let p = ProblemSpec::by_name(&problem)?;
            let r = run_oracle(&p, samples, seed, points)?;
            println!("{}", oracle_json(&r));
        }
        Command::Show { problem } => {
            print!("{}", ProblemSpec::by_name(&problem)?.to_toml()?);
        }
        Command::Consistency {
            problem,
            grid,
            paths,
            seed,
        } => {
            let p = ProblemSpec::by_name(&problem)?;
            let losses = consistency(&p, &grid, paths, seed)?;
            println!("steps,loss,ratio");
            let mut prev: Option<f64> = None;
            for (n, l) in losses {
                let ratio = prev.map_or_else(|| "NA".to_string(), |q| (q / l).to_string());
                println!("{n},{l},{ratio}");
                prev = Some(l);
            }
        }
    }
    Ok(())
}

fn error_json(e: &anyhow::Error) -> serde_json::Value {
    let chain: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
    json!({ "error": e.to_string(), "causes": chain })
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use deep2bsde::harness::parse_csv;

    fn run(args: &[&str]) -> Result<()> {
        execute(Cli::try_parse_from(
            std::iter::once("deep2bsde").chain(args.iter().copied()),
        )?)
    }

    fn path(p: &std::path::Path) -> &str {
        p.to_str().unwrap()
    }

    #[test]
    fn run_writes_parseable_csv() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("gbm1.csv");
        let curves = dir.path().join("curves");
        run(&[
            "run",
            "--problem",
            "gbm_1",
            "--runs",
            "2",
            "--seed",
            "3",
            "--iters",
            "30",
            "--checkpoints",
            "0,10,30",
            "--deterministic",
            "--out",
            path(&out),
            "--curves",
            path(&curves),
        ])
        .unwrap();
        let stats = parse_csv(&fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(stats.problem, "gbm_1");
        assert_eq!(stats.seeds, vec![3, 4]);
        assert_eq!(
            stats.rows.iter().map(|r| r.m).collect::<Vec<_>>(),
            vec![0, 10, 30]
        );
        assert!(stats.rows.iter().all(|r| r.runtime_s.is_none()));
        let curve = fs::read_to_string(curves.join("gbm_1_seed3.csv")).unwrap();
        assert_eq!(curve.lines().count(), 2 + 31);
    }

    #[test]
    fn repeated_runs_give_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let files: Vec<_> = (0..2)
            .map(|i| dir.path().join(format!("r{i}.csv")))
            .collect();
        for f in &files {
            run(&[
                "run",
                "--problem",
                "allen_cahn_20",
                "--runs",
                "2",
                "--iters",
                "50",
                "--deterministic",
                "--out",
                path(f),
            ])
            .unwrap();
        }
        assert_eq!(fs::read(&files[0]).unwrap(), fs::read(&files[1]).unwrap());
    }

    #[test]
    fn errors_render_as_json() {
        let e = run(&["run", "--problem", "no_such_problem", "--out", "/dev/null"]).unwrap_err();
        let v = error_json(&e);
        assert!(v["error"].as_str().unwrap().contains("no_such_problem"));
        assert!(v["causes"].is_array());
    }

    #[test]
    fn invalid_override_is_rejected() {
        assert!(run(&[
            "run",
            "--problem",
            "allen_cahn_20",
            "--eps",
            "1e-8",
            "--out",
            "/dev/null"
        ])
        .is_err());
        assert!(run(&[
            "run",
            "--problem",
            "gbm_1",
            "--config",
            "x.toml",
            "--out",
            "/dev/null"
        ])
        .is_err());
    }

    #[test]
    fn oracle_closed_form() {
        let p = ProblemSpec::by_name("gbm_100").unwrap();
        let r = run_oracle(&p, 10, 1, 11).unwrap();
        assert_eq!(oracle_json(&r)["value"].as_f64().unwrap(), 162.5);
    }

    #[test]
    fn consistency_runs() {
        run(&[
            "consistency",
            "--problem",
            "bsb",
            "--grid",
            "10,20",
            "--paths",
            "256",
        ])
        .unwrap();
    }

    #[test]
    fn shown_problem_runs_as_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("p.toml");
        let mut p = ProblemSpec::by_name("gbm_1").unwrap();
        p.name = "gbm_1_variant".into();
        p.steps = 10;
        fs::write(&cfg, p.to_toml().unwrap()).unwrap();
        let out = dir.path().join("o.csv");
        run(&[
            "run",
            "--runs",
            "1",
            "--iters",
            "5",
            "--config",
            path(&cfg),
            "--out",
            path(&out),
        ])
        .unwrap();
        let stats = parse_csv(&fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(stats.problem, "gbm_1_variant");
        run(&["show", "--problem", "hjb"]).unwrap();
    }
}
