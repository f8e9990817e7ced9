use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use diffprog::autodiff::{jacobian_forward, jacobian_reverse};
use diffprog::chain::{forward_backward, ChainPotentials};
use diffprog::checkpoint::{treeverse_plan, Action};
use diffprog::estimators::{
    categorical_sampler, categorical_score, es_gradient, perturbed_argmax_expectation, perturbed_gt, perturbed_max_expectation,
    reparam_gradient, sample_stream, sfe_gradient, stein_gradient, Baseline, EsScheme, LocationScale, NoiseModel, SfeOptions,
};
use diffprog::graph::text::deserialize;
use diffprog::linalg::Matrix;
use diffprog::numcheck::{gradcheck, GradcheckReport};
use diffprog::ode::{adjoint_gradient, harmonic_oscillator, linear_dynamics, unrolled_gradient, OdeProblem};
use diffprog::optim::fixtures::{diag_quadratic, double_well, elongated_quadratic, lasso_smooth, least_squares, rosenbrock};
use diffprog::optim::{
    gauss_newton_step, minimize, minimize_with, natural_gradient_step, CategoricalNll, Composite, FisherMode, GraphObjective,
    LineSearch, Method, Objective, OptState, Projection, StepConfig, Stopping, Trace,
};
use diffprog::second_order::linear_softmax_logits;
use diffprog::smooth::{ProxOracle, ProxTag};
use diffprog::{EstimatorReport, Error};

#[derive(Parser)]
#[command(name = "diffprog", version, about = "Diagnostics and reproduction runs for the diffprog toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compare reverse- and forward-mode derivatives of a graph file with central differences.
    Gradcheck(GradcheckArgs),
    /// Optimal checkpointing cost table and the schedule for (K, S).
    Schedule(ScheduleArgs),
    /// Run a Monte-Carlo gradient estimator on its bundled fixture.
    Estimate(EstimateArgs),
    /// Optimizer trace on a bundled problem.
    Optimize(OptimizeArgs),
    /// Unary marginals of a chain model read from `k,i,j,value` CSV.
    Chain(ChainArgs),
    /// ODE gradients by the adjoint method and by unrolling Euler steps.
    Ode(OdeArgs),
}

#[derive(Args)]
struct SeedArg {
    /// Seed for every random draw.
    #[arg(long, env = "DIFFPROG_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Graph in the text format.
    #[arg(long)]
    graph: PathBuf,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Comma-separated evaluation point; a seeded draw from (0, 1) otherwise.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    point: Option<Vec<f64>>,
    #[command(flatten)]
    seed: SeedArg,
    /// Perturb the reverse-mode Jacobian to exercise the failure path.
    #[arg(long, hide = true)]
    corrupt_vjp: bool,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Chain length.
    #[arg(long = "K", alias = "k", value_parser = clap::value_parser!(u64).range(1..=100_000))]
    steps: u64,
    /// Checkpoint slots.
    #[arg(long = "S", alias = "s", value_parser = clap::value_parser!(u64).range(1..=1000))]
    slots: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorTag {
    /// E[onehot argmax(μ + Gumbel)] at μ = (1, 0), σ = 1.
    GumbelArgmax,
    /// E[max(μ + Gumbel)] at μ = (1, 0), σ = 1.
    GumbelMax,
    /// P(μ₁ + Z₁ > μ₂ + Z₂) for Gumbel noise, μ = (1, 0), σ = 1.
    PerturbedGt,
    /// Score function for ∇E[c_Y], Y ~ softargmax(1, 0, -1).
    Sfe,
    /// Score function with a running-mean baseline.
    SfeBaseline,
    /// Pathwise gradient of E[(μ + σZ)²] at (μ, σ) = (0.7, 1.3).
    Reparam,
    /// Gaussian smoothing of Σ x³ at μ = (0.5, -1), σ = 0.3, vanilla.
    EsVanilla,
    /// Same, forward differences.
    EsForward,
    /// Same, central (antithetic) differences.
    EsCentral,
    /// Stein estimator for a quadratic.
    Stein,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long, value_enum)]
    estimator: EstimatorTag,
    /// Number of samples.
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Algo {
    Gd,
    HeavyBall,
    Nesterov,
    Adam,
    Projected,
    Prox,
    Newton,
    Lbfgs,
    GaussNewton,
    NaturalGradient,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Problem {
    /// ½ wᵀ diag(1, 10) w - (1, 1)ᵀ w from (5, -3).
    Quadratic,
    /// 0.05 w₁² + 0.5 w₂² from (10, 1).
    Elongated,
    /// Rosenbrock from (-1.2, 1).
    Rosenbrock,
    /// Σ ¼ w⁴ - ½ w² from (0.3, -0.2).
    DoubleWell,
    /// ½ (w - 1)² + λ|w| from 3.
    Lasso,
    /// ½ ‖A w - y‖² for a 3×2 system from (3, -1).
    LeastSquares,
    /// Softmax negative log-likelihood of label 1 for features (0.5, -1, 2).
    Categorical,
}

#[derive(Clone, Copy, ValueEnum)]
enum LineSearchArg {
    Fixed,
    Armijo,
    Wolfe,
    Exact,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long, value_enum)]
    algo: Algo,
    #[arg(long, value_enum)]
    problem: Problem,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Stop once the stationarity measure is at most this.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// γ; 1 for second-order methods and 0.1 otherwise by default.
    #[arg(long)]
    stepsize: Option<f64>,
    /// Momentum ν.
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Initial damping η; 1e-3 for natural gradient by default.
    #[arg(long)]
    damping: Option<f64>,
    /// Wolfe for LBFGS and fixed otherwise by default.
    #[arg(long, value_enum)]
    linesearch: Option<LineSearchArg>,
    /// Constraint set for projected steps: none, nonneg, simplex or box:LO:HI.
    #[arg(long, default_value = "nonneg")]
    projection: String,
    /// L1 weight for proximal steps.
    #[arg(long, default_value_t = 0.3)]
    lambda: f64,
    /// Labels drawn for the sampled Fisher; 0 sums over every label.
    #[arg(long, default_value_t = 0)]
    fisher_samples: usize,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct ChainArgs {
    /// Potentials as `k,i,j,value` CSV with a header row.
    #[arg(long)]
    theta: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OdeFixture {
    /// s′ = w s with x = 1, w = 0.5.
    Linear,
    /// (q, p)′ = (p, -w² q) with x = (1, 0), w = 2.
    Oscillator,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OdeMethod {
    Adjoint,
    Unrolled,
    Both,
}

#[derive(Args)]
struct OdeArgs {
    #[arg(long, value_enum)]
    fixture: OdeFixture,
    /// Euler steps.
    #[arg(long = "K", alias = "k", default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    #[arg(long, value_enum, default_value = "both")]
    method: OdeMethod,
    /// Horizon T.
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
}

enum Failure {
    /// A check ran and did not pass.
    Check(String),
    /// Bad input: arguments, files or their contents.
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. } | Error::Csv(_) | Error::InvalidArgument(_) | Error::Shape { .. } | Error::Dimension(_) | Error::NotScalar(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Runtime(e),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(Error::InvalidArgument(e.to_string()))
    }
}

type Out<'a> = &'a mut dyn Write;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let result = match cli.command {
        Cmd::Gradcheck(a) => cmd_gradcheck(a, &mut out),
        Cmd::Schedule(a) => cmd_schedule(a, &mut out),
        Cmd::Estimate(a) => cmd_estimate(a, &mut out),
        Cmd::Optimize(a) => cmd_optimize(a, &mut out),
        Cmd::Chain(a) => cmd_chain(a, &mut out),
        Cmd::Ode(a) => cmd_ode(a, &mut out),
    };
    let flushed = out.flush();
    match (result, flushed) {
        (Ok(()), Ok(())) => ExitCode::SUCCESS,
        (Ok(()), Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        (Err(Failure::Check(msg)), _) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        (Err(Failure::Usage(msg)), _) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        (Err(Failure::Runtime(e)), _) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn read_file(path: &PathBuf) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn cmd_gradcheck(a: GradcheckArgs, out: Out) -> Result<(), Failure> {
    if !(a.tol >= 0.0) {
        return Err(Failure::Usage(format!("--tol must be non-negative, got {}", a.tol)));
    }
    let text = read_file(&a.graph)?;
    let graph = deserialize(&text).map_err(|e| Failure::Usage(format!("{}: {e}", a.graph.display())))?;
    let dim = graph.input_dim();
    let w = match a.point {
        Some(p) if p.len() != dim => {
            return Err(Failure::Usage(format!("--point has {} values, graph takes {dim}", p.len())));
        }
        Some(p) => p,
        None => sample_stream(a.seed.seed, dim, |rng| NoiseModel::Uniform.sample(rng)),
    };
    let f = |x: &[f64]| graph.eval_flat(x).map(|t| t.data().to_vec());
    let outputs = f(&w)?.len();
    let mut reverse = jacobian_reverse(&graph, &w)?;
    if a.corrupt_vjp {
        reverse.set(0, 0, reverse.get(0, 0) + 1e-3 * (1.0 + reverse.get(0, 0).abs()));
    }
    let paths: [(&str, Matrix); 2] = [("reverse", reverse), ("forward", jacobian_forward(&graph, &w)?)];
    let mut worst: Option<(f64, String)> = None;
    for (name, jac) in &paths {
        for i in 0..outputs {
            let report: GradcheckReport = gradcheck(
                |x| f(x).map_or(f64::NAN, |v| v[i]),
                |_| jac.row(i).to_vec(),
                &w,
                a.tol,
            );
            writeln!(out, "# {name} mode, output {i}")?;
            write!(out, "{report}")?;
            if !report.passed {
                let e = report
                    .entries
                    .iter()
                    .max_by(|x, y| x.rel_error.total_cmp(&y.rel_error))
                    .expect("graph has inputs");
                let what = format!(
                    "worst coordinate {} ({name} mode, output {i}): rel error {:.3e} > tolerance {:.1e}",
                    e.index, e.rel_error, a.tol
                );
                if worst.as_ref().is_none_or(|(r, _)| e.rel_error > *r) {
                    worst = Some((e.rel_error, what));
                }
            }
        }
    }
    match worst {
        None => Ok(()),
        Some((_, msg)) => Err(Failure::Check(msg)),
    }
}

fn cmd_schedule(a: ScheduleArgs, out: Out) -> Result<(), Failure> {
    let (k, s) = (a.steps as usize, a.slots as usize);
    let (table, schedule) = treeverse_plan(k, s)?;
    write!(out, "{}", table.to_csv())?;
    writeln!(out)?;
    writeln!(out, "index,action,slot,step")?;
    for (i, act) in schedule.actions.iter().enumerate() {
        match act {
            Action::Forward(j) => writeln!(out, "{i},forward,,{j}")?,
            Action::Store { slot, k } => writeln!(out, "{i},store,{slot},{k}")?,
            Action::Restore(slot) => writeln!(out, "{i},restore,{slot},")?,
            Action::Backprop(j) => writeln!(out, "{i},backprop,,{j}")?,
        }
    }
    Ok(())
}

fn cmd_estimate(a: EstimateArgs, out: Out) -> Result<(), Failure> {
    let n = a.n as usize;
    let seed = a.seed.seed;
    let cubic = |x: &[f64]| x.iter().map(|v| v.powi(3)).sum::<f64>();
    let es_mu = [0.5, -1.0];
    let costs = [1.0, -2.0, 0.5];
    let report: EstimatorReport = match a.estimator {
        EstimatorTag::GumbelArgmax => perturbed_argmax_expectation(&[1.0, 0.0], 1.0, n, seed)?,
        EstimatorTag::GumbelMax => perturbed_max_expectation(&[1.0, 0.0], 1.0, n, seed)?,
        EstimatorTag::PerturbedGt => perturbed_gt(1.0, 0.0, 1.0, n, seed)?,
        EstimatorTag::Sfe | EstimatorTag::SfeBaseline => {
            let options = SfeOptions {
                baseline: if matches!(a.estimator, EstimatorTag::Sfe) {
                    Baseline::None
                } else {
                    Baseline::RunningMean
                },
                control_variate: None,
            };
            sfe_gradient(categorical_sampler, categorical_score, |y: &usize| costs[*y], &[1.0, 0.0, -1.0], n, seed, &options)?
        }
        EstimatorTag::Reparam => reparam_gradient(&LocationScale, |y| vec![2.0 * y[0]], NoiseModel::Gaussian, &[0.7, 1.3], n, seed)?,
        EstimatorTag::EsVanilla => es_gradient(cubic, &es_mu, 0.3, n, seed, EsScheme::Vanilla)?,
        EstimatorTag::EsForward => es_gradient(cubic, &es_mu, 0.3, n, seed, EsScheme::ForwardDiff)?,
        EstimatorTag::EsCentral => es_gradient(cubic, &es_mu, 0.3, n, seed, EsScheme::CentralDiff)?,
        EstimatorTag::Stein => stein_gradient(|x| vec![2.0 * x[0] + 0.5 * x[1] + 0.3, 0.5 * x[0] + x[1] - 0.7], &es_mu, 0.4, n, seed)?,
    };
    report.write_csv(out)?;
    Ok(())
}

fn cmd_optimize(a: OptimizeArgs, out: Out) -> Result<(), Failure> {
    let second_order = matches!(a.algo, Algo::Newton | Algo::Lbfgs | Algo::GaussNewton | Algo::NaturalGradient);
    let config = StepConfig {
        stepsize: a.stepsize.unwrap_or(if second_order { 1.0 } else { 0.1 }),
        momentum: a.momentum,
        damping: a
            .damping
            .unwrap_or(if a.algo == Algo::NaturalGradient { 1e-3 } else { 0.0 }),
        linesearch: match a.linesearch {
            Some(LineSearchArg::Fixed) => LineSearch::Fixed,
            Some(LineSearchArg::Armijo) => LineSearch::Armijo,
            Some(LineSearchArg::Wolfe) => LineSearch::Wolfe,
            Some(LineSearchArg::Exact) => LineSearch::Exact,
            None if a.algo == Algo::Lbfgs => LineSearch::Wolfe,
            None => LineSearch::Fixed,
        },
        ..StepConfig::default()
    };
    config.validate()?;
    let stop = Stopping {
        max_iter: a.iters,
        grad_tol: a.tol,
    };

    let w0 = initial_point(a.problem);
    match a.problem {
        Problem::Quadratic => run_optimizer(&a, &config, stop, &diag_quadratic(), None, None, w0),
        Problem::Elongated => run_optimizer(&a, &config, stop, &elongated_quadratic(), None, None, w0),
        Problem::Lasso => run_optimizer(&a, &config, stop, &lasso_smooth(), None, None, w0),
        Problem::Rosenbrock | Problem::DoubleWell => {
            let graph = if a.problem == Problem::Rosenbrock { rosenbrock() } else { double_well(2) };
            run_optimizer(&a, &config, stop, &GraphObjective::new(&graph)?, None, None, w0)
        }
        Problem::LeastSquares => {
            let (inner, outer) = least_squares();
            let model = Composite {
                inner: &inner,
                outer: &outer,
            };
            run_optimizer(&a, &config, stop, &model, Some(&model), None, w0)
        }
        Problem::Categorical => {
            let logits = linear_softmax_logits(&CATEGORICAL_FEATURES, CATEGORICAL_CLASSES)?;
            let nll = CategoricalNll {
                logits: &logits,
                label: CATEGORICAL_LABEL,
            };
            let outer = nll.outer_graph()?;
            let model = Composite {
                inner: &logits,
                outer: &outer,
            };
            run_optimizer(&a, &config, stop, &nll, Some(&model), Some(&nll), w0)
        }
    }
    .and_then(|trace| Ok(trace.write_csv(out)?))
}

const CATEGORICAL_FEATURES: [f64; 3] = [0.5, -1.0, 2.0];
const CATEGORICAL_CLASSES: usize = 3;
const CATEGORICAL_LABEL: usize = 1;

fn initial_point(problem: Problem) -> Vec<f64> {
    match problem {
        Problem::Quadratic => vec![5.0, -3.0],
        Problem::Elongated => vec![10.0, 1.0],
        Problem::Rosenbrock => vec![-1.2, 1.0],
        Problem::DoubleWell => vec![0.3, -0.2],
        Problem::Lasso => vec![3.0],
        Problem::LeastSquares => vec![3.0, -1.0],
        Problem::Categorical => vec![0.0; CATEGORICAL_FEATURES.len() * CATEGORICAL_CLASSES],
    }
}

fn run_optimizer(
    a: &OptimizeArgs,
    config: &StepConfig,
    stop: Stopping,
    obj: &dyn Objective,
    model: Option<&Composite>,
    nll: Option<&CategoricalNll>,
    w0: Vec<f64>,
) -> Result<Trace, Failure> {
    let method = match a.algo {
        Algo::Gd => Method::Gd,
        Algo::HeavyBall => Method::HeavyBall,
        Algo::Nesterov => Method::Nesterov,
        Algo::Adam => Method::Adam,
        Algo::Projected => Method::Projected(a.projection.parse::<Projection>()?),
        Algo::Prox => Method::Prox(ProxOracle {
            tag: ProxTag::L1,
            lambda: a.lambda,
        }),
        Algo::Newton => Method::Newton,
        Algo::Lbfgs => Method::Lbfgs,
        Algo::GaussNewton => {
            let model = model.ok_or_else(|| Failure::Usage("gauss-newton needs --problem least-squares or categorical".into()))?;
            let state = OptState::new(w0, config);
            return Ok(minimize_with(model, state, stop, |s| gauss_newton_step(s, model, config))?.1);
        }
        Algo::NaturalGradient => {
            let nll = nll.ok_or_else(|| Failure::Usage("natural-gradient needs --problem categorical".into()))?;
            let fisher = match a.fisher_samples {
                0 => FisherMode::Exhaustive,
                samples => FisherMode::Sampled {
                    samples,
                    seed: a.seed.seed,
                },
            };
            let state = OptState::new(w0, config);
            return Ok(minimize_with(nll, state, stop, |s| natural_gradient_step(s, nll, config, fisher))?.1);
        }
    };
    Ok(minimize(obj, w0, &method, config, stop)?.1)
}

fn cmd_chain(a: ChainArgs, out: Out) -> Result<(), Failure> {
    let text = read_file(&a.theta)?;
    let theta = ChainPotentials::read_csv(text.as_bytes()).map_err(|e| Failure::Usage(format!("{}: {e}", a.theta.display())))?;
    let post = forward_backward(&theta);
    let m = theta.states;
    writeln!(out, "k,state,marginal")?;
    for k in 0..theta.steps {
        for j in 0..m {
            writeln!(out, "{k},{j},{}", post.unary[k * m + j])?;
        }
    }
    Ok(())
}

fn cmd_ode(a: OdeArgs, out: Out) -> Result<(), Failure> {
    let dynamics = match a.fixture {
        OdeFixture::Linear => linear_dynamics(1),
        OdeFixture::Oscillator => harmonic_oscillator(),
    };
    let (x, w) = match a.fixture {
        OdeFixture::Linear => (vec![1.0], vec![0.5]),
        OdeFixture::Oscillator => (vec![1.0, 0.0], vec![2.0]),
    };
    let problem = OdeProblem {
        dynamics: &dynamics,
        horizon: a.horizon,
        x,
        w,
    };
    // L(s_T) = Σ s_T
    let loss_grad = |s: &[f64]| vec![1.0; s.len()];
    let steps = a.steps as usize;
    let mut columns = Vec::new();
    if a.method != OdeMethod::Unrolled {
        columns.push(("adjoint", adjoint_gradient(&problem, loss_grad, steps)?));
    }
    if a.method != OdeMethod::Adjoint {
        columns.push(("unrolled", unrolled_gradient(&problem, loss_grad, steps)?));
    }
    let names: Vec<&str> = columns.iter().map(|(n, _)| *n).collect();
    writeln!(out, "param,{}", names.join(","))?;
    let rows = |pick: fn(&diffprog::ode::OdeGradient) -> &Vec<f64>, prefix: &str, out: Out| -> io::Result<()> {
        for i in 0..pick(&columns[0].1).len() {
            let vals: Vec<String> = columns.iter().map(|(_, g)| pick(g)[i].to_string()).collect();
            writeln!(out, "{prefix}{i},{}", vals.join(","))?;
        }
        Ok(())
    };
    rows(|g| &g.grad_x, "x", out)?;
    rows(|g| &g.grad_w, "w", out)?;
    Ok(())
}
