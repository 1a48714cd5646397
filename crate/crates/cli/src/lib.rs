//! Command-line front end for the `l0flow` library.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use l0flow::config::{
    EnsembleConfig, Endpoints, ExperimentConfig, ExperimentKind, MonotonicityConfig, SolverKind,
};
use l0flow::coupling::TimeSchedule;
use l0flow::experiments::run_and_emit;
use l0flow::geometry::ModelId;
use l0flow::models::FlowSpec;
use l0flow::verify::PhiSpec;
use l0flow::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_SOLVER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VIOLATION: i32 = 3;

pub const THREADS_ENV: &str = "L0FLOW_THREADS";

#[derive(Parser, Debug)]
#[command(name = "l0flow", version, about = "L0 distances, space-time transport and coupled walks on model Ricci flows")]
struct Cli {
    /// Worker threads (falls back to L0FLOW_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// L0-distance between two space-time points, or a CSV batch of them.
    Distance(PointArgs),
    /// Minimizing L0-geodesic as a table of grid points.
    Geodesic(PointArgs),
    /// Space-time parallel transport matrix and isometry check.
    Transport(PointArgs),
    /// Coupled random walk ensemble with full trajectories.
    Couple(WalkArgs),
    /// Supermartingale test of Lambda along coupled walks.
    VerifySm(WalkArgs),
    /// Monotonicity of the empirical L0 transport cost.
    VerifyMono(MonoArgs),
    /// Property suite over random inputs.
    Invariants(CommonArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    Torus,
    Sphere,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SolverArg {
    Auto,
    Numeric,
    ClosedForm,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long)]
    d: Option<usize>,
    /// Torus side length.
    #[arg(long = "L")]
    side: Option<f64>,
    /// Flow horizon.
    #[arg(long = "T")]
    horizon: Option<f64>,
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    /// Grid intervals for the numeric solver.
    #[arg(long)]
    grid: Option<usize>,
    /// Multi-start count for the numeric solver.
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV output path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// JSON output path.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PointArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Start time t'.
    #[arg(long, allow_negative_numbers = true)]
    tp: Option<f64>,
    /// End time t''.
    #[arg(long, allow_negative_numbers = true)]
    tq: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    p: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    q: Option<Vec<f64>>,
    /// Tangent vector at p (transport only).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    v: Option<Vec<f64>>,
    /// CSV of `t', t'', p..., q...` rows (distance only).
    #[arg(long)]
    batch: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    /// Terminal time t1' of the first walker.
    #[arg(long)]
    t1p: Option<f64>,
    /// Terminal time t1'' of the second walker.
    #[arg(long)]
    t1q: Option<f64>,
    /// Reversed-time horizon S.
    #[arg(long = "S")]
    s: Option<f64>,
    /// Step scale epsilon.
    #[arg(long, conflicts_with = "steps")]
    eps: Option<f64>,
    /// Number of equal steps over S (sets epsilon).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    paths: Option<usize>,
}

#[derive(Args, Debug)]
struct WalkArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    p: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    q: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct MonoArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Points per empirical measure.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    center_x: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    center_y: Option<Vec<f64>>,
    #[arg(long)]
    radius: Option<f64>,
    /// Cost transform: identity, capped:<c> or exp (repeatable).
    #[arg(long = "phi", value_parser = parse_phi)]
    phis: Vec<PhiSpec>,
    #[arg(long)]
    checkpoints: Option<usize>,
    #[arg(long)]
    bootstrap: Option<usize>,
}

fn parse_phi(s: &str) -> Result<PhiSpec, String> {
    match s {
        "identity" => Ok(PhiSpec::Identity),
        "exp" | "exp_saturating" => Ok(PhiSpec::ExpSaturating),
        _ => match s.strip_prefix("capped:") {
            Some(c) => c.parse().map(|c| PhiSpec::Capped { c }).map_err(|e| format!("bad cap `{c}`: {e}")),
            None => Err(format!("unknown phi `{s}`; expected identity, capped:<c> or exp")),
        },
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn base_config(common: &CommonArgs, kind: ExperimentKind) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => {
            let mut c = ExperimentConfig::load(path)?;
            c.experiment = kind;
            c
        }
        None => {
            let model = common.model.ok_or_else(|| config_error("--model or --config is required"))?;
            let d = common.d.ok_or_else(|| config_error("--d or --config is required"))?;
            let horizon = match (model, common.horizon) {
                (_, Some(t)) => t,
                (ModelArg::Torus, None) => 1.0,
                (ModelArg::Sphere, None) => return Err(config_error("--T is required for the sphere")),
            };
            let model = match model {
                ModelArg::Torus => ModelId::Torus,
                ModelArg::Sphere => ModelId::Sphere,
            };
            ExperimentConfig::new(kind, FlowSpec { model, d, side: None, horizon })
        }
    };
    if common.config.is_some() {
        if let Some(m) = common.model {
            cfg.flow.model = match m {
                ModelArg::Torus => ModelId::Torus,
                ModelArg::Sphere => ModelId::Sphere,
            };
        }
        if let Some(d) = common.d {
            cfg.flow.d = d;
        }
        if let Some(t) = common.horizon {
            cfg.flow.horizon = t;
        }
    }
    if let Some(l) = common.side {
        cfg.flow.side = Some(l);
    }
    if let Some(s) = common.solver {
        cfg.solver.kind = match s {
            SolverArg::Auto => SolverKind::Auto,
            SolverArg::Numeric => SolverKind::Numeric,
            SolverArg::ClosedForm => SolverKind::ClosedForm,
        };
    }
    if let Some(g) = common.grid {
        cfg.solver.grid = g;
    }
    if let Some(r) = common.starts {
        cfg.solver.starts = r;
    }
    if let Some(seed) = common.seed {
        match &mut cfg.ensemble {
            Some(e) => e.master_seed = seed,
            None => cfg.ensemble = Some(EnsembleConfig { n_paths: 0, master_seed: seed }),
        }
    }
    if let Some(p) = &common.csv {
        cfg.output.csv = Some(p.clone());
    }
    if let Some(p) = &common.json {
        cfg.output.json = Some(p.clone());
    }
    Ok(cfg)
}

fn apply_points(cfg: &mut ExperimentConfig, args: &PointArgs) -> Result<(), Error> {
    if let Some(b) = &args.batch {
        cfg.batch = Some(b.clone());
        cfg.experiment = ExperimentKind::DistanceTable;
        return Ok(());
    }
    if cfg.experiment == ExperimentKind::DistanceTable && cfg.batch.is_some() {
        return Ok(());
    }
    let have_all = args.tp.is_some() && args.tq.is_some() && args.p.is_some() && args.q.is_some();
    let ep = match cfg.endpoints.take() {
        Some(mut e) => {
            if let Some(t) = args.tp {
                e.t_prime = t;
            }
            if let Some(t) = args.tq {
                e.t_dprime = t;
            }
            if let Some(p) = &args.p {
                e.p = p.clone();
            }
            if let Some(q) = &args.q {
                e.q = q.clone();
            }
            e
        }
        None if have_all => Endpoints {
            t_prime: args.tp.expect("checked"),
            t_dprime: args.tq.expect("checked"),
            p: args.p.clone().expect("checked"),
            q: args.q.clone().expect("checked"),
            v: None,
        },
        None => return Err(config_error("--tp, --tq, --p and --q are required")),
    };
    cfg.endpoints = Some(Endpoints { v: args.v.clone().or(ep.v.clone()), ..ep });
    Ok(())
}

fn apply_schedule(cfg: &mut ExperimentConfig, args: &ScheduleArgs) -> Result<(), Error> {
    let current = cfg.schedule;
    let t1_prime = args.t1p.or(current.map(|s| s.t1_prime));
    let t1_dprime = args.t1q.or(current.map(|s| s.t1_dprime));
    let horizon = args.s.or(current.map(|s| s.horizon));
    let (Some(t1_prime), Some(t1_dprime), Some(horizon)) = (t1_prime, t1_dprime, horizon) else {
        return Err(config_error("schedule needs --t1p, --t1q and --S"));
    };
    let epsilon = match (args.eps, args.steps) {
        (Some(e), _) => e,
        (None, Some(n)) if n > 0 => (horizon / n as f64).sqrt(),
        (None, Some(_)) => return Err(config_error("--steps must be positive")),
        (None, None) => match current {
            Some(s) if s.horizon == horizon => s.epsilon,
            _ => (horizon / 300.0).sqrt(),
        },
    };
    cfg.schedule = Some(TimeSchedule { t1_prime, t1_dprime, horizon, epsilon });
    if let Some(n) = args.paths {
        match &mut cfg.ensemble {
            Some(e) => e.n_paths = n,
            None => return Err(config_error("--seed is required for stochastic runs")),
        }
    }
    Ok(())
}

fn apply_walk(cfg: &mut ExperimentConfig, args: &WalkArgs) -> Result<(), Error> {
    apply_schedule(cfg, &args.schedule)?;
    let (tp, tq) = cfg.schedule.map(|s| (s.t1_prime, s.t1_dprime)).expect("set above");
    let ep = match cfg.endpoints.take() {
        Some(mut e) => {
            if let Some(p) = &args.p {
                e.p = p.clone();
            }
            if let Some(q) = &args.q {
                e.q = q.clone();
            }
            e
        }
        None => match (&args.p, &args.q) {
            (Some(p), Some(q)) => Endpoints { t_prime: tp, t_dprime: tq, p: p.clone(), q: q.clone(), v: None },
            _ => return Err(config_error("--p and --q are required")),
        },
    };
    cfg.endpoints = Some(Endpoints { t_prime: tp, t_dprime: tq, ..ep });
    Ok(())
}

fn apply_mono(cfg: &mut ExperimentConfig, args: &MonoArgs) -> Result<(), Error> {
    apply_schedule(cfg, &args.schedule)?;
    let mut m = cfg.monotonicity.take().unwrap_or(MonotonicityConfig {
        n: 0,
        center_x: Vec::new(),
        center_y: Vec::new(),
        radius: 0.3,
        phis: Vec::new(),
        checkpoints: 10,
        bootstrap: 100,
        tolerance_se: 2.0,
    });
    if let Some(n) = args.n {
        m.n = n;
    }
    if let Some(c) = &args.center_x {
        m.center_x = c.clone();
    }
    if let Some(c) = &args.center_y {
        m.center_y = c.clone();
    }
    if let Some(r) = args.radius {
        m.radius = r;
    }
    if !args.phis.is_empty() {
        m.phis = args.phis.clone();
    }
    if m.phis.is_empty() {
        m.phis = vec![PhiSpec::Identity];
    }
    if let Some(c) = args.checkpoints {
        m.checkpoints = c;
    }
    if let Some(b) = args.bootstrap {
        m.bootstrap = b;
    }
    if m.n == 0 {
        return Err(config_error("--n must be positive"));
    }
    if let Some(e) = &mut cfg.ensemble {
        if e.n_paths == 0 {
            e.n_paths = m.n;
        }
    }
    cfg.monotonicity = Some(m);
    Ok(())
}

fn build_config(cmd: &Command) -> Result<ExperimentConfig, Error> {
    match cmd {
        Command::Distance(a) => {
            let mut c = base_config(&a.common, ExperimentKind::Distance)?;
            apply_points(&mut c, a)?;
            Ok(c)
        }
        Command::Geodesic(a) => {
            let mut c = base_config(&a.common, ExperimentKind::Geodesic)?;
            apply_points(&mut c, a)?;
            Ok(c)
        }
        Command::Transport(a) => {
            let mut c = base_config(&a.common, ExperimentKind::TransportCheck)?;
            apply_points(&mut c, a)?;
            Ok(c)
        }
        Command::Couple(a) => {
            let mut c = base_config(&a.common, ExperimentKind::Couple)?;
            apply_walk(&mut c, a)?;
            Ok(c)
        }
        Command::VerifySm(a) => {
            let mut c = base_config(&a.common, ExperimentKind::VerifySupermartingale)?;
            apply_walk(&mut c, a)?;
            Ok(c)
        }
        Command::VerifyMono(a) => {
            let mut c = base_config(&a.common, ExperimentKind::VerifyMonotonicity)?;
            apply_mono(&mut c, a)?;
            Ok(c)
        }
        Command::Invariants(a) => base_config(a, ExperimentKind::Invariants),
    }
}

/// Exit status for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::InvalidFlow(_)
        | Error::InvalidSchedule(_)
        | Error::InvalidInput(_)
        | Error::InvalidWindow { .. }
        | Error::TimeOutOfRange { .. }
        | Error::NotOnManifold(_)
        | Error::NotTangent(_)
        | Error::GridTooCoarse(_)
        | Error::Json(_) => EXIT_CONFIG,
        _ => EXIT_SOLVER,
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Error> {
    if let Some(n) = flag {
        return if n == 0 { Err(config_error("--threads must be positive")) } else { Ok(Some(n)) };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(config_error(format!("{THREADS_ENV}={v} is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

/// Parses `argv`, runs the experiment, prints a summary and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let run = || -> Result<i32, Error> {
        let cfg = build_config(&cli.command)?;
        let threads = thread_count(cli.threads)?;
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        let pool = builder.build().map_err(|e| config_error(e.to_string()))?;
        let out = pool.install(|| run_and_emit(&cfg))?;
        println!("{}", out.summary);
        Ok(if out.violation { EXIT_VIOLATION } else { EXIT_OK })
    };
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
