//! Config-driven experiment runners producing deterministic CSV/JSON text.

use std::path::Path;

use serde::Serialize;

use crate::config::{ExperimentConfig, ExperimentKind, SolverKind};
use crate::coupling::{run_ensemble, CouplingOptions, RngStream, StateRecord, TimeSchedule};
use crate::error::{Error, Result};
use crate::geometry::{MetricFamily, Point, TangentVec};
use crate::invariants::run_invariants;
use crate::l0::{L0GeodesicResult, L0Solver, NumericSolver};
use crate::models::{make_flow, ClosedFormSolver, Flow};
use crate::report::{emit, fmt_num, to_json, Table};
use crate::transport::{transport_matrix_with, transported_norms};
use crate::verify::{
    monotonicity_experiment, sample_cluster, submartingale_control, supermartingale_test, MonotonicityOptions,
    MonotonicitySeries, SupermartingaleReport,
};

/// Either solver behind one type.
#[derive(Clone, Debug)]
pub enum AnySolver {
    Numeric(NumericSolver),
    ClosedForm(ClosedFormSolver),
}

impl L0Solver<Flow> for AnySolver {
    fn solve(
        &self,
        fam: &Flow,
        t_prime: f64,
        t_dprime: f64,
        p: &Point,
        q: &Point,
        warm: Option<&TangentVec>,
    ) -> Result<L0GeodesicResult> {
        match self {
            AnySolver::Numeric(s) => s.solve(fam, t_prime, t_dprime, p, q, warm),
            AnySolver::ClosedForm(s) => s.solve(fam, t_prime, t_dprime, p, q, warm),
        }
    }

    fn transport(&self, fam: &Flow, geo: &L0GeodesicResult, v: &TangentVec) -> Result<TangentVec> {
        match self {
            AnySolver::Numeric(s) => L0Solver::<Flow>::transport(s, fam, geo, v),
            AnySolver::ClosedForm(s) => s.transport(fam, geo, v),
        }
    }
}

/// Result text of an experiment, not yet written anywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub summary: String,
    pub csv: Option<String>,
    pub json: Option<String>,
    /// A verification suite flagged a violation.
    pub violation: bool,
}

impl Outcome {
    /// Writes the artifacts to the configured paths.
    pub fn write(&self, cfg: &ExperimentConfig) -> Result<()> {
        if let (Some(path), Some(text)) = (&cfg.output.csv, &self.csv) {
            emit(path, text)?;
        }
        if let (Some(path), Some(text)) = (&cfg.output.json, &self.json) {
            emit(path, text)?;
        }
        Ok(())
    }
}

fn solver_for(cfg: &ExperimentConfig, ensemble: bool) -> AnySolver {
    let numeric = || AnySolver::Numeric(NumericSolver { opts: cfg.solver.options() });
    match cfg.solver.kind {
        SolverKind::Numeric => numeric(),
        SolverKind::ClosedForm => AnySolver::ClosedForm(ClosedFormSolver),
        SolverKind::Auto if ensemble => AnySolver::ClosedForm(ClosedFormSolver),
        SolverKind::Auto => numeric(),
    }
}

fn point(fam: &Flow, name: &str, coords: &[f64]) -> Result<Point> {
    fam.point(coords.to_vec()).map_err(|e| Error::Config(format!("`{name}`: {e}")))
}

fn coord_names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn nums(xs: impl IntoIterator<Item = f64>) -> Vec<String> {
    xs.into_iter().map(fmt_num).collect()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let fam = make_flow(&cfg.flow)?;
    match cfg.experiment {
        ExperimentKind::Distance => distance(cfg, &fam),
        ExperimentKind::DistanceTable => distance_table(cfg, &fam),
        ExperimentKind::Geodesic => geodesic(cfg, &fam),
        ExperimentKind::TransportCheck => transport_check(cfg, &fam),
        ExperimentKind::Couple => couple(cfg, &fam),
        ExperimentKind::VerifySupermartingale => verify_sm(cfg, &fam),
        ExperimentKind::VerifyMonotonicity => verify_mono(cfg, &fam),
        ExperimentKind::Invariants => invariants(cfg, &fam),
    }
}

/// Runs and writes artifacts.
pub fn run_and_emit(cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = run_experiment(cfg)?;
    out.write(cfg)?;
    Ok(out)
}

fn distance_header(n: usize) -> Table {
    let mut h = vec!["t_prime".to_string(), "t_dprime".to_string()];
    h.extend(coord_names("p", n));
    h.extend(coord_names("q", n));
    h.push("action".into());
    h.extend(coord_names("v0_", n));
    h.push("multiplicity_flag".into());
    h.push("residual".into());
    Table::new(h)
}

fn distance_row(r: &L0GeodesicResult) -> Vec<String> {
    let mut row = nums([r.t_start, r.t_end]);
    row.extend(nums(r.start.coords().iter().copied()));
    row.extend(nums(r.end.coords().iter().copied()));
    row.push(fmt_num(r.action));
    row.extend(nums(r.v0.components().iter().copied()));
    row.push(u8::from(r.multiplicity_flag).to_string());
    row.push(fmt_num(r.residual));
    row
}

fn distance(cfg: &ExperimentConfig, fam: &Flow) -> Result<Outcome> {
    let e = cfg.endpoints.as_ref().expect("validated");
    let (p, q) = (point(fam, "p", &e.p)?, point(fam, "q", &e.q)?);
    let r = solver_for(cfg, false).solve(fam, e.t_prime, e.t_dprime, &p, &q, None)?;
    let mut t = distance_header(fam.ambient_dim());
    t.push(distance_row(&r));
    Ok(Outcome { summary: fmt_num(r.action), csv: Some(t.to_csv()?), json: None, violation: false })
}

fn read_batch(path: &Path, n: usize) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) if v.len() == 2 + 2 * n => rows.push(v),
            Ok(v) => {
                return Err(Error::Config(format!("batch row {} has {} fields, expected {}", i + 1, v.len(), 2 + 2 * n)))
            }
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::Config(format!("batch row {}: {e}", i + 1))),
        }
    }
    Ok(rows)
}

fn distance_table(cfg: &ExperimentConfig, fam: &Flow) -> Result<Outcome> {
    use rayon::prelude::*;
    let n = fam.ambient_dim();
    let rows = read_batch(cfg.batch.as_ref().expect("validated"), n)?;
    let solver = solver_for(cfg, false);
    let results = rows
        .par_iter()
        .map(|r| {
            let p = point(fam, "p", &r[2..2 + n])?;
            let q = point(fam, "q", &r[2 + n..])?;
            solver.solve(fam, r[0], r[1], &p, &q, None)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut t = distance_header(n);
    for r in &results {
        t.push(distance_row(r));
    }
    Ok(Outcome {
        summary: format!("{} pairs", results.len()),
        csv: Some(t.to_csv()?),
        json: None,
        violation: false,
    })
}

fn geodesic(cfg: &ExperimentConfig, fam: &Flow) -> Result<Outcome> {
    let e = cfg.endpoints.as_ref().expect("validated");
    let (p, q) = (point(fam, "p", &e.p)?, point(fam, "q", &e.q)?);
    let solver = NumericSolver { opts: cfg.solver.options() };
    let r = solver.solve(fam, e.t_prime, e.t_dprime, &p, &q, None)?;
    let n = fam.ambient_dim();
    let mut h = vec!["t".to_string()];
    h.extend(coord_names("x", n));
    let mut t = Table::new(h);
    if let Some(curve) = &r.curve {
        for (time, pt) in curve.t_grid().iter().zip(curve.points()) {
            let mut row = vec![fmt_num(*time)];
            row.extend(nums(pt.coords().iter().copied()));
            t.push(row);
        }
    }
    Ok(Outcome {
        summary: format!("action {} multiplicity {}", fmt_num(r.action), r.multiplicity_flag),
        csv: Some(t.to_csv()?),
        json: None,
        violation: false,
    })
}

#[derive(Serialize)]
struct TransportReport {
    action: f64,
    multiplicity_flag: bool,
    orthogonality_defect: f64,
    norm_drift: f64,
    matrix: Vec<Vec<f64>>,
    transported: Option<Vec<f64>>,
}

fn transport_check(cfg: &ExperimentConfig, fam: &Flow) -> Result<Outcome> {
    let e = cfg.endpoints.as_ref().expect("validated");
    let (p, q) = (point(fam, "p", &e.p)?, point(fam, "q", &e.q)?);
    let solver = solver_for(cfg, false);
    let geo = solver.solve(fam, e.t_prime, e.t_dprime, &p, &q, None)?;
    let map = transport_matrix_with(fam, &solver, &geo)?;
    let defect = map.orthogonality_defect();
    let (norm_drift, transported) = match &e.v {
        Some(v) => {
            let v = fam.tangent(&p, v.clone()).map_err(|err| Error::Config(format!("`v`: {err}")))?;
            let ns = transported_norms(fam, &geo, &v)?;
            let drift = ns.iter().map(|n| (n - ns[0]).abs()).fold(0.0, f64::max);
            let pv = solver.transport(fam, &geo, &v)?;
            (drift, Some(pv.components().iter().copied().collect()))
        }
        None => (0.0, None),
    };
    let report = TransportReport {
        action: geo.action,
        multiplicity_flag: geo.multiplicity_flag,
        orthogonality_defect: defect,
        norm_drift,
        matrix: map.matrix.row_iter().map(|r| r.iter().copied().collect()).collect(),
        transported,
    };
    let mut t = Table::new(["row", "col", "value"]);
    for i in 0..map.matrix.nrows() {
        for j in 0..map.matrix.ncols() {
            t.push(vec![i.to_string(), j.to_string(), fmt_num(map.matrix[(i, j)])]);
        }
    }
    Ok(Outcome {
        summary: format!("orthogonality defect {} norm drift {}", fmt_num(defect), fmt_num(norm_drift)),
        csv: Some(t.to_csv()?),
        json: Some(to_json(&report)?),
        violation: defect >= 1e-8 || norm_drift >= 1e-8,
    })
}

fn initial_pair(cfg: &ExperimentConfig, fam: &Flow) -> Result<(Point, Point)> {
    let e = cfg.endpoints.as_ref().expect("validated");
    Ok((point(fam, "p", &e.p)?, point(fam, "q", &e.q)?))
}

fn couple(cfg: &ExperimentConfig, fam: &Flow) -> Result<Outcome> {
    let schedule = cfg.schedule.expect("validated");
    let ens = cfg.ensemble.as_ref().expect("validated");
    let pair = initial_pair(cfg, fam)?;
    let opts = CouplingOptions { record: StateRecord::All, ..Default::default() };
    let paths = run_ensemble(fam, &solver_for(cfg, true), &schedule, &[pair], ens.master_seed, ens.n_paths, &opts)?;
    let n = fam.ambient_dim();
    let mut h = vec!["path".to_string(), "s".to_string()];
    h.extend(coord_names("x", n));
    h.extend(coord_names("y", n));
    h.push("lambda".into());
    h.push("multiplicity_hit".into());
    let mut t = Table::new(h);
    for (i, path) in paths.iter().enumerate() {
        for st in &path.states {
            let mut row = vec![i.to_string(), fmt_num(path.s[st.index])];
            row.extend(nums(st.x.coords().iter().copied()));
            row.extend(nums(st.y.coords().iter().copied()));
            row.push(fmt_num(path.lambda[st.index]));
            row.push(u8::from(path.multiplicity[st.index]).to_string());
            t.push(row);
        }
    }
    let mean_first = paths.iter().map(|p| p.lambda[0]).sum::<f64>() / paths.len() as f64;
    let mean_last = paths.iter().map(|p| *p.lambda.last().expect("non-empty")).sum::<f64>() / paths.len() as f64;
    Ok(Outcome {
        summary: format!(
            "{} paths, mean Lambda {} -> {}",
            paths.len(),
            fmt_num(mean_first),
            fmt_num(mean_last)
        ),
        csv: Some(t.to_csv()?),
        json: None,
        violation: false,
    })
}

#[derive(Serialize)]
struct SmOutput<'a> {
    schedule: TimeSchedule,
    master_seed: u64,
    report: &'a SupermartingaleReport,
    control_rejected: bool,
    control_p_value: f64,
}

fn verify_sm(cfg: &ExperimentConfig, fam: &Flow) -> Result<Outcome> {
    let schedule = cfg.schedule.expect("validated");
    let ens = cfg.ensemble.as_ref().expect("validated");
    let pair = initial_pair(cfg, fam)?;
    let paths = run_ensemble(fam, &solver_for(cfg, true), &schedule, &[pair], ens.master_seed, ens.n_paths, &Default::default())?;
    let report = supermartingale_test(&paths)?;
    let control = supermartingale_test(&submartingale_control(&paths))?;
    let mut t = Table::new(["k", "s", "mean", "stderr", "upper99"]);
    for st in &report.per_step {
        t.push(vec![st.k.to_string(), fmt_num(st.s), fmt_num(st.mean), fmt_num(st.stderr), fmt_num(st.upper99)]);
    }
    let out = SmOutput {
        schedule,
        master_seed: ens.master_seed,
        report: &report,
        control_rejected: control.rejected,
        control_p_value: control.p_value,
    };
    Ok(Outcome {
        summary: format!(
            "pooled mean {} stderr {} upper99 {} p-value {} rejected {}",
            fmt_num(report.pooled_mean),
            fmt_num(report.pooled_stderr),
            fmt_num(report.pooled_upper99),
            fmt_num(report.p_value),
            report.rejected
        ),
        csv: Some(t.to_csv()?),
        json: Some(to_json(&out)?),
        violation: report.rejected,
    })
}

/// Initial empirical measures of the monotonicity experiment.
pub fn monotonicity_measures(cfg: &ExperimentConfig, fam: &Flow) -> Result<(Vec<Point>, Vec<Point>)> {
    let m = cfg.monotonicity.as_ref().expect("validated");
    let schedule = cfg.schedule.expect("validated");
    let seed = cfg.ensemble.as_ref().expect("validated").master_seed;
    let mut rng = RngStream::new(seed, u64::MAX - 2).rng();
    let cx = point(fam, "center_x", &m.center_x)?;
    let cy = point(fam, "center_y", &m.center_y)?;
    let xs = sample_cluster(fam, schedule.t1_prime, &cx, m.radius, m.n, &mut rng);
    let ys = sample_cluster(fam, schedule.t1_dprime, &cy, m.radius, m.n, &mut rng);
    Ok((xs, ys))
}

#[derive(Serialize)]
struct MonoOutput<'a> {
    schedule: TimeSchedule,
    master_seed: u64,
    series: &'a [MonotonicitySeries],
}

fn verify_mono(cfg: &ExperimentConfig, fam: &Flow) -> Result<Outcome> {
    let m = cfg.monotonicity.as_ref().expect("validated");
    let schedule = cfg.schedule.expect("validated");
    let seed = cfg.ensemble.as_ref().expect("validated").master_seed;
    let (xs, ys) = monotonicity_measures(cfg, fam)?;
    let opts = MonotonicityOptions { checkpoints: m.checkpoints, bootstrap: m.bootstrap, tolerance_se: m.tolerance_se };
    let solver = solver_for(cfg, true);
    let series = m
        .phis
        .iter()
        .map(|&phi| monotonicity_experiment(fam, &solver, &schedule, &xs, &ys, phi, seed, &opts))
        .collect::<Result<Vec<_>>>()?;
    let mut t = Table::new(["phi", "s", "cost", "stderr", "flag"]);
    for sr in &series {
        for c in &sr.checkpoints {
            t.push(vec![sr.phi.label(), fmt_num(c.s), fmt_num(c.cost), fmt_num(c.stderr), u8::from(c.flag).to_string()]);
        }
    }
    let violations: usize = series.iter().map(|s| s.violations).sum();
    let summary = series
        .iter()
        .map(|s| format!("{}: {} violations, max increment {} se", s.phi.label(), s.violations, fmt_num(s.max_increment_se)))
        .collect::<Vec<_>>()
        .join("; ");
    Ok(Outcome {
        summary,
        csv: Some(t.to_csv()?),
        json: Some(to_json(&MonoOutput { schedule, master_seed: seed, series: &series })?),
        violation: violations > 0,
    })
}

/// Default number of random pairs in the property suite.
pub const INVARIANT_PAIRS: usize = 30;

fn invariants(cfg: &ExperimentConfig, fam: &Flow) -> Result<Outcome> {
    let seed = cfg.ensemble.as_ref().expect("validated").master_seed;
    let report = run_invariants(fam, seed, INVARIANT_PAIRS, &cfg.solver.options())?;
    let mut t = Table::new(["check", "passed", "cases", "worst", "detail"]);
    for c in &report.checks {
        t.push(vec![c.name.clone(), u8::from(c.passed).to_string(), c.cases.to_string(), fmt_num(c.worst), c.detail.clone()]);
    }
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    Ok(Outcome {
        summary: if failed.is_empty() {
            format!("{} checks passed", report.checks.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
        csv: Some(t.to_csv()?),
        json: Some(to_json(&report)?),
        violation: !report.passed,
    })
}
