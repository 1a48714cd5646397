//! Property checks over random inputs: action bounds, solver consistency,
//! transport isometry, coupling bounds and assignment sanity.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::coupling::{run_ensemble, RngStream, TimeSchedule};
use crate::error::Result;
use crate::geometry::{Coords, MetricFamily, ModelId, Point, TangentVec};
use crate::l0::{
    l0_action, l0_distance, l0_time_partials, nonpos_hessian_probe, L0GeodesicResult, L0Solver, NumericSolver, SolveOptions,
    SpaceTimeCurve,
};
use crate::models::{ClosedFormSolver, Flow};
use crate::transport::{transport_matrix, transported_norms};
use crate::verify::{l0_cost_matrix, optimal_assignment, PhiSpec};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Largest violation margin observed; `≤ 0` means every case held.
    pub worst: f64,
    pub detail: String,
}

impl CheckResult {
    fn from_margins(name: &str, margins: &[f64], detail: impl Into<String>) -> Self {
        let worst = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            name: name.into(),
            passed: margins.iter().all(|m| *m <= 0.0),
            cases: margins.len(),
            worst,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvariantReport {
    pub model: ModelId,
    pub d: usize,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

/// A space-time endpoint pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairCase {
    pub t_prime: f64,
    pub t_dprime: f64,
    pub p: Point,
    pub q: Point,
}

pub fn random_point<R: Rng + ?Sized>(fam: &Flow, rng: &mut R) -> Point {
    match fam {
        Flow::Torus(t) => {
            let c = Coords::from_fn(fam.dim(), |_, _| rng.random::<f64>() * t.side());
            fam.point_projected(&c)
        }
        Flow::Sphere(_) => loop {
            let c = Coords::from_fn(fam.ambient_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
            if c.norm() > 1e-3 {
                break fam.point_projected(&c);
            }
        },
    }
}

/// Point at `g(t)`-independent angle/offset `ell` from `p` in a random direction.
pub fn point_at<R: Rng + ?Sized>(fam: &Flow, p: &Point, ell: f64, rng: &mut R) -> Point {
    let frame = fam.frame_raw(0.0, p.coords());
    let dir = frame
        .iter()
        .fold(Coords::zeros(p.coords().len()), |acc, e| acc + e * rng.sample::<f64, _>(StandardNormal));
    let dir = &dir / fam.norm(0.0, p.coords(), &dir);
    Point::new_unchecked(fam.model(), fam.exp_raw(0.0, p.coords(), &(dir * ell)))
}

/// Random pairs away from the cut locus, with random windows inside the horizon.
pub fn random_pairs<R: Rng + ?Sized>(fam: &Flow, n: usize, rng: &mut R) -> Vec<PairCase> {
    let horizon = fam.horizon();
    (0..n)
        .map(|_| {
            let dt = horizon * rng.random_range(0.1..0.5);
            let t_prime = rng.random_range(0.0..horizon - dt);
            let p = random_point(fam, rng);
            let q = match fam {
                Flow::Torus(t) => loop {
                    let q = random_point(fam, rng);
                    let delta = t.min_image(p.coords(), q.coords());
                    if delta.amax() < 0.45 * t.side() {
                        break q;
                    }
                },
                Flow::Sphere(_) => {
                    let ell = rng.random_range(0.0..PI - 0.3);
                    point_at(fam, &p, ell, rng)
                }
            };
            PairCase { t_prime, t_dprime: t_prime + dt, p, q }
        })
        .collect()
}

fn interpolant_action(fam: &Flow, case: &PairCase, steps: usize) -> Result<f64> {
    let (p, q) = (case.p.coords(), case.q.coords());
    let chord = fam.log_raw(case.t_prime, p, q);
    let grid: Vec<f64> = (0..=steps)
        .map(|k| case.t_prime + (case.t_dprime - case.t_prime) * k as f64 / steps as f64)
        .collect();
    let points = (0..=steps)
        .map(|k| {
            let x = if k == steps { q.clone() } else { fam.exp_raw(case.t_prime, p, &(&chord * (k as f64 / steps as f64))) };
            Point::new_unchecked(fam.model(), x)
        })
        .collect();
    l0_action(fam, &SpaceTimeCurve::from_points(fam, grid, points)?)
}

fn min_half_speed(fam: &Flow, curve: &SpaceTimeCurve) -> f64 {
    let t = curve.t_grid();
    curve
        .velocities()
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let tm = 0.5 * (t[k] + t[k + 1]);
            0.5 * fam.inner(tm, v.base().coords(), v.components(), v.components())
        })
        .fold(f64::INFINITY, f64::min)
}

/// Lower, global lower, interpolant upper and mean-value speed bounds on
/// numeric solves of `cases`.
pub fn check_bounds(fam: &Flow, cases: &[PairCase], opts: &SolveOptions) -> Result<Vec<CheckResult>> {
    let b = fam.bounds();
    let d = fam.dim() as f64;
    let horizon = fam.horizon();
    let mut lower = Vec::new();
    let mut global = Vec::new();
    let mut upper = Vec::new();
    let mut speed = Vec::new();
    for case in cases {
        let r = l0_distance(fam, case.t_prime, case.t_dprime, &case.p, &case.q, opts)?;
        let dt = case.t_dprime - case.t_prime;
        let tol = 1e-9 * (1.0 + r.action.abs());
        let rho = fam.distance_raw(case.t_dprime, case.p.coords(), case.q.coords());
        let lb = 0.5 * (-b.k_minus * dt).exp() * rho * rho / dt - d * b.k_minus * dt / 2.0;
        lower.push(lb - r.action - tol);
        global.push(-d * b.k_minus * horizon / 2.0 - r.action - tol);
        let ub = interpolant_action(fam, case, 512)?;
        upper.push(r.action - ub - 1e-6 * (1.0 + r.action.abs()));
        if let Some(curve) = &r.curve {
            let bound = r.action / dt + d * b.k_minus / 2.0;
            speed.push(min_half_speed(fam, curve) - bound - 1e-6 * (1.0 + bound.abs()));
        }
    }
    Ok(vec![
        CheckResult::from_margins("lower_bound", &lower, "L0 >= exp(-K-dt) rho''^2/(2dt) - d K- dt/2"),
        CheckResult::from_margins("global_lower_bound", &global, "L0 >= -d K- T/2"),
        CheckResult::from_margins("interpolant_upper_bound", &upper, "L0 <= action of the g(t')-geodesic interpolant"),
        CheckResult::from_margins("mean_value_speed", &speed, "min_t |v|^2/2 <= L0/dt + d K-/2"),
    ])
}

fn perturb_point(fam: &Flow, t: f64, p: &Point, delta: f64, k: usize) -> Point {
    let frame = fam.frame_raw(t, p.coords());
    let e = &frame[k % frame.len()];
    Point::new_unchecked(fam.model(), fam.exp_raw(t, p.coords(), &(e * delta)))
}

fn continuity(fam: &Flow, cases: &[PairCase], opts: &SolveOptions) -> Result<CheckResult> {
    let delta = 1e-4;
    let mut margins = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    for case in cases {
        let base = l0_distance(fam, case.t_prime, case.t_dprime, &case.p, &case.q, opts)?;
        let (dt1, dt2) = l0_time_partials(fam, &base)?;
        let speeds = fam.norm(case.t_prime, case.p.coords(), base.v0.components())
            + fam.norm(case.t_dprime, case.q.coords(), base.v_end.components());
        let bound = 2.0 * (speeds + dt1.abs() + dt2.abs()) + 1.0;
        let seed = Some(&base.v0);
        let solver = NumericSolver { opts: opts.clone() };
        let variants = [
            (case.t_prime + delta, case.t_dprime, case.p.clone(), case.q.clone()),
            (case.t_prime, case.t_dprime - delta, case.p.clone(), case.q.clone()),
            (case.t_prime, case.t_dprime, perturb_point(fam, case.t_prime, &case.p, delta, 0), case.q.clone()),
            (case.t_prime, case.t_dprime, case.p.clone(), perturb_point(fam, case.t_dprime, &case.q, delta, 1)),
        ];
        for (t1, t2, p, q) in variants {
            let warm = seed.map(|s| fam.tangent_projected(&p, s.components()));
            let r = solver.solve(fam, t1, t2, &p, &q, warm.as_ref())?;
            let ratio = (r.action - base.action).abs() / delta;
            worst_ratio = worst_ratio.max(ratio);
            margins.push(ratio - bound);
        }
    }
    let mut c = CheckResult::from_margins("continuity", &margins, "");
    c.detail = format!("max Lipschitz ratio {}", crate::report::fmt_num(worst_ratio));
    Ok(c)
}

fn solver_consistency(fam: &Flow, cases: &[PairCase], opts: &SolveOptions) -> Result<Vec<CheckResult>> {
    let mut direct = Vec::new();
    let mut closed = Vec::new();
    let mut conv = Vec::new();
    for case in cases {
        let r = l0_distance(fam, case.t_prime, case.t_dprime, &case.p, &case.q, opts)?;
        if let Some(da) = r.direct_action {
            direct.push((da - r.action).abs() / (1.0 + r.action.abs()) - 1e-5);
        }
        let exact = ClosedFormSolver.solve(fam, case.t_prime, case.t_dprime, &case.p, &case.q, None)?;
        closed.push((r.action - exact.action).abs() / (1.0 + exact.action.abs()) - 1e-6);

        let energies = [32usize, 64, 128]
            .iter()
            .map(|&n| {
                let o = SolveOptions { grid: n, starts: 1, ..opts.clone() };
                l0_distance(fam, case.t_prime, case.t_dprime, &case.p, &case.q, &o).map(|r| r.direct_action.unwrap_or(r.action))
            })
            .collect::<Result<Vec<f64>>>()?;
        let (d1, d2) = (energies[0] - energies[1], energies[1] - energies[2]);
        if d1.abs() > 1e-10 * (1.0 + r.action.abs()) {
            let ratio = d1 / d2;
            conv.push((ratio - 4.0).abs() - 1.0);
        } else {
            conv.push(d2.abs() - 1e-10 * (1.0 + r.action.abs()));
        }
    }
    Ok(vec![
        CheckResult::from_margins("direct_vs_shooting", &direct, "stage actions agree to 1e-5 relative"),
        CheckResult::from_margins("closed_form_agreement", &closed, "numeric vs closed form to 1e-6 relative"),
        CheckResult::from_margins("grid_convergence", &conv, "successive refinement ratio within [3, 5]"),
    ])
}

fn transport_checks(fam: &Flow, cases: &[PairCase], opts: &SolveOptions, rng: &mut impl Rng) -> Result<Vec<CheckResult>> {
    let mut norms = Vec::new();
    let mut ortho = Vec::new();
    for case in cases {
        let geo = l0_distance(fam, case.t_prime, case.t_dprime, &case.p, &case.q, opts)?;
        let v = random_tangent(fam, &geo, rng);
        let ns = transported_norms(fam, &geo, &v)?;
        norms.push(ns.iter().map(|n| (n - ns[0]).abs()).fold(0.0, f64::max) - 1e-8 * (1.0 + ns[0]));
        ortho.push(transport_matrix(fam, &geo)?.orthogonality_defect() - 1e-8);
    }
    Ok(vec![
        CheckResult::from_margins("transport_norm_preservation", &norms, "|V(t)| constant to 1e-8"),
        CheckResult::from_margins("transport_orthogonality", &ortho, "|M^T M - I| < 1e-8"),
    ])
}

fn random_tangent(fam: &Flow, geo: &L0GeodesicResult, rng: &mut impl Rng) -> TangentVec {
    let c = fam
        .frame_raw(geo.t_start, geo.start.coords())
        .iter()
        .fold(Coords::zeros(geo.start.coords().len()), |acc, e| acc + e * rng.sample::<f64, _>(StandardNormal));
    TangentVec::new_unchecked(geo.start.clone(), c)
}

fn hessian_checks(fam: &Flow, cases: &[PairCase], opts: &SolveOptions) -> Result<CheckResult> {
    let mut margins = Vec::new();
    for case in cases {
        let (lhs, rhs) = nonpos_hessian_probe(fam, case.t_prime, case.t_dprime, &case.p, &case.q, opts)?;
        margins.push(lhs - rhs - 1e-3);
    }
    Ok(CheckResult::from_margins("hessian_inequality", &margins, "lhs <= rhs + 1e-3"))
}

fn coupling_checks(fam: &Flow, seed: u64, rng: &mut impl Rng) -> Result<Vec<CheckResult>> {
    let horizon = fam.horizon();
    let schedule = TimeSchedule::with_steps(fam, 0.6 * horizon, 0.9 * horizon, 0.5 * horizon, 50)?;
    let pairs: Vec<(Point, Point)> = (0..4).map(|_| (random_point(fam, rng), random_point(fam, rng))).collect();
    let paths = run_ensemble(fam, &ClosedFormSolver, &schedule, &pairs, seed, 40, &Default::default())?;
    let b = fam.bounds();
    let floor = -(fam.dim() as f64) * b.k_minus * horizon / 2.0;
    let lower: Vec<f64> = paths
        .iter()
        .flat_map(|p| p.lambda.iter().map(move |l| floor - l - 1e-12))
        .collect();
    let mut out = vec![CheckResult::from_margins("lambda_lower_bound", &lower, "Lambda_k >= -d K- T/2")];
    if matches!(fam, Flow::Torus(_)) {
        let drift: Vec<f64> = paths
            .iter()
            .map(|p| p.lambda.iter().map(|l| (l - p.lambda[0]).abs()).fold(0.0, f64::max) - 1e-9)
            .collect();
        out.push(CheckResult::from_margins("flat_rigidity", &drift, "Lambda pathwise constant to 1e-9"));
    }
    let again = run_ensemble(fam, &ClosedFormSolver, &schedule, &pairs, seed, 40, &Default::default())?;
    let same = paths.iter().zip(&again).all(|(a, b)| a.lambda == b.lambda);
    out.push(CheckResult {
        name: "ensemble_determinism".into(),
        passed: same,
        cases: paths.len(),
        worst: if same { 0.0 } else { 1.0 },
        detail: "identical seeds give identical Lambda".into(),
    });
    Ok(out)
}

fn assignment_checks(fam: &Flow, rng: &mut impl Rng) -> Result<Vec<CheckResult>> {
    let n = 20;
    let horizon = fam.horizon();
    let xs: Vec<Point> = (0..n).map(|_| random_point(fam, rng)).collect();
    let ys: Vec<Point> = (0..n).map(|_| random_point(fam, rng)).collect();
    let cost = l0_cost_matrix(fam, &ClosedFormSolver, 0.2 * horizon, 0.6 * horizon, &xs, &ys, PhiSpec::Identity)?;
    let plan = optimal_assignment(&cost)?;
    let mean = |perm: &[usize]| perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum::<f64>() / n as f64;
    let mut margins = vec![plan.cost - mean(&(0..n).collect::<Vec<_>>())];
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..100 {
        perm.shuffle(rng);
        margins.push(plan.cost - mean(&perm) - 1e-12);
    }

    let capped = PhiSpec::Capped { c: cost.iter().copied().sum::<f64>() / (n * n) as f64 };
    let cphi = cost.map(|c| capped.apply(c));
    let phi_opt = optimal_assignment(&cphi)?.cost;
    let under_plan = plan.assignment.iter().enumerate().map(|(i, &j)| cphi[(i, j)]).sum::<f64>() / n as f64;

    let phis = [PhiSpec::Identity, capped, PhiSpec::ExpSaturating];
    let mut concavity = Vec::new();
    for phi in phis {
        let h = 0.01;
        let slopes: Vec<f64> = (0..600).map(|i| {
            let x = -3.0 + i as f64 * h;
            (phi.apply(x + h) - phi.apply(x)) / h
        }).collect();
        concavity.extend(slopes.iter().map(|s| -s - 1e-12));
        concavity.extend(slopes.windows(2).map(|w| w[1] - w[0] - 1e-9));
    }
    Ok(vec![
        CheckResult::from_margins("assignment_optimality", &margins, "optimal <= identity and 100 random permutations"),
        CheckResult::from_margins("phi_suboptimality", &[phi_opt - under_plan - 1e-12], "phi-optimal <= phi cost under any plan"),
        CheckResult::from_margins("phi_concavity", &concavity, "slopes non-negative and non-increasing"),
    ])
}

/// Runs the full property suite with `n_pairs` random endpoint pairs.
pub fn run_invariants(fam: &Flow, seed: u64, n_pairs: usize, opts: &SolveOptions) -> Result<InvariantReport> {
    let mut rng = RngStream::new(seed, u64::MAX - 1).rng();
    let cases = random_pairs(fam, n_pairs, &mut rng);
    let few = &cases[..cases.len().min(5)];
    let mut checks = check_bounds(fam, &cases, opts)?;
    checks.extend(solver_consistency(fam, few, opts)?);
    checks.push(continuity(fam, few, opts)?);
    checks.extend(transport_checks(fam, &cases, opts, &mut rng)?);
    checks.push(hessian_checks(fam, few, opts)?);
    checks.extend(coupling_checks(fam, seed, &mut rng)?);
    checks.extend(assignment_checks(fam, &mut rng)?);
    Ok(InvariantReport {
        model: fam.model(),
        d: fam.dim(),
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}
