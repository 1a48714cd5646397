//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use l0flow::config::{EnsembleConfig, Endpoints, ExperimentConfig, ExperimentKind, MonotonicityConfig, SolverKind};
use l0flow::coupling::{run_ensemble, sample_ball, CouplingOptions, RngStream, TimeSchedule};
use l0flow::experiments::{run_experiment, Outcome};
use l0flow::geometry::{Coords, MetricFamily, ModelId, Point, TangentVec};
use l0flow::invariants::{check_bounds, point_at, random_pairs, random_point, PairCase};
use l0flow::l0::{
    l0_distance, l0_spatial_gradients, l0_time_partials, nonpos_hessian_probe, nonpos_hessian_probe_with, L0Solver,
    NumericSolver, SolveOptions,
};
use l0flow::models::{make_flow, ClosedFormSolver, Flow, FlowSpec};
use l0flow::transport::{transport_matrix, transported_norms};
use l0flow::verify::{
    monotonicity_experiment, sample_cluster, submartingale_control, supermartingale_test, MonotonicityOptions, PhiSpec,
};
use rand::Rng;
use rand_distr::StandardNormal;

type Verdict = Result<(bool, String), String>;

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Verdict,
}

fn torus(d: usize, side: f64) -> Flow {
    make_flow(&FlowSpec { model: ModelId::Torus, d, side: Some(side), horizon: 1.0 }).unwrap()
}

fn sphere(d: usize, horizon: f64) -> Flow {
    make_flow(&FlowSpec { model: ModelId::Sphere, d, side: None, horizon }).unwrap()
}

fn rng(stream: u64) -> rand_chacha::ChaCha8Rng {
    RngStream::new(20_240_601, stream).rng()
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn north(fam: &Flow) -> Point {
    let mut c = vec![0.0; fam.ambient_dim()];
    c[fam.ambient_dim() - 1] = 1.0;
    fam.point(c).unwrap()
}

/// `ℓ²/(2A) + d(d−1)A/2` with `A = ln(a'/a'')/(2(d−1))`, `a(t) = 1 − 2(d−1)t`.
fn sphere_formula(d: usize, t1: f64, t2: f64, ell: f64) -> f64 {
    let k = 2.0 * (d as f64 - 1.0);
    let a = |t: f64| 1.0 - k * t;
    let big_a = (a(t1) / a(t2)).ln() / k;
    ell * ell / (2.0 * big_a) + (d * (d - 1)) as f64 * big_a / 2.0
}

fn angle(x: &Coords, y: &Coords) -> f64 {
    (x - y).norm().atan2((x + y).norm()) * 2.0
}

/// Minimizes the chord-discretized action over unit-vector polygons with
/// Gauss–Seidel sweeps; each node update is the exact local minimizer.
fn brute_force_sphere(d: usize, t1: f64, t2: f64, p: &Coords, q: &Coords, n: usize, rng: &mut impl Rng) -> f64 {
    let k = 2.0 * (d as f64 - 1.0);
    let h = (t2 - t1) / n as f64;
    let w: Vec<f64> = (0..n).map(|i| (1.0 - k * (t1 + (i as f64 + 0.5) * h)) / h).collect();
    let ell = angle(p, q);
    let axis = (q - p * p.dot(q)).normalize();
    let mut xs: Vec<Coords> = (0..=n)
        .map(|i| {
            let th = ell * i as f64 / n as f64;
            let c = p * th.cos() + &axis * th.sin();
            if i == 0 || i == n {
                c
            } else {
                let noise = Coords::from_fn(p.len(), |_, _| 0.05 * rng.sample::<f64, _>(StandardNormal));
                (c + noise).normalize()
            }
        })
        .collect();
    xs[n] = q.clone();
    let energy = |xs: &[Coords]| -> f64 { (0..n).map(|i| 0.5 * w[i] * (&xs[i + 1] - &xs[i]).norm_squared()).sum() };
    let mut last = energy(&xs);
    for sweep in 0.. {
        for i in 1..n {
            xs[i] = (&xs[i - 1] * w[i - 1] + &xs[i + 1] * w[i]).normalize();
        }
        if sweep % 500 == 499 {
            let now = energy(&xs);
            if (last - now).abs() < 1e-13 * now {
                break;
            }
            last = now;
        }
    }
    // scalar-curvature term d(d−1)/a(t), integrated with the same midpoint rule
    let curvature: f64 = (0..n)
        .map(|i| 0.5 * h * (d * (d - 1)) as f64 / (1.0 - k * (t1 + (i as f64 + 0.5) * h)))
        .sum();
    energy(&xs) + curvature
}

fn c1_torus_closed_form() -> Verdict {
    let opts = SolveOptions::default();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (d, side) in [(2usize, 1.0), (3, 2.0)] {
        let fam = torus(d, side);
        let windows = [(0.0, 0.5), (0.1, 0.3), (0.25, 1.0), (0.6, 0.7), (0.05, 0.95)];
        let offsets = [0.1, 0.3];
        for (t1, t2) in windows {
            for (j, off) in offsets.iter().enumerate() {
                let p: Vec<f64> = (0..d).map(|i| 0.1 * side * i as f64 + 0.05).collect();
                let q: Vec<f64> = (0..d)
                    .map(|i| (p[i] + off * side * if (i + j) % 2 == 0 { 1.0 } else { -0.6 }).rem_euclid(side))
                    .collect();
                let (pp, qq) = (fam.point(p).unwrap(), fam.point(q).unwrap());
                let rho = fam.distance_raw(t1, pp.coords(), qq.coords());
                let exact = rho * rho / (2.0 * (t2 - t1));
                let r = l0_distance(&fam, t1, t2, &pp, &qq, &opts).map_err(e)?;
                worst = worst.max((r.action - exact).abs() / exact);
                count += 1;
            }
        }
    }
    Ok((worst <= 1e-6, format!("{count} pairs, max relative error {worst:.3e} (tol 1e-6)")))
}

fn c2_sphere_closed_form() -> Verdict {
    let opts = SolveOptions::default();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut r = rng(2);
    for d in [2usize, 3] {
        let fam = sphere(d, 0.2);
        for case in random_pairs(&fam, 25, &mut r) {
            let ell = angle(case.p.coords(), case.q.coords());
            let exact = sphere_formula(d, case.t_prime, case.t_dprime, ell);
            let res = l0_distance(&fam, case.t_prime, case.t_dprime, &case.p, &case.q, &opts).map_err(e)?;
            worst = worst.max((res.action - exact).abs() / exact.abs());
            count += 1;
        }
    }
    let mut brute_worst: f64 = 0.0;
    for (i, (d, ell, t1, t2)) in [(2usize, 0.4, 0.0, 0.1), (2, 1.5, 0.05, 0.18), (2, 2.5, 0.1, 0.15), (3, 1.0, 0.0, 0.12), (3, 2.2, 0.08, 0.2)]
        .into_iter()
        .enumerate()
    {
        let fam = sphere(d, 0.2);
        let p = random_point(&fam, &mut r);
        let q = point_at(&fam, &p, ell, &mut r);
        let exact = sphere_formula(d, t1, t2, angle(p.coords(), q.coords()));
        let brute = brute_force_sphere(d, t1, t2, p.coords(), q.coords(), 96, &mut rng(200 + i as u64));
        brute_worst = brute_worst.max((brute - exact).abs() / exact.abs());
    }
    Ok((
        worst <= 1e-4 && brute_worst <= 1e-3,
        format!(
            "{count} pairs, max relative error {worst:.3e} (tol 1e-4); brute force on 5 pairs {brute_worst:.3e} (tol 1e-3)"
        ),
    ))
}

fn c3_derivatives() -> Verdict {
    let opts = SolveOptions::default();
    let solver = NumericSolver { opts: opts.clone() };
    let mut r = rng(3);
    let (hx, ht) = (1e-4, 1e-4);
    let mut worst_grad: f64 = 0.0;
    let mut worst_time: f64 = 0.0;
    let mut count = 0;
    for d in [2usize, 3] {
        let fam = sphere(d, 0.2);
        for case in random_pairs(&fam, 10, &mut r) {
            let base = l0_distance(&fam, case.t_prime, case.t_dprime, &case.p, &case.q, &opts).map_err(e)?;
            let (gp, gq) = l0_spatial_gradients(&base).map_err(e)?;
            let (dt1, dt2) = l0_time_partials(&fam, &base).map_err(e)?;
            let solve = |t1: f64, t2: f64, p: &Point, q: &Point| -> Result<f64, String> {
                let warm = fam.tangent_projected(p, base.v0.components());
                solver.solve(&fam, t1, t2, p, q, Some(&warm)).map(|r| r.action).map_err(e)
            };
            for (which, t, x, grad) in [(0, case.t_prime, &case.p, &gp), (1, case.t_dprime, &case.q, &gq)] {
                let mut err2 = 0.0;
                for u in fam.frame_raw(t, x.coords()) {
                    let shift = |s: f64| Point::new_unchecked(fam.model(), fam.exp_raw(t, x.coords(), &(&u * s)));
                    let (plus, minus) = if which == 0 {
                        (solve(case.t_prime, case.t_dprime, &shift(hx), &case.q)?, solve(case.t_prime, case.t_dprime, &shift(-hx), &case.q)?)
                    } else {
                        (solve(case.t_prime, case.t_dprime, &case.p, &shift(hx))?, solve(case.t_prime, case.t_dprime, &case.p, &shift(-hx))?)
                    };
                    let fd = (plus - minus) / (2.0 * hx);
                    let exact = fam.inner(t, x.coords(), grad.components(), &u);
                    err2 += (fd - exact).powi(2);
                }
                worst_grad = worst_grad.max(err2.sqrt());
            }
            // fourth-order central stencil
            let fourth = |f: &dyn Fn(f64) -> Result<f64, String>| -> Result<f64, String> {
                Ok((8.0 * (f(ht / 2.0)? - f(-ht / 2.0)?) - (f(ht)? - f(-ht)?)) / (6.0 * ht))
            };
            let fd1 = fourth(&|s| solve(case.t_prime + s, case.t_dprime, &case.p, &case.q))?;
            let fd2 = fourth(&|s| solve(case.t_prime, case.t_dprime + s, &case.p, &case.q))?;
            worst_time = worst_time.max((fd1 - dt1).abs() / (1.0 + dt1.abs())).max((fd2 - dt2).abs() / (1.0 + dt2.abs()));
            count += 1;
        }
    }
    Ok((
        worst_grad <= 1e-4 && worst_time <= 1e-5,
        format!(
            "{count} pairs, gradient g-norm error {worst_grad:.3e} (tol 1e-4), time partial error {worst_time:.3e} relative to 1+|dL| (tol 1e-5)"
        ),
    ))
}

fn c4_hessian() -> Verdict {
    let opts = SolveOptions::default();
    let mut r = rng(4);
    let mut worst = f64::NEG_INFINITY;
    let mut count = 0;
    let mut skipped = 0;
    let fams = [sphere(2, 0.2), sphere(3, 0.2)];
    while count < 50 {
        let fam = &fams[count % 2];
        let p = random_point(fam, &mut r);
        let q = point_at(fam, &p, r.random_range(0.2..2.5), &mut r);
        let t1 = r.random_range(0.0..0.1);
        match nonpos_hessian_probe(fam, t1, t1 + 0.1, &p, &q, &opts) {
            Ok((lhs, rhs)) => {
                worst = worst.max(lhs - rhs);
                count += 1;
            }
            Err(l0flow::Error::MultipleMinimizers) => skipped += 1,
            Err(err) => return Err(err.to_string()),
        }
    }
    // torus: rhs must vanish identically; lhs is a second difference of equal
    // actions and may only carry roundoff
    let mut torus_ok = true;
    let mut torus_lhs: f64 = 0.0;
    for d in [2usize, 3] {
        let fam = torus(d, 1.0);
        for case in random_pairs(&fam, 10, &mut r) {
            for numeric in [true, false] {
                let (lhs, rhs) = if numeric {
                    nonpos_hessian_probe(&fam, case.t_prime, case.t_dprime, &case.p, &case.q, &opts)
                } else {
                    nonpos_hessian_probe_with(&fam, &ClosedFormSolver, case.t_prime, case.t_dprime, &case.p, &case.q)
                }
                .map_err(e)?;
                let step = l0flow::l0::HESSIAN_STEP / 2.0;
                let action = fam.distance_raw(0.0, case.p.coords(), case.q.coords()).powi(2)
                    / (2.0 * (case.t_dprime - case.t_prime));
                let roundoff = 64.0 * f64::EPSILON * (1.0 + action) / (step * step);
                torus_ok &= rhs == 0.0 && lhs.abs() <= roundoff;
                torus_lhs = torus_lhs.max(lhs.abs());
            }
        }
    }
    Ok((
        worst <= 1e-3 && torus_ok,
        format!(
            "sphere: {count} pairs ({skipped} flagged skipped), max lhs-rhs {worst:.3e} (tol 1e-3); torus: rhs == 0 exactly, max |lhs| {torus_lhs:.1e} (roundoff)"
        ),
    ))
}

fn c5_transport() -> Verdict {
    let opts = SolveOptions::default();
    let mut r = rng(5);
    let (mut norm_err, mut ortho): (f64, f64) = (0.0, 0.0);
    let mut count = 0;
    for fam in [sphere(2, 0.2), sphere(3, 0.2), torus(2, 1.0), torus(3, 1.0)] {
        let n = if matches!(fam, Flow::Sphere(_)) { 15 } else { 10 };
        for case in random_pairs(&fam, n, &mut r) {
            let geo = l0_distance(&fam, case.t_prime, case.t_dprime, &case.p, &case.q, &opts).map_err(e)?;
            let c = fam
                .frame_raw(geo.t_start, geo.start.coords())
                .iter()
                .fold(Coords::zeros(fam.ambient_dim()), |acc, u| acc + u * r.sample::<f64, _>(StandardNormal));
            let v = TangentVec::new_unchecked(geo.start.clone(), c);
            let ns = transported_norms(&fam, &geo, &v).map_err(e)?;
            norm_err = norm_err.max(ns.iter().map(|x| (x - ns[0]).abs() / ns[0]).fold(0.0, f64::max));
            ortho = ortho.max(transport_matrix(&fam, &geo).map_err(e)?.orthogonality_defect());
            count += 1;
        }
    }
    Ok((
        norm_err < 1e-8 && ortho < 1e-8,
        format!("{count} geodesics, max relative norm drift {norm_err:.3e}, orthogonality defect {ortho:.3e} (tol 1e-8)"),
    ))
}

fn c6_ball() -> Verdict {
    let n = 1_000_000usize;
    let mut lines = Vec::new();
    let mut ok = true;
    for d in [2usize, 3] {
        let mut r = rng(60 + d as u64);
        let mut sum = vec![0.0; d];
        let mut sum_sq = vec![0.0; d];
        let mut m = vec![vec![0.0; d]; d];
        let mut m_sq = vec![vec![0.0; d]; d];
        let scale = (d + 2) as f64;
        for _ in 0..n {
            let l = sample_ball(&mut r, d);
            for i in 0..d {
                sum[i] += l[i];
                sum_sq[i] += l[i] * l[i];
                for j in 0..d {
                    let x = scale * l[i] * l[j];
                    m[i][j] += x;
                    m_sq[i][j] += x * x;
                }
            }
        }
        let nf = n as f64;
        let mut worst_z: f64 = 0.0;
        for i in 0..d {
            let mean = sum[i] / nf;
            let se = ((sum_sq[i] / nf - mean * mean) / nf).sqrt();
            worst_z = worst_z.max(mean.abs() / se);
            for j in 0..d {
                let mean = m[i][j] / nf;
                let se = ((m_sq[i][j] / nf - mean * mean) / nf).sqrt();
                let target = if i == j { 1.0 } else { 0.0 };
                worst_z = worst_z.max((mean - target).abs() / se);
            }
        }
        ok &= worst_z <= 3.0;
        lines.push(format!("d={d} max |z| {worst_z:.2}"));
    }
    Ok((ok, format!("10^6 draws each, {} (tol 3 se)", lines.join(", "))))
}

fn c7_rigidity() -> Verdict {
    let fam = torus(2, 1.0);
    let schedule = TimeSchedule::with_steps(&fam, 0.6, 0.9, 0.5, 200).map_err(e)?;
    let mut r = rng(7);
    let pairs: Vec<(Point, Point)> = (0..10).map(|_| (random_point(&fam, &mut r), random_point(&fam, &mut r))).collect();
    let paths = run_ensemble(&fam, &ClosedFormSolver, &schedule, &pairs, 7, 1000, &CouplingOptions::default()).map_err(e)?;
    let drift = paths
        .iter()
        .flat_map(|p| p.lambda.iter().map(move |l| (l - p.lambda[0]).abs()))
        .fold(0.0, f64::max);
    Ok((drift < 1e-9, format!("1000 paths x 200 steps, max |Lambda_k - Lambda_0| {drift:.3e} (tol 1e-9)")))
}

fn c8_variance() -> Verdict {
    let fam = torus(2, 1.0);
    let s = 0.005;
    let schedule = TimeSchedule::with_steps(&fam, 0.5, 0.6, s, 50).map_err(e)?;
    let start = fam.point(vec![0.5, 0.5]).unwrap();
    let pairs = vec![(start.clone(), fam.point(vec![0.6, 0.5]).unwrap())];
    let paths = run_ensemble(&fam, &ClosedFormSolver, &schedule, &pairs, 8, 10_000, &CouplingOptions::default()).map_err(e)?;
    let Flow::Torus(t) = &fam else { unreachable!() };
    let disp: Vec<Coords> = paths.iter().map(|p| t.min_image(start.coords(), p.final_state().x.coords())).collect();
    let n = disp.len() as f64;
    let mut worst_z: f64 = 0.0;
    let mut vars = Vec::new();
    for i in 0..2 {
        let mean = disp.iter().map(|x| x[i]).sum::<f64>() / n;
        let sq: Vec<f64> = disp.iter().map(|x| (x[i] - mean).powi(2)).collect();
        let var = sq.iter().sum::<f64>() / (n - 1.0);
        let m4 = sq.iter().map(|x| x * x).sum::<f64>() / n;
        let se = ((m4 - var * var) / n).sqrt();
        worst_z = worst_z.max((var - 2.0 * s).abs() / se);
        vars.push(format!("{var:.6}"));
    }
    Ok((
        worst_z <= 3.0,
        format!("10^4 paths, s = {s}, variances [{}] vs 2s = {}, max |z| {worst_z:.2} (tol 3 se)", vars.join(", "), 2.0 * s),
    ))
}

fn c9_supermartingale() -> Verdict {
    let fam = sphere(2, 0.2);
    let schedule = TimeSchedule::with_steps(&fam, 0.18, 0.19, 0.15, 300).map_err(e)?;
    let p = north(&fam);
    let q = fam.point(vec![0.0, 1f64.sin(), 1f64.cos()]).unwrap();
    let paths =
        run_ensemble(&fam, &ClosedFormSolver, &schedule, &[(p, q)], 42, 10_000, &CouplingOptions::default()).map_err(e)?;
    let rep = supermartingale_test(&paths).map_err(e)?;
    let control = supermartingale_test(&submartingale_control(&paths)).map_err(e)?;
    Ok((
        rep.pooled_upper99 <= 0.0 && !rep.rejected && control.rejected,
        format!(
            "10^4 paths x 300 steps, pooled mean {:.3e}, upper99 {:.3e} (<= 0); control rejected = {}",
            rep.pooled_mean, rep.pooled_upper99, control.rejected
        ),
    ))
}

fn c10_monotonicity() -> Verdict {
    let fam = sphere(2, 0.2);
    let schedule = TimeSchedule::with_steps(&fam, 0.1, 0.15, 0.09, 300).map_err(e)?;
    let cx = north(&fam);
    let cy = fam.point(vec![0.0, 1f64.sin(), 1f64.cos()]).unwrap();
    let mut r = rng(10);
    let xs = sample_cluster(&fam, schedule.t1_prime, &cx, 0.3, 256, &mut r);
    let ys = sample_cluster(&fam, schedule.t1_dprime, &cy, 0.3, 256, &mut r);
    let opts = MonotonicityOptions::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for phi in [PhiSpec::Identity, PhiSpec::Capped { c: 5.0 }] {
        let series = monotonicity_experiment(&fam, &ClosedFormSolver, &schedule, &xs, &ys, phi, 7, &opts).map_err(e)?;
        ok &= series.violations == 0 && series.checkpoints.len() == 10;
        parts.push(format!(
            "{}: {} violations, max increment {:.2} se",
            phi.label(),
            series.violations,
            series.max_increment_se
        ));
    }
    Ok((ok, format!("n = 256, 10 checkpoints, {} (tol 2 se)", parts.join("; "))))
}

fn c11_bounds() -> Verdict {
    let opts = SolveOptions::default();
    let mut r = rng(11);
    let mut failed = Vec::new();
    let mut total = 0;
    for fam in [torus(2, 1.0), torus(3, 1.0), sphere(2, 0.2), sphere(3, 0.2)] {
        let cases: Vec<PairCase> = random_pairs(&fam, 50, &mut r);
        total += cases.len();
        for c in check_bounds(&fam, &cases, &opts).map_err(e)? {
            if !c.passed {
                failed.push(format!("{} {} (worst {:.3e})", fam.model(), c.name, c.worst));
            }
        }
    }
    let detail = if failed.is_empty() {
        format!("{total} pairs, lower, global lower, interpolant upper and speed bounds all hold")
    } else {
        format!("{total} pairs, failed: {}", failed.join(", "))
    };
    Ok((failed.is_empty(), detail))
}

fn determinism_configs() -> Vec<ExperimentConfig> {
    let sphere_spec = FlowSpec { model: ModelId::Sphere, d: 2, side: None, horizon: 0.2 };
    let fam = make_flow(&sphere_spec).unwrap();
    let schedule = TimeSchedule::with_steps(&fam, 0.15, 0.18, 0.1, 100).unwrap();
    let ens = EnsembleConfig { n_paths: 200, master_seed: 99 };
    let ends = Endpoints {
        t_prime: 0.15,
        t_dprime: 0.18,
        p: vec![0.0, 0.0, 1.0],
        q: vec![0.0, 1f64.sin(), 1f64.cos()],
        v: None,
    };

    let mut sm = ExperimentConfig::new(ExperimentKind::VerifySupermartingale, sphere_spec.clone());
    sm.schedule = Some(schedule);
    sm.ensemble = Some(ens.clone());
    sm.endpoints = Some(ends.clone());

    let mut couple = sm.clone();
    couple.experiment = ExperimentKind::Couple;
    couple.ensemble = Some(EnsembleConfig { n_paths: 16, master_seed: 5 });
    couple.solver.kind = SolverKind::Numeric;
    couple.solver.grid = 32;
    couple.schedule = Some(TimeSchedule::with_steps(&fam, 0.15, 0.18, 0.1, 20).unwrap());

    let mut mono = ExperimentConfig::new(ExperimentKind::VerifyMonotonicity, sphere_spec.clone());
    mono.schedule = Some(schedule);
    mono.ensemble = Some(EnsembleConfig { n_paths: 48, master_seed: 3 });
    mono.monotonicity = Some(MonotonicityConfig {
        n: 48,
        center_x: vec![0.0, 0.0, 1.0],
        center_y: vec![0.0, 1f64.sin(), 1f64.cos()],
        radius: 0.3,
        phis: vec![PhiSpec::Identity, PhiSpec::ExpSaturating],
        checkpoints: 10,
        bootstrap: 100,
        tolerance_se: 2.0,
    });

    let mut tr = ExperimentConfig::new(ExperimentKind::TransportCheck, sphere_spec.clone());
    tr.endpoints = Some(Endpoints { v: Some(vec![1.0, 0.5, 0.0]), ..ends });

    let mut inv = ExperimentConfig::new(
        ExperimentKind::Invariants,
        FlowSpec { model: ModelId::Torus, d: 2, side: Some(1.0), horizon: 1.0 },
    );
    inv.ensemble = Some(EnsembleConfig { n_paths: 0, master_seed: 11 });

    vec![sm, couple, mono, tr, inv]
}

fn c12_determinism() -> Verdict {
    let configs = determinism_configs();
    let run_all = |threads: usize| -> Result<Vec<Outcome>, String> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(e)?;
        pool.install(|| configs.iter().map(|c| run_experiment(c).map_err(e)).collect())
    };
    let reference = run_all(1)?;
    let mut mismatches = Vec::new();
    for threads in [2, 8] {
        for (cfg, (a, b)) in configs.iter().zip(reference.iter().zip(run_all(threads)?)) {
            if *a != b {
                mismatches.push(format!("{:?}@{threads}", cfg.experiment));
            }
        }
    }
    let bytes: usize = reference
        .iter()
        .map(|o| o.summary.len() + o.csv.as_ref().map_or(0, |s| s.len()) + o.json.as_ref().map_or(0, |s| s.len()))
        .sum();
    Ok((
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{} experiments, {bytes} output bytes identical across 1, 2 and 8 threads", configs.len())
        } else {
            format!("differences: {}", mismatches.join(", "))
        },
    ))
}

fn main() -> ExitCode {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria = [
        Criterion { id: 1, name: "torus closed form", budget: Duration::from_secs(10), run: c1_torus_closed_form },
        Criterion { id: 2, name: "sphere closed form", budget: Duration::from_secs(120), run: c2_sphere_closed_form },
        Criterion { id: 3, name: "derivative formulas", budget: Duration::from_secs(60), run: c3_derivatives },
        Criterion { id: 4, name: "hessian inequality", budget: Duration::from_secs(180), run: c4_hessian },
        Criterion { id: 5, name: "transport isometry", budget: Duration::from_secs(30), run: c5_transport },
        Criterion { id: 6, name: "ball normalization", budget: Duration::from_secs(10), run: c6_ball },
        Criterion { id: 7, name: "flat coupling rigidity", budget: Duration::from_secs(60), run: c7_rigidity },
        Criterion { id: 8, name: "marginal variance", budget: Duration::from_secs(120), run: c8_variance },
        Criterion { id: 9, name: "supermartingale", budget: Duration::from_secs(1200), run: c9_supermartingale },
        Criterion { id: 10, name: "transport cost monotonicity", budget: Duration::from_secs(1200), run: c10_monotonicity },
        Criterion { id: 11, name: "action bounds", budget: Duration::from_secs(120), run: c11_bounds },
        Criterion { id: 12, name: "determinism", budget: Duration::from_secs(300), run: c12_determinism },
    ];
    let mut failures = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.budget;
        let (passed, detail) = match result {
            Ok((ok, detail)) => (ok && in_time, detail),
            Err(err) => (false, format!("error: {err}")),
        };
        if !passed {
            failures += 1;
        }
        println!(
            "[{}] {:>2} {}: {} ({:.1}s of {}s)",
            if passed { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            detail,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
