//! Optimal assignment with L0 costs and the statistical checks built on it.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::coupling::{run_ensemble, CouplingOptions, CouplingPath, RngStream, StateRecord, TimeSchedule};
use crate::error::{Error, Result};
use crate::geometry::{MetricFamily, Point};
use crate::l0::L0Solver;

/// One-sided 99% standard normal quantile.
pub const Z99: f64 = 2.326_347_874_040_841;

/// Concave non-decreasing cost transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhiSpec {
    Identity,
    Capped { c: f64 },
    ExpSaturating,
}

impl PhiSpec {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            PhiSpec::Identity => x,
            PhiSpec::Capped { c } => x.min(c),
            PhiSpec::ExpSaturating => 1.0 - (-x).exp(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            PhiSpec::Identity => "identity".into(),
            PhiSpec::Capped { c } => format!("capped({c})"),
            PhiSpec::ExpSaturating => "exp_saturating".into(),
        }
    }
}

/// `C[i][j] = φ(L0^{t',t''}(xᵢ, yⱼ))`, rows computed in parallel.
pub fn l0_cost_matrix<F, S>(
    fam: &F,
    solver: &S,
    t_prime: f64,
    t_dprime: f64,
    xs: &[Point],
    ys: &[Point],
    phi: PhiSpec,
) -> Result<DMatrix<f64>>
where
    F: MetricFamily + ?Sized,
    S: L0Solver<F>,
{
    let rows: Vec<Result<Vec<f64>>> = xs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            ys.iter()
                .enumerate()
                .map(|(j, y)| {
                    solver
                        .solve(fam, t_prime, t_dprime, x, y, None)
                        .map(|r| phi.apply(r.action))
                        .map_err(|e| Error::CostEntry { row: i, col: j, source: Box::new(e) })
                })
                .collect()
        })
        .collect();
    let mut m = DMatrix::zeros(xs.len(), ys.len());
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row?.into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransportPlan {
    pub n: usize,
    /// Row `i` is matched to column `assignment[i]`.
    pub assignment: Vec<usize>,
    /// Mean matched cost.
    pub cost: f64,
}

/// Exact minimum-cost perfect matching by shortest augmenting paths with
/// potentials, `O(n³)`.
pub fn optimal_assignment(cost: &DMatrix<f64>) -> Result<TransportPlan> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::InvalidInput(format!("cost matrix is {}x{}", n, cost.ncols())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput("cost matrix has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(TransportPlan { n, assignment: Vec::new(), cost: 0.0 });
    }
    // 1-based potentials; column 0 is a virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut col_row = vec![0usize; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[col_row[j] - 1] = j - 1;
    }
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok(TransportPlan { n, assignment, cost: total / n as f64 })
}

// ---------------------------------------------------------------------------
// Supermartingale test

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepStat {
    pub k: usize,
    pub s: f64,
    pub mean: f64,
    pub stderr: f64,
    pub upper99: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SupermartingaleReport {
    pub n_paths: usize,
    pub n_steps: usize,
    pub pooled_mean: f64,
    pub pooled_stderr: f64,
    pub z: f64,
    /// One-sided p-value for `H₀: E[ΔΛ] ≤ 0`.
    pub p_value: f64,
    pub pooled_upper99: f64,
    /// `H₀` rejected at the 1% level beyond the noise floor.
    pub rejected: bool,
    pub frac_steps_upper_below_zero: f64,
    pub frac_steps_lower_above_zero: f64,
    pub multiplicity_hits: usize,
    pub per_step: Vec<StepStat>,
}

/// Increments of absolute size below this are treated as roundoff.
pub const NOISE_FLOOR: f64 = 1e-9;

fn mean_and_stderr(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-step and pooled one-sided tests of `E[Λ_{k+1} − Λ_k] ≤ 0`.
///
/// The pooled statistic averages each path's mean increment, so the pooled
/// standard error comes from independent paths.
pub fn supermartingale_test(paths: &[CouplingPath]) -> Result<SupermartingaleReport> {
    if paths.len() < 100 {
        return Err(Error::InvalidInput(format!("{} paths given, at least 100 required", paths.len())));
    }
    let schedule = paths[0].schedule;
    let len = paths[0].lambda.len();
    if paths.iter().any(|p| p.schedule != schedule || p.lambda.len() != len) {
        return Err(Error::InvalidInput("paths have different schedules".into()));
    }
    let n_steps = len - 1;
    if n_steps == 0 {
        return Err(Error::InvalidInput("paths have no steps".into()));
    }
    let per_step: Vec<StepStat> = (0..n_steps)
        .map(|k| {
            let (mean, stderr) = mean_and_stderr(paths.iter().map(move |p| p.lambda[k + 1] - p.lambda[k]));
            StepStat { k, s: paths[0].s[k], mean, stderr, upper99: mean + Z99 * stderr }
        })
        .collect();
    let (pooled_mean, pooled_stderr) =
        mean_and_stderr(paths.iter().map(|p| (p.lambda[n_steps] - p.lambda[0]) / n_steps as f64));
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let (z, p_value) = if pooled_stderr > 0.0 {
        let z = pooled_mean / pooled_stderr;
        (z, 1.0 - normal.cdf(z))
    } else if pooled_mean > NOISE_FLOOR {
        (f64::INFINITY, 0.0)
    } else {
        (0.0, 1.0)
    };
    let lower = pooled_mean - Z99 * pooled_stderr;
    let frac = |f: &dyn Fn(&StepStat) -> bool| per_step.iter().filter(|s| f(s)).count() as f64 / n_steps as f64;
    Ok(SupermartingaleReport {
        n_paths: paths.len(),
        n_steps,
        pooled_mean,
        pooled_stderr,
        z,
        p_value,
        pooled_upper99: pooled_mean + Z99 * pooled_stderr,
        rejected: lower > NOISE_FLOOR,
        frac_steps_upper_below_zero: frac(&|s| s.upper99 < 0.0),
        frac_steps_lower_above_zero: frac(&|s| s.mean - Z99 * s.stderr > 0.0),
        multiplicity_hits: paths.iter().map(|p| p.multiplicity_hits()).sum(),
        per_step,
    })
}

/// Power control: the same paths with `Λ_k` replaced by `s_k`.
pub fn submartingale_control(paths: &[CouplingPath]) -> Vec<CouplingPath> {
    paths
        .iter()
        .map(|p| CouplingPath { lambda: p.s.clone(), ..p.clone() })
        .collect()
}

// ---------------------------------------------------------------------------
// Monotonicity of the empirical transport cost

/// `n` points `exp_c(r·σλ)` with `λ` ball-uniform: a geodesic-ball cluster.
pub fn sample_cluster<F: MetricFamily + ?Sized, R: Rng + ?Sized>(
    fam: &F,
    t: f64,
    center: &Point,
    radius: f64,
    n: usize,
    rng: &mut R,
) -> Vec<Point> {
    let frame = fam.frame_raw(t, center.coords());
    (0..n)
        .map(|_| {
            let lam = crate::coupling::sample_ball(rng, frame.len());
            let v = frame
                .iter()
                .zip(lam.iter())
                .fold(nalgebra::DVector::zeros(center.coords().len()), |acc, (e, c)| acc + e * (c * radius));
            Point::new_unchecked(fam.model(), fam.exp_raw(t, center.coords(), &v))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityOptions {
    pub checkpoints: usize,
    pub bootstrap: usize,
    /// Tolerated increase between checkpoints, in bootstrap standard errors.
    pub tolerance_se: f64,
}

impl Default for MonotonicityOptions {
    fn default() -> Self {
        Self { checkpoints: 10, bootstrap: 100, tolerance_se: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Checkpoint {
    pub index: usize,
    pub s: f64,
    pub cost: f64,
    pub stderr: f64,
    /// Increase over the previous checkpoint exceeds the tolerance.
    pub flag: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonotonicitySeries {
    pub phi: PhiSpec,
    pub n: usize,
    /// Mean of `φ(Λ₀)` over the initial optimal plan.
    pub initial_plan_cost: f64,
    pub checkpoints: Vec<Checkpoint>,
    /// Largest `(Ĉ(s_j) − Ĉ(s_{j−1}))/se_j`; negative when strictly decreasing.
    pub max_increment_se: f64,
    pub violations: usize,
    pub multiplicity_hits: usize,
}

/// Grid indices of `count` equispaced checkpoints in `[0, S]`.
pub fn checkpoint_indices(n_steps: usize, count: usize) -> Vec<usize> {
    if count <= 1 {
        return vec![0];
    }
    let mut idx: Vec<usize> = (0..count)
        .map(|j| ((j * n_steps) as f64 / (count - 1) as f64).round() as usize)
        .collect();
    idx.dedup();
    idx
}

/// Bootstrap standard error of the optimal mean cost, resampling matched
/// pairs `(Xᵢ, Yᵢ)` jointly.
fn bootstrap_stderr<R: Rng + ?Sized>(cost: &DMatrix<f64>, b: usize, rng: &mut R) -> Result<f64> {
    let n = cost.nrows();
    if b < 2 || n == 0 {
        return Ok(0.0);
    }
    let draws: Vec<Vec<usize>> = (0..b).map(|_| (0..n).map(|_| rng.random_range(0..n)).collect()).collect();
    let values = draws
        .par_iter()
        .map(|idx| {
            let sub = DMatrix::from_fn(n, n, |i, j| cost[(idx[i], idx[j])]);
            optimal_assignment(&sub).map(|p| p.cost)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_and_stderr(values.iter().copied()).1 * (b as f64).sqrt())
}

/// Evolves the pairs `(xsᵢ, ys_{π(i)})` of a `φ`-optimal initial plan by the
/// coupled walk and tracks the empirical optimal cost between the marginals.
#[allow(clippy::too_many_arguments)]
pub fn monotonicity_experiment<F, S>(
    fam: &F,
    solver: &S,
    schedule: &TimeSchedule,
    xs: &[Point],
    ys: &[Point],
    phi: PhiSpec,
    master_seed: u64,
    opts: &MonotonicityOptions,
) -> Result<MonotonicitySeries>
where
    F: MetricFamily + ?Sized,
    S: L0Solver<F>,
{
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::InvalidInput(format!("measures of sizes {} and {}", xs.len(), ys.len())));
    }
    schedule.validate(fam)?;
    let n = xs.len();
    let c0 = l0_cost_matrix(fam, solver, schedule.t1_prime, schedule.t1_dprime, xs, ys, phi)?;
    let plan = optimal_assignment(&c0)?;
    let pairs: Vec<(Point, Point)> = (0..n).map(|i| (xs[i].clone(), ys[plan.assignment[i]].clone())).collect();

    let grid = schedule.grid();
    let idx = checkpoint_indices(grid.len() - 1, opts.checkpoints);
    let copts = CouplingOptions { record: StateRecord::At(idx.clone()), ..Default::default() };
    let paths = run_ensemble(fam, solver, schedule, &pairs, master_seed, n, &copts)?;
    let initial_plan_cost = paths.iter().map(|p| phi.apply(p.lambda[0])).sum::<f64>() / n as f64;

    // bootstrap draws use a stream reserved past the walk streams
    let mut rng = RngStream::new(master_seed, u64::MAX).rng();
    let mut checkpoints: Vec<Checkpoint> = Vec::with_capacity(idx.len());
    for &k in &idx {
        let s = grid[k];
        let (px, py): (Vec<Point>, Vec<Point>) = paths
            .iter()
            .map(|p| {
                let st = p.state_at(k).expect("checkpoint state recorded");
                (st.x.clone(), st.y.clone())
            })
            .unzip();
        let cm = l0_cost_matrix(fam, solver, schedule.tau_prime(s), schedule.tau_dprime(s), &px, &py, phi)?;
        let cost = optimal_assignment(&cm)?.cost;
        let stderr = bootstrap_stderr(&cm, opts.bootstrap, &mut rng)?;
        let flag = checkpoints
            .last()
            .is_some_and(|prev| cost - prev.cost > opts.tolerance_se * stderr);
        checkpoints.push(Checkpoint { index: k, s, cost, stderr, flag });
    }
    let max_increment_se = checkpoints
        .windows(2)
        .map(|w| {
            let inc = w[1].cost - w[0].cost;
            if w[1].stderr > 0.0 {
                inc / w[1].stderr
            } else if inc > 0.0 {
                f64::INFINITY
            } else if inc < 0.0 {
                f64::NEG_INFINITY
            } else {
                0.0
            }
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(MonotonicitySeries {
        phi,
        n,
        initial_plan_cost,
        violations: checkpoints.iter().filter(|c| c.flag).count(),
        checkpoints,
        max_increment_se,
        multiplicity_hits: paths.iter().map(|p| p.multiplicity_hits()).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ModelId;
    use crate::models::{make_flow, ClosedFormSolver, FlowSpec};
    use proptest::prelude::*;

    fn brute_force(cost: &DMatrix<f64>) -> f64 {
        fn rec(cost: &DMatrix<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let n = cost.nrows();
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(cost, row + 1, used, acc + cost[(row, j)], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.nrows()], 0.0, &mut best);
        best / cost.nrows() as f64
    }

    #[test]
    fn two_by_two_anti_diagonal() {
        let plan = optimal_assignment(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(plan.assignment, vec![0, 1]);
        assert_eq!(plan.cost, 0.0);
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(optimal_assignment(&DMatrix::zeros(2, 3)).is_err());
        assert!(optimal_assignment(&DMatrix::from_element(2, 2, f64::NAN)).is_err());
    }

    #[test]
    fn torus_cost_matrix_and_saturation() {
        let fam = make_flow(&FlowSpec { model: ModelId::Torus, d: 2, side: Some(1.0), horizon: 1.0 }).unwrap();
        let xs = vec![fam.point(vec![0.0, 0.0]).unwrap(), fam.point(vec![0.5, 0.5]).unwrap()];
        let ys = vec![fam.point(vec![0.1, 0.0]).unwrap(), fam.point(vec![0.9, 0.0]).unwrap()];
        let m = l0_cost_matrix(&fam, &ClosedFormSolver, 0.0, 0.5, &xs, &ys, PhiSpec::Identity).unwrap();
        assert!((m[(0, 0)] - 0.01).abs() < 1e-15);
        assert!((m[(0, 1)] - 0.01).abs() < 1e-15);
        assert!((m[(1, 0)] - (0.16 + 0.25)).abs() < 1e-14);
        let capped = l0_cost_matrix(&fam, &ClosedFormSolver, 0.0, 0.5, &xs, &ys, PhiSpec::Capped { c: 0.001 }).unwrap();
        assert!(capped.iter().all(|&c| c == 0.001));
    }

    #[test]
    fn phi_is_concave_and_nondecreasing() {
        for phi in [PhiSpec::Identity, PhiSpec::Capped { c: 0.7 }, PhiSpec::ExpSaturating] {
            let h = 0.01;
            let slopes: Vec<f64> = (0..400)
                .map(|i| {
                    let x = -2.0 + i as f64 * h;
                    (phi.apply(x + h) - phi.apply(x)) / h
                })
                .collect();
            assert!(slopes.iter().all(|&s| s >= -1e-12));
            assert!(slopes.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        }
    }

    #[test]
    fn submartingale_control_is_rejected_and_constant_is_not() {
        let fam = make_flow(&FlowSpec { model: ModelId::Torus, d: 2, side: Some(1.0), horizon: 1.0 }).unwrap();
        let s = TimeSchedule::with_steps(&fam, 0.3, 0.6, 0.1, 10).unwrap();
        let p = fam.point(vec![0.0, 0.0]).unwrap();
        let q = fam.point(vec![0.2, 0.1]).unwrap();
        let paths = run_ensemble(&fam, &ClosedFormSolver, &s, &[(p, q)], 5, 100, &Default::default()).unwrap();
        let report = supermartingale_test(&paths).unwrap();
        assert!(!report.rejected);
        let control = supermartingale_test(&submartingale_control(&paths)).unwrap();
        assert!(control.rejected);
        assert!(supermartingale_test(&paths[..50]).is_err());
    }

    #[test]
    fn checkpoints_cover_both_ends() {
        assert_eq!(checkpoint_indices(300, 10).len(), 10);
        assert_eq!(checkpoint_indices(300, 10)[9], 300);
        assert_eq!(checkpoint_indices(300, 10)[0], 0);
        assert_eq!(checkpoint_indices(4, 10), vec![0, 1, 2, 3, 4]);
    }

    proptest! {
        #[test]
        fn assignment_matches_brute_force(vals in proptest::collection::vec(-5.0..5.0f64, 25), n in 1usize..6) {
            let m = DMatrix::from_fn(n, n, |i, j| vals[i * 5 + j]);
            let plan = optimal_assignment(&m).unwrap();
            prop_assert!((plan.cost - brute_force(&m)).abs() < 1e-12);
            let mut seen = plan.assignment.clone();
            seen.sort();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn row_permutation_relabels_assignment(vals in proptest::collection::vec(0.0..1.0f64, 16), shift in 0usize..4) {
            let m = DMatrix::from_fn(4, 4, |i, j| vals[i * 4 + j]);
            let perm = DMatrix::from_fn(4, 4, |i, j| m[((i + shift) % 4, j)]);
            let a = optimal_assignment(&m).unwrap();
            let b = optimal_assignment(&perm).unwrap();
            prop_assert!((a.cost - b.cost).abs() < 1e-12);
            let cost_b: f64 = (0..4).map(|i| m[((i + shift) % 4, b.assignment[i])]).sum::<f64>() / 4.0;
            prop_assert!((cost_b - a.cost).abs() < 1e-12);
        }
    }
}
