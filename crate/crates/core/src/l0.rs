//! L0 action, L0-geodesics and the two-point L0-distance solver.
//!
//! `𝓛₀(γ) = ½∫ (|γ̇(t)|²_{g(t)} + R_{g(t)}(γ(t))) dt`. Critical curves solve
//! `∇_{γ̇}γ̇ − ½∇R − 2Ric(γ̇, ·)^♯ = 0`, integrated here with fixed-step RK4 in
//! the model's coordinates. The two-point solver runs a direct minimization of
//! the discretized action followed by a shooting refinement of the initial
//! velocity, from several deterministic starting curves.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{
    check_window, validate_point, validate_tangent, Coords, MetricFamily, Point, TangentVec,
};

pub const DEFAULT_GRID: usize = 128;
pub const MIN_GRID: usize = 8;
/// Central-difference step (in `g`-norm) for the Hessian probe.
pub const HESSIAN_STEP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOptions {
    /// Grid intervals `N` for both stages.
    pub grid: usize,
    /// Multi-start count `R` (the plain interpolant plus `R − 1` perturbations).
    pub starts: usize,
    /// Shooting tolerance on `|log_{m''}(γ(t''))|_{g(t'')}`.
    pub tol_residual: f64,
    /// Relative action tolerance for treating two minimizers as tied.
    pub tol_action: f64,
    /// `g(t')`-separation of initial velocities above which tied minimizers are distinct.
    pub tol_sep: f64,
    pub max_descent_iters: usize,
    pub max_newton_iters: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            grid: DEFAULT_GRID,
            starts: 8,
            tol_residual: 1e-10,
            tol_action: 1e-6,
            tol_sep: 1e-3,
            max_descent_iters: 200,
            max_newton_iters: 40,
        }
    }
}

/// A discretized space-time curve with cached midpoint data.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceTimeCurve {
    t_grid: Vec<f64>,
    points: Vec<Point>,
    /// Geodesic midpoints of consecutive points.
    midpoints: Vec<Point>,
    /// Midpoint-difference velocities, based at `midpoints`.
    velocities: Vec<TangentVec>,
}

impl SpaceTimeCurve {
    pub fn from_points<F: MetricFamily + ?Sized>(fam: &F, t_grid: Vec<f64>, points: Vec<Point>) -> Result<Self> {
        let n = t_grid.len().saturating_sub(1);
        if n < MIN_GRID {
            return Err(Error::GridTooCoarse(n));
        }
        if points.len() != t_grid.len() {
            return Err(Error::InvalidInput(format!(
                "{} points for {} grid times",
                points.len(),
                t_grid.len()
            )));
        }
        if t_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("time grid must be strictly increasing".into()));
        }
        check_window(fam, t_grid[0], t_grid[n])?;
        for p in &points {
            validate_point(fam, p)?;
        }
        let mut midpoints = Vec::with_capacity(n);
        let mut velocities = Vec::with_capacity(n);
        for k in 0..n {
            let tm = 0.5 * (t_grid[k] + t_grid[k + 1]);
            let h = t_grid[k + 1] - t_grid[k];
            let (x, y) = (points[k].coords(), points[k + 1].coords());
            let step = fam.log_raw(tm, x, y);
            let mid = fam.exp_raw(tm, x, &(step * 0.5));
            let vel = (fam.log_raw(tm, &mid, y) - fam.log_raw(tm, &mid, x)) / h;
            let mid = Point::new_unchecked(fam.model(), mid);
            velocities.push(TangentVec::new_unchecked(mid.clone(), vel));
            midpoints.push(mid);
        }
        Ok(Self { t_grid, points, midpoints, velocities })
    }

    pub fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }
    pub fn points(&self) -> &[Point] {
        &self.points
    }
    pub fn midpoints(&self) -> &[Point] {
        &self.midpoints
    }
    pub fn velocities(&self) -> &[TangentVec] {
        &self.velocities
    }
    pub fn intervals(&self) -> usize {
        self.t_grid.len() - 1
    }
    pub fn start(&self) -> &Point {
        &self.points[0]
    }
    pub fn end(&self) -> &Point {
        &self.points[self.points.len() - 1]
    }
}

/// Composite-midpoint quadrature of the L0 action.
pub fn l0_action<F: MetricFamily + ?Sized>(fam: &F, curve: &SpaceTimeCurve) -> Result<f64> {
    let n = curve.intervals();
    check_window(fam, curve.t_grid[0], curve.t_grid[n])?;
    Ok((0..n)
        .map(|k| {
            let tm = 0.5 * (curve.t_grid[k] + curve.t_grid[k + 1]);
            let h = curve.t_grid[k + 1] - curve.t_grid[k];
            let x = curve.midpoints[k].coords();
            let v = curve.velocities[k].components();
            0.5 * h * (fam.inner(tm, x, v, v) + fam.scalar_curvature_raw(tm, x))
        })
        .sum())
}

/// Outcome of a solve between two space-time points.
#[derive(Clone, Debug, PartialEq)]
pub struct L0GeodesicResult {
    pub t_start: f64,
    pub t_end: f64,
    pub start: Point,
    pub end: Point,
    /// `γ̇(t')`.
    pub v0: TangentVec,
    /// `γ̇(t'')`.
    pub v_end: TangentVec,
    pub action: f64,
    /// Discretized action of the direct-minimization stage, when it ran.
    pub direct_action: Option<f64>,
    pub multiplicity_flag: bool,
    pub residual: f64,
    pub converged: bool,
    /// Grid intervals used for integration (0 for closed-form results).
    pub grid: usize,
    pub curve: Option<SpaceTimeCurve>,
}

/// Anything that can produce minimizing L0-geodesics and transport along them.
pub trait L0Solver<F: MetricFamily + ?Sized>: Sync {
    /// Solves `(t', p) → (t'', q)`. `warm` is an initial-velocity guess near `p`.
    fn solve(
        &self,
        fam: &F,
        t_prime: f64,
        t_dprime: f64,
        p: &Point,
        q: &Point,
        warm: Option<&TangentVec>,
    ) -> Result<L0GeodesicResult>;

    /// Space-time parallel transport of `v ∈ T_{start}M` along `geo`.
    fn transport(&self, fam: &F, geo: &L0GeodesicResult, v: &TangentVec) -> Result<TangentVec>;
}

/// The generic solver: direct minimization plus shooting.
#[derive(Clone, Debug, Default)]
pub struct NumericSolver {
    pub opts: SolveOptions,
}

impl<F: MetricFamily + ?Sized> L0Solver<F> for NumericSolver {
    fn solve(
        &self,
        fam: &F,
        t_prime: f64,
        t_dprime: f64,
        p: &Point,
        q: &Point,
        warm: Option<&TangentVec>,
    ) -> Result<L0GeodesicResult> {
        match warm {
            Some(seed) => l0_distance_from_seed(fam, t_prime, t_dprime, p, q, seed, &self.opts),
            None => l0_distance(fam, t_prime, t_dprime, p, q, &self.opts),
        }
    }

    fn transport(&self, fam: &F, geo: &L0GeodesicResult, v: &TangentVec) -> Result<TangentVec> {
        crate::transport::spacetime_transport(fam, geo, v)
    }
}

// ---------------------------------------------------------------------------
// ODE integration

fn rk4_step(f: impl Fn(f64, &Coords) -> Coords, t: f64, y: &Coords, h: f64) -> Coords {
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &(y + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(y + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

pub(crate) struct Integration {
    pub x: Coords,
    pub v: Coords,
    pub action: f64,
    pub carried: Vec<Coords>,
    pub nodes: Vec<Coords>,
}

/// Integrates the L0-geodesic equation together with the running action and
/// the transport equation `∇_{γ̇}V = Ric(V, ·)^♯` for each carried vector.
#[allow(clippy::too_many_arguments)]
pub(crate) fn integrate_geodesic<F: MetricFamily + ?Sized>(
    fam: &F,
    t1: f64,
    t2: f64,
    x0: &Coords,
    v0: &Coords,
    steps: usize,
    carried: &[Coords],
    record: bool,
) -> Integration {
    let na = x0.len();
    let m = carried.len();
    let dim = 2 * na + 1 + m * na;
    let mut y = Coords::zeros(dim);
    y.rows_mut(0, na).copy_from(x0);
    y.rows_mut(na, na).copy_from(v0);
    for (j, c) in carried.iter().enumerate() {
        y.rows_mut(2 * na + 1 + j * na, na).copy_from(c);
    }

    let rhs = |t: f64, y: &Coords| -> Coords {
        let x: Coords = y.rows(0, na).into_owned();
        let v: Coords = y.rows(na, na).into_owned();
        let mut out = Coords::zeros(dim);
        out.rows_mut(0, na).copy_from(&v);
        let acc = fam.grad_scalar_curvature_raw(t, &x) * 0.5 + fam.ricci_raw(t, &x, &v) * 2.0
            - fam.christoffel(t, &x, &v, &v);
        out.rows_mut(na, na).copy_from(&acc);
        out[2 * na] = 0.5 * (fam.inner(t, &x, &v, &v) + fam.scalar_curvature_raw(t, &x));
        for j in 0..m {
            let off = 2 * na + 1 + j * na;
            let w: Coords = y.rows(off, na).into_owned();
            let dw = fam.ricci_raw(t, &x, &w) - fam.christoffel(t, &x, &v, &w);
            out.rows_mut(off, na).copy_from(&dw);
        }
        out
    };

    let h = (t2 - t1) / steps as f64;
    let mut nodes = Vec::new();
    if record {
        nodes.push(x0.clone());
    }
    for k in 0..steps {
        let t = t1 + k as f64 * h;
        y = rk4_step(rhs, t, &y, h);
        // pull the state back onto the constraint set
        let x = fam.retract(&y.rows(0, na).into_owned());
        let v = fam.project_tangent(&x, &y.rows(na, na).into_owned());
        y.rows_mut(0, na).copy_from(&x);
        y.rows_mut(na, na).copy_from(&v);
        for j in 0..m {
            let off = 2 * na + 1 + j * na;
            let w = fam.project_tangent(&x, &y.rows(off, na).into_owned());
            y.rows_mut(off, na).copy_from(&w);
        }
        if record {
            nodes.push(x);
        }
    }
    Integration {
        x: y.rows(0, na).into_owned(),
        v: y.rows(na, na).into_owned(),
        action: y[2 * na],
        carried: (0..m).map(|j| y.rows(2 * na + 1 + j * na, na).into_owned()).collect(),
        nodes,
    }
}

fn uniform_grid(t1: f64, t2: f64, n: usize) -> Vec<f64> {
    (0..=n)
        .map(|k| if k == n { t2 } else { t1 + (t2 - t1) * k as f64 / n as f64 })
        .collect()
}

/// Solves the L0-geodesic initial value problem on an `steps`-interval grid.
pub fn l0_geodesic_ivp<F: MetricFamily + ?Sized>(
    fam: &F,
    t_prime: f64,
    t_dprime: f64,
    start: &Point,
    v0: &TangentVec,
    steps: usize,
) -> Result<SpaceTimeCurve> {
    if steps < MIN_GRID {
        return Err(Error::GridTooCoarse(steps));
    }
    check_window(fam, t_prime, t_dprime)?;
    validate_point(fam, start)?;
    validate_tangent(fam, v0)?;
    if !v0.base().approx_eq(start) {
        return Err(Error::BaseMismatch);
    }
    let run = integrate_geodesic(fam, t_prime, t_dprime, start.coords(), v0.components(), steps, &[], true);
    let points = run
        .nodes
        .into_iter()
        .map(|x| Point::new_unchecked(fam.model(), x))
        .collect();
    SpaceTimeCurve::from_points(fam, uniform_grid(t_prime, t_dprime, steps), points)
}

/// L0-exponential map: `γ(t'')` for the L0-geodesic with `γ(t') = start`, `γ̇(t') = v0`.
pub fn l0_exp<F: MetricFamily + ?Sized>(
    fam: &F,
    t_prime: f64,
    t_dprime: f64,
    start: &Point,
    v0: &TangentVec,
) -> Result<Point> {
    Ok(l0_geodesic_ivp(fam, t_prime, t_dprime, start, v0, DEFAULT_GRID)?
        .end()
        .clone())
}

// ---------------------------------------------------------------------------
// Stage 1: direct minimization of the discretized action

struct Discretization<'a, F: ?Sized> {
    fam: &'a F,
    grid: Vec<f64>,
}

impl<F: MetricFamily + ?Sized> Discretization<'_, F> {
    fn energy(&self, xs: &[Coords]) -> f64 {
        let fam = self.fam;
        (0..xs.len() - 1)
            .map(|k| {
                let tm = 0.5 * (self.grid[k] + self.grid[k + 1]);
                let h = self.grid[k + 1] - self.grid[k];
                let step = fam.log_raw(tm, &xs[k], &xs[k + 1]);
                let mid = fam.exp_raw(tm, &xs[k], &(&step * 0.5));
                0.5 * (fam.inner(tm, &xs[k], &step, &step) / h + h * fam.scalar_curvature_raw(tm, &mid))
            })
            .sum()
    }

    /// Differential of the energy at interior nodes, as coordinate covectors.
    fn differential(&self, xs: &[Coords]) -> Vec<Coords> {
        let fam = self.fam;
        let n = xs.len() - 1;
        (1..n)
            .map(|k| {
                let x = &xs[k];
                let mut c = Coords::zeros(x.len());
                for (nb, lo, hi) in [(k + 1, k, k + 1), (k - 1, k - 1, k)] {
                    let tm = 0.5 * (self.grid[lo] + self.grid[hi]);
                    let h = self.grid[hi] - self.grid[lo];
                    let toward = fam.log_raw(tm, x, &xs[nb]);
                    c -= fam.lower(tm, x, &toward) / h;
                    let grad_r = fam.grad_scalar_curvature_raw(tm, x);
                    c += fam.lower(tm, x, &grad_r) * (0.25 * h);
                }
                c
            })
            .collect()
    }
}

/// Solves the symmetric tridiagonal system with diagonal `diag` and
/// off-diagonal `off` (Thomas algorithm), one right-hand side per column.
fn solve_tridiagonal(diag: &[f64], off: &[f64], rhs: &[Coords]) -> Vec<Coords> {
    let n = diag.len();
    let mut c_prime = vec![0.0; n];
    let mut d_prime: Vec<Coords> = Vec::with_capacity(n);
    for i in 0..n {
        let lower = if i > 0 { off[i - 1] } else { 0.0 };
        let denom = diag[i] - if i > 0 { lower * c_prime[i - 1] } else { 0.0 };
        if i + 1 < n {
            c_prime[i] = off[i] / denom;
        }
        let prev = if i > 0 { &d_prime[i - 1] * lower } else { Coords::zeros(rhs[i].len()) };
        d_prime.push((&rhs[i] - prev) / denom);
    }
    let mut out = d_prime.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        out[i] = &d_prime[i] - &out[i + 1] * c_prime[i];
    }
    out
}

/// Preconditioned gradient descent with Armijo backtracking. The
/// preconditioner is the inverse of the kinetic-energy Hessian of a
/// discretized straight line, which makes the flat case converge in one step.
fn direct_minimize<F: MetricFamily + ?Sized>(
    disc: &Discretization<'_, F>,
    mut xs: Vec<Coords>,
    max_iters: usize,
) -> (Vec<Coords>, f64) {
    let fam = disc.fam;
    let n = xs.len() - 1;
    let hs: Vec<f64> = disc.grid.windows(2).map(|w| w[1] - w[0]).collect();
    let diag: Vec<f64> = (1..n).map(|k| 1.0 / hs[k - 1] + 1.0 / hs[k]).collect();
    let off: Vec<f64> = (1..n - 1).map(|k| -1.0 / hs[k]).collect();
    let mut energy = disc.energy(&xs);
    let mut stalls = 0;
    for _ in 0..max_iters {
        let cov = disc.differential(&xs);
        let grads: Vec<Coords> = cov
            .iter()
            .enumerate()
            .map(|(i, c)| fam.raise(disc.grid[i + 1], &xs[i + 1], c))
            .collect();
        let dirs: Vec<Coords> = solve_tridiagonal(&diag, &off, &grads)
            .into_iter()
            .enumerate()
            .map(|(i, y)| -fam.project_tangent(&xs[i + 1], &y))
            .collect();
        let slope: f64 = cov.iter().zip(&dirs).map(|(c, d)| c.dot(d)).sum();
        if slope.is_nan() || slope >= -1e-300 || slope.abs() <= 1e-15 * (1.0 + energy.abs()) {
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<Coords> = std::iter::once(xs[0].clone())
                .chain((1..n).map(|k| fam.exp_raw(disc.grid[k], &xs[k], &(&dirs[k - 1] * alpha))))
                .chain(std::iter::once(xs[n].clone()))
                .collect();
            let e = disc.energy(&trial);
            if e <= energy + 1e-4 * alpha * slope {
                accepted = Some((trial, e));
                break;
            }
            alpha *= 0.5;
        }
        let Some((trial, e)) = accepted else { break };
        let gain = energy - e;
        xs = trial;
        energy = e;
        if gain <= 1e-14 * (1.0 + energy.abs()) {
            stalls += 1;
            if stalls >= 2 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    (xs, energy)
}

// ---------------------------------------------------------------------------
// Stage 2: shooting

struct Shot {
    v0: Coords,
    end: Coords,
    v_end: Coords,
    action: f64,
    residual: f64,
    nodes: Vec<Coords>,
}

struct Shooter<'a, F: ?Sized> {
    fam: &'a F,
    t1: f64,
    t2: f64,
    p: &'a Coords,
    q: &'a Coords,
    steps: usize,
    frame_p: Vec<Coords>,
    frame_q: Vec<Coords>,
}

impl<'a, F: MetricFamily + ?Sized> Shooter<'a, F> {
    fn new(fam: &'a F, t1: f64, t2: f64, p: &'a Coords, q: &'a Coords, steps: usize) -> Self {
        Self {
            fam,
            t1,
            t2,
            p,
            q,
            steps,
            frame_p: fam.frame_raw(t1, p),
            frame_q: fam.frame_raw(t2, q),
        }
    }

    fn velocity(&self, c: &DVector<f64>) -> Coords {
        self.frame_p
            .iter()
            .zip(c.iter())
            .fold(Coords::zeros(self.p.len()), |acc, (e, ci)| acc + e * *ci)
    }

    fn coefficients(&self, v: &Coords) -> DVector<f64> {
        let v = self.fam.project_tangent(self.p, v);
        DVector::from_iterator(
            self.frame_p.len(),
            self.frame_p.iter().map(|e| self.fam.inner(self.t1, self.p, e, &v)),
        )
    }

    /// Miss vector `log_{q}(γ(t''))` in the frame at `q`.
    fn miss(&self, end: &Coords) -> DVector<f64> {
        let miss = self.fam.log_raw(self.t2, self.q, end);
        DVector::from_iterator(
            self.frame_q.len(),
            self.frame_q.iter().map(|f| self.fam.inner(self.t2, self.q, f, &miss)),
        )
    }

    fn residual(&self, c: &DVector<f64>) -> DVector<f64> {
        let run = integrate_geodesic(self.fam, self.t1, self.t2, self.p, &self.velocity(c), self.steps, &[], false);
        self.miss(&run.x)
    }

    fn finish(&self, c: &DVector<f64>, record: bool) -> Shot {
        let v0 = self.velocity(c);
        let run = integrate_geodesic(self.fam, self.t1, self.t2, self.p, &v0, self.steps, &[], record);
        let miss = self.fam.log_raw(self.t2, &run.x, self.q);
        // first-order correction of the action for the remaining endpoint miss
        let action = run.action + self.fam.inner(self.t2, &run.x, &run.v, &miss);
        Shot {
            v0,
            residual: self.fam.norm(self.t2, &run.x, &miss),
            end: run.x,
            v_end: run.v,
            action,
            nodes: run.nodes,
        }
    }

    /// Newton iteration on the frame coefficients of `v0`, with a
    /// forward-difference Jacobian and residual-norm backtracking.
    fn shoot(&self, seed: &Coords, tol: f64, max_iters: usize) -> Shot {
        let mut c = self.coefficients(seed);
        let mut r = self.residual(&c);
        let mut rn = r.norm();
        let d = c.len();
        for _ in 0..max_iters {
            if rn <= tol * 1e-2 {
                break;
            }
            let scale = 1e-7 * c.norm().max(1.0);
            let mut jac = DMatrix::zeros(r.len(), d);
            for k in 0..d {
                let mut ck = c.clone();
                ck[k] += scale;
                let rk = self.residual(&ck);
                jac.set_column(k, &((rk - &r) / scale));
            }
            let Some(step) = jac.lu().solve(&(-&r)) else { break };
            let mut alpha = 1.0;
            let mut improved = false;
            for _ in 0..30 {
                let trial = &c + &step * alpha;
                let rt = self.residual(&trial);
                let rtn = rt.norm();
                if rtn < rn {
                    c = trial;
                    r = rt;
                    rn = rtn;
                    improved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !improved {
                break;
            }
        }
        self.finish(&c, true)
    }
}

// ---------------------------------------------------------------------------
// Two-point solve

struct Candidate {
    shot: Shot,
    direct_action: Option<f64>,
}

fn initial_curves<F: MetricFamily + ?Sized>(
    fam: &F,
    grid: &[f64],
    p: &Coords,
    q: &Coords,
    starts: usize,
) -> Vec<Vec<Coords>> {
    let t1 = grid[0];
    let n = grid.len() - 1;
    let chord = fam.log_raw(t1, p, q);
    // g(t')-geodesic interpolant
    let base: Vec<Coords> = (0..=n)
        .map(|k| {
            if k == n {
                q.clone()
            } else {
                fam.exp_raw(t1, p, &(&chord * (k as f64 / n as f64)))
            }
        })
        .collect();

    // directions at p orthogonal to the chord, for sideways perturbations
    let chord_norm = fam.norm(t1, p, &chord);
    let normals: Vec<Coords> = fam
        .frame_raw(t1, p)
        .into_iter()
        .filter_map(|e| {
            let e = if chord_norm > 0.0 {
                let u = &chord / chord_norm;
                &e - &u * fam.inner(t1, p, &u, &e)
            } else {
                e
            };
            let norm = fam.norm(t1, p, &e);
            (norm > 1e-3).then(|| e / norm)
        })
        .collect();
    let mut orthonormal: Vec<Coords> = Vec::new();
    for mut e in normals {
        for f in &orthonormal {
            e -= f * fam.inner(t1, p, f, &e);
        }
        let norm = fam.norm(t1, p, &e);
        if norm > 1e-3 {
            orthonormal.push(e / norm);
        }
    }

    let amplitude = 0.1 * fam.injectivity_radius(t1);
    let mut curves = vec![base.clone()];
    let m = orthonormal.len().max(1);
    for j in 1..starts {
        if orthonormal.is_empty() {
            break;
        }
        let idx = (j - 1) % m;
        let round = (j - 1) / m;
        let sign = if round.is_multiple_of(2) { 1.0 } else { -1.0 };
        let amp = sign * amplitude * (1.0 + 0.5 * (round / 2) as f64);
        let dir = &orthonormal[idx];
        let curve = base
            .iter()
            .enumerate()
            .map(|(k, x)| {
                if k == 0 || k == n {
                    x.clone()
                } else {
                    let bump = (PI * k as f64 / n as f64).sin() * amp;
                    let v = fam.project_tangent(x, dir) * bump;
                    fam.exp_raw(grid[k], x, &v)
                }
            })
            .collect();
        curves.push(curve);
    }
    curves
}

#[allow(clippy::too_many_arguments)]
fn assemble<F: MetricFamily + ?Sized>(
    fam: &F,
    t1: f64,
    t2: f64,
    p: &Point,
    q: &Point,
    cand: Candidate,
    grid: usize,
    converged: bool,
    multiplicity_flag: bool,
) -> Result<L0GeodesicResult> {
    let model = fam.model();
    let curve = if cand.shot.nodes.len() == grid + 1 {
        let points = cand
            .shot
            .nodes
            .iter()
            .map(|x| Point::new_unchecked(model, x.clone()))
            .collect();
        Some(SpaceTimeCurve::from_points(fam, uniform_grid(t1, t2, grid), points)?)
    } else {
        None
    };
    let end_point = Point::new_unchecked(model, cand.shot.end.clone());
    let v_end = fam.project_tangent(q.coords(), &cand.shot.v_end);
    let _ = end_point;
    Ok(L0GeodesicResult {
        t_start: t1,
        t_end: t2,
        start: p.clone(),
        end: q.clone(),
        v0: TangentVec::new_unchecked(p.clone(), cand.shot.v0),
        v_end: TangentVec::new_unchecked(q.clone(), v_end),
        action: cand.shot.action,
        direct_action: cand.direct_action,
        multiplicity_flag,
        residual: cand.shot.residual,
        converged,
        grid,
        curve,
    })
}

fn lexicographic_lt(a: &Coords, b: &Coords) -> bool {
    for (x, y) in a.iter().zip(b.iter()) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Minimizing L0-geodesic and L0-distance between `(t', m')` and `(t'', m'')`.
pub fn l0_distance<F: MetricFamily + ?Sized>(
    fam: &F,
    t_prime: f64,
    t_dprime: f64,
    m_prime: &Point,
    m_dprime: &Point,
    opts: &SolveOptions,
) -> Result<L0GeodesicResult> {
    check_window(fam, t_prime, t_dprime)?;
    validate_point(fam, m_prime)?;
    validate_point(fam, m_dprime)?;
    if opts.grid < MIN_GRID {
        return Err(Error::GridTooCoarse(opts.grid));
    }
    let n = opts.grid;
    let grid = uniform_grid(t_prime, t_dprime, n);
    let (p, q) = (m_prime.coords(), m_dprime.coords());
    let disc = Discretization { fam, grid: grid.clone() };
    let shooter = Shooter::new(fam, t_prime, t_dprime, p, q, n);
    let h = grid[1] - grid[0];

    let candidates: Vec<Candidate> = initial_curves(fam, &grid, p, q, opts.starts.max(1))
        .into_iter()
        .map(|curve| {
            let (xs, direct) = direct_minimize(&disc, curve, opts.max_descent_iters);
            // second-order one-sided estimate of γ̇(t')
            let seed = (fam.log_raw(grid[0], p, &xs[1]) * 4.0 - fam.log_raw(grid[0], p, &xs[2])) / (2.0 * h);
            let shot = shooter.shoot(&seed, opts.tol_residual, opts.max_newton_iters);
            Candidate { shot, direct_action: Some(direct) }
        })
        .collect();

    select(fam, t_prime, t_dprime, m_prime, m_dprime, candidates, opts)
}

fn select<F: MetricFamily + ?Sized>(
    fam: &F,
    t1: f64,
    t2: f64,
    p: &Point,
    q: &Point,
    candidates: Vec<Candidate>,
    opts: &SolveOptions,
) -> Result<L0GeodesicResult> {
    let (converged, failed): (Vec<Candidate>, Vec<Candidate>) = candidates
        .into_iter()
        .partition(|c| c.shot.residual <= opts.tol_residual && c.shot.action.is_finite());
    if converged.is_empty() {
        let best = failed
            .into_iter()
            .min_by(|a, b| a.shot.residual.total_cmp(&b.shot.residual))
            .expect("at least one start");
        let residual = best.shot.residual;
        let result = assemble(fam, t1, t2, p, q, best, opts.grid, false, false)?;
        return Err(Error::NonConvergence { residual, best: Box::new(result) });
    }
    let min_action = converged
        .iter()
        .map(|c| c.shot.action)
        .fold(f64::INFINITY, f64::min);
    let tol = opts.tol_action * (1.0 + min_action.abs());
    let tied: Vec<&Candidate> = converged
        .iter()
        .filter(|c| c.shot.action - min_action <= tol)
        .collect();
    let px = p.coords();
    let multiplicity_flag = tied.iter().enumerate().any(|(i, a)| {
        tied[i + 1..]
            .iter()
            .any(|b| fam.norm(t1, px, &(&a.shot.v0 - &b.shot.v0)) > opts.tol_sep)
    });
    let chosen_idx = converged
        .iter()
        .enumerate()
        .filter(|(_, c)| c.shot.action - min_action <= tol)
        .reduce(|best, cur| if lexicographic_lt(&cur.1.shot.v0, &best.1.shot.v0) { cur } else { best })
        .map(|(i, _)| i)
        .expect("non-empty tie set");
    let chosen = converged.into_iter().nth(chosen_idx).expect("index in range");
    assemble(fam, t1, t2, p, q, chosen, opts.grid, true, multiplicity_flag)
}

/// Shooting-only solve from an initial-velocity guess; falls back to the full
/// multi-start solve when shooting does not converge.
pub fn l0_distance_from_seed<F: MetricFamily + ?Sized>(
    fam: &F,
    t_prime: f64,
    t_dprime: f64,
    m_prime: &Point,
    m_dprime: &Point,
    seed: &TangentVec,
    opts: &SolveOptions,
) -> Result<L0GeodesicResult> {
    check_window(fam, t_prime, t_dprime)?;
    validate_point(fam, m_prime)?;
    validate_point(fam, m_dprime)?;
    if opts.grid < MIN_GRID {
        return Err(Error::GridTooCoarse(opts.grid));
    }
    let shooter = Shooter::new(fam, t_prime, t_dprime, m_prime.coords(), m_dprime.coords(), opts.grid);
    let shot = shooter.shoot(seed.components(), opts.tol_residual, opts.max_newton_iters);
    if shot.residual <= opts.tol_residual && shot.action.is_finite() {
        return assemble(
            fam,
            t_prime,
            t_dprime,
            m_prime,
            m_dprime,
            Candidate { shot, direct_action: None },
            opts.grid,
            true,
            false,
        );
    }
    l0_distance(fam, t_prime, t_dprime, m_prime, m_dprime, opts)
}

fn require_smooth(result: &L0GeodesicResult) -> Result<()> {
    if !result.converged {
        return Err(Error::Unconverged);
    }
    if result.multiplicity_flag {
        return Err(Error::MultipleMinimizers);
    }
    Ok(())
}

/// `(∇_{m'} L0, ∇_{m''} L0) = (−γ̇(t'), γ̇(t''))`.
pub fn l0_spatial_gradients(result: &L0GeodesicResult) -> Result<(TangentVec, TangentVec)> {
    require_smooth(result)?;
    Ok((result.v0.scaled(-1.0), result.v_end.clone()))
}

/// `(∂L0/∂t', ∂L0/∂t'') = (½(|γ̇(t')|² − R(m')), −½(|γ̇(t'')|² − R(m'')))`.
pub fn l0_time_partials<F: MetricFamily + ?Sized>(fam: &F, result: &L0GeodesicResult) -> Result<(f64, f64)> {
    require_smooth(result)?;
    let (t1, t2) = (result.t_start, result.t_end);
    let (x, y) = (result.start.coords(), result.end.coords());
    let speed1 = fam.inner(t1, x, result.v0.components(), result.v0.components());
    let speed2 = fam.inner(t2, y, result.v_end.components(), result.v_end.components());
    Ok((
        0.5 * (speed1 - fam.scalar_curvature_raw(t1, x)),
        -0.5 * (speed2 - fam.scalar_curvature_raw(t2, y)),
    ))
}

/// Contracted Hessian of L0 along `(uᵢ ⊕ P uᵢ)` versus `∂_{t'}L0 + ∂_{t''}L0`.
///
/// Returns `(lhs, rhs)`; the expected relation is `lhs ≤ rhs`.
pub fn nonpos_hessian_probe<F: MetricFamily + ?Sized>(
    fam: &F,
    t_prime: f64,
    t_dprime: f64,
    m_prime: &Point,
    m_dprime: &Point,
    opts: &SolveOptions,
) -> Result<(f64, f64)> {
    nonpos_hessian_probe_with(fam, &NumericSolver { opts: opts.clone() }, t_prime, t_dprime, m_prime, m_dprime)
}

/// [`nonpos_hessian_probe`] with an arbitrary solver.
pub fn nonpos_hessian_probe_with<F, S>(
    fam: &F,
    solver: &S,
    t_prime: f64,
    t_dprime: f64,
    m_prime: &Point,
    m_dprime: &Point,
) -> Result<(f64, f64)>
where
    F: MetricFamily + ?Sized,
    S: L0Solver<F>,
{
    let center = solver.solve(fam, t_prime, t_dprime, m_prime, m_dprime, None)?;
    require_smooth(&center)?;
    let step = HESSIAN_STEP;
    let radius = fam.injectivity_radius(t_prime).min(fam.injectivity_radius(t_dprime));
    if step >= radius {
        return Err(Error::StencilOutOfWindow(format!(
            "step {step} exceeds injectivity radius {radius}"
        )));
    }
    let (x, y) = (m_prime.coords(), m_dprime.coords());
    let mut lhs = 0.0;
    for u in fam.frame_raw(t_prime, x) {
        let u = TangentVec::new_unchecked(m_prime.clone(), u);
        let pu = solver.transport(fam, &center, &u)?;
        let value = |eps: f64| -> Result<f64> {
            let p = Point::new_unchecked(fam.model(), fam.exp_raw(t_prime, x, &(u.components() * eps)));
            let q = Point::new_unchecked(fam.model(), fam.exp_raw(t_dprime, y, &(pu.components() * eps)));
            let seed = fam.tangent_projected(&p, center.v0.components());
            let r = solver.solve(fam, t_prime, t_dprime, &p, &q, Some(&seed))?;
            Ok(r.action)
        };
        let second = |eps: f64| -> Result<f64> {
            Ok((value(eps)? - 2.0 * center.action + value(-eps)?) / (eps * eps))
        };
        let coarse = second(step)?;
        let fine = second(step / 2.0)?;
        lhs += (4.0 * fine - coarse) / 3.0;
    }
    let (dt1, dt2) = l0_time_partials(fam, &center)?;
    Ok((lhs, dt1 + dt2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ModelId;
    use crate::models::{make_flow, sphere_l0_distance, Flow, FlowSpec};
    use approx::assert_relative_eq;

    fn torus() -> Flow {
        make_flow(&FlowSpec { model: ModelId::Torus, d: 2, side: Some(1.0), horizon: 1.0 }).unwrap()
    }

    fn sphere() -> Flow {
        make_flow(&FlowSpec { model: ModelId::Sphere, d: 2, side: None, horizon: 0.2 }).unwrap()
    }

    #[test]
    fn tridiagonal_solver_inverts_laplacian() {
        let diag = vec![2.0; 5];
        let off = vec![-1.0; 4];
        let x: Vec<Coords> = (0..5).map(|i| Coords::from_vec(vec![i as f64, 1.0])).collect();
        let b: Vec<Coords> = (0..5)
            .map(|i| {
                let mut v = &x[i] * 2.0;
                if i > 0 {
                    v -= &x[i - 1];
                }
                if i < 4 {
                    v -= &x[i + 1];
                }
                v
            })
            .collect();
        let sol = solve_tridiagonal(&diag, &off, &b);
        for (s, e) in sol.iter().zip(&x) {
            assert!((s - e).amax() < 1e-12);
        }
    }

    #[test]
    fn action_of_constant_and_straight_torus_curves() {
        let fam = torus();
        let grid = uniform_grid(0.0, 0.5, 256);
        let still: Vec<Point> = grid.iter().map(|_| fam.point(vec![0.2, 0.2]).unwrap()).collect();
        let curve = SpaceTimeCurve::from_points(&fam, grid.clone(), still).unwrap();
        assert_eq!(l0_action(&fam, &curve).unwrap(), 0.0);

        let line: Vec<Point> = (0..=256)
            .map(|k| fam.point_projected(&Coords::from_vec(vec![0.3 * k as f64 / 256.0, 0.0])))
            .collect();
        let curve = SpaceTimeCurve::from_points(&fam, grid, line).unwrap();
        assert_relative_eq!(l0_action(&fam, &curve).unwrap(), 0.09, epsilon = 1e-6);
    }

    #[test]
    fn coarse_grids_are_rejected() {
        let fam = torus();
        let p = fam.point(vec![0.0, 0.0]).unwrap();
        let v = fam.tangent(&p, vec![0.1, 0.0]).unwrap();
        assert!(matches!(l0_geodesic_ivp(&fam, 0.0, 0.5, &p, &v, 7), Err(Error::GridTooCoarse(7))));
        assert!(matches!(
            l0_geodesic_ivp(&fam, 0.5, 0.5, &p, &v, 16),
            Err(Error::InvalidWindow { .. })
        ));
    }

    #[test]
    fn torus_exp_is_straight_flow() {
        let fam = torus();
        let p = fam.point(vec![0.0, 0.0]).unwrap();
        let v = fam.tangent(&p, vec![0.6, 0.0]).unwrap();
        let end = l0_exp(&fam, 0.0, 0.5, &p, &v).unwrap();
        assert!((end.coords() - Coords::from_vec(vec![0.3, 0.0])).amax() < 1e-14);
        let zero = TangentVec::zero(p.clone());
        assert_eq!(l0_exp(&fam, 0.0, 0.5, &p, &zero).unwrap(), p);
    }

    #[test]
    fn torus_distance_and_derivatives() {
        let fam = torus();
        let p = fam.point(vec![0.0, 0.0]).unwrap();
        let q = fam.point(vec![0.3, 0.0]).unwrap();
        let r = l0_distance(&fam, 0.0, 0.5, &p, &q, &SolveOptions::default()).unwrap();
        assert_relative_eq!(r.action, 0.09, epsilon = 1e-10);
        assert!((r.v0.components() - Coords::from_vec(vec![0.6, 0.0])).amax() < 1e-8);
        assert!(!r.multiplicity_flag);
        let (g1, g2) = l0_spatial_gradients(&r).unwrap();
        assert!((g1.components() + Coords::from_vec(vec![0.6, 0.0])).amax() < 1e-8);
        assert!((g2.components() - Coords::from_vec(vec![0.6, 0.0])).amax() < 1e-8);
        let (d1, d2) = l0_time_partials(&fam, &r).unwrap();
        assert_relative_eq!(d1, 0.18, epsilon = 1e-8);
        assert_relative_eq!(d2, -0.18, epsilon = 1e-8);
    }

    #[test]
    fn sphere_distance_matches_closed_form() {
        let fam = sphere();
        let p = fam.point(vec![0.0, 0.0, 1.0]).unwrap();
        let q = fam.point(vec![1.0, 0.0, 0.0]).unwrap();
        let r = l0_distance(&fam, 0.0, 0.1, &p, &q, &SolveOptions::default()).unwrap();
        let exact = sphere_l0_distance(2, 0.0, 0.1, &p, &q).unwrap().value;
        assert_relative_eq!(r.action, exact, max_relative = 1e-8);
        assert!(!r.multiplicity_flag);
        let direct = r.direct_action.unwrap();
        assert_relative_eq!(direct, r.action, max_relative = 1e-4);
    }

    #[test]
    fn sphere_antipodal_pair_is_flagged() {
        let fam = sphere();
        let p = fam.point(vec![0.0, 0.0, 1.0]).unwrap();
        let q = fam.point(vec![0.0, 0.0, -1.0]).unwrap();
        let r = l0_distance(&fam, 0.0, 0.1, &p, &q, &SolveOptions::default()).unwrap();
        assert!(r.multiplicity_flag);
        assert!(matches!(l0_spatial_gradients(&r), Err(Error::MultipleMinimizers)));
    }

    #[test]
    fn constant_minimizer_on_sphere() {
        let fam = sphere();
        let p = fam.point(vec![0.0, 0.6, 0.8]).unwrap();
        let r = l0_distance(&fam, 0.02, 0.12, &p, &p, &SolveOptions::default()).unwrap();
        assert!(r.v0.components().amax() < 1e-9);
        let (d1, d2) = l0_time_partials(&fam, &r).unwrap();
        assert_relative_eq!(d1, -0.5 * fam.scalar_curvature_raw(0.02, p.coords()), epsilon = 1e-9);
        assert_relative_eq!(d2, 0.5 * fam.scalar_curvature_raw(0.12, p.coords()), epsilon = 1e-9);
    }
}
