//! Coupled geodesic random walks in reversed time.
//!
//! Walker `X` lives on `g(τ'(s))`, walker `Y` on `g(τ''(s))` with
//! `τ'(s) = t₁' − s`, `τ''(s) = t₁'' − s`. Each step draws one ball-uniform
//! `λ`, moves `X` along `√(2Δs(d+2))·σλ` and moves `Y` along the space-time
//! parallel transport of that displacement.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{check_time, validate_point, Coords, MetricFamily, Point, TangentVec};
use crate::l0::{L0GeodesicResult, L0Solver};

pub const DEFAULT_MAX_STEPS: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSchedule {
    pub t1_prime: f64,
    pub t1_dprime: f64,
    /// Total reversed time `S`.
    pub horizon: f64,
    pub epsilon: f64,
}

impl TimeSchedule {
    pub fn new<F: MetricFamily + ?Sized>(
        fam: &F,
        t1_prime: f64,
        t1_dprime: f64,
        horizon: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let s = Self { t1_prime, t1_dprime, horizon, epsilon };
        s.validate(fam)?;
        Ok(s)
    }

    /// Schedule with `steps` equal steps over `[0, S]`.
    pub fn with_steps<F: MetricFamily + ?Sized>(
        fam: &F,
        t1_prime: f64,
        t1_dprime: f64,
        horizon: f64,
        steps: usize,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("at least one step required".into()));
        }
        Self::new(fam, t1_prime, t1_dprime, horizon, (horizon / steps as f64).sqrt())
    }

    pub fn validate<F: MetricFamily + ?Sized>(&self, fam: &F) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSchedule(m));
        if ![self.t1_prime, self.t1_dprime, self.horizon, self.epsilon]
            .iter()
            .all(|v| v.is_finite())
        {
            return bad("non-finite schedule parameter".into());
        }
        if self.t1_prime >= self.t1_dprime {
            return bad(format!("t1' = {} must be < t1'' = {}", self.t1_prime, self.t1_dprime));
        }
        if self.horizon < 0.0 {
            return bad(format!("S = {} must be non-negative", self.horizon));
        }
        if self.epsilon <= 0.0 {
            return bad(format!("epsilon = {} must be positive", self.epsilon));
        }
        if self.t1_prime - self.horizon < 0.0 {
            return bad(format!("tau'(S) = {} leaves [0, T]", self.t1_prime - self.horizon));
        }
        check_time(fam, self.t1_dprime).map_err(|e| Error::InvalidSchedule(e.to_string()))
    }

    pub fn tau_prime(&self, s: f64) -> f64 {
        self.t1_prime - s
    }

    pub fn tau_dprime(&self, s: f64) -> f64 {
        self.t1_dprime - s
    }

    /// `⌈S/ε²⌉`, treating ratios within `1e-9` of an integer as exact.
    pub fn n_steps(&self) -> usize {
        let ratio = self.horizon / (self.epsilon * self.epsilon);
        let nearest = ratio.round();
        if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) {
            nearest as usize
        } else {
            ratio.ceil() as usize
        }
    }

    /// `s_n = (nε²) ∧ S` for `n = 0..=n_steps`.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.n_steps();
        let e2 = self.epsilon * self.epsilon;
        (0..=n)
            .map(|k| if k == n { self.horizon } else { (k as f64 * e2).min(self.horizon) })
            .collect()
    }
}

/// Seed for one trajectory: a ChaCha8 stream selected by `stream_id`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self { master_seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Uniform sample from the closed unit `d`-ball.
pub fn sample_ball<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DVector<f64> {
    loop {
        let dir = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = dir.norm();
        if n > 0.0 {
            let r: f64 = rng.random::<f64>().powf(1.0 / d as f64);
            return dir * (r / n);
        }
    }
}

/// Which walker states to keep.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum StateRecord {
    /// Only the final pair.
    #[default]
    Final,
    All,
    /// The listed grid indices (plus the final pair).
    At(Vec<usize>),
}

#[derive(Clone, Debug, Default)]
pub struct CouplingOptions {
    pub record: StateRecord,
    /// Fixed rotation applied to `λ` before the frame, `σ ↦ σR`.
    pub frame_rotation: Option<DMatrix<f64>>,
    pub max_steps: Option<usize>,
    /// Warm-start each solve from the previous initial velocity.
    pub warm_start: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub multiplicity: bool,
    pub residual: f64,
}

/// Recorded walker pair at grid index `index`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathState {
    pub index: usize,
    pub x: Point,
    pub y: Point,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingPath {
    pub schedule: TimeSchedule,
    pub stream: RngStream,
    /// `s_k` for every grid index.
    pub s: Vec<f64>,
    /// `Λ_k = L0^{τ'(s_k), τ''(s_k)}(X_k, Y_k)`.
    pub lambda: Vec<f64>,
    pub multiplicity: Vec<bool>,
    pub max_residual: f64,
    pub states: Vec<PathState>,
}

impl CouplingPath {
    pub fn multiplicity_hits(&self) -> usize {
        self.multiplicity.iter().filter(|&&m| m).count()
    }

    pub fn final_state(&self) -> &PathState {
        self.states.last().expect("final state is always recorded")
    }

    pub fn state_at(&self, index: usize) -> Option<&PathState> {
        self.states.iter().find(|st| st.index == index)
    }
}

/// One walk step from the solved geodesic `geo` between the current walkers.
pub fn coupling_step<F, S>(
    fam: &F,
    solver: &S,
    geo: &L0GeodesicResult,
    ds: f64,
    lambda: &DVector<f64>,
    frame_rotation: Option<&DMatrix<f64>>,
) -> Result<(Point, Point, StepDiagnostics)>
where
    F: MetricFamily + ?Sized,
    S: L0Solver<F>,
{
    let (x, y) = (&geo.start, &geo.end);
    let coeffs = match frame_rotation {
        Some(r) => r * lambda,
        None => lambda.clone(),
    };
    let frame = fam.frame_raw(geo.t_start, x.coords());
    if frame.len() != coeffs.len() {
        return Err(Error::InvalidInput(format!(
            "lambda has {} components for a {}-dimensional frame",
            coeffs.len(),
            frame.len()
        )));
    }
    let scale = (2.0 * ds * (fam.dim() as f64 + 2.0)).sqrt();
    let disp = frame
        .iter()
        .zip(coeffs.iter())
        .fold(Coords::zeros(x.coords().len()), |acc, (e, c)| acc + e * (c * scale));
    let v1 = TangentVec::new_unchecked(x.clone(), disp);
    let v2 = solver.transport(fam, geo, &v1)?;
    let nx = fam.exp_raw(geo.t_start, x.coords(), v1.components());
    let ny = fam.exp_raw(geo.t_end, y.coords(), v2.components());
    Ok((
        Point::new_unchecked(fam.model(), nx),
        Point::new_unchecked(fam.model(), ny),
        StepDiagnostics { multiplicity: geo.multiplicity_flag, residual: geo.residual },
    ))
}

pub fn run_coupling<F, S>(
    fam: &F,
    solver: &S,
    schedule: &TimeSchedule,
    m_prime: &Point,
    m_dprime: &Point,
    stream: RngStream,
    opts: &CouplingOptions,
) -> Result<CouplingPath>
where
    F: MetricFamily + ?Sized,
    S: L0Solver<F>,
{
    schedule.validate(fam)?;
    validate_point(fam, m_prime)?;
    validate_point(fam, m_dprime)?;
    let n = schedule.n_steps();
    let max_steps = opts.max_steps.unwrap_or(DEFAULT_MAX_STEPS);
    if n > max_steps {
        return Err(Error::InvalidSchedule(format!("{n} steps exceed the limit of {max_steps}")));
    }
    let grid = schedule.grid();
    let mut rng = stream.rng();
    let d = fam.dim();
    let keep = |k: usize| match &opts.record {
        StateRecord::Final => false,
        StateRecord::All => true,
        StateRecord::At(idx) => idx.contains(&k),
    };

    let mut x = m_prime.clone();
    let mut y = m_dprime.clone();
    let mut lambda = Vec::with_capacity(n + 1);
    let mut multiplicity = Vec::with_capacity(n + 1);
    let mut states = Vec::new();
    let mut max_residual: f64 = 0.0;
    let mut warm: Option<TangentVec> = None;
    for k in 0..=n {
        let s = grid[k];
        let geo = solver.solve(
            fam,
            schedule.tau_prime(s),
            schedule.tau_dprime(s),
            &x,
            &y,
            if opts.warm_start { warm.as_ref() } else { None },
        )?;
        lambda.push(geo.action);
        multiplicity.push(geo.multiplicity_flag);
        max_residual = max_residual.max(geo.residual);
        if k == n || keep(k) {
            states.push(PathState { index: k, x: x.clone(), y: y.clone() });
        }
        if k == n {
            break;
        }
        let lam = sample_ball(&mut rng, d);
        let (nx, ny, _) = coupling_step(fam, solver, &geo, grid[k + 1] - s, &lam, opts.frame_rotation.as_ref())?;
        if opts.warm_start {
            warm = Some(fam.tangent_projected(&nx, geo.v0.components()));
        }
        x = nx;
        y = ny;
    }
    Ok(CouplingPath {
        schedule: *schedule,
        stream,
        s: grid,
        lambda,
        multiplicity,
        max_residual,
        states,
    })
}

/// Independent trajectories, path `i` on stream `i` starting from
/// `initial_pairs[i % len]`. Output order is the stream order.
pub fn run_ensemble<F, S>(
    fam: &F,
    solver: &S,
    schedule: &TimeSchedule,
    initial_pairs: &[(Point, Point)],
    master_seed: u64,
    n_paths: usize,
    opts: &CouplingOptions,
) -> Result<Vec<CouplingPath>>
where
    F: MetricFamily + ?Sized,
    S: L0Solver<F>,
{
    if n_paths == 0 {
        return Err(Error::InvalidInput("n_paths must be at least 1".into()));
    }
    if initial_pairs.is_empty() {
        return Err(Error::InvalidInput("no initial pairs".into()));
    }
    let results: Vec<Result<CouplingPath>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let (p, q) = &initial_pairs[i % initial_pairs.len()];
            run_coupling(fam, solver, schedule, p, q, RngStream::new(master_seed, i as u64), opts)
        })
        .collect();
    let failed: Vec<(usize, &Error)> = results
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.as_ref().err().map(|e| (i, e)))
        .collect();
    if let Some(&(first_path, first)) = failed.first() {
        return Err(Error::Ensemble {
            failed: failed.len(),
            total: n_paths,
            first_path,
            first_error: first.to_string(),
        });
    }
    Ok(results.into_iter().map(|r| r.expect("checked above")).collect())
}
