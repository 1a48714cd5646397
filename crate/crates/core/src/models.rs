//! Exact model flows and their closed-form L0 oracles.
//!
//! * [`FlatTorus`]: the static flat metric on `R^d / L Z^d`, a trivial Ricci flow.
//! * [`ShrinkingSphere`]: `g(t) = a(t) g_std` on `S^d` with `a(t) = 1 − 2(d−1)t`.
//!
//! On the sphere the Levi-Civita connection of `g(t)` is that of `g_std` for
//! every `t`, minimizing curves run along great circles, and the
//! reparametrization minimizing `½∫ a(t) u̇² dt` has `a(t) u̇` constant. This
//! gives the closed form `ℓ²/(2A) + d(d−1)A/2` with `A = ∫ dt / a(t)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{check_window, validate_point, Coords, FlowBounds, MetricFamily, ModelId, Point, TangentVec};
use crate::l0::{L0GeodesicResult, L0Solver};

/// Pairs whose great-circle distance is within this of `π` are treated as antipodal.
pub const ANTIPODAL_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct FlatTorus {
    side: f64,
    d: usize,
    horizon: f64,
}

impl FlatTorus {
    pub fn side(&self) -> f64 {
        self.side
    }

    fn wrap_coord(&self, x: f64) -> f64 {
        let w = x - self.side * (x / self.side).floor();
        if w >= self.side {
            0.0
        } else {
            w
        }
    }

    /// Minimal-image displacement, each component in `[−L/2, L/2)`.
    pub fn min_image(&self, x: &Coords, y: &Coords) -> Coords {
        let l = self.side;
        Coords::from_fn(x.len(), |i, _| {
            let delta = y[i] - x[i];
            delta - l * (delta / l + 0.5).floor()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShrinkingSphere {
    d: usize,
    horizon: f64,
}

impl ShrinkingSphere {
    /// Conformal factor `a(t) = 1 − 2(d−1)t`.
    pub fn conformal_factor(&self, t: f64) -> f64 {
        1.0 - self.shrink_rate() * t
    }

    /// `2(d−1)`, the rate at which `a` decreases.
    pub fn shrink_rate(&self) -> f64 {
        2.0 * (self.d as f64 - 1.0)
    }

    /// `Ric = λ(t) g(t)` with `λ(t) = (d−1)/a(t)`.
    pub fn einstein_constant(&self, t: f64) -> f64 {
        (self.d as f64 - 1.0) / self.conformal_factor(t)
    }

    /// `A = ∫_{t'}^{t''} dt / a(t)`.
    pub fn reduced_time(&self, t_prime: f64, t_dprime: f64) -> f64 {
        let c = self.shrink_rate();
        let a2 = self.conformal_factor(t_dprime);
        (c * (t_dprime - t_prime) / a2).ln_1p() / c
    }

    /// Great-circle angle between unit vectors, accurate near 0 and `π`.
    pub fn angle(x: &Coords, y: &Coords) -> f64 {
        let c = x.dot(y);
        let s = (y - x * c).norm();
        s.atan2(c)
    }

    /// The lexicographically smallest unit tangent at `x`, used as the
    /// deterministic direction towards the antipode.
    fn antipodal_direction(x: &Coords) -> Coords {
        let n = x.len();
        for i in 0..n {
            let mut e = Coords::zeros(n);
            e[i] = -1.0;
            let p = &e - x * x.dot(&e);
            let norm = p.norm();
            if norm > 1e-6 {
                return p / norm;
            }
        }
        unreachable!("a unit vector is parallel to at most one coordinate axis")
    }
}

impl MetricFamily for FlatTorus {
    fn model(&self) -> ModelId {
        ModelId::Torus
    }
    fn dim(&self) -> usize {
        self.d
    }
    fn ambient_dim(&self) -> usize {
        self.d
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn bounds(&self) -> FlowBounds {
        FlowBounds { k_minus: 0.0, k_plus: 0.0, c: 0.0 }
    }

    fn check_coords(&self, x: &Coords) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::NotOnManifold(format!("expected {} coordinates, got {}", self.d, x.len())));
        }
        if let Some(bad) = x.iter().find(|c| !(0.0..self.side).contains(*c)) {
            return Err(Error::NotOnManifold(format!("torus coordinate {bad} outside [0, {})", self.side)));
        }
        Ok(())
    }
    fn tangency_defect(&self, _x: &Coords, _v: &Coords) -> f64 {
        0.0
    }
    fn retract(&self, x: &Coords) -> Coords {
        x.map(|c| self.wrap_coord(c))
    }
    fn project_tangent(&self, _x: &Coords, v: &Coords) -> Coords {
        v.clone()
    }

    fn lower(&self, _t: f64, _x: &Coords, v: &Coords) -> Coords {
        v.clone()
    }
    fn raise(&self, _t: f64, _x: &Coords, w: &Coords) -> Coords {
        w.clone()
    }
    fn metric_dt(&self, _t: f64, _x: &Coords, _u: &Coords, _v: &Coords) -> f64 {
        0.0
    }

    fn scalar_curvature_raw(&self, _t: f64, _x: &Coords) -> f64 {
        0.0
    }
    fn grad_scalar_curvature_raw(&self, _t: f64, x: &Coords) -> Coords {
        Coords::zeros(x.len())
    }
    fn ricci_raw(&self, _t: f64, _x: &Coords, v: &Coords) -> Coords {
        Coords::zeros(v.len())
    }
    fn christoffel(&self, _t: f64, _x: &Coords, _u: &Coords, v: &Coords) -> Coords {
        Coords::zeros(v.len())
    }

    fn exp_raw(&self, _t: f64, x: &Coords, v: &Coords) -> Coords {
        self.retract(&(x + v))
    }
    fn log_raw(&self, _t: f64, x: &Coords, y: &Coords) -> Coords {
        self.min_image(x, y)
    }
    fn distance_raw(&self, _t: f64, x: &Coords, y: &Coords) -> f64 {
        self.min_image(x, y).norm()
    }
    fn injectivity_radius(&self, _t: f64) -> f64 {
        self.side / 2.0
    }

    fn dt_scalar_curvature(&self, _t: f64, _x: &Coords) -> f64 {
        0.0
    }
    fn laplacian_scalar_curvature(&self, _t: f64, _x: &Coords) -> f64 {
        0.0
    }
    fn ricci_norm_sq(&self, _t: f64, _x: &Coords) -> f64 {
        0.0
    }
    fn trace_dt_ricci(&self, _t: f64, _x: &Coords) -> f64 {
        0.0
    }
    fn ricci_divergence(&self, _t: f64, x: &Coords) -> Coords {
        Coords::zeros(x.len())
    }
}

impl MetricFamily for ShrinkingSphere {
    fn model(&self) -> ModelId {
        ModelId::Sphere
    }
    fn dim(&self) -> usize {
        self.d
    }
    fn ambient_dim(&self) -> usize {
        self.d + 1
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn bounds(&self) -> FlowBounds {
        FlowBounds {
            k_minus: 0.0,
            k_plus: self.einstein_constant(self.horizon),
            c: 0.0,
        }
    }

    fn check_coords(&self, x: &Coords) -> Result<()> {
        if x.len() != self.d + 1 {
            return Err(Error::NotOnManifold(format!("expected {} coordinates, got {}", self.d + 1, x.len())));
        }
        let defect = (x.norm() - 1.0).abs();
        if defect > crate::geometry::MEMBERSHIP_TOL {
            return Err(Error::NotOnManifold(format!("| |x| - 1 | = {defect:e}")));
        }
        Ok(())
    }
    fn tangency_defect(&self, x: &Coords, v: &Coords) -> f64 {
        x.dot(v).abs()
    }
    fn retract(&self, x: &Coords) -> Coords {
        x / x.norm()
    }
    fn project_tangent(&self, x: &Coords, v: &Coords) -> Coords {
        v - x * (x.dot(v) / x.norm_squared())
    }

    fn lower(&self, t: f64, _x: &Coords, v: &Coords) -> Coords {
        v * self.conformal_factor(t)
    }
    fn raise(&self, t: f64, x: &Coords, w: &Coords) -> Coords {
        self.project_tangent(x, w) / self.conformal_factor(t)
    }
    fn metric_dt(&self, _t: f64, _x: &Coords, u: &Coords, v: &Coords) -> f64 {
        -self.shrink_rate() * u.dot(v)
    }

    fn scalar_curvature_raw(&self, t: f64, _x: &Coords) -> f64 {
        let d = self.d as f64;
        d * (d - 1.0) / self.conformal_factor(t)
    }
    fn grad_scalar_curvature_raw(&self, _t: f64, x: &Coords) -> Coords {
        Coords::zeros(x.len())
    }
    fn ricci_raw(&self, t: f64, _x: &Coords, v: &Coords) -> Coords {
        v * self.einstein_constant(t)
    }
    fn christoffel(&self, _t: f64, x: &Coords, u: &Coords, v: &Coords) -> Coords {
        x * u.dot(v)
    }

    fn exp_raw(&self, _t: f64, x: &Coords, v: &Coords) -> Coords {
        let theta = v.norm();
        // sin(θ)/θ, with its Taylor expansion near 0
        let sinc = if theta < 1e-4 {
            1.0 - theta * theta / 6.0
        } else {
            theta.sin() / theta
        };
        let y = x * theta.cos() + v * sinc;
        &y / y.norm()
    }
    fn log_raw(&self, _t: f64, x: &Coords, y: &Coords) -> Coords {
        let c = x.dot(y);
        let w = y - x * c;
        let s = w.norm();
        let angle = s.atan2(c);
        if PI - angle < ANTIPODAL_TOL {
            return Self::antipodal_direction(x) * angle;
        }
        if s < 1e-300 {
            return Coords::zeros(x.len());
        }
        w * (angle / s)
    }
    fn distance_raw(&self, t: f64, x: &Coords, y: &Coords) -> f64 {
        self.conformal_factor(t).sqrt() * Self::angle(x, y)
    }
    fn injectivity_radius(&self, t: f64) -> f64 {
        PI * self.conformal_factor(t).sqrt()
    }

    fn dt_scalar_curvature(&self, t: f64, _x: &Coords) -> f64 {
        let d = self.d as f64;
        let a = self.conformal_factor(t);
        d * (d - 1.0) * self.shrink_rate() / (a * a)
    }
    fn laplacian_scalar_curvature(&self, _t: f64, _x: &Coords) -> f64 {
        0.0
    }
    fn ricci_norm_sq(&self, t: f64, _x: &Coords) -> f64 {
        let lambda = self.einstein_constant(t);
        self.d as f64 * lambda * lambda
    }
    fn trace_dt_ricci(&self, _t: f64, _x: &Coords) -> f64 {
        // Ric = (d−1) g_std does not depend on t
        0.0
    }
    fn ricci_divergence(&self, _t: f64, x: &Coords) -> Coords {
        Coords::zeros(x.len())
    }
}

/// Either model, selected at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum Flow {
    Torus(FlatTorus),
    Sphere(ShrinkingSphere),
}

macro_rules! delegate {
    ($self:ident, $f:ident $(, $arg:expr)*) => {
        match $self {
            Flow::Torus(m) => m.$f($($arg),*),
            Flow::Sphere(m) => m.$f($($arg),*),
        }
    };
}

impl MetricFamily for Flow {
    fn model(&self) -> ModelId {
        delegate!(self, model)
    }
    fn dim(&self) -> usize {
        delegate!(self, dim)
    }
    fn ambient_dim(&self) -> usize {
        delegate!(self, ambient_dim)
    }
    fn horizon(&self) -> f64 {
        delegate!(self, horizon)
    }
    fn bounds(&self) -> FlowBounds {
        delegate!(self, bounds)
    }
    fn check_coords(&self, x: &Coords) -> Result<()> {
        delegate!(self, check_coords, x)
    }
    fn tangency_defect(&self, x: &Coords, v: &Coords) -> f64 {
        delegate!(self, tangency_defect, x, v)
    }
    fn retract(&self, x: &Coords) -> Coords {
        delegate!(self, retract, x)
    }
    fn project_tangent(&self, x: &Coords, v: &Coords) -> Coords {
        delegate!(self, project_tangent, x, v)
    }
    fn lower(&self, t: f64, x: &Coords, v: &Coords) -> Coords {
        delegate!(self, lower, t, x, v)
    }
    fn raise(&self, t: f64, x: &Coords, w: &Coords) -> Coords {
        delegate!(self, raise, t, x, w)
    }
    fn metric_dt(&self, t: f64, x: &Coords, u: &Coords, v: &Coords) -> f64 {
        delegate!(self, metric_dt, t, x, u, v)
    }
    fn scalar_curvature_raw(&self, t: f64, x: &Coords) -> f64 {
        delegate!(self, scalar_curvature_raw, t, x)
    }
    fn grad_scalar_curvature_raw(&self, t: f64, x: &Coords) -> Coords {
        delegate!(self, grad_scalar_curvature_raw, t, x)
    }
    fn ricci_raw(&self, t: f64, x: &Coords, v: &Coords) -> Coords {
        delegate!(self, ricci_raw, t, x, v)
    }
    fn christoffel(&self, t: f64, x: &Coords, u: &Coords, v: &Coords) -> Coords {
        delegate!(self, christoffel, t, x, u, v)
    }
    fn exp_raw(&self, t: f64, x: &Coords, v: &Coords) -> Coords {
        delegate!(self, exp_raw, t, x, v)
    }
    fn log_raw(&self, t: f64, x: &Coords, y: &Coords) -> Coords {
        delegate!(self, log_raw, t, x, y)
    }
    fn distance_raw(&self, t: f64, x: &Coords, y: &Coords) -> f64 {
        delegate!(self, distance_raw, t, x, y)
    }
    fn injectivity_radius(&self, t: f64) -> f64 {
        delegate!(self, injectivity_radius, t)
    }
    fn dt_scalar_curvature(&self, t: f64, x: &Coords) -> f64 {
        delegate!(self, dt_scalar_curvature, t, x)
    }
    fn laplacian_scalar_curvature(&self, t: f64, x: &Coords) -> f64 {
        delegate!(self, laplacian_scalar_curvature, t, x)
    }
    fn ricci_norm_sq(&self, t: f64, x: &Coords) -> f64 {
        delegate!(self, ricci_norm_sq, t, x)
    }
    fn trace_dt_ricci(&self, t: f64, x: &Coords) -> f64 {
        delegate!(self, trace_dt_ricci, t, x)
    }
    fn ricci_divergence(&self, t: f64, x: &Coords) -> Coords {
        delegate!(self, ricci_divergence, t, x)
    }
}

/// Parameters naming a model flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub model: ModelId,
    pub d: usize,
    /// Torus side length `L`; ignored for the sphere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<f64>,
    /// Flow horizon `T`.
    pub horizon: f64,
}

pub fn make_flow(spec: &FlowSpec) -> Result<Flow> {
    if spec.d < 2 {
        return Err(Error::InvalidFlow(format!("dimension must be at least 2, got {}", spec.d)));
    }
    if !(spec.horizon > 0.0 && spec.horizon.is_finite()) {
        return Err(Error::InvalidFlow(format!("horizon must be positive, got {}", spec.horizon)));
    }
    match spec.model {
        ModelId::Torus => {
            let side = spec.side.unwrap_or(1.0);
            if !(side > 0.0 && side.is_finite()) {
                return Err(Error::InvalidFlow(format!("torus side must be positive, got {side}")));
            }
            Ok(Flow::Torus(FlatTorus { side, d: spec.d, horizon: spec.horizon }))
        }
        ModelId::Sphere => {
            let sphere = ShrinkingSphere { d: spec.d, horizon: spec.horizon };
            if sphere.conformal_factor(spec.horizon) <= 0.0 {
                return Err(Error::InvalidFlow(format!(
                    "sphere of dimension {} collapses at t = {}; horizon {} is too long",
                    spec.d,
                    1.0 / sphere.shrink_rate(),
                    spec.horizon
                )));
            }
            Ok(Flow::Sphere(sphere))
        }
    }
}

/// Exact L0-distance on the flat torus: `ρ(p, q)² / (2(t'' − t'))`.
pub fn torus_l0_distance(side: f64, d: usize, t_prime: f64, t_dprime: f64, p: &Point, q: &Point) -> Result<f64> {
    if t_prime >= t_dprime {
        return Err(Error::InvalidWindow { t_prime, t_dprime });
    }
    let torus = FlatTorus { side, d, horizon: t_dprime.max(1.0) };
    validate_point(&torus, p)?;
    validate_point(&torus, q)?;
    let rho = torus.distance_raw(t_prime, p.coords(), q.coords());
    Ok(rho * rho / (2.0 * (t_dprime - t_prime)))
}

/// Conformal-reduction oracle for the shrinking sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereL0Oracle {
    pub d: usize,
    pub t_prime: f64,
    pub t_dprime: f64,
    /// `∫_{t'}^{t''} dt / (1 − 2(d−1)t)`.
    pub reduced_time: f64,
}

impl SphereL0Oracle {
    pub fn new(d: usize, t_prime: f64, t_dprime: f64) -> Result<Self> {
        if t_prime >= t_dprime {
            return Err(Error::InvalidWindow { t_prime, t_dprime });
        }
        if d < 2 {
            return Err(Error::InvalidFlow(format!("dimension must be at least 2, got {d}")));
        }
        let sphere = ShrinkingSphere { d, horizon: t_dprime };
        if t_prime < 0.0 || sphere.conformal_factor(t_dprime) <= 0.0 {
            return Err(Error::InvalidFlow(format!("window [{t_prime}, {t_dprime}] outside the sphere flow")));
        }
        Ok(Self { d, t_prime, t_dprime, reduced_time: sphere.reduced_time(t_prime, t_dprime) })
    }

    /// L0 value at great-circle angle `ell`.
    pub fn value(&self, ell: f64) -> f64 {
        let a = self.reduced_time;
        let d = self.d as f64;
        ell * ell / (2.0 * a) + d * (d - 1.0) * a / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereL0 {
    pub value: f64,
    /// Set for antipodal pairs, whose minimizer is not unique.
    pub multiplicity_flag: bool,
}

/// Exact L0-distance on the shrinking sphere.
pub fn sphere_l0_distance(d: usize, t_prime: f64, t_dprime: f64, p: &Point, q: &Point) -> Result<SphereL0> {
    let oracle = SphereL0Oracle::new(d, t_prime, t_dprime)?;
    let sphere = ShrinkingSphere { d, horizon: t_dprime };
    validate_point(&sphere, p)?;
    validate_point(&sphere, q)?;
    let ell = ShrinkingSphere::angle(p.coords(), q.coords());
    Ok(SphereL0 { value: oracle.value(ell), multiplicity_flag: PI - ell < ANTIPODAL_TOL })
}

/// L0 solver backed by the closed forms of the model flows.
#[derive(Clone, Copy, Debug, Default)]
pub struct ClosedFormSolver;

impl ClosedFormSolver {
    fn solve_torus(torus: &FlatTorus, t1: f64, t2: f64, p: &Point, q: &Point) -> L0GeodesicResult {
        let dt = t2 - t1;
        let delta = torus.min_image(p.coords(), q.coords());
        let half = torus.side / 2.0;
        let multiplicity_flag = delta.iter().any(|c| (c.abs() - half).abs() <= 1e-12 * torus.side);
        let v = delta / dt;
        let action = v.norm_squared() * dt / 2.0;
        L0GeodesicResult {
            t_start: t1,
            t_end: t2,
            start: p.clone(),
            end: q.clone(),
            v0: TangentVec::new_unchecked(p.clone(), v.clone()),
            v_end: TangentVec::new_unchecked(q.clone(), v),
            action,
            direct_action: None,
            multiplicity_flag,
            residual: 0.0,
            converged: true,
            grid: 0,
            curve: None,
        }
    }

    fn solve_sphere(sphere: &ShrinkingSphere, t1: f64, t2: f64, p: &Point, q: &Point) -> L0GeodesicResult {
        let x = p.coords();
        let y = q.coords();
        let ell = ShrinkingSphere::angle(x, y);
        let multiplicity_flag = PI - ell < ANTIPODAL_TOL;
        let dir = if multiplicity_flag {
            ShrinkingSphere::antipodal_direction(x)
        } else {
            let w = y - x * x.dot(y);
            let s = w.norm();
            if s < 1e-300 {
                Coords::zeros(x.len())
            } else {
                w / s
            }
        };
        let big_a = sphere.reduced_time(t1, t2);
        // std-arclength speed of the minimizer is ℓ / (A a(t))
        let speed1 = ell / (big_a * sphere.conformal_factor(t1));
        let speed2 = ell / (big_a * sphere.conformal_factor(t2));
        let end_dir = x * (-ell.sin()) + &dir * ell.cos();
        let d = sphere.d as f64;
        L0GeodesicResult {
            t_start: t1,
            t_end: t2,
            start: p.clone(),
            end: q.clone(),
            v0: TangentVec::new_unchecked(p.clone(), &dir * speed1),
            v_end: TangentVec::new_unchecked(q.clone(), end_dir * speed2),
            action: ell * ell / (2.0 * big_a) + d * (d - 1.0) * big_a / 2.0,
            direct_action: None,
            multiplicity_flag,
            residual: 0.0,
            converged: true,
            grid: 0,
            curve: None,
        }
    }

    /// Classical parallel transport along the great circle, times
    /// `exp(∫ λ dt) = sqrt(a(t') / a(t''))`.
    fn transport_sphere(sphere: &ShrinkingSphere, geo: &L0GeodesicResult, v: &Coords) -> Coords {
        let x = geo.start.coords();
        let y = geo.end.coords();
        let scale = (sphere.conformal_factor(geo.t_start) / sphere.conformal_factor(geo.t_end)).sqrt();
        let speed = geo.v0.components().norm();
        if speed == 0.0 {
            return sphere.project_tangent(y, &(v * scale));
        }
        let dir = geo.v0.components() / speed;
        let ell = ShrinkingSphere::angle(x, y);
        let along = dir.dot(v);
        let perp = v - &dir * along;
        let moved = perp + (x * (-ell.sin()) + &dir * ell.cos()) * along;
        sphere.project_tangent(y, &(moved * scale))
    }
}

impl L0Solver<Flow> for ClosedFormSolver {
    fn solve(
        &self,
        fam: &Flow,
        t_prime: f64,
        t_dprime: f64,
        p: &Point,
        q: &Point,
        _warm: Option<&TangentVec>,
    ) -> Result<L0GeodesicResult> {
        check_window(fam, t_prime, t_dprime)?;
        validate_point(fam, p)?;
        validate_point(fam, q)?;
        Ok(match fam {
            Flow::Torus(m) => Self::solve_torus(m, t_prime, t_dprime, p, q),
            Flow::Sphere(m) => Self::solve_sphere(m, t_prime, t_dprime, p, q),
        })
    }

    fn transport(&self, fam: &Flow, geo: &L0GeodesicResult, v: &TangentVec) -> Result<TangentVec> {
        if !v.base().approx_eq(&geo.start) {
            return Err(Error::BaseMismatch);
        }
        if !geo.converged {
            return Err(Error::Unconverged);
        }
        let out = match fam {
            Flow::Torus(_) => v.components().clone(),
            Flow::Sphere(m) => Self::transport_sphere(m, geo, v.components()),
        };
        Ok(TangentVec::new_unchecked(geo.end.clone(), out))
    }
}
