//! Coordinate-level manifold primitives behind a time-dependent metric interface.
//!
//! Every model stores points in a fixed coordinate representation (flat torus:
//! coordinates mod `L`; sphere: unit vectors of the ambient space). The
//! [`MetricFamily`] trait exposes raw, unchecked coordinate operations that the
//! integrators call in their inner loops; the free functions in this module are
//! the checked public surface.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Coords = DVector<f64>;

/// Tolerance on `|x| = 1` (sphere) and on tangency defects.
pub const MEMBERSHIP_TOL: f64 = 1e-12;

/// Minimum residual norm for a projected ambient direction to enter a frame.
pub const FRAME_DEGENERACY_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelId {
    Torus,
    Sphere,
}

impl std::fmt::Display for ModelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelId::Torus => f.write_str("torus"),
            ModelId::Sphere => f.write_str("sphere"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    model: ModelId,
    coords: Coords,
}

impl Point {
    /// Builds a point without checking membership; see [`MetricFamily::point`].
    pub fn new_unchecked(model: ModelId, coords: Coords) -> Self {
        Self { model, coords }
    }

    pub fn model(&self) -> ModelId {
        self.model
    }

    pub fn coords(&self) -> &Coords {
        &self.coords
    }

    pub fn into_coords(self) -> Coords {
        self.coords
    }

    /// Same point up to [`MEMBERSHIP_TOL`] in coordinates.
    pub fn approx_eq(&self, other: &Point) -> bool {
        self.model == other.model
            && self.coords.len() == other.coords.len()
            && (&self.coords - &other.coords).amax() <= MEMBERSHIP_TOL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TangentVec {
    base: Point,
    components: Coords,
}

impl TangentVec {
    pub fn new_unchecked(base: Point, components: Coords) -> Self {
        Self { base, components }
    }

    pub fn zero(base: Point) -> Self {
        let n = base.coords.len();
        Self {
            base,
            components: Coords::zeros(n),
        }
    }

    pub fn base(&self) -> &Point {
        &self.base
    }

    pub fn components(&self) -> &Coords {
        &self.components
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            base: self.base.clone(),
            components: &self.components * factor,
        }
    }

    /// `self + factor * other`, failing if the base points differ.
    pub fn axpy(&self, factor: f64, other: &TangentVec) -> Result<Self> {
        if !self.base.approx_eq(&other.base) {
            return Err(Error::BaseMismatch);
        }
        Ok(Self {
            base: self.base.clone(),
            components: &self.components + &other.components * factor,
        })
    }
}

/// Curvature bounds of a flow: `-K₋ g ≤ Ric ≤ K₊ g`, `|∇R|² ≤ C`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowBounds {
    pub k_minus: f64,
    pub k_plus: f64,
    pub c: f64,
}

/// A time-dependent metric `g(t)`, `t ∈ [0, T]`, solving the Ricci flow.
///
/// The `raw` methods take coordinates and perform no validation. Tangent
/// vectors are given by their components in the model's coordinate
/// representation; `lower` applies `g(t)` as a linear map, so that
/// `⟨u, v⟩_{g(t)} = u · lower(t, x, v)`.
pub trait MetricFamily: Send + Sync {
    fn model(&self) -> ModelId;
    /// Intrinsic dimension `d`.
    fn dim(&self) -> usize;
    /// Length of the coordinate vectors.
    fn ambient_dim(&self) -> usize;
    fn horizon(&self) -> f64;
    fn bounds(&self) -> FlowBounds;

    fn check_coords(&self, x: &Coords) -> Result<()>;
    fn tangency_defect(&self, x: &Coords, v: &Coords) -> f64;
    /// Maps coordinates back onto the manifold.
    fn retract(&self, x: &Coords) -> Coords;
    fn project_tangent(&self, x: &Coords, v: &Coords) -> Coords;

    fn lower(&self, t: f64, x: &Coords, v: &Coords) -> Coords;
    fn raise(&self, t: f64, x: &Coords, w: &Coords) -> Coords;
    /// `(∂g/∂t)(u, v)`.
    fn metric_dt(&self, t: f64, x: &Coords, u: &Coords, v: &Coords) -> f64;

    fn scalar_curvature_raw(&self, t: f64, x: &Coords) -> f64;
    fn grad_scalar_curvature_raw(&self, t: f64, x: &Coords) -> Coords;
    /// `Ric_{g(t)}(v, ·)` raised with `g(t)`.
    fn ricci_raw(&self, t: f64, x: &Coords, v: &Coords) -> Coords;
    /// Coordinate correction so that `∇_u V = dV/ds + christoffel(u, V)`.
    fn christoffel(&self, t: f64, x: &Coords, u: &Coords, v: &Coords) -> Coords;

    fn exp_raw(&self, t: f64, x: &Coords, v: &Coords) -> Coords;
    /// Initial velocity of a minimizing `g(t)`-geodesic from `x` to `y` at parameter 1.
    fn log_raw(&self, t: f64, x: &Coords, y: &Coords) -> Coords;
    fn distance_raw(&self, t: f64, x: &Coords, y: &Coords) -> f64;
    fn injectivity_radius(&self, t: f64) -> f64;

    fn dt_scalar_curvature(&self, t: f64, x: &Coords) -> f64;
    fn laplacian_scalar_curvature(&self, t: f64, x: &Coords) -> f64;
    /// `|Ric|²_{g(t)}`.
    fn ricci_norm_sq(&self, t: f64, x: &Coords) -> f64;
    /// `tr_{g(t)} ∂Ric/∂t`.
    fn trace_dt_ricci(&self, t: f64, x: &Coords) -> f64;
    /// `tr ∇Ric`, raised.
    fn ricci_divergence(&self, t: f64, x: &Coords) -> Coords;

    fn inner(&self, t: f64, x: &Coords, u: &Coords, v: &Coords) -> f64 {
        u.dot(&self.lower(t, x, v))
    }

    fn norm(&self, t: f64, x: &Coords, v: &Coords) -> f64 {
        self.inner(t, x, v, v).max(0.0).sqrt()
    }

    /// Deterministic `g(t)`-orthonormal frame: Gram–Schmidt of the projected
    /// ambient basis in index order, skipping near-degenerate directions.
    fn frame_raw(&self, t: f64, x: &Coords) -> Vec<Coords> {
        let n = self.ambient_dim();
        let d = self.dim();
        let mut out: Vec<Coords> = Vec::with_capacity(d);
        for i in 0..n {
            if out.len() == d {
                break;
            }
            let mut e = self.project_tangent(x, &Coords::from_fn(n, |j, _| (i == j) as u8 as f64));
            // two passes keep the frame orthonormal to machine precision
            for _ in 0..2 {
                for f in &out {
                    let c = self.inner(t, x, f, &e);
                    e -= f * c;
                }
            }
            if e.norm() < FRAME_DEGENERACY_TOL {
                continue;
            }
            let g_norm = self.norm(t, x, &e);
            out.push(e / g_norm);
        }
        out
    }

    fn point(&self, coords: Vec<f64>) -> Result<Point> {
        let c = Coords::from_vec(coords);
        self.check_coords(&c)?;
        Ok(Point::new_unchecked(self.model(), c))
    }

    /// Retracts arbitrary coordinates onto the manifold.
    fn point_projected(&self, coords: &Coords) -> Point {
        Point::new_unchecked(self.model(), self.retract(coords))
    }

    fn tangent(&self, base: &Point, components: Vec<f64>) -> Result<TangentVec> {
        let v = TangentVec::new_unchecked(base.clone(), Coords::from_vec(components));
        validate_tangent(self, &v)?;
        Ok(v)
    }

    /// Projects arbitrary components onto the tangent space at `base`.
    fn tangent_projected(&self, base: &Point, components: &Coords) -> TangentVec {
        TangentVec::new_unchecked(base.clone(), self.project_tangent(base.coords(), components))
    }
}

pub fn check_time<F: MetricFamily + ?Sized>(fam: &F, t: f64) -> Result<()> {
    let horizon = fam.horizon();
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::TimeOutOfRange { t, horizon });
    }
    Ok(())
}

pub fn check_window<F: MetricFamily + ?Sized>(fam: &F, t_prime: f64, t_dprime: f64) -> Result<()> {
    check_time(fam, t_prime)?;
    check_time(fam, t_dprime)?;
    if t_prime >= t_dprime {
        return Err(Error::InvalidWindow { t_prime, t_dprime });
    }
    Ok(())
}

pub fn validate_point<F: MetricFamily + ?Sized>(fam: &F, p: &Point) -> Result<()> {
    if p.model() != fam.model() {
        return Err(Error::NotOnManifold(format!(
            "point belongs to the {} model, flow is {}",
            p.model(),
            fam.model()
        )));
    }
    if p.coords().len() != fam.ambient_dim() {
        return Err(Error::NotOnManifold(format!(
            "expected {} coordinates, got {}",
            fam.ambient_dim(),
            p.coords().len()
        )));
    }
    fam.check_coords(p.coords())
}

pub fn validate_tangent<F: MetricFamily + ?Sized>(fam: &F, v: &TangentVec) -> Result<()> {
    validate_point(fam, v.base())?;
    if v.components().len() != fam.ambient_dim() {
        return Err(Error::InvalidInput(format!(
            "expected {} tangent components, got {}",
            fam.ambient_dim(),
            v.components().len()
        )));
    }
    let defect = fam.tangency_defect(v.base().coords(), v.components());
    if defect > MEMBERSHIP_TOL * v.components().norm().max(1.0) {
        return Err(Error::NotTangent(defect));
    }
    Ok(())
}

/// `⟨u, v⟩_{g(t)}`.
pub fn metric_inner<F: MetricFamily + ?Sized>(
    fam: &F,
    t: f64,
    u: &TangentVec,
    v: &TangentVec,
) -> Result<f64> {
    check_time(fam, t)?;
    if !u.base().approx_eq(v.base()) {
        return Err(Error::BaseMismatch);
    }
    validate_tangent(fam, u)?;
    validate_tangent(fam, v)?;
    Ok(fam.inner(t, u.base().coords(), u.components(), v.components()))
}

pub fn metric_norm<F: MetricFamily + ?Sized>(fam: &F, t: f64, v: &TangentVec) -> Result<f64> {
    Ok(metric_inner(fam, t, v, v)?.max(0.0).sqrt())
}

pub fn scalar_curvature<F: MetricFamily + ?Sized>(fam: &F, t: f64, p: &Point) -> Result<f64> {
    check_time(fam, t)?;
    validate_point(fam, p)?;
    Ok(fam.scalar_curvature_raw(t, p.coords()))
}

pub fn grad_scalar_curvature<F: MetricFamily + ?Sized>(
    fam: &F,
    t: f64,
    p: &Point,
) -> Result<TangentVec> {
    check_time(fam, t)?;
    validate_point(fam, p)?;
    Ok(TangentVec::new_unchecked(
        p.clone(),
        fam.grad_scalar_curvature_raw(t, p.coords()),
    ))
}

/// `Ric_{g(t)}(v, ·)^♯`.
pub fn ricci<F: MetricFamily + ?Sized>(fam: &F, t: f64, v: &TangentVec) -> Result<TangentVec> {
    check_time(fam, t)?;
    validate_tangent(fam, v)?;
    Ok(TangentVec::new_unchecked(
        v.base().clone(),
        fam.ricci_raw(t, v.base().coords(), v.components()),
    ))
}

/// Endpoint at parameter 1 of the `g(t)`-geodesic with initial velocity `v`.
pub fn exp_map<F: MetricFamily + ?Sized>(fam: &F, t: f64, v: &TangentVec) -> Result<Point> {
    check_time(fam, t)?;
    validate_tangent(fam, v)?;
    Ok(Point::new_unchecked(
        fam.model(),
        fam.exp_raw(t, v.base().coords(), v.components()),
    ))
}

pub fn log_map<F: MetricFamily + ?Sized>(fam: &F, t: f64, p: &Point, q: &Point) -> Result<TangentVec> {
    check_time(fam, t)?;
    validate_point(fam, p)?;
    validate_point(fam, q)?;
    Ok(TangentVec::new_unchecked(
        p.clone(),
        fam.log_raw(t, p.coords(), q.coords()),
    ))
}

/// Riemannian distance `ρ_{g(t)}(p, q)`.
pub fn dist<F: MetricFamily + ?Sized>(fam: &F, t: f64, p: &Point, q: &Point) -> Result<f64> {
    check_time(fam, t)?;
    validate_point(fam, p)?;
    validate_point(fam, q)?;
    Ok(fam.distance_raw(t, p.coords(), q.coords()))
}

/// The deterministic orthonormal frame `σ(t, p)` of `(T_p M, g(t))`.
pub fn frame<F: MetricFamily + ?Sized>(fam: &F, t: f64, p: &Point) -> Result<Vec<TangentVec>> {
    check_time(fam, t)?;
    validate_point(fam, p)?;
    Ok(fam
        .frame_raw(t, p.coords())
        .into_iter()
        .map(|e| TangentVec::new_unchecked(p.clone(), e))
        .collect())
}

/// Expresses `v` in the frame `σ(t, base)`.
pub fn frame_coefficients<F: MetricFamily + ?Sized>(fam: &F, t: f64, v: &TangentVec) -> Vec<f64> {
    let x = v.base().coords();
    fam.frame_raw(t, x)
        .iter()
        .map(|e| fam.inner(t, x, e, v.components()))
        .collect()
}
