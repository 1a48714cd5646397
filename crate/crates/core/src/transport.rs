//! Space-time parallel transport `∇_{γ̇}V = Ric(V, ·)^♯` along a solved L0-geodesic.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{validate_tangent, MetricFamily, TangentVec};
use crate::l0::{integrate_geodesic, L0GeodesicResult, L0Solver, DEFAULT_GRID};

fn check_geodesic(geo: &L0GeodesicResult) -> Result<()> {
    if !geo.converged {
        return Err(Error::Unconverged);
    }
    Ok(())
}

/// Transports several vectors at once by integrating them alongside the geodesic.
pub fn spacetime_transport_many<F: MetricFamily + ?Sized>(
    fam: &F,
    geo: &L0GeodesicResult,
    vs: &[TangentVec],
) -> Result<Vec<TangentVec>> {
    check_geodesic(geo)?;
    for v in vs {
        if !v.base().approx_eq(&geo.start) {
            return Err(Error::BaseMismatch);
        }
        validate_tangent(fam, v)?;
    }
    let steps = if geo.grid == 0 { DEFAULT_GRID } else { geo.grid };
    let carried: Vec<_> = vs.iter().map(|v| v.components().clone()).collect();
    let run = integrate_geodesic(
        fam,
        geo.t_start,
        geo.t_end,
        geo.start.coords(),
        geo.v0.components(),
        steps,
        &carried,
        false,
    );
    Ok(run
        .carried
        .into_iter()
        .map(|w| TangentVec::new_unchecked(geo.end.clone(), fam.project_tangent(geo.end.coords(), &w)))
        .collect())
}

/// `P v` for `v ∈ T_{m'}M`, by RK4 integration of the transport equation.
pub fn spacetime_transport<F: MetricFamily + ?Sized>(
    fam: &F,
    geo: &L0GeodesicResult,
    v: &TangentVec,
) -> Result<TangentVec> {
    Ok(spacetime_transport_many(fam, geo, std::slice::from_ref(v))?.remove(0))
}

/// `P` written in the deterministic orthonormal frames at both ends.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransportMap {
    pub t_source: f64,
    pub source: Vec<f64>,
    pub t_target: f64,
    pub target: Vec<f64>,
    #[serde(serialize_with = "serialize_rows")]
    pub matrix: DMatrix<f64>,
}

fn serialize_rows<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    serde::Serialize::serialize(&rows, s)
}

impl TransportMap {
    /// `‖MᵀM − I‖∞`.
    pub fn orthogonality_defect(&self) -> f64 {
        let n = self.matrix.ncols();
        (self.matrix.transpose() * &self.matrix - DMatrix::identity(n, n)).amax()
    }

    pub fn apply(&self, coeffs: &[f64]) -> Vec<f64> {
        let v = nalgebra::DVector::from_column_slice(coeffs);
        (&self.matrix * v).iter().copied().collect()
    }
}

fn assemble_map<F: MetricFamily + ?Sized>(fam: &F, geo: &L0GeodesicResult, images: &[TangentVec]) -> TransportMap {
    let target_frame = fam.frame_raw(geo.t_end, geo.end.coords());
    let d = images.len();
    let mut matrix = DMatrix::zeros(target_frame.len(), d);
    for (j, img) in images.iter().enumerate() {
        for (i, f) in target_frame.iter().enumerate() {
            matrix[(i, j)] = fam.inner(geo.t_end, geo.end.coords(), f, img.components());
        }
    }
    TransportMap {
        t_source: geo.t_start,
        source: geo.start.coords().iter().copied().collect(),
        t_target: geo.t_end,
        target: geo.end.coords().iter().copied().collect(),
        matrix,
    }
}

fn source_frame<F: MetricFamily + ?Sized>(fam: &F, geo: &L0GeodesicResult) -> Vec<TangentVec> {
    fam.frame_raw(geo.t_start, geo.start.coords())
        .into_iter()
        .map(|e| TangentVec::new_unchecked(geo.start.clone(), e))
        .collect()
}

/// Columns are images of the frame at `m'` expressed in the frame at `m''`.
pub fn transport_matrix<F: MetricFamily + ?Sized>(fam: &F, geo: &L0GeodesicResult) -> Result<TransportMap> {
    let images = spacetime_transport_many(fam, geo, &source_frame(fam, geo))?;
    Ok(assemble_map(fam, geo, &images))
}

/// [`transport_matrix`] using a solver's own transport.
pub fn transport_matrix_with<F, S>(fam: &F, solver: &S, geo: &L0GeodesicResult) -> Result<TransportMap>
where
    F: MetricFamily + ?Sized,
    S: L0Solver<F>,
{
    check_geodesic(geo)?;
    let images = source_frame(fam, geo)
        .iter()
        .map(|e| solver.transport(fam, geo, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_map(fam, geo, &images))
}

/// `|V(t)|_{g(t)}` at every grid time, for a single transported vector.
pub fn transported_norms<F: MetricFamily + ?Sized>(
    fam: &F,
    geo: &L0GeodesicResult,
    v: &TangentVec,
) -> Result<Vec<f64>> {
    check_geodesic(geo)?;
    if !v.base().approx_eq(&geo.start) {
        return Err(Error::BaseMismatch);
    }
    let steps = if geo.grid == 0 { DEFAULT_GRID } else { geo.grid };
    let h = (geo.t_end - geo.t_start) / steps as f64;
    let mut x = geo.start.coords().clone();
    let mut vel = geo.v0.components().clone();
    let mut w = v.components().clone();
    let mut norms = vec![fam.norm(geo.t_start, &x, &w)];
    for k in 0..steps {
        let t = geo.t_start + k as f64 * h;
        let run = integrate_geodesic(fam, t, t + h, &x, &vel, 1, std::slice::from_ref(&w), false);
        x = run.x;
        vel = run.v;
        w = run.carried.into_iter().next().expect("one carried vector");
        norms.push(fam.norm(t + h, &x, &w));
    }
    Ok(norms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ModelId;
    use crate::l0::{l0_distance, SolveOptions};
    use crate::models::{make_flow, ClosedFormSolver, FlowSpec};

    #[test]
    fn torus_transport_is_identity() {
        let fam = make_flow(&FlowSpec { model: ModelId::Torus, d: 3, side: Some(1.0), horizon: 1.0 }).unwrap();
        let p = fam.point(vec![0.1, 0.2, 0.3]).unwrap();
        let q = fam.point(vec![0.4, 0.9, 0.3]).unwrap();
        let geo = l0_distance(&fam, 0.1, 0.6, &p, &q, &SolveOptions::default()).unwrap();
        let v = fam.tangent(&p, vec![0.3, -1.0, 2.0]).unwrap();
        let pv = spacetime_transport(&fam, &geo, &v).unwrap();
        assert_eq!(pv.components(), v.components());
        let m = transport_matrix(&fam, &geo).unwrap();
        assert_eq!(m.matrix, DMatrix::identity(3, 3));
    }

    #[test]
    fn sphere_numeric_transport_matches_closed_form() {
        let fam = make_flow(&FlowSpec { model: ModelId::Sphere, d: 2, side: None, horizon: 0.2 }).unwrap();
        let p = fam.point(vec![0.0, 0.0, 1.0]).unwrap();
        let q = fam.point_projected(&nalgebra::DVector::from_vec(vec![0.6, 0.3, 0.5]));
        let geo = l0_distance(&fam, 0.03, 0.13, &p, &q, &SolveOptions::default()).unwrap();
        for comps in [vec![1.0, 0.0, 0.0], vec![0.2, -0.7, 0.0]] {
            let v = fam.tangent(&p, comps).unwrap();
            let numeric = spacetime_transport(&fam, &geo, &v).unwrap();
            let exact = ClosedFormSolver.transport(&fam, &geo, &v).unwrap();
            assert!((numeric.components() - exact.components()).amax() < 1e-7);
            let n0 = fam.norm(0.03, p.coords(), v.components());
            let n1 = fam.norm(0.13, q.coords(), numeric.components());
            assert!((n0 - n1).abs() < 1e-8);
        }
        assert!(transport_matrix(&fam, &geo).unwrap().orthogonality_defect() < 1e-8);
    }

    #[test]
    fn transport_checks_base_point() {
        let fam = make_flow(&FlowSpec { model: ModelId::Torus, d: 2, side: Some(1.0), horizon: 1.0 }).unwrap();
        let p = fam.point(vec![0.1, 0.2]).unwrap();
        let q = fam.point(vec![0.4, 0.9]).unwrap();
        let geo = l0_distance(&fam, 0.1, 0.6, &p, &q, &SolveOptions::default()).unwrap();
        let v = fam.tangent(&q, vec![1.0, 0.0]).unwrap();
        assert!(matches!(spacetime_transport(&fam, &geo, &v), Err(Error::BaseMismatch)));
    }
}
