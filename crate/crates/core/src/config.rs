//! Experiment configuration, read from and written to JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coupling::TimeSchedule;
use crate::error::{Error, Result};
use crate::geometry::MetricFamily;
use crate::l0::SolveOptions;
use crate::models::{make_flow, FlowSpec};
use crate::verify::PhiSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Distance,
    DistanceTable,
    Geodesic,
    TransportCheck,
    Couple,
    VerifySupermartingale,
    VerifyMonotonicity,
    Invariants,
}

impl ExperimentKind {
    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            ExperimentKind::Couple
                | ExperimentKind::VerifySupermartingale
                | ExperimentKind::VerifyMonotonicity
                | ExperimentKind::Invariants
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Numeric for single solves, closed form for ensembles and cost matrices.
    #[default]
    Auto,
    Numeric,
    ClosedForm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub kind: SolverKind,
    pub grid: usize,
    pub starts: usize,
    pub tol_residual: f64,
    pub tol_action: f64,
    pub tol_sep: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = SolveOptions::default();
        Self {
            kind: SolverKind::Auto,
            grid: o.grid,
            starts: o.starts,
            tol_residual: o.tol_residual,
            tol_action: o.tol_action,
            tol_sep: o.tol_sep,
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> SolveOptions {
        SolveOptions {
            grid: self.grid,
            starts: self.starts,
            tol_residual: self.tol_residual,
            tol_action: self.tol_action,
            tol_sep: self.tol_sep,
            ..SolveOptions::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    pub t_prime: f64,
    pub t_dprime: f64,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Tangent vector at `p` for transport checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_paths: usize,
    pub master_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonotonicityConfig {
    /// Support size of each empirical measure.
    pub n: usize,
    pub center_x: Vec<f64>,
    pub center_y: Vec<f64>,
    pub radius: f64,
    pub phis: Vec<PhiSpec>,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default = "default_tolerance_se")]
    pub tolerance_se: f64,
}

fn default_checkpoints() -> usize {
    10
}
fn default_bootstrap() -> usize {
    100
}
fn default_tolerance_se() -> f64 {
    2.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub json: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub flow: FlowSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<TimeSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoints: Option<Endpoints>,
    /// Input CSV of `t', t'', p..., q...` rows for distance tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monotonicity: Option<MonotonicityConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind, flow: FlowSpec) -> Self {
        Self {
            experiment,
            flow,
            solver: SolverConfig::default(),
            schedule: None,
            ensemble: None,
            endpoints: None,
            batch: None,
            monotonicity: None,
            output: OutputConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks what the chosen experiment needs.
    pub fn validate(&self) -> Result<()> {
        let fam = make_flow(&self.flow).map_err(|e| Error::Config(e.to_string()))?;
        let missing = |what: &str| Err(Error::Config(format!("{:?} needs `{what}`", self.experiment)));
        if self.solver.grid < crate::l0::MIN_GRID {
            return Err(Error::Config(format!("solver grid {} below 8", self.solver.grid)));
        }
        if let Some(s) = &self.schedule {
            s.validate(&fam).map_err(|e| Error::Config(e.to_string()))?;
        }
        let n_amb = fam.ambient_dim();
        let check_coords = |name: &str, xs: &[f64]| {
            if xs.len() != n_amb {
                Err(Error::Config(format!("`{name}` has {} coordinates, expected {n_amb}", xs.len())))
            } else {
                Ok(())
            }
        };
        use ExperimentKind::*;
        match self.experiment {
            Distance | Geodesic | TransportCheck => {
                let Some(e) = &self.endpoints else { return missing("endpoints") };
                check_coords("p", &e.p)?;
                check_coords("q", &e.q)?;
                if let Some(v) = &e.v {
                    check_coords("v", v)?;
                }
            }
            DistanceTable => {
                if self.batch.is_none() {
                    return missing("batch");
                }
            }
            Couple | VerifySupermartingale => {
                let Some(e) = &self.endpoints else { return missing("endpoints") };
                check_coords("p", &e.p)?;
                check_coords("q", &e.q)?;
                if self.schedule.is_none() {
                    return missing("schedule");
                }
            }
            VerifyMonotonicity => {
                if self.schedule.is_none() {
                    return missing("schedule");
                }
                let Some(m) = &self.monotonicity else { return missing("monotonicity") };
                check_coords("center_x", &m.center_x)?;
                check_coords("center_y", &m.center_y)?;
                if m.phis.is_empty() {
                    return Err(Error::Config("monotonicity needs at least one phi".into()));
                }
            }
            Invariants => {}
        }
        if self.experiment.is_stochastic() {
            match &self.ensemble {
                None => return missing("ensemble.master_seed"),
                Some(e) if e.n_paths == 0 && self.experiment != Invariants => {
                    return Err(Error::Config("ensemble.n_paths must be at least 1".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ModelId;

    fn sample() -> ExperimentConfig {
        let mut c = ExperimentConfig::new(
            ExperimentKind::VerifyMonotonicity,
            FlowSpec { model: ModelId::Sphere, d: 2, side: None, horizon: 0.2 },
        );
        c.schedule = Some(TimeSchedule { t1_prime: 0.1, t1_dprime: 0.15, horizon: 0.09, epsilon: 0.0173 });
        c.ensemble = Some(EnsembleConfig { n_paths: 256, master_seed: 7 });
        c.monotonicity = Some(MonotonicityConfig {
            n: 256,
            center_x: vec![0.0, 0.0, 1.0],
            center_y: vec![0.0, 1.0, 0.0],
            radius: 0.3,
            phis: vec![PhiSpec::Identity, PhiSpec::Capped { c: 5.0 }],
            checkpoints: 10,
            bootstrap: 100,
            tolerance_se: 2.0,
        });
        c.output.json = Some("out/mono.json".into());
        c
    }

    #[test]
    fn json_round_trip() {
        let c = sample();
        assert_eq!(ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_json(
            r#"{"experiment": "distance", "flow": {"model": "torus", "d": 2, "horizon": 1},
                "endpoints": {"t_prime": 0, "t_dprime": 0.5, "p": [0, 0], "q": [0.3, 0]}}"#,
        )
        .unwrap();
        assert_eq!(c.solver, SolverConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_fields_and_missing_seed() {
        assert!(ExperimentConfig::from_json(r#"{"experiment": "distance", "flow": {"model": "torus", "d": 2, "horizon": 1}, "bogus": 1}"#).is_err());
        let mut c = sample();
        c.ensemble = None;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = sample();
        c.monotonicity.as_mut().unwrap().center_x = vec![0.0, 1.0];
        assert!(c.validate().is_err());
    }
}
