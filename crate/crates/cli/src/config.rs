//! Experiment configuration files.

use std::path::{Path, PathBuf};

use csde_core::conditioning::TargetLaw;
use csde_core::geometry::{ManifoldModel, Point, VectorField};
use csde_core::hitting_time::{AreaFunction, HittingProfile, ProfileSpec, RadialModel, TimeDensity};
use csde_core::test_functions::TestFunction;
use serde::Deserialize;

use crate::CliError;

pub const DRIFTS: [&str; 6] = [
    "zero",
    "constant",
    "linear",
    "affine",
    "ornstein_uhlenbeck",
    "spherical_gradient",
];
pub const TARGETS: [&str; 3] = ["dirac", "atoms", "density_ratio"];
pub const TEST_FUNCTIONS: [&str; 5] = ["constant", "exp_tilt", "gaussian_bump", "sphere_linear", "smooth_ramp"];
pub const GEOMETRIES: [&str; 3] = ["interval", "ball3", "radial_grid"];
pub const AREAS: [&str; 3] = ["power", "sine", "sinh"];
pub const TIME_TARGETS: [&str; 3] = ["constant", "indicator", "bump"];
pub const ROUTES: [&str; 2] = ["csde", "enlarged"];
pub const GRADIENT_METHODS: [&str; 2] = ["bismut", "ibp"];

fn unknown(what: &str, name: &str, catalog: &[&str]) -> CliError {
    CliError::Config(format!("unknown {what} {name:?}; valid names are {}", catalog.join(", ")))
}

fn missing(what: &str) -> CliError {
    CliError::Config(format!("missing field {what:?}"))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Option<String>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub model: Option<ModelConfig>,
    /// Start point in ambient coordinates.
    pub start: Option<Vec<f64>>,
    #[serde(default)]
    pub drift: DriftConfig,
    pub horizon: Option<f64>,
    pub n_steps: Option<usize>,
    pub n_paths: Option<usize>,
    pub target: Option<TargetConfig>,
    pub route: Option<String>,
    pub terminal_gap: Option<f64>,
    /// Write the full paths CSV (simulate).
    pub record_paths: Option<bool>,
    pub suite: Option<String>,
    pub test_function: Option<TestFunctionConfig>,
    pub method: Option<String>,
    /// Known gradient to test the estimate against.
    pub expected: Option<Vec<f64>>,
    pub hitting: Option<HittingConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: String,
    pub dim: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub name: String,
    /// Row-major `d x d` matrix.
    pub matrix: Option<Vec<f64>>,
    pub offset: Option<Vec<f64>>,
    pub kappa: Option<f64>,
    pub strength: Option<f64>,
    pub pole: Option<[f64; 3]>,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            name: "zero".into(),
            matrix: None,
            offset: None,
            kappa: None,
            strength: None,
            pole: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub kind: String,
    pub point: Option<Vec<f64>>,
    pub points: Option<Vec<Vec<f64>>>,
    pub weights: Option<Vec<f64>>,
    pub test_function: Option<TestFunctionConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunctionConfig {
    pub name: String,
    pub value: Option<f64>,
    pub tilt: Option<Vec<f64>>,
    pub horizon: Option<f64>,
    pub center: Option<Vec<f64>>,
    pub width: Option<f64>,
    pub strength: Option<f64>,
    pub pole: Option<[f64; 3]>,
    pub direction: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HittingConfig {
    pub geometry: String,
    pub radius: f64,
    pub area: Option<String>,
    /// Exponent `k` of the area function `rho^k`.
    pub power: Option<u32>,
    pub tau_max: Option<f64>,
    pub n_s: Option<usize>,
    pub n_rho: Option<usize>,
    pub target: TimeTargetConfig,
    /// Conditioned exit paths to sample; 0 skips sampling.
    pub n_paths: Option<usize>,
    pub step: Option<f64>,
    /// Time and radius strides of the profile dump.
    pub profile_stride: Option<[usize; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeTargetConfig {
    pub kind: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub center: Option<f64>,
    pub width: Option<f64>,
}

pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("malformed config {}: {e}", path.display())))
}

impl ExperimentConfig {
    pub fn model(&self) -> Result<ManifoldModel, CliError> {
        let m = self.model.as_ref().ok_or_else(|| missing("model"))?;
        Ok(ManifoldModel::from_name(&m.kind, m.dim)?)
    }

    pub fn start(&self, model: &ManifoldModel) -> Result<Point, CliError> {
        let coords = self.start.as_ref().ok_or_else(|| missing("start"))?;
        Ok(model.point(coords)?)
    }

    pub fn horizon(&self) -> Result<f64, CliError> {
        self.horizon.ok_or_else(|| missing("horizon"))
    }

    pub fn field(&self, model: &ManifoldModel) -> Result<VectorField, CliError> {
        let c = &self.drift;
        let d = model.dim();
        let field = match c.name.as_str() {
            "zero" => VectorField::Zero,
            "constant" => VectorField::constant(c.offset.as_deref().ok_or_else(|| missing("drift.offset"))?)?,
            "linear" => VectorField::linear(d, c.matrix.as_deref().ok_or_else(|| missing("drift.matrix"))?)?,
            "affine" => VectorField::affine(
                d,
                c.matrix.as_deref().ok_or_else(|| missing("drift.matrix"))?,
                c.offset.as_deref().ok_or_else(|| missing("drift.offset"))?,
            )?,
            "ornstein_uhlenbeck" => VectorField::ornstein_uhlenbeck(d, c.kappa.ok_or_else(|| missing("drift.kappa"))?)?,
            "spherical_gradient" => VectorField::spherical_gradient(
                c.strength.ok_or_else(|| missing("drift.strength"))?,
                c.pole.ok_or_else(|| missing("drift.pole"))?,
            )?,
            other => return Err(unknown("drift", other, &DRIFTS)),
        };
        field.validate(model)?;
        Ok(field)
    }

    pub fn target(&self, model: &ManifoldModel) -> Result<Option<TargetLaw>, CliError> {
        let Some(t) = &self.target else {
            return Ok(None);
        };
        let law = match t.kind.as_str() {
            "dirac" => TargetLaw::Dirac(model.point(t.point.as_deref().ok_or_else(|| missing("target.point"))?)?),
            "atoms" => {
                let points = t.points.as_ref().ok_or_else(|| missing("target.points"))?;
                let weights = t.weights.as_ref().ok_or_else(|| missing("target.weights"))?;
                if points.len() != weights.len() {
                    return Err(CliError::Config(format!(
                        "{} atoms but {} weights",
                        points.len(),
                        weights.len()
                    )));
                }
                let atoms = points
                    .iter()
                    .zip(weights)
                    .map(|(p, w)| Ok((model.point(p)?, *w)))
                    .collect::<Result<Vec<_>, CliError>>()?;
                TargetLaw::Atoms(atoms)
            }
            "density_ratio" => TargetLaw::DensityRatio(test_function(
                t.test_function.as_ref().ok_or_else(|| missing("target.test_function"))?,
            )?),
            other => return Err(unknown("target kind", other, &TARGETS)),
        };
        Ok(Some(law))
    }

    pub fn route(&self) -> Result<&str, CliError> {
        match self.route.as_deref().unwrap_or("csde") {
            r @ ("csde" | "enlarged") => Ok(r),
            other => Err(unknown("route", other, &ROUTES)),
        }
    }

    pub fn method(&self) -> Result<&str, CliError> {
        match self.method.as_deref().unwrap_or("bismut") {
            m @ ("bismut" | "ibp") => Ok(m),
            other => Err(unknown("gradient method", other, &GRADIENT_METHODS)),
        }
    }

    pub fn test_function(&self) -> Result<TestFunction, CliError> {
        test_function(self.test_function.as_ref().ok_or_else(|| missing("test_function"))?)
    }
}

pub fn test_function(c: &TestFunctionConfig) -> Result<TestFunction, CliError> {
    let f = match c.name.as_str() {
        "constant" => TestFunction::Constant(c.value.unwrap_or(1.0)),
        "exp_tilt" => TestFunction::exp_tilt(
            c.tilt.as_deref().ok_or_else(|| missing("test_function.tilt"))?,
            c.horizon.ok_or_else(|| missing("test_function.horizon"))?,
        )?,
        "gaussian_bump" => TestFunction::gaussian_bump(
            c.center.as_deref().ok_or_else(|| missing("test_function.center"))?,
            c.width.ok_or_else(|| missing("test_function.width"))?,
        )?,
        "sphere_linear" => TestFunction::sphere_linear(
            c.strength.ok_or_else(|| missing("test_function.strength"))?,
            c.pole.ok_or_else(|| missing("test_function.pole"))?,
        )?,
        "smooth_ramp" => {
            TestFunction::smooth_ramp(c.direction.as_deref().ok_or_else(|| missing("test_function.direction"))?)?
        }
        other => return Err(unknown("test function", other, &TEST_FUNCTIONS)),
    };
    Ok(f)
}

impl HittingConfig {
    pub fn profile_spec(&self) -> Result<ProfileSpec, CliError> {
        let radius = self.radius;
        let model = match self.geometry.as_str() {
            "interval" => RadialModel::EuclideanInterval { radius },
            "ball3" => RadialModel::EuclideanBall3 { radius },
            "radial_grid" => {
                let area = match self.area.as_deref().ok_or_else(|| missing("hitting.area"))? {
                    "power" => AreaFunction::Power(self.power.ok_or_else(|| missing("hitting.power"))?),
                    "sine" => AreaFunction::Sine,
                    "sinh" => AreaFunction::Sinh,
                    other => return Err(unknown("area function", other, &AREAS)),
                };
                RadialModel::RadialGrid { area, radius }
            }
            other => return Err(unknown("hitting geometry", other, &GEOMETRIES)),
        };
        let mut spec = ProfileSpec::new(model);
        if let Some(t) = self.tau_max {
            // Keep ds fixed when only the horizon changes.
            spec.n_s = ((spec.n_s as f64) * t / spec.tau_max).round().max(1.0) as usize;
            spec.tau_max = t;
        }
        if let Some(n) = self.n_s {
            spec.n_s = n;
        }
        if let Some(n) = self.n_rho {
            spec.n_rho = n;
        }
        Ok(spec)
    }

    pub fn time_density(&self, profile: &HittingProfile) -> Result<TimeDensity, CliError> {
        let t = &self.target;
        let g = match t.kind.as_str() {
            "constant" => TimeDensity::constant(),
            "indicator" => TimeDensity::indicator(
                profile,
                t.a.ok_or_else(|| missing("hitting.target.a"))?,
                t.b.ok_or_else(|| missing("hitting.target.b"))?,
            )?,
            "bump" => TimeDensity::bump(
                profile,
                t.center.ok_or_else(|| missing("hitting.target.center"))?,
                t.width.ok_or_else(|| missing("hitting.target.width"))?,
            )?,
            other => return Err(unknown("time target", other, &TIME_TARGETS)),
        };
        Ok(g)
    }
}
