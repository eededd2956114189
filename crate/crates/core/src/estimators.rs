//! Monte Carlo estimators built on the damped transport `Lambda`: the
//! Bismut formula for `nabla ln Q_T xi`, the integration-by-parts identity
//! `nabla Q_T xi(m) = E[Lambda_T u_T^{-1} nabla xi(X_T)]`, and the Newton
//! martingale `N_t = Lambda_t u_t^{-1} nabla ln q_{T-t}(X_t, X_T)`.
//!
//! All vectors at `m` are reported in coordinates of the initial frame.

use std::ops::ControlFlow;

use crate::curvature_transport::{OmegaConvention, TransportMatrix, TransportMode, TransportStepper};
use crate::development::{sample_bm_with, PathEnd, PathObserver, PathSample, StepRecord};
use crate::error::{Error, Result};
use crate::flat::FlatTransition;
use crate::geometry::{FramePoint, ManifoldModel, Mat4, Point, Vec4, VectorField};
use crate::heat_kernel::{grad_log_heat_kernel, semigroup_gradient};
use crate::quadrature::gauss_hermite_normal;
use crate::stats::{self_normalized, MeanSe, TestReport, Z_BAND};
use crate::test_functions::TestFunction;

#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub value: Vec<f64>,
    pub std_error: Vec<f64>,
    pub n_paths: usize,
}

impl GradientEstimate {
    /// Per-coordinate z-scores against `target`, inflated by an optional
    /// independent error on the target.
    pub fn z_scores(&self, target: &[f64], target_error: f64) -> Vec<f64> {
        self.value
            .iter()
            .zip(&self.std_error)
            .zip(target)
            .map(|((v, se), t)| {
                let s = (se * se + target_error * target_error).sqrt();
                if s > 0.0 {
                    (v - t) / s
                } else if v == t {
                    0.0
                } else {
                    f64::INFINITY.copysign(v - t)
                }
            })
            .collect()
    }

    pub fn max_abs_z(&self, target: &[f64], target_error: f64) -> f64 {
        self.z_scores(target, target_error).iter().fold(0.0, |m, z| m.max(z.abs()))
    }
}

/// Accumulates `sum_k Lambda_{t_k} dB_k` along a path.
struct BismutObserver<'a> {
    stepper: Option<TransportStepper<'a>>,
    field: &'a VectorField,
    model: ManifoldModel,
    sum: Vec4,
}

impl PathObserver for BismutObserver<'_> {
    type Output = (Vec4, Point);

    fn start(&mut self, u0: &FramePoint) {
        self.stepper = Some(TransportStepper::new(
            self.model,
            self.field,
            TransportMode::Lambda,
            OmegaConvention::Standard,
            u0,
        ));
    }

    fn step(&mut self, rec: &StepRecord<'_>) -> ControlFlow<()> {
        let st = self.stepper.as_mut().expect("started");
        self.sum += st.current() * rec.driver;
        st.advance(rec.h, rec.after);
        ControlFlow::Continue(())
    }

    fn finish(self, end: &PathEnd) -> (Vec4, Point) {
        (self.sum, end.final_frame().base)
    }
}

/// `nabla ln Q_T xi(m) = E[xi(X_T) (1/T) sum Lambda dB] / E[xi(X_T)]`, by
/// self-normalized importance weighting of unconditioned paths.
#[allow(clippy::too_many_arguments)]
pub fn bismut_gradient(
    model: &ManifoldModel,
    m: &Point,
    field: &VectorField,
    xi: &TestFunction,
    horizon: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<GradientEstimate> {
    xi.validate(model)?;
    let u0 = model.initial_frame(m)?;
    let outs = sample_bm_with(model, &u0, field, horizon, n_steps, n_paths, seed, |_| BismutObserver {
        stepper: None,
        field,
        model: *model,
        sum: Vec4::zeros(),
    })?;
    let weights: Vec<f64> = outs.iter().map(|(_, x)| xi.value(x)).collect();
    let d = model.dim();
    let mut value = Vec::with_capacity(d);
    let mut std_error = Vec::with_capacity(d);
    for i in 0..d {
        let vals: Vec<f64> = outs.iter().map(|(s, _)| s[i] / horizon).collect();
        let est = self_normalized(&vals, &weights)?;
        value.push(est.mean);
        std_error.push(est.std_error);
    }
    Ok(GradientEstimate {
        value,
        std_error,
        n_paths,
    })
}

/// Both sides of the integration-by-parts identity at `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct IbpCheck {
    /// `nabla Q_T xi(m)` by quadrature or closed form.
    pub lhs: Vec<f64>,
    pub lhs_error: f64,
    /// `E[Lambda_T u_T^{-1} nabla xi(X_T)]` by Monte Carlo.
    pub rhs: GradientEstimate,
    pub z_scores: Vec<f64>,
}

impl IbpCheck {
    pub fn max_abs_z(&self) -> f64 {
        self.z_scores.iter().fold(0.0, |m, z| m.max(z.abs()))
    }

    pub fn report(&self, name: &str, seed: u64) -> TestReport {
        let z = self.z_scores.iter().copied().fold(0.0, |m: f64, z| if z.abs() > m.abs() { z } else { m });
        let stat = self.rhs.value.iter().zip(&self.lhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        TestReport::from_z_score(name, stat, z, Z_BAND, self.rhs.n_paths, Some(seed))
    }
}

struct IbpObserver<'a> {
    stepper: Option<TransportStepper<'a>>,
    field: &'a VectorField,
    model: ManifoldModel,
    convention: OmegaConvention,
    xi: &'a TestFunction,
}

impl PathObserver for IbpObserver<'_> {
    type Output = Vec4;

    fn start(&mut self, u0: &FramePoint) {
        self.stepper = Some(TransportStepper::new(
            self.model,
            self.field,
            TransportMode::Lambda,
            self.convention,
            u0,
        ));
    }

    fn step(&mut self, rec: &StepRecord<'_>) -> ControlFlow<()> {
        self.stepper.as_mut().expect("started").advance(rec.h, rec.after);
        ControlFlow::Continue(())
    }

    fn finish(self, end: &PathEnd) -> Vec4 {
        let u = end.final_frame();
        let g = self.model.frame_coords(u, &self.xi.gradient(&u.base));
        self.stepper.expect("started").current() * g
    }
}

/// `nabla Q_T xi(m)` in initial-frame coordinates, with an error estimate.
fn ibp_lhs(
    model: &ManifoldModel,
    u0: &FramePoint,
    field: &VectorField,
    xi: &TestFunction,
    horizon: f64,
) -> Result<(Vec<f64>, f64)> {
    let d = model.dim();
    let m = &u0.base;
    match model {
        ManifoldModel::Euclidean(_) => {
            let tr = FlatTransition::for_field(model, field, horizon)?;
            let mean = tr.mean(&m.coords);
            let chol = nalgebra::DMatrix::from_fn(d, d, |i, j| tr.cov[(i, j)])
                .cholesky()
                .ok_or_else(|| Error::Degenerate("transition covariance is singular".into()))?;
            let l = chol.l();
            let integrate = |n: usize| -> Vec4 {
                let (x, w) = gauss_hermite_normal(n);
                let mut total = Vec4::zeros();
                let mut idx = vec![0usize; d];
                loop {
                    let mut z = nalgebra::DVector::zeros(d);
                    let mut weight = 1.0;
                    for i in 0..d {
                        z[i] = x[idx[i]];
                        weight *= w[idx[i]];
                    }
                    let lz = &l * z;
                    let mut y = mean;
                    for i in 0..d {
                        y[i] += lz[i];
                    }
                    total += xi.gradient(&Point::new(y)) * weight;
                    let mut k = 0;
                    loop {
                        if k == d {
                            return total;
                        }
                        idx[k] += 1;
                        if idx[k] < n {
                            break;
                        }
                        idx[k] = 0;
                        k += 1;
                    }
                }
            };
            let per_dim = match d {
                1 => 80,
                2 => 60,
                _ => 24,
            };
            let fine = tr.mean_map.transpose() * integrate(per_dim);
            let coarse = tr.mean_map.transpose() * integrate(per_dim / 2);
            let fc = model.frame_coords(u0, &fine);
            let cc = model.frame_coords(u0, &coarse);
            Ok(((0..d).map(|i| fc[i]).collect(), (fc - cc).amax()))
        }
        ManifoldModel::Circle | ManifoldModel::Sphere2 if field.is_zero() => {
            let f = |y: &Point| xi.value(y);
            let (_, grad) = semigroup_gradient(model, horizon, &f, m)?;
            let c = model.frame_coords(u0, &grad.coords);
            Ok(((0..d).map(|i| c[i]).collect(), 1e-10))
        }
        _ => Err(Error::Unsupported(format!(
            "no quadrature for the integration-by-parts left side on {model} with {field:?}"
        ))),
    }
}

/// Compares `nabla Q_T xi(m)` with `E[Lambda_T u_T^{-1} nabla xi(X_T)]`.
#[allow(clippy::too_many_arguments)]
pub fn covariant_ibp_check(
    model: &ManifoldModel,
    m: &Point,
    field: &VectorField,
    xi: &TestFunction,
    horizon: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<IbpCheck> {
    covariant_ibp_check_with(model, m, field, xi, horizon, n_steps, n_paths, seed, OmegaConvention::Standard)
}

#[allow(clippy::too_many_arguments)]
pub fn covariant_ibp_check_with(
    model: &ManifoldModel,
    m: &Point,
    field: &VectorField,
    xi: &TestFunction,
    horizon: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    convention: OmegaConvention,
) -> Result<IbpCheck> {
    xi.validate(model)?;
    field.validate(model)?;
    let u0 = model.initial_frame(m)?;
    let (lhs, lhs_error) = ibp_lhs(model, &u0, field, xi, horizon)?;
    let outs = sample_bm_with(model, &u0, field, horizon, n_steps, n_paths, seed, |_| IbpObserver {
        stepper: None,
        field,
        model: *model,
        convention,
        xi,
    })?;
    let d = model.dim();
    let mut value = Vec::with_capacity(d);
    let mut std_error = Vec::with_capacity(d);
    for i in 0..d {
        let s = MeanSe::from_values(outs.iter().map(|v| v[i]));
        value.push(s.mean);
        std_error.push(s.std_error);
    }
    let rhs = GradientEstimate {
        value,
        std_error,
        n_paths,
    };
    let z_scores = rhs.z_scores(&lhs, lhs_error);
    Ok(IbpCheck {
        lhs,
        lhs_error,
        rhs,
        z_scores,
    })
}

/// `Lambda u^{-1} nabla ln q_s(x, y)` in frame coordinates.
fn newton_value(model: &ManifoldModel, lambda: &Mat4, u: &FramePoint, s: f64, y: &Point) -> Result<(Vec4, bool)> {
    let g = grad_log_heat_kernel(model, s, &u.base, y)?;
    Ok((lambda * model.frame_coords(u, &g.vector.coords), g.clamped))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewtonTrace {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    /// The kernel gradient was clamped near the cut locus.
    pub clamped: Vec<bool>,
}

/// The Newton martingale along a recorded path, at every integrated grid
/// time with `t < T`.
pub fn newton_martingale(path: &PathSample, transport: &TransportMatrix, y: &Point, horizon: f64) -> Result<NewtonTrace> {
    let model = &path.model;
    let d = model.dim();
    let n = path.integrated_steps().min(transport.matrices.len() - 1);
    let mut out = NewtonTrace {
        times: Vec::new(),
        values: Vec::new(),
        clamped: Vec::new(),
    };
    for k in 0..=n {
        let t = path.times[k];
        if t >= horizon {
            break;
        }
        let mut lambda = Mat4::zeros();
        lambda.view_mut((0, 0), (d, d)).copy_from(&transport.matrices[k]);
        let (v, clamped) = newton_value(model, &lambda, &path.frames[k], horizon - t, y)?;
        out.times.push(t);
        out.values.push((0..d).map(|i| v[i]).collect());
        out.clamped.push(clamped);
    }
    Ok(out)
}

/// Streaming Newton martingale: records `N_t` at the given step counts for
/// every candidate endpoint, then keeps the one the path ended at.
pub struct NewtonObserver<'a> {
    model: ManifoldModel,
    field: &'a VectorField,
    candidates: &'a [Point],
    horizon: f64,
    at_steps: Vec<usize>,
    stepper: Option<TransportStepper<'a>>,
    values: Vec<Vec<Vec4>>,
    error: Option<Error>,
}

impl<'a> NewtonObserver<'a> {
    pub fn new(
        model: ManifoldModel,
        field: &'a VectorField,
        candidates: &'a [Point],
        horizon: f64,
        mut at_steps: Vec<usize>,
    ) -> Self {
        at_steps.sort_unstable();
        NewtonObserver {
            model,
            field,
            candidates,
            horizon,
            at_steps,
            stepper: None,
            values: vec![Vec::new(); candidates.len()],
            error: None,
        }
    }

    fn record(&mut self, t: f64, u: &FramePoint) {
        let lambda = *self.stepper.as_ref().expect("started").current();
        for (i, y) in self.candidates.iter().enumerate() {
            match newton_value(&self.model, &lambda, u, self.horizon - t, y) {
                Ok((v, _)) => self.values[i].push(v),
                Err(e) => {
                    self.error.get_or_insert(e);
                }
            }
        }
    }
}

impl PathObserver for NewtonObserver<'_> {
    /// One vector per requested step, for the endpoint the path reached.
    type Output = Result<Vec<Vec4>>;

    fn start(&mut self, u0: &FramePoint) {
        self.stepper = Some(TransportStepper::new(
            self.model,
            self.field,
            TransportMode::Lambda,
            OmegaConvention::Standard,
            u0,
        ));
        if self.at_steps.first() == Some(&0) {
            self.record(0.0, u0);
        }
    }

    fn step(&mut self, rec: &StepRecord<'_>) -> ControlFlow<()> {
        self.stepper.as_mut().expect("started").advance(rec.h, rec.after);
        if self.at_steps.binary_search(&(rec.k + 1)).is_ok() {
            self.record(rec.t + rec.h, rec.after);
        }
        ControlFlow::Continue(())
    }

    fn finish(self, end: &PathEnd) -> Result<Vec<Vec4>> {
        if let Some(e) = self.error {
            return Err(e);
        }
        let idx = match end.attached.and_then(|a| a.atom) {
            Some(i) if i < self.candidates.len() => i,
            _ if self.candidates.len() == 1 => 0,
            _ => return Err(Error::invalid("path endpoint does not identify a candidate")),
        };
        Ok(self.values.into_iter().nth(idx).expect("index checked"))
    }
}

/// Tests that `E[N_{t_j}]` does not depend on `j`, using paired differences
/// against the first time. The report's z-score is the largest in magnitude
/// over times and coordinates.
pub fn martingale_constancy(name: &str, samples: &[Vec<Vec4>], d: usize, seed: u64) -> Result<TestReport> {
    let n_times = samples.first().map(|s| s.len()).unwrap_or(0);
    if samples.len() < 2 || n_times < 2 || samples.iter().any(|s| s.len() != n_times) {
        return Err(Error::invalid("need at least two paths with two or more equal-length records"));
    }
    let mut worst: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    for j in 1..n_times {
        for i in 0..d {
            let diff = MeanSe::from_values(samples.iter().map(|s| s[j][i] - s[0][i]));
            let z = if diff.std_error > 0.0 {
                diff.mean / diff.std_error
            } else if diff.mean == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            if z.abs() > worst.abs() {
                worst = z;
                worst_gap = diff.mean;
            }
        }
    }
    Ok(TestReport::from_z_score(name, worst_gap.abs(), worst, Z_BAND, samples.len(), Some(seed)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{sample_csde, ConditioningSpec, TargetLaw};
    use crate::curvature_transport::transport_ode;

    #[test]
    fn constant_xi_gives_zero_gradient() {
        let m = ManifoldModel::Euclidean(2);
        let x = m.point(&[0.0, 0.0]).unwrap();
        let g = bismut_gradient(&m, &x, &VectorField::Zero, &TestFunction::Constant(1.0), 1.0, 50, 20_000, 3).unwrap();
        assert!(g.max_abs_z(&[0.0, 0.0], 0.0) < 3.0, "{g:?}");
    }

    #[test]
    fn exponential_tilt_is_recovered() {
        let m = ManifoldModel::Euclidean(2);
        let x = m.point(&[0.0, 0.0]).unwrap();
        let xi = TestFunction::exp_tilt(&[0.5, 0.0], 1.0).unwrap();
        let g = bismut_gradient(&m, &x, &VectorField::Zero, &xi, 1.0, 50, 50_000, 11).unwrap();
        assert!(g.max_abs_z(&[0.5, 0.0], 0.0) < 3.0, "{g:?}");
    }

    #[test]
    fn ou_ibp_pins_the_convention() {
        let m = ManifoldModel::Euclidean(1);
        let x = m.point(&[0.3]).unwrap();
        let ou = VectorField::ornstein_uhlenbeck(1, 0.5).unwrap();
        let xi = TestFunction::gaussian_bump(&[1.0], 0.7).unwrap();
        let ok = covariant_ibp_check(&m, &x, &ou, &xi, 1.0, 200, 40_000, 5).unwrap();
        assert!(ok.max_abs_z() < 3.0, "{ok:?}");
        let bad =
            covariant_ibp_check_with(&m, &x, &ou, &xi, 1.0, 200, 40_000, 5, OmegaConvention::SignFlipped).unwrap();
        assert!(bad.max_abs_z() > 10.0, "{bad:?}");
    }

    #[test]
    fn flat_newton_martingale_starts_at_the_bridge_slope() {
        let m = ManifoldModel::Euclidean(1);
        let y = m.point(&[1.0]).unwrap();
        let spec = ConditioningSpec::new(m, m.point(&[0.0]).unwrap(), VectorField::Zero, 1.0, TargetLaw::Dirac(y))
            .unwrap()
            .with_steps(100)
            .unwrap();
        for p in sample_csde(&spec, 3, 0).unwrap() {
            let tm = transport_ode(&p, &VectorField::Zero, TransportMode::Lambda).unwrap();
            let tr = newton_martingale(&p, &tm, &y, 1.0).unwrap();
            assert_eq!(tr.values[0], vec![1.0]);
            assert_eq!(tr.times.len(), 100);
        }
    }
}
