//! Damped parallel transport along sampled paths.
//!
//! `Omega = Ric/2 - (nabla V)^T` in frame coordinates, and the matrix ODEs
//! `Lambda' = -Lambda Omega`, `Phi' = -Phi Ric/2` with identity initial data,
//! integrated by the trapezoidal (Heun) rule on the path grid.

use crate::development::PathSample;
use crate::error::Result;
use crate::geometry::{block, identity_block, FramePoint, ManifoldModel, Mat4, VectorField};
use nalgebra::DMatrix;

/// How the drift correction enters `Omega`. Only `Standard` is correct; the
/// others exist as negative controls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OmegaConvention {
    #[default]
    Standard,
    /// `Ric/2 - nabla V`, without the transpose.
    TransposeFlipped,
    /// `Ric/2 + (nabla V)^T`.
    SignFlipped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportMode {
    /// Generator `Omega`.
    Lambda,
    /// Generator `Ric/2`.
    Phi,
}

#[inline]
pub(crate) fn omega_unchecked(
    model: &ManifoldModel,
    field: &VectorField,
    u: &FramePoint,
    convention: OmegaConvention,
) -> Mat4 {
    let half_ric = model.ricci_unchecked(u) * 0.5;
    if field.is_zero() {
        return half_ric;
    }
    let dv = field.covariant_derivative(model, u);
    match convention {
        OmegaConvention::Standard => half_ric - dv.transpose(),
        OmegaConvention::TransposeFlipped => half_ric - dv,
        OmegaConvention::SignFlipped => half_ric + dv.transpose(),
    }
}

/// `Omega` at `u` as a `d x d` matrix.
pub fn omega_matrix(model: &ManifoldModel, u: &FramePoint, field: &VectorField) -> Result<DMatrix<f64>> {
    omega_matrix_with(model, u, field, OmegaConvention::Standard)
}

pub fn omega_matrix_with(
    model: &ManifoldModel,
    u: &FramePoint,
    field: &VectorField,
    convention: OmegaConvention,
) -> Result<DMatrix<f64>> {
    model.check_frame(u)?;
    field.validate(model)?;
    Ok(block(&omega_unchecked(model, field, u, convention), model.dim()))
}

/// Step-by-step integrator, usable inside path observers.
#[derive(Clone, Debug)]
pub struct TransportStepper<'a> {
    model: ManifoldModel,
    field: &'a VectorField,
    convention: OmegaConvention,
    mode: TransportMode,
    current: Mat4,
    generator: Mat4,
}

impl<'a> TransportStepper<'a> {
    pub fn new(
        model: ManifoldModel,
        field: &'a VectorField,
        mode: TransportMode,
        convention: OmegaConvention,
        u0: &FramePoint,
    ) -> Self {
        let mut s = TransportStepper {
            model,
            field,
            convention,
            mode,
            current: identity_block(model.dim()),
            generator: Mat4::zeros(),
        };
        s.generator = s.generator_at(u0);
        s
    }

    fn generator_at(&self, u: &FramePoint) -> Mat4 {
        match self.mode {
            TransportMode::Lambda => omega_unchecked(&self.model, self.field, u, self.convention),
            TransportMode::Phi => self.model.ricci_unchecked(u) * 0.5,
        }
    }

    /// The matrix at the current grid time (zero-padded to 4 x 4).
    pub fn current(&self) -> &Mat4 {
        &self.current
    }

    /// Advances by `h` to the frame `next`.
    pub fn advance(&mut self, h: f64, next: &FramePoint) {
        let g0 = self.generator;
        let g1 = self.generator_at(next);
        let k0 = -(self.current * g0);
        let predictor = self.current + k0 * h;
        let k1 = -(predictor * g1);
        self.current += (k0 + k1) * (0.5 * h);
        self.generator = g1;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportMatrix {
    pub times: Vec<f64>,
    pub matrices: Vec<DMatrix<f64>>,
}

impl TransportMatrix {
    pub fn last(&self) -> &DMatrix<f64> {
        self.matrices.last().expect("transport has at least one matrix")
    }
}

/// Solves the transport ODE along `path`. An attached final jump is not
/// integrated over; the matrices stop at the last integrated frame.
pub fn transport_ode(path: &PathSample, field: &VectorField, mode: TransportMode) -> Result<TransportMatrix> {
    transport_ode_with(path, field, mode, OmegaConvention::Standard)
}

pub fn transport_ode_with(
    path: &PathSample,
    field: &VectorField,
    mode: TransportMode,
    convention: OmegaConvention,
) -> Result<TransportMatrix> {
    let model = path.model;
    field.validate(&model)?;
    let d = model.dim();
    let n = path.integrated_steps();
    model.check_frame(&path.frames[0])?;
    let mut stepper = TransportStepper::new(model, field, mode, convention, &path.frames[0]);
    let mut times = Vec::with_capacity(n + 1);
    let mut matrices = Vec::with_capacity(n + 1);
    times.push(path.times[0]);
    matrices.push(DMatrix::identity(d, d));
    for k in 0..n {
        stepper.advance(path.times[k + 1] - path.times[k], &path.frames[k + 1]);
        times.push(path.times[k + 1]);
        matrices.push(block(stepper.current(), d));
    }
    Ok(TransportMatrix { times, matrices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::development::develop_path;

    fn run(model: ManifoldModel, start: &[f64], horizon: f64) -> TransportMatrix {
        let x0 = model.point(start).unwrap();
        let u0 = model.initial_frame(&x0).unwrap();
        let n = (800.0 * horizon) as usize;
        let p = develop_path(&model, &u0, &VectorField::Zero, None, horizon, n, 5, 0).unwrap();
        transport_ode(&p, &VectorField::Zero, TransportMode::Lambda).unwrap()
    }

    #[test]
    fn omega_catalog() {
        let s = ManifoldModel::Sphere2;
        let u = s.initial_frame(&s.point(&[0.0, 0.0, 1.0]).unwrap()).unwrap();
        let o = omega_matrix(&s, &u, &VectorField::Zero).unwrap();
        assert!((o - DMatrix::identity(2, 2) * 0.5).norm() < 1e-12);

        let e = ManifoldModel::Euclidean(1);
        let u = e.initial_frame(&e.point(&[0.3]).unwrap()).unwrap();
        let ou = VectorField::ornstein_uhlenbeck(1, 0.5).unwrap();
        assert_eq!(omega_matrix(&e, &u, &ou).unwrap()[(0, 0)], 0.5);

        let h = ManifoldModel::Hyperbolic3;
        let u = h.initial_frame(&h.point(&[1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        let o = omega_matrix(&h, &u, &VectorField::Zero).unwrap();
        assert!((o + DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn closed_forms() {
        let flat = run(ManifoldModel::Euclidean(2), &[0.0, 0.0], 1.0);
        assert!(flat.matrices.iter().all(|m| *m == DMatrix::identity(2, 2)));

        let s = run(ManifoldModel::Sphere2, &[0.0, 0.0, 1.0], 2.0);
        assert_eq!(s.matrices[0], DMatrix::identity(2, 2));
        let err = (s.last() - DMatrix::identity(2, 2) * (-1.0f64).exp()).amax();
        assert!(err < 1e-6, "{err}");

        let h = run(ManifoldModel::Hyperbolic3, &[1.0, 0.0, 0.0, 0.0], 1.0);
        let err = (h.last() - DMatrix::identity(3, 3) * 1f64.exp()).amax();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn phi_equals_lambda_without_drift() {
        let m = ManifoldModel::Sphere2;
        let u0 = m.initial_frame(&m.point(&[0.6, 0.0, 0.8]).unwrap()).unwrap();
        let p = develop_path(&m, &u0, &VectorField::Zero, None, 0.5, 400, 2, 3).unwrap();
        let a = transport_ode(&p, &VectorField::Zero, TransportMode::Lambda).unwrap();
        let b = transport_ode(&p, &VectorField::Zero, TransportMode::Phi).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn omega_is_equivariant_under_frame_rotation() {
        let m = ManifoldModel::Euclidean(2);
        let u = m.initial_frame(&m.point(&[0.4, -0.1]).unwrap()).unwrap();
        let field = VectorField::linear(2, &[-0.5, 1.0, 0.0, -0.3]).unwrap();
        let th: f64 = 0.7;
        let mut o = Mat4::identity();
        o[(0, 0)] = th.cos();
        o[(0, 1)] = -th.sin();
        o[(1, 0)] = th.sin();
        o[(1, 1)] = th.cos();
        let rotated = FramePoint {
            base: u.base,
            frame: u.frame * o,
        };
        let w = omega_matrix(&m, &u, &field).unwrap();
        let wr = omega_matrix(&m, &rotated, &field).unwrap();
        let ob = block(&o, 2);
        assert!((wr - ob.transpose() * w * ob).amax() < 1e-10);
    }

    #[test]
    fn gronwall_bound_and_positive_determinant() {
        let m = ManifoldModel::Euclidean(2);
        let u0 = m.initial_frame(&m.point(&[0.0, 0.0]).unwrap()).unwrap();
        let field = VectorField::linear(2, &[0.3, 1.0, -0.4, 0.2]).unwrap();
        let p = develop_path(&m, &u0, &field, None, 1.0, 800, 1, 0).unwrap();
        let tm = transport_ode(&p, &field, TransportMode::Lambda).unwrap();
        let bound = omega_matrix(&m, &u0, &field).unwrap().norm();
        for (t, mat) in tm.times.iter().zip(&tm.matrices) {
            assert!(mat.norm() <= 2f64.sqrt() * (bound * t).exp() + 1e-8);
            assert!(mat.determinant() > 0.0);
        }
    }
}
