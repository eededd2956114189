//! Gaussian transition laws of affine-drift diffusions on Euclidean space,
//! `dX = (A X + b) dt + dB`.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::{ManifoldModel, Mat4, Vec4, VectorField};

/// `X_s ~ N(M x + c, Sigma)` given `X_0 = x`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatTransition {
    pub d: usize,
    pub s: f64,
    pub mean_map: Mat4,
    pub shift: Vec4,
    pub cov: Mat4,
    precision: Mat4,
    log_det: f64,
}

fn padded_inverse(m: &Mat4, d: usize) -> Option<(Mat4, f64)> {
    let mut k = *m;
    for i in d..4 {
        k[(i, i)] = 1.0;
    }
    let chol = k.cholesky()?;
    let log_det = 2.0 * (0..d).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
    let mut inv = chol.inverse();
    for i in d..4 {
        inv[(i, i)] = 0.0;
    }
    Some((inv, log_det))
}

impl FlatTransition {
    fn assemble(d: usize, s: f64, mean_map: Mat4, shift: Vec4, cov: Mat4) -> Self {
        let (precision, log_det) = padded_inverse(&cov, d).unwrap_or((Mat4::zeros(), f64::NEG_INFINITY));
        FlatTransition {
            d,
            s,
            mean_map,
            shift,
            cov,
            precision,
            log_det,
        }
    }

    pub fn brownian(d: usize, s: f64) -> Self {
        let mut eye = Mat4::zeros();
        for i in 0..d {
            eye[(i, i)] = 1.0;
        }
        Self::assemble(d, s, eye, Vec4::zeros(), eye * s)
    }

    /// Transition over time `s` for the drift `A x + b`.
    pub fn affine(d: usize, matrix: &Mat4, offset: &Vec4, s: f64) -> Self {
        if matrix.iter().all(|v| *v == 0.0) {
            let mut t = Self::brownian(d, s);
            t.shift = offset * s;
            return t;
        }
        let a = DMatrix::from_fn(d, d, |i, j| matrix[(i, j)]);
        // Shift: top-right column of exp([[A, b], [0, 0]] s).
        let mut g = DMatrix::zeros(d + 1, d + 1);
        g.view_mut((0, 0), (d, d)).copy_from(&(&a * s));
        for i in 0..d {
            g[(i, d)] = offset[i] * s;
        }
        let eg = g.exp();
        // Covariance by Van Loan: exp([[-A, I], [0, A^T]] s).
        let mut c = DMatrix::zeros(2 * d, 2 * d);
        c.view_mut((0, 0), (d, d)).copy_from(&(-&a * s));
        c.view_mut((0, d), (d, d)).copy_from(&(DMatrix::identity(d, d) * s));
        c.view_mut((d, d), (d, d)).copy_from(&(a.transpose() * s));
        let ec = c.exp();
        let f12 = ec.view((0, d), (d, d)).into_owned();
        let f22 = ec.view((d, d), (d, d)).into_owned();
        let sigma = f22.transpose() * f12;
        let mut mean_map = Mat4::zeros();
        let mut shift = Vec4::zeros();
        let mut cov = Mat4::zeros();
        for i in 0..d {
            shift[i] = eg[(i, d)];
            for j in 0..d {
                mean_map[(i, j)] = eg[(i, j)];
                cov[(i, j)] = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
            }
        }
        Self::assemble(d, s, mean_map, shift, cov)
    }

    /// Transition of `field` on a Euclidean model.
    pub fn for_field(model: &ManifoldModel, field: &VectorField, s: f64) -> Result<Self> {
        let ManifoldModel::Euclidean(d) = *model else {
            return Err(Error::Unsupported(format!(
                "drifted transition laws are only available on Euclidean models, not {model}"
            )));
        };
        field.validate(model)?;
        match field {
            VectorField::Zero => Ok(Self::brownian(d, s)),
            VectorField::Affine { matrix, offset } => Ok(Self::affine(d, matrix, offset, s)),
            VectorField::SphericalGradient { .. } => unreachable!("validated above"),
        }
    }

    #[inline]
    pub fn mean(&self, x: &Vec4) -> Vec4 {
        self.mean_map * x + self.shift
    }

    /// `(w2 I + Sigma)^{-1}` with its log-determinant.
    pub fn smoothed_inverse(&self, w2: f64) -> Option<(Mat4, f64)> {
        let mut k = self.cov;
        for i in 0..self.d {
            k[(i, i)] += w2;
        }
        padded_inverse(&k, self.d)
    }

    /// `ln` of the transition density from `x` to `y`.
    #[inline]
    pub fn log_density(&self, x: &Vec4, y: &Vec4) -> f64 {
        let r = y - self.mean(x);
        -0.5 * (self.d as f64 * (2.0 * PI).ln() + self.log_det + (self.precision * r).dot(&r))
    }

    /// Gradient of [`Self::log_density`] in `x`.
    #[inline]
    pub fn grad_log_density(&self, x: &Vec4, y: &Vec4) -> Vec4 {
        if self.mean_map_is_identity() {
            // Exact for constant drift: (y - x - s b) / s.
            return (y - x - self.shift) / self.s;
        }
        self.mean_map.transpose() * (self.precision * (y - self.mean(x)))
    }

    fn mean_map_is_identity(&self) -> bool {
        (0..self.d).all(|i| (0..self.d).all(|j| self.mean_map[(i, j)] == if i == j { 1.0 } else { 0.0 }))
            && (0..self.d).all(|i| self.cov[(i, i)] == self.s)
    }
}
