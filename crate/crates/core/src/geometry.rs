//! Exact geometry of the model-space catalog.
//!
//! Every point, tangent vector and frame lives in a fixed four-slot ambient
//! array. Slots past the model's ambient dimension are zero, and frame
//! columns past the intrinsic dimension are zero, so the hot simulation
//! loops never allocate.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, Matrix4, Vector4};

use crate::error::{Error, Result};

pub type Vec4 = Vector4<f64>;
pub type Mat4 = Matrix4<f64>;

/// Tolerance on point constraints and tangency residuals.
pub const POINT_TOL: f64 = 1e-10;
/// Tolerance on the Gram matrix of a frame.
pub const FRAME_TOL: f64 = 1e-9;
/// `log_map` on the sphere refuses pairs closer than this to antipodal.
pub const CUT_LOCUS_MARGIN: f64 = 1e-3;

pub const MAX_EUCLIDEAN_DIM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ManifoldModel {
    Euclidean(usize),
    /// Flat circle, represented by an angle in `[0, 2pi)`.
    Circle,
    /// Unit sphere in R^3.
    Sphere2,
    /// Upper sheet of the unit hyperboloid in Minkowski R^{1,3}.
    Hyperbolic3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub coords: Vec4,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentVector {
    pub coords: Vec4,
}

/// A point together with an orthonormal basis of its tangent space.
/// Column `i` of `frame` is `u e_i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FramePoint {
    pub base: Point,
    pub frame: Mat4,
}

impl Point {
    pub fn new(coords: Vec4) -> Self {
        Point { coords }
    }

    /// The meaningful ambient coordinates.
    pub fn ambient<'a>(&'a self, model: &ManifoldModel) -> &'a [f64] {
        &self.coords.as_slice()[..model.ambient_dim()]
    }
}

impl TangentVector {
    pub fn new(coords: Vec4) -> Self {
        TangentVector { coords }
    }

    pub fn zero() -> Self {
        TangentVector { coords: Vec4::zeros() }
    }
}

impl fmt::Display for ManifoldModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ManifoldModel::Euclidean(d) => write!(f, "Euclidean({d})"),
            ManifoldModel::Circle => write!(f, "Circle"),
            ManifoldModel::Sphere2 => write!(f, "Sphere2"),
            ManifoldModel::Hyperbolic3 => write!(f, "Hyperbolic3"),
        }
    }
}

/// Copies the top-left `d x d` block into a dense matrix.
pub fn block(m: &Mat4, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| m[(i, j)])
}

/// `I_d` in the top-left block, zero elsewhere.
pub fn identity_block(d: usize) -> Mat4 {
    let mut m = Mat4::zeros();
    for i in 0..d {
        m[(i, i)] = 1.0;
    }
    m
}

/// sin(x)/x without the removable singularity.
#[inline]
fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// sinh(x)/x without the removable singularity.
#[inline]
fn sinhc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 + x * x / 6.0
    } else {
        x.sinh() / x
    }
}

/// Wraps an angle into `[0, 2pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(2.0 * PI);
    if w >= 2.0 * PI {
        0.0
    } else {
        w
    }
}

/// Signed angle difference `b - a` reduced to `(-pi, pi]`.
pub fn angle_difference(a: f64, b: f64) -> f64 {
    let d = (b - a).rem_euclid(2.0 * PI);
    if d > PI {
        d - 2.0 * PI
    } else {
        d
    }
}

impl ManifoldModel {
    /// Names accepted by [`ManifoldModel::from_name`].
    pub const CATALOG: [&'static str; 4] = ["Euclidean", "Circle", "Sphere2", "Hyperbolic3"];

    pub fn euclidean(d: usize) -> Result<Self> {
        if d == 0 || d > MAX_EUCLIDEAN_DIM {
            return Err(Error::invalid(format!(
                "Euclidean dimension must be in 1..={MAX_EUCLIDEAN_DIM}, got {d}"
            )));
        }
        Ok(ManifoldModel::Euclidean(d))
    }

    pub fn from_name(name: &str, dim: Option<usize>) -> Result<Self> {
        match name {
            "Euclidean" => Self::euclidean(dim.unwrap_or(1)),
            "Circle" => Ok(ManifoldModel::Circle),
            "Sphere2" => Ok(ManifoldModel::Sphere2),
            "Hyperbolic3" => Ok(ManifoldModel::Hyperbolic3),
            other => Err(Error::invalid(format!(
                "unknown model kind {other:?}; valid kinds are {}",
                Self::CATALOG.join(", ")
            ))),
        }
    }

    /// Intrinsic dimension.
    pub fn dim(&self) -> usize {
        match self {
            ManifoldModel::Euclidean(d) => *d,
            ManifoldModel::Circle => 1,
            ManifoldModel::Sphere2 => 2,
            ManifoldModel::Hyperbolic3 => 3,
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            ManifoldModel::Euclidean(d) => *d,
            ManifoldModel::Circle => 1,
            ManifoldModel::Sphere2 => 3,
            ManifoldModel::Hyperbolic3 => 4,
        }
    }

    pub fn sectional_curvature(&self) -> f64 {
        match self {
            ManifoldModel::Euclidean(_) | ManifoldModel::Circle => 0.0,
            ManifoldModel::Sphere2 => 1.0,
            ManifoldModel::Hyperbolic3 => -1.0,
        }
    }

    /// The space-form constant `(d - 1) K` with `Ric = (d - 1) K g`.
    pub fn ricci_constant(&self) -> f64 {
        (self.dim() as f64 - 1.0) * self.sectional_curvature()
    }

    /// Ambient bilinear form restricted to tangent vectors: Euclidean dot
    /// product, or the Minkowski form on the hyperboloid.
    #[inline]
    pub fn inner(&self, a: &Vec4, b: &Vec4) -> f64 {
        match self {
            ManifoldModel::Hyperbolic3 => -a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3],
            _ => a.dot(b),
        }
    }

    #[inline]
    pub fn norm(&self, v: &Vec4) -> f64 {
        self.inner(v, v).max(0.0).sqrt()
    }

    // ---- points -------------------------------------------------------

    /// Builds a point from its ambient coordinates, validating the constraint.
    pub fn point(&self, coords: &[f64]) -> Result<Point> {
        let n = self.ambient_dim();
        if coords.len() != n {
            return Err(Error::invalid(format!(
                "{self} points have {n} ambient coordinates, got {}",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("point has non-finite coordinates"));
        }
        let mut v = Vec4::zeros();
        v.as_mut_slice()[..n].copy_from_slice(coords);
        if let ManifoldModel::Circle = self {
            v[0] = wrap_angle(v[0]);
        }
        let p = Point::new(v);
        self.check_point(&p)?;
        Ok(p)
    }

    pub fn constraint_residual(&self, x: &Point) -> f64 {
        match self {
            ManifoldModel::Euclidean(_) | ManifoldModel::Circle => 0.0,
            ManifoldModel::Sphere2 => (x.coords.norm_squared() - 1.0).abs(),
            ManifoldModel::Hyperbolic3 => (self.inner(&x.coords, &x.coords) + 1.0).abs(),
        }
    }

    pub fn check_point(&self, x: &Point) -> Result<()> {
        let n = self.ambient_dim();
        if x.coords.iter().skip(n).any(|c| *c != 0.0) {
            return Err(Error::invalid("point has nonzero padding coordinates"));
        }
        let res = self.constraint_residual(x);
        if res > POINT_TOL || !res.is_finite() {
            return Err(Error::invalid(format!(
                "point violates the {self} constraint (residual {res:.3e})"
            )));
        }
        match self {
            ManifoldModel::Hyperbolic3 if x.coords[0] <= 0.0 => {
                Err(Error::invalid("hyperboloid point must have x0 > 0"))
            }
            ManifoldModel::Circle if !(0.0..2.0 * PI).contains(&x.coords[0]) => {
                Err(Error::invalid("circle angle must lie in [0, 2pi)"))
            }
            _ => Ok(()),
        }
    }

    /// Nearest point of the constraint set.
    pub fn project_point(&self, x: &Point) -> Point {
        match self {
            ManifoldModel::Euclidean(_) => *x,
            ManifoldModel::Circle => {
                let mut c = x.coords;
                c[0] = wrap_angle(c[0]);
                Point::new(c)
            }
            ManifoldModel::Sphere2 => Point::new(x.coords / x.coords.norm()),
            ManifoldModel::Hyperbolic3 => {
                let q = -self.inner(&x.coords, &x.coords);
                let mut c = x.coords / q.sqrt();
                if c[0] < 0.0 {
                    c = -c;
                }
                Point::new(c)
            }
        }
    }

    // ---- tangent vectors ----------------------------------------------

    pub fn tangent(&self, x: &Point, coords: &[f64]) -> Result<TangentVector> {
        let n = self.ambient_dim();
        if coords.len() != n {
            return Err(Error::invalid(format!(
                "{self} tangent vectors have {n} components, got {}",
                coords.len()
            )));
        }
        let mut v = Vec4::zeros();
        v.as_mut_slice()[..n].copy_from_slice(coords);
        let t = TangentVector::new(v);
        self.check_tangent(x, &t)?;
        Ok(t)
    }

    /// |<x, v>| scaled by max(1, |v|).
    pub fn tangency_residual(&self, x: &Point, v: &TangentVector) -> f64 {
        match self {
            ManifoldModel::Euclidean(_) | ManifoldModel::Circle => 0.0,
            ManifoldModel::Sphere2 | ManifoldModel::Hyperbolic3 => {
                let scale = v.coords.norm().max(1.0);
                self.inner(&x.coords, &v.coords).abs() / scale
            }
        }
    }

    pub fn check_tangent(&self, x: &Point, v: &TangentVector) -> Result<()> {
        if v.coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("tangent vector has non-finite components"));
        }
        let res = self.tangency_residual(x, v);
        if res > POINT_TOL {
            return Err(Error::invalid(format!(
                "vector is not tangent to {self} at the base point (residual {res:.3e})"
            )));
        }
        Ok(())
    }

    /// Orthogonal projection of an ambient vector onto the tangent space at `x`.
    /// Padding slots are cleared.
    #[inline]
    pub fn project_tangent(&self, x: &Point, v: &Vec4) -> Vec4 {
        let mut v = *v;
        v.as_mut_slice()[self.ambient_dim()..].fill(0.0);
        match self {
            ManifoldModel::Euclidean(_) | ManifoldModel::Circle => v,
            ManifoldModel::Sphere2 => v - x.coords * x.coords.dot(&v),
            ManifoldModel::Hyperbolic3 => v + x.coords * self.inner(&x.coords, &v),
        }
    }

    // ---- geodesics -----------------------------------------------------

    pub fn distance(&self, x: &Point, y: &Point) -> f64 {
        match self {
            ManifoldModel::Euclidean(_) => (y.coords - x.coords).norm(),
            ManifoldModel::Circle => angle_difference(x.coords[0], y.coords[0]).abs(),
            ManifoldModel::Sphere2 => {
                let cross = Vector4::new(
                    x.coords[1] * y.coords[2] - x.coords[2] * y.coords[1],
                    x.coords[2] * y.coords[0] - x.coords[0] * y.coords[2],
                    x.coords[0] * y.coords[1] - x.coords[1] * y.coords[0],
                    0.0,
                );
                cross.norm().atan2(x.coords.dot(&y.coords))
            }
            ManifoldModel::Hyperbolic3 => {
                let diff = y.coords - x.coords;
                2.0 * (0.5 * self.norm(&diff)).asinh()
            }
        }
    }

    pub fn exp_map(&self, x: &Point, v: &TangentVector) -> Result<Point> {
        self.check_tangent(x, v)?;
        Ok(self.exp_unchecked(x, &v.coords))
    }

    /// Geodesic endpoint without the tangency check, re-projected onto the
    /// constraint set.
    #[inline]
    pub fn exp_unchecked(&self, x: &Point, v: &Vec4) -> Point {
        match self {
            ManifoldModel::Euclidean(_) => Point::new(x.coords + v),
            ManifoldModel::Circle => {
                let mut c = x.coords;
                c[0] = wrap_angle(c[0] + v[0]);
                Point::new(c)
            }
            ManifoldModel::Sphere2 => {
                let theta = v.norm();
                let y = x.coords * theta.cos() + v * sinc(theta);
                self.project_point(&Point::new(y))
            }
            ManifoldModel::Hyperbolic3 => {
                let theta = self.norm(v);
                let y = x.coords * theta.cosh() + v * sinhc(theta);
                self.project_point(&Point::new(y))
            }
        }
    }

    pub fn log_map(&self, x: &Point, y: &Point) -> Result<TangentVector> {
        match self {
            ManifoldModel::Euclidean(_) => Ok(TangentVector::new(y.coords - x.coords)),
            ManifoldModel::Circle => {
                let d = angle_difference(x.coords[0], y.coords[0]);
                if d.abs() >= PI - CUT_LOCUS_MARGIN {
                    return Err(Error::CutLocus { distance: d.abs() });
                }
                Ok(TangentVector::new(Vec4::new(d, 0.0, 0.0, 0.0)))
            }
            ManifoldModel::Sphere2 => {
                let w = y.coords - x.coords * x.coords.dot(&y.coords);
                let s = w.norm();
                let theta = s.atan2(x.coords.dot(&y.coords));
                if theta >= PI - CUT_LOCUS_MARGIN {
                    return Err(Error::CutLocus { distance: theta });
                }
                let scale = if s < 1e-300 { 1.0 } else { theta / s };
                Ok(TangentVector::new(w * scale))
            }
            ManifoldModel::Hyperbolic3 => {
                let w = y.coords + x.coords * self.inner(&x.coords, &y.coords);
                let s = self.norm(&w);
                let theta = s.asinh();
                let scale = if s < 1e-300 { 1.0 } else { theta / s };
                Ok(TangentVector::new(w * scale))
            }
        }
    }

    pub fn parallel_transport(
        &self,
        x: &Point,
        v: &TangentVector,
        w: &TangentVector,
    ) -> Result<TangentVector> {
        self.check_tangent(x, v)?;
        self.check_tangent(x, w)?;
        Ok(TangentVector::new(self.transport_unchecked(x, &v.coords, &w.coords)))
    }

    /// Transports `w` along `t -> exp_x(t v)` to `t = 1`.
    #[inline]
    pub fn transport_unchecked(&self, x: &Point, v: &Vec4, w: &Vec4) -> Vec4 {
        match self {
            ManifoldModel::Euclidean(_) | ManifoldModel::Circle => *w,
            ManifoldModel::Sphere2 => {
                let theta = v.norm();
                if theta < 1e-300 {
                    return *w;
                }
                let dir = v / theta;
                let a = w.dot(&dir);
                w + (dir * (theta.cos() - 1.0) - x.coords * theta.sin()) * a
            }
            ManifoldModel::Hyperbolic3 => {
                let theta = self.norm(v);
                if theta < 1e-300 {
                    return *w;
                }
                let dir = v / theta;
                let a = self.inner(w, &dir);
                w + (dir * (theta.cosh() - 1.0) + x.coords * theta.sinh()) * a
            }
        }
    }

    // ---- frames --------------------------------------------------------

    /// Coordinates `u^{-1} v` of a tangent vector in the frame.
    #[inline]
    pub fn frame_coords(&self, u: &FramePoint, v: &Vec4) -> Vec4 {
        let mut a = Vec4::zeros();
        for i in 0..self.dim() {
            a[i] = self.inner(&u.frame.column(i).into_owned(), v);
        }
        a
    }

    /// The tangent vector `u a`.
    #[inline]
    pub fn frame_apply(&self, u: &FramePoint, a: &Vec4) -> Vec4 {
        let mut v = Vec4::zeros();
        for i in 0..self.dim() {
            v += u.frame.column(i) * a[i];
        }
        v
    }

    /// Gram matrix of the frame columns under the metric (top-left block).
    pub fn frame_gram(&self, u: &FramePoint) -> Mat4 {
        let d = self.dim();
        let mut g = Mat4::zeros();
        for i in 0..d {
            for j in 0..d {
                g[(i, j)] = self.inner(
                    &u.frame.column(i).into_owned(),
                    &u.frame.column(j).into_owned(),
                );
            }
        }
        g
    }

    pub fn frame_residual(&self, u: &FramePoint) -> f64 {
        let g = self.frame_gram(u) - identity_block(self.dim());
        g.iter().fold(0.0_f64, |acc, e| acc.max(e.abs()))
    }

    pub fn check_frame(&self, u: &FramePoint) -> Result<()> {
        self.check_point(&u.base)?;
        let d = self.dim();
        for i in 0..4 {
            let col = u.frame.column(i).into_owned();
            if i >= d {
                if col.iter().any(|c| *c != 0.0) {
                    return Err(Error::invalid("frame has nonzero padding columns"));
                }
                continue;
            }
            self.check_tangent(&u.base, &TangentVector::new(col))?;
        }
        let res = self.frame_residual(u);
        if res > FRAME_TOL || !res.is_finite() {
            return Err(Error::invalid(format!(
                "frame is not orthonormal (Gram residual {res:.3e})"
            )));
        }
        Ok(())
    }

    /// Projects the columns onto the tangent space and applies modified
    /// Gram-Schmidt in the metric.
    pub fn orthonormalize(&self, u: &FramePoint) -> FramePoint {
        let d = self.dim();
        let mut frame = Mat4::zeros();
        for i in 0..d {
            let mut c = self.project_tangent(&u.base, &u.frame.column(i).into_owned());
            for j in 0..i {
                let prev = frame.column(j).into_owned();
                c -= prev * self.inner(&prev, &c);
            }
            let n = self.norm(&c);
            frame.set_column(i, &(c / n));
        }
        FramePoint {
            base: u.base,
            frame,
        }
    }

    /// Moves the frame along the geodesic `exp_x(t xi)`, then re-orthonormalizes.
    #[inline]
    pub fn transport_frame(&self, u: &FramePoint, xi: &Vec4) -> FramePoint {
        let base = self.exp_unchecked(&u.base, xi);
        let mut frame = Mat4::zeros();
        for i in 0..self.dim() {
            let col = u.frame.column(i).into_owned();
            frame.set_column(i, &self.transport_unchecked(&u.base, xi, &col));
        }
        self.orthonormalize(&FramePoint { base, frame })
    }

    /// The fixed initial frame at `m`: the coordinate frame at the model's
    /// reference point carried to `m` by a fixed isometry.
    pub fn initial_frame(&self, m: &Point) -> Result<FramePoint> {
        self.check_point(m)?;
        let frame = match self {
            ManifoldModel::Euclidean(d) => identity_block(*d),
            ManifoldModel::Circle => identity_block(1),
            ManifoldModel::Sphere2 => {
                // Minimal rotation taking the north pole to m.
                let n = nalgebra::Vector3::new(0.0, 0.0, 1.0);
                let p = nalgebra::Vector3::new(m.coords[0], m.coords[1], m.coords[2]);
                let rot = nalgebra::Rotation3::rotation_between(&n, &p).unwrap_or_else(|| {
                    nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::x_axis(), PI)
                });
                let e1 = rot * nalgebra::Vector3::new(1.0, 0.0, 0.0);
                let e2 = rot * nalgebra::Vector3::new(0.0, 1.0, 0.0);
                let mut f = Mat4::zeros();
                f.set_column(0, &Vec4::new(e1[0], e1[1], e1[2], 0.0));
                f.set_column(1, &Vec4::new(e2[0], e2[1], e2[2], 0.0));
                f
            }
            ManifoldModel::Hyperbolic3 => {
                // Pure boost taking (1, 0, 0, 0) to m.
                let m0 = m.coords[0];
                let mut f = Mat4::zeros();
                for i in 1..4 {
                    let mut col = Vec4::zeros();
                    col[0] = m.coords[i];
                    for j in 1..4 {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        col[j] = delta + m.coords[i] * m.coords[j] / (1.0 + m0);
                    }
                    f.set_column(i - 1, &col);
                }
                f
            }
        };
        Ok(self.orthonormalize(&FramePoint { base: *m, frame }))
    }

    /// Frame matrix of the Ricci tensor, entries `Ric(u e_i, u e_j)`
    /// (top-left `d x d` block).
    pub fn ricci_matrix(&self, u: &FramePoint) -> Result<Mat4> {
        self.check_frame(u)?;
        Ok(self.ricci_unchecked(u))
    }

    #[inline]
    pub fn ricci_unchecked(&self, u: &FramePoint) -> Mat4 {
        let k = self.ricci_constant();
        if k == 0.0 {
            Mat4::zeros()
        } else {
            self.frame_gram(u) * k
        }
    }

    /// Largest meaningful radius for radial quantities.
    pub fn max_radius(&self) -> f64 {
        match self {
            ManifoldModel::Circle | ManifoldModel::Sphere2 => PI,
            _ => f64::INFINITY,
        }
    }
}

// ---- drift vector fields ---------------------------------------------

/// Built-in drift fields with analytic covariant derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VectorField {
    Zero,
    /// `V(x) = A x + b` on a Euclidean model.
    Affine { matrix: Mat4, offset: Vec4 },
    /// `V(x) = c (e - <x, e> x)` on the sphere, the gradient of `c <x, e>`.
    SphericalGradient { strength: f64, pole: Vec4 },
}

impl VectorField {
    /// `V(x) = A x` from row-major entries of a `d x d` matrix.
    pub fn linear(d: usize, rows: &[f64]) -> Result<Self> {
        Self::affine(d, rows, &vec![0.0; d])
    }

    /// `V(x) = b`.
    pub fn constant(offset: &[f64]) -> Result<Self> {
        let d = offset.len();
        Self::affine(d, &vec![0.0; d * d], offset)
    }

    pub fn affine(d: usize, rows: &[f64], offset: &[f64]) -> Result<Self> {
        if d == 0 || d > MAX_EUCLIDEAN_DIM || rows.len() != d * d || offset.len() != d {
            return Err(Error::invalid(format!(
                "affine field needs a {d}x{d} matrix and {d} offsets"
            )));
        }
        if rows.iter().chain(offset).any(|v| !v.is_finite()) {
            return Err(Error::invalid("affine field has non-finite entries"));
        }
        let mut matrix = Mat4::zeros();
        let mut b = Vec4::zeros();
        for i in 0..d {
            b[i] = offset[i];
            for j in 0..d {
                matrix[(i, j)] = rows[i * d + j];
            }
        }
        Ok(VectorField::Affine { matrix, offset: b })
    }

    /// The isotropic Ornstein-Uhlenbeck field `V(x) = -kappa x`.
    pub fn ornstein_uhlenbeck(d: usize, kappa: f64) -> Result<Self> {
        let mut rows = vec![0.0; d * d];
        for i in 0..d {
            rows[i * d + i] = -kappa;
        }
        Self::linear(d, &rows)
    }

    pub fn spherical_gradient(strength: f64, pole: [f64; 3]) -> Result<Self> {
        let e = Vec4::new(pole[0], pole[1], pole[2], 0.0);
        if !strength.is_finite() || !e.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("spherical gradient field has non-finite parameters"));
        }
        Ok(VectorField::SphericalGradient { strength, pole: e })
    }

    pub fn is_zero(&self) -> bool {
        match self {
            VectorField::Zero => true,
            VectorField::Affine { matrix, offset } => {
                matrix.iter().all(|v| *v == 0.0) && offset.iter().all(|v| *v == 0.0)
            }
            VectorField::SphericalGradient { strength, .. } => *strength == 0.0,
        }
    }

    pub fn validate(&self, model: &ManifoldModel) -> Result<()> {
        match (self, model) {
            (VectorField::Zero, _) => Ok(()),
            (VectorField::Affine { matrix, offset }, ManifoldModel::Euclidean(d)) => {
                let padded = (0..4).any(|i| {
                    (i >= *d && offset[i] != 0.0)
                        || (0..4).any(|j| (i >= *d || j >= *d) && matrix[(i, j)] != 0.0)
                });
                if padded {
                    Err(Error::invalid(format!("affine field does not fit {model}")))
                } else {
                    Ok(())
                }
            }
            (VectorField::SphericalGradient { .. }, ManifoldModel::Sphere2) => Ok(()),
            (field, model) => Err(Error::invalid(format!(
                "vector field {field:?} is not defined on {model}"
            ))),
        }
    }

    #[inline]
    pub fn value(&self, x: &Point) -> Vec4 {
        match self {
            VectorField::Zero => Vec4::zeros(),
            VectorField::Affine { matrix, offset } => matrix * x.coords + offset,
            VectorField::SphericalGradient { strength, pole } => {
                (pole - x.coords * x.coords.dot(pole)) * *strength
            }
        }
    }

    /// Frame matrix of the covariant derivative, entries `<nabla_{u e_j} V, u e_i>`.
    #[inline]
    pub fn covariant_derivative(&self, model: &ManifoldModel, u: &FramePoint) -> Mat4 {
        match self {
            VectorField::Zero => Mat4::zeros(),
            VectorField::Affine { matrix, .. } => u.frame.transpose() * matrix * u.frame,
            VectorField::SphericalGradient { strength, pole } => {
                identity_block(model.dim()) * (-strength * u.base.coords.dot(pole))
            }
        }
    }
}

/// `V(x)` together with the frame matrix of `nabla V`.
pub fn vector_field_eval(
    model: &ManifoldModel,
    field: &VectorField,
    u: &FramePoint,
) -> Result<(TangentVector, Mat4)> {
    field.validate(model)?;
    model.check_frame(u)?;
    Ok((
        TangentVector::new(field.value(&u.base)),
        field.covariant_derivative(model, u),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s2(x: f64, y: f64, z: f64) -> Point {
        ManifoldModel::Sphere2.point(&[x, y, z]).unwrap()
    }

    #[test]
    fn euclidean_exp_and_log() {
        let m = ManifoldModel::Euclidean(2);
        let x = m.point(&[0.0, 0.0]).unwrap();
        let v = m.tangent(&x, &[1.0, 2.0]).unwrap();
        assert_eq!(m.exp_map(&x, &v).unwrap().ambient(&m), &[1.0, 2.0]);
        let y = m.point(&[3.0, 4.0]).unwrap();
        let l = m.log_map(&x, &y).unwrap();
        assert_eq!(l.coords, Vec4::new(3.0, 4.0, 0.0, 0.0));
        assert_eq!(m.norm(&l.coords), 5.0);
    }

    #[test]
    fn sphere_exp_examples() {
        let m = ManifoldModel::Sphere2;
        let n = s2(0.0, 0.0, 1.0);
        let zero = TangentVector::zero();
        assert_eq!(m.exp_map(&n, &zero).unwrap(), n);
        let v = m.tangent(&n, &[PI / 2.0, 0.0, 0.0]).unwrap();
        let y = m.exp_map(&n, &v).unwrap();
        assert!((y.coords - Vec4::new(1.0, 0.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn sphere_log_on_meridian() {
        let m = ManifoldModel::Sphere2;
        let x = s2(0.0, 0.0, 1.0);
        let y = s2(0.3_f64.sin(), 0.0, 0.3_f64.cos());
        let v = m.log_map(&x, &y).unwrap();
        assert!((v.coords - Vec4::new(0.3, 0.0, 0.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn sphere_log_rejects_cut_locus() {
        let m = ManifoldModel::Sphere2;
        let x = s2(0.0, 0.0, 1.0);
        let t = PI - 5e-4;
        let y = s2(t.sin(), 0.0, t.cos());
        match m.log_map(&x, &y) {
            Err(Error::CutLocus { distance }) => assert!((distance - t).abs() < 1e-12),
            other => panic!("expected cut-locus error, got {other:?}"),
        }
    }

    #[test]
    fn non_tangent_is_rejected() {
        let m = ManifoldModel::Sphere2;
        let x = s2(0.0, 0.0, 1.0);
        assert!(m.tangent(&x, &[0.0, 0.0, 0.1]).is_err());
        let v = TangentVector::new(Vec4::new(0.0, 0.0, 0.5, 0.0));
        assert!(matches!(m.exp_map(&x, &v), Err(Error::InvalidInput(_))));
        let h = ManifoldModel::Hyperbolic3;
        let o = h.point(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(h.tangent(&o, &[0.2, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn point_validation() {
        assert!(ManifoldModel::Sphere2.point(&[1.0, 1.0, 0.0]).is_err());
        assert!(ManifoldModel::Hyperbolic3.point(&[-1.0, 0.0, 0.0, 0.0]).is_err());
        assert!(ManifoldModel::Sphere2.point(&[1.0, 0.0]).is_err());
        let c = ManifoldModel::Circle.point(&[-0.5]).unwrap();
        assert!((c.coords[0] - (2.0 * PI - 0.5)).abs() < 1e-15);
        assert!(ManifoldModel::euclidean(5).is_err());
        assert!(ManifoldModel::from_name("Sphere5", None).is_err());
    }

    #[test]
    fn hyperbolic_exp_log_roundtrip() {
        let m = ManifoldModel::Hyperbolic3;
        let x = m.point(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let v = m.tangent(&x, &[0.0, 0.7, -0.2, 0.4]).unwrap();
        let y = m.exp_map(&x, &v).unwrap();
        assert!(m.constraint_residual(&y) < 1e-12);
        let back = m.log_map(&x, &y).unwrap();
        assert!((back.coords - v.coords).norm() < 1e-12);
        assert!((m.distance(&x, &y) - m.norm(&v.coords)).abs() < 1e-12);
    }

    #[test]
    fn transport_of_velocity_is_geodesic_velocity() {
        let m = ManifoldModel::Sphere2;
        let x = s2(0.0, 0.0, 1.0);
        let v = m.tangent(&x, &[0.4, 0.3, 0.0]).unwrap();
        let w = m.parallel_transport(&x, &v, &v).unwrap();
        // derivative of cos|v| x + sin|v| v/|v| at t = 1
        let th = 0.5;
        let expected = -x.coords * th * th.sin() + v.coords * th.cos();
        assert!((w.coords - expected).norm() < 1e-14);
        assert!((w.coords.norm() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn octant_holonomy_is_quarter_turn() {
        let m = ManifoldModel::Sphere2;
        let a = s2(0.0, 0.0, 1.0);
        let b = s2(1.0, 0.0, 0.0);
        let c = s2(0.0, 1.0, 0.0);
        let w0 = m.tangent(&a, &[1.0, 0.0, 0.0]).unwrap();
        let mut w = w0;
        for (p, q) in [(a, b), (b, c), (c, a)] {
            let v = m.log_map(&p, &q).unwrap();
            w = m.parallel_transport(&p, &v, &w).unwrap();
        }
        let cos = w.coords.dot(&w0.coords);
        assert!((cos.acos() - PI / 2.0).abs() < 1e-12, "angle {}", cos.acos());
    }

    #[test]
    fn ricci_catalog() {
        let e = ManifoldModel::Euclidean(3);
        let o = e.point(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(e.ricci_matrix(&e.initial_frame(&o).unwrap()).unwrap(), Mat4::zeros());
        let s = ManifoldModel::Sphere2;
        let u = s.initial_frame(&s2(0.6, 0.0, 0.8)).unwrap();
        let r = s.ricci_matrix(&u).unwrap();
        assert!((r - identity_block(2)).norm() < 1e-12);
        let h = ManifoldModel::Hyperbolic3;
        let p = h.point(&[2.0_f64.sqrt(), 1.0, 0.0, 0.0]).unwrap();
        let r = h.ricci_matrix(&h.initial_frame(&p).unwrap()).unwrap();
        assert!((r + identity_block(3) * 2.0).norm() < 1e-12);
    }

    #[test]
    fn initial_frames_are_orthonormal() {
        let s = ManifoldModel::Sphere2;
        for p in [s2(0.0, 0.0, 1.0), s2(0.0, 0.0, -1.0), s2(1.0, 0.0, 0.0)] {
            let u = s.initial_frame(&p).unwrap();
            assert!(s.check_frame(&u).is_ok());
        }
        // the north pole keeps the coordinate frame
        let u = s.initial_frame(&s2(0.0, 0.0, 1.0)).unwrap();
        assert!((u.frame.column(0) - Vec4::new(1.0, 0.0, 0.0, 0.0)).norm() < 1e-15);
        let h = ManifoldModel::Hyperbolic3;
        let p = h.point(&[3.0_f64.sqrt(), 1.0, 1.0, 0.0]).unwrap();
        assert!(h.check_frame(&h.initial_frame(&p).unwrap()).is_ok());
    }

    #[test]
    fn vector_field_examples() {
        let e = ManifoldModel::Euclidean(1);
        let x = e.point(&[0.8]).unwrap();
        let u = e.initial_frame(&x).unwrap();
        let (v, dv) = vector_field_eval(&e, &VectorField::Zero, &u).unwrap();
        assert_eq!(v.coords, Vec4::zeros());
        assert_eq!(dv, Mat4::zeros());
        let ou = VectorField::ornstein_uhlenbeck(1, 0.5).unwrap();
        let (v, dv) = vector_field_eval(&e, &ou, &u).unwrap();
        assert_eq!(v.coords[0], -0.4);
        assert_eq!(dv[(0, 0)], -0.5);

        let s = ManifoldModel::Sphere2;
        let field = VectorField::spherical_gradient(1.0, [0.0, 0.0, 1.0]).unwrap();
        let mut frame = Mat4::zeros();
        frame.set_column(0, &Vec4::new(0.0, 1.0, 0.0, 0.0));
        frame.set_column(1, &Vec4::new(0.0, 0.0, 1.0, 0.0));
        let u = FramePoint {
            base: s2(1.0, 0.0, 0.0),
            frame,
        };
        let (v, dv) = vector_field_eval(&s, &field, &u).unwrap();
        assert_eq!(v.coords, Vec4::new(0.0, 0.0, 1.0, 0.0));
        assert_eq!(dv, Mat4::zeros());
        assert!(vector_field_eval(&e, &field, &e.initial_frame(&x).unwrap()).is_err());
    }
}
