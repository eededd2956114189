//! Conditioning on the first exit time `T_r` from a ball of radius `r`
//! around the start point, on rotationally symmetric models.
//!
//! The survival function `u(s, rho) = P(T_r > s | start at radius rho)` comes
//! from eigen and image series for the flat interval and 3-ball, or from a
//! Crank-Nicolson solve for a general area function `A(rho)`. A target
//! density `g` for `T_r` gives the space-time harmonic function
//! `phi(t, rho) = E[g(t + T_r)]`, whose radial log-derivative is the
//! conditioned drift.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::{self, Write};

use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::output::{fmt_f64, write_row};
use crate::quadrature::gauss_legendre_on;
use crate::rng::{map_paths, standard_normal, uniform};

/// Default horizon in units of `r^2`; the `d = 1` survival at `12 r^2` is
/// below `1e-6`.
pub const DEFAULT_TAU_FACTOR: f64 = 12.0;
const NORMALIZATION_TOL: f64 = 1e-4;
/// Inward drift may move a path at most this fraction of its distance to
/// the boundary per step.
const INWARD_STEP_FRACTION: f64 = 0.05;
const MIN_STEP: f64 = 1e-10;
const START_CELLS: usize = 32;
const START_SUBSTEPS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AreaFunction {
    /// `rho^k`: flat space of dimension `k + 1`.
    Power(u32),
    /// `sin(rho)`: geodesic balls on the unit 2-sphere.
    Sine,
    /// `sinh(rho)`: geodesic balls on the hyperbolic plane.
    Sinh,
}

impl AreaFunction {
    pub fn eval(&self, rho: f64) -> f64 {
        match self {
            AreaFunction::Power(k) => rho.powi(*k as i32),
            AreaFunction::Sine => rho.sin(),
            AreaFunction::Sinh => rho.sinh(),
        }
    }

    /// `A'(rho) / A(rho)`.
    pub fn log_derivative(&self, rho: f64) -> f64 {
        match self {
            AreaFunction::Power(k) => *k as f64 / rho,
            AreaFunction::Sine => 1.0 / rho.tan(),
            AreaFunction::Sinh => 1.0 / rho.tanh(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RadialModel {
    /// Exit of one-dimensional Brownian motion from `(-r, r)`.
    EuclideanInterval { radius: f64 },
    /// Exit of three-dimensional Brownian motion from the ball of radius `r`.
    EuclideanBall3 { radius: f64 },
    RadialGrid { area: AreaFunction, radius: f64 },
}

impl RadialModel {
    pub fn radius(&self) -> f64 {
        match self {
            RadialModel::EuclideanInterval { radius }
            | RadialModel::EuclideanBall3 { radius }
            | RadialModel::RadialGrid { radius, .. } => *radius,
        }
    }

    /// Dimension of the flat space whose radial process this is, if any.
    pub fn flat_dimension(&self) -> Option<usize> {
        match self {
            RadialModel::EuclideanInterval { .. } => Some(1),
            RadialModel::EuclideanBall3 { .. } => Some(3),
            RadialModel::RadialGrid {
                area: AreaFunction::Power(k),
                ..
            } => Some(*k as usize + 1),
            RadialModel::RadialGrid { .. } => None,
        }
    }

    fn log_area_derivative(&self, rho: f64) -> f64 {
        match self {
            RadialModel::EuclideanInterval { .. } => 0.0,
            RadialModel::EuclideanBall3 { .. } => 2.0 / rho,
            RadialModel::RadialGrid { area, .. } => area.log_derivative(rho),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProfileSpec {
    pub model: RadialModel,
    pub tau_max: f64,
    pub n_s: usize,
    pub n_rho: usize,
}

impl ProfileSpec {
    /// Defaults: `tau_max = 12 r^2`, `ds = r^2 / 1000`, 600 radial cells.
    pub fn new(model: RadialModel) -> Self {
        let r2 = model.radius().powi(2);
        ProfileSpec {
            model,
            tau_max: DEFAULT_TAU_FACTOR * r2,
            n_s: (DEFAULT_TAU_FACTOR * 1000.0) as usize,
            n_rho: 600,
        }
    }

    pub fn with_grid(mut self, n_s: usize, n_rho: usize) -> Self {
        self.n_s = n_s;
        self.n_rho = n_rho;
        self
    }

    pub fn with_tau_max(mut self, tau_max: f64) -> Self {
        self.tau_max = tau_max;
        self
    }

    fn validate(&self) -> Result<()> {
        let r = self.model.radius();
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::out_of_range("r", r, "radius must be positive"));
        }
        if let RadialModel::RadialGrid {
            area: AreaFunction::Sine,
            ..
        } = self.model
        {
            if r >= PI {
                return Err(Error::out_of_range("r", r, "sine area needs r < pi"));
            }
        }
        if !(self.tau_max >= 5.0 * r * r) || !self.tau_max.is_finite() {
            return Err(Error::out_of_range("tau_max", self.tau_max, "need tau_max >= 5 r^2"));
        }
        if self.n_s < 10 || self.n_rho < 4 {
            return Err(Error::Resolution(format!(
                "grid of {} time by {} radial cells is too coarse",
                self.n_s, self.n_rho
            )));
        }
        Ok(())
    }
}

#[inline]
fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

#[inline]
fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `(u, f)` for exit from `(-r, r)` started at `x`.
fn interval_series(r: f64, s: f64, x: f64) -> (f64, f64) {
    if x.abs() >= r {
        return (0.0, 0.0);
    }
    if s <= 0.0 {
        return (1.0, 0.0);
    }
    if s <= r * r {
        // Images on (0, L) with z = x + r.
        let l = 2.0 * r;
        let z = x + r;
        let sq = s.sqrt();
        let (mut u, mut f) = (0.0, 0.0);
        for k in -2..=2 {
            let shift = 2.0 * k as f64 * l;
            for (c, a) in [(1.0, l - z + shift), (-1.0, -z + shift), (-1.0, l + z + shift), (1.0, z + shift)] {
                u += c * normal_cdf(a / sq);
                f += c * a * normal_pdf(a / sq) / (2.0 * s * sq);
            }
        }
        (u, f)
    } else {
        let (mut u, mut f) = (0.0, 0.0);
        for n in 0..200 {
            let m = (2 * n + 1) as f64;
            let lambda = m * m * PI * PI / (8.0 * r * r);
            let decay = (-lambda * s).exp();
            if decay < 1e-18 {
                break;
            }
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            let term = 4.0 / PI * sign / m * (m * PI * x / (2.0 * r)).cos() * decay;
            u += term;
            f += term * lambda;
        }
        (u, f)
    }
}

/// `(u, f)` for exit from the 3-ball of radius `r` started at radius `rho`.
fn ball3_series(r: f64, s: f64, rho: f64) -> (f64, f64) {
    if rho >= r {
        return (0.0, 0.0);
    }
    if s <= 0.0 {
        return (1.0, 0.0);
    }
    if s <= r * r {
        // rho u solves the 1-d problem on (-r, r) with odd data y.
        let x = rho.max(1e-6 * r);
        let sq = s.sqrt();
        let phi_s = |z: f64| normal_pdf(z / sq) / sq;
        let moment = |c: f64| {
            c * (normal_cdf((r - c) / sq) - normal_cdf((-r - c) / sq)) + s * (phi_s(-r - c) - phi_s(r - c))
        };
        let moment_rate = |c: f64| {
            let dphi = |z: f64| -z / s * phi_s(z);
            0.5 * r * (dphi(r - c) + dphi(-r - c)) - 0.5 * (phi_s(r - c) - phi_s(-r - c))
        };
        let (mut w, mut dw) = (0.0, 0.0);
        for k in -2..=2 {
            let shift = 4.0 * k as f64 * r;
            let (c1, c2) = (x - shift, -x - 2.0 * r - shift);
            w += moment(c1) - moment(c2);
            dw += moment_rate(c1) - moment_rate(c2);
        }
        (w / x, -dw / x)
    } else {
        let (mut u, mut f) = (0.0, 0.0);
        for n in 1..400 {
            let nf = n as f64;
            let mu = nf * nf * PI * PI / (2.0 * r * r);
            let decay = (-mu * s).exp();
            if decay < 1e-18 {
                break;
            }
            let arg = nf * PI * rho / r;
            let shape = if arg < 1e-8 { 1.0 } else { arg.sin() / arg };
            let sign = if n % 2 == 1 { 2.0 } else { -2.0 };
            let term = sign * shape * decay;
            u += term;
            f += term * mu;
        }
        (u, f)
    }
}

/// Survival and exit-density tables on a uniform `(s, rho)` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct HittingProfile {
    pub model: RadialModel,
    pub tau_max: f64,
    pub ds: f64,
    pub d_rho: f64,
    pub n_s: usize,
    pub n_rho: usize,
    survival: Vec<f64>,
    density: Vec<f64>,
}

impl HittingProfile {
    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.n_rho + 1) + j
    }

    pub fn s(&self, i: usize) -> f64 {
        i as f64 * self.ds
    }

    pub fn rho(&self, j: usize) -> f64 {
        j as f64 * self.d_rho
    }

    pub fn survival(&self, i: usize, j: usize) -> f64 {
        self.survival[self.idx(i, j)]
    }

    pub fn exit_density(&self, i: usize, j: usize) -> f64 {
        self.density[self.idx(i, j)]
    }

    fn analytic(&self, s: f64, rho: f64) -> Option<(f64, f64)> {
        match self.model {
            RadialModel::EuclideanInterval { radius } => Some(interval_series(radius, s, rho)),
            RadialModel::EuclideanBall3 { radius } => Some(ball3_series(radius, s, rho)),
            RadialModel::RadialGrid { .. } => None,
        }
    }

    fn bilinear(&self, table: &[f64], s: f64, rho: f64) -> f64 {
        let x = (s / self.ds).clamp(0.0, self.n_s as f64);
        let y = (rho / self.d_rho).clamp(0.0, self.n_rho as f64);
        let i = (x.floor() as usize).min(self.n_s - 1);
        let j = (y.floor() as usize).min(self.n_rho - 1);
        let (a, b) = (x - i as f64, y - j as f64);
        let v = |i, j| table[self.idx(i, j)];
        (1.0 - a) * ((1.0 - b) * v(i, j) + b * v(i, j + 1)) + a * ((1.0 - b) * v(i + 1, j) + b * v(i + 1, j + 1))
    }

    /// `u(s, rho)`: exact for the series models, interpolated otherwise.
    pub fn survival_at(&self, s: f64, rho: f64) -> f64 {
        match self.analytic(s, rho) {
            Some((u, _)) => u,
            None => self.bilinear(&self.survival, s, rho),
        }
    }

    pub fn density_at(&self, s: f64, rho: f64) -> f64 {
        match self.analytic(s, rho) {
            Some((_, f)) => f,
            None => self.bilinear(&self.density, s, rho),
        }
    }

    /// Integrates `w(s) f(s, rho_j)` over `[0, tau_max]`.
    fn integrate_density<W: Fn(f64) -> f64>(&self, j: usize, w: W) -> f64 {
        let rho = self.rho(j);
        if self.analytic(0.0, rho).is_some() {
            // Geometric panels resolve the boundary layer at small s.
            let r2 = self.model.radius().powi(2);
            let mut edges = vec![0.0];
            let mut e = 1e-9 * r2;
            while e < self.tau_max {
                edges.push(e);
                e *= 2.0;
            }
            edges.push(self.tau_max);
            let mut total = 0.0;
            for win in edges.windows(2) {
                let (x, wt) = gauss_legendre_on(24, win[0], win[1]);
                for (s, q) in x.iter().zip(&wt) {
                    total += q * w(*s) * self.density_at(*s, rho);
                }
            }
            total
        } else {
            let mut total = 0.0;
            for i in 0..=self.n_s {
                let q = if i == 0 || i == self.n_s { 0.5 } else { 1.0 };
                total += q * w(self.s(i)) * self.exit_density(i, j);
            }
            total * self.ds
        }
    }

    /// `int f ds + u(tau_max) - 1` at radial node `j`.
    pub fn mass_defect(&self, j: usize) -> f64 {
        self.integrate_density(j, |_| 1.0) + self.survival(self.n_s, j) - 1.0
    }

    /// `E[T_r]` from `int s f(s, rho_j) ds`, truncated at `tau_max`.
    pub fn mean_exit_time(&self, j: usize) -> f64 {
        self.integrate_density(j, |s| s)
    }
}

fn series_profile(spec: &ProfileSpec) -> HittingProfile {
    let r = spec.model.radius();
    let ds = spec.tau_max / spec.n_s as f64;
    let d_rho = r / spec.n_rho as f64;
    let width = spec.n_rho + 1;
    let mut survival = vec![0.0; (spec.n_s + 1) * width];
    let mut density = vec![0.0; (spec.n_s + 1) * width];
    for i in 0..=spec.n_s {
        for j in 0..=spec.n_rho {
            let (s, rho) = (i as f64 * ds, j as f64 * d_rho);
            let (u, f) = match spec.model {
                RadialModel::EuclideanInterval { .. } => interval_series(r, s, rho),
                RadialModel::EuclideanBall3 { .. } => ball3_series(r, s, rho),
                RadialModel::RadialGrid { .. } => unreachable!(),
            };
            survival[i * width + j] = u;
            density[i * width + j] = f;
        }
    }
    HittingProfile {
        model: spec.model,
        tau_max: spec.tau_max,
        ds,
        d_rho,
        n_s: spec.n_s,
        n_rho: spec.n_rho,
        survival,
        density,
    }
}

/// Solves a tridiagonal system in place (Thomas algorithm).
fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], scratch: &mut [f64]) {
    let n = diag.len();
    scratch[0] = upper[0] / diag[0];
    rhs[0] /= diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * scratch[i - 1];
        scratch[i] = if i + 1 < n { upper[i] / m } else { 0.0 };
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
}

/// Finite-volume Crank-Nicolson for `u_s = (u'' + (A'/A) u') / 2`, with
/// zero flux at the centre and `u = 0` at `rho = r`. The first two steps are
/// replaced by four implicit Euler half-steps to damp the start-up
/// discontinuity, and the first cells are split into finer substeps.
fn crank_nicolson_profile(spec: &ProfileSpec, area: AreaFunction) -> Result<HittingProfile> {
    let r = spec.model.radius();
    let n = spec.n_rho;
    let ds = spec.tau_max / spec.n_s as f64;
    let h = r / n as f64;
    // Cell volumes by Simpson on [rho_j - h/2, rho_j + h/2] within [0, r].
    let volume: Vec<f64> = (0..n)
        .map(|j| {
            let lo = (j as f64 - 0.5).max(0.0) * h;
            let hi = (j as f64 + 0.5) * h;
            (hi - lo) / 6.0 * (area.eval(lo) + 4.0 * area.eval(0.5 * (lo + hi)) + area.eval(hi))
        })
        .collect();
    // Face conductances between j and j + 1, divided by h; zero at the centre.
    let face: Vec<f64> = (0..n).map(|j| 0.5 * area.eval((j as f64 + 0.5) * h) / h).collect();
    let apply = |u: &[f64], j: usize| -> f64 {
        let right = if j + 1 < n { u[j + 1] } else { 0.0 };
        let mut v = face[j] * (right - u[j]);
        if j > 0 {
            v -= face[j - 1] * (u[j] - u[j - 1]);
        }
        v
    };
    let width = n + 1;
    let mut survival = vec![0.0; (spec.n_s + 1) * width];
    let mut u = vec![1.0; n];
    survival[..n].copy_from_slice(&u);
    let (mut lower, mut diag, mut upper) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut rhs = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    // theta = 1: implicit Euler, theta = 1/2: Crank-Nicolson.
    let mut step = |u: &mut Vec<f64>, dt: f64, theta: f64| {
        for j in 0..n {
            let c = volume[j] / dt;
            let left = if j > 0 { face[j - 1] } else { 0.0 };
            lower[j] = -theta * left;
            upper[j] = -theta * face[j];
            diag[j] = c + theta * (left + face[j]);
            rhs[j] = c * u[j] + (1.0 - theta) * apply(u, j);
        }
        thomas(&lower, &diag, &upper, &mut rhs, &mut scratch);
        u.copy_from_slice(&rhs);
    };
    let mut taken = 0;
    for i in 1..=spec.n_s {
        let sub = if i <= START_CELLS { START_SUBSTEPS } else { 1 };
        for _ in 0..sub {
            let dt = ds / sub as f64;
            if taken < 4 {
                step(&mut u, 0.5 * dt, 1.0);
                step(&mut u, 0.5 * dt, 1.0);
            } else {
                step(&mut u, dt, 0.5);
            }
            taken += 1;
        }
        survival[i * width..i * width + n].copy_from_slice(&u);
    }
    // Stability diagnostics: survival stays in [0, 1] and never increases.
    for i in 1..=spec.n_s {
        for j in 0..n {
            let (prev, cur) = (survival[(i - 1) * width + j], survival[i * width + j]);
            if !(-1e-9..=1.0 + 1e-9).contains(&cur) || cur > prev + 1e-9 {
                return Err(Error::Resolution(format!(
                    "Crank-Nicolson survival oscillates at s = {:.4e}, rho = {:.4e}; refine the grid",
                    i as f64 * ds,
                    j as f64 * h
                )));
            }
        }
    }
    let mut density = vec![0.0; survival.len()];
    for i in 0..=spec.n_s {
        for j in 0..width {
            let v = |k: usize| survival[k * width + j];
            density[i * width + j] = if i == 0 {
                (v(0) - v(1)) / ds
            } else if i == spec.n_s {
                (v(i - 1) - v(i)) / ds
            } else {
                (v(i - 1) - v(i + 1)) / (2.0 * ds)
            };
        }
    }
    Ok(HittingProfile {
        model: spec.model,
        tau_max: spec.tau_max,
        ds,
        d_rho: h,
        n_s: spec.n_s,
        n_rho: n,
        survival,
        density,
    })
}

/// Survival and exit-density tables for `spec`.
pub fn exit_density(spec: &ProfileSpec) -> Result<HittingProfile> {
    spec.validate()?;
    match spec.model {
        RadialModel::RadialGrid { area, .. } => crank_nicolson_profile(spec, area),
        _ => Ok(series_profile(spec)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeShape {
    Constant,
    Indicator { a: f64, b: f64 },
    /// Gaussian bump truncated to eight widths on either side.
    Bump { center: f64, width: f64 },
}

/// A target density `g = dQ_{T_r} / dP_{T_r}` on `[0, tau_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeDensity {
    pub shape: TimeShape,
    pub scale: f64,
}

const BUMP_WIDTHS: f64 = 8.0;

impl TimeDensity {
    /// `g = 1`: conditioning by the true law.
    pub fn constant() -> Self {
        TimeDensity {
            shape: TimeShape::Constant,
            scale: 1.0,
        }
    }

    /// A shape with an explicit scale; checked later by [`phi_from_target`].
    pub fn unnormalized(shape: TimeShape, scale: f64) -> Self {
        TimeDensity { shape, scale }
    }

    /// The normalized indicator of `[a, b]`.
    pub fn indicator(profile: &HittingProfile, a: f64, b: f64) -> Result<Self> {
        if !(0.0 <= a && a < b) {
            return Err(Error::invalid(format!("indicator needs 0 <= a < b, got [{a}, {b}]")));
        }
        Self::normalized(profile, TimeShape::Indicator { a, b })
    }

    /// A normalized narrow bump standing in for a Dirac mass at `center`.
    pub fn bump(profile: &HittingProfile, center: f64, width: f64) -> Result<Self> {
        if !(center > 0.0 && width > 0.0) {
            return Err(Error::invalid("bump needs positive center and width"));
        }
        Self::normalized(profile, TimeShape::Bump { center, width })
    }

    fn normalized(profile: &HittingProfile, shape: TimeShape) -> Result<Self> {
        let raw = TimeDensity { shape, scale: 1.0 };
        let end = raw.support_end();
        if end > 0.9 * profile.tau_max {
            return Err(Error::invalid(format!(
                "target support ends at {end}, beyond 0.9 tau_max = {}",
                0.9 * profile.tau_max
            )));
        }
        let z = raw.normalization(profile);
        if !(z > 0.0) {
            return Err(Error::Degenerate("target has no mass under the exit law".into()));
        }
        Ok(TimeDensity { shape, scale: 1.0 / z })
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.shape, TimeShape::Constant)
    }

    pub fn support_end(&self) -> f64 {
        match self.shape {
            TimeShape::Constant => f64::INFINITY,
            TimeShape::Indicator { b, .. } => b,
            TimeShape::Bump { center, width } => center + BUMP_WIDTHS * width,
        }
    }

    pub fn value(&self, s: f64) -> f64 {
        self.scale
            * match self.shape {
                TimeShape::Constant => 1.0,
                TimeShape::Indicator { a, b } => f64::from(u8::from(s >= a && s <= b)),
                TimeShape::Bump { center, width } => {
                    let z = (s - center) / width;
                    if z.abs() > BUMP_WIDTHS {
                        0.0
                    } else {
                        (-0.5 * z * z).exp()
                    }
                }
            }
    }

    /// Mean of `g` over `[lo, hi]`.
    fn cell_mean(&self, lo: f64, hi: f64) -> f64 {
        match self.shape {
            TimeShape::Indicator { a, b } => {
                let overlap = (hi.min(b) - lo.max(a)).max(0.0);
                self.scale * overlap / (hi - lo)
            }
            _ => (self.value(lo) + 4.0 * self.value(0.5 * (lo + hi)) + self.value(hi)) / 6.0,
        }
    }

    /// The discrete `int g(s) f(s, 0) ds` used by [`phi_from_target`].
    pub fn normalization(&self, profile: &HittingProfile) -> f64 {
        if self.is_constant() {
            return self.scale;
        }
        (0..profile.n_s)
            .map(|k| {
                let g = self.cell_mean(profile.s(k), profile.s(k + 1));
                g * (profile.survival(k, 0) - profile.survival(k + 1, 0))
            })
            .sum()
    }

    /// CDF of `T_r` under the conditioned law, `int_0^tau g(s) f(s, 0) ds`.
    pub fn exit_cdf(&self, profile: &HittingProfile, tau: f64) -> f64 {
        let u = |s: f64| profile.survival_at(s, 0.0);
        match self.shape {
            TimeShape::Constant => self.scale * (1.0 - u(tau.max(0.0))),
            TimeShape::Indicator { a, b } => {
                if tau <= a {
                    0.0
                } else {
                    self.scale * (u(a) - u(tau.min(b)))
                }
            }
            TimeShape::Bump { center, width } => {
                let lo = (center - BUMP_WIDTHS * width).max(0.0);
                let hi = tau.min(center + BUMP_WIDTHS * width);
                if hi <= lo {
                    return 0.0;
                }
                let (x, w) = gauss_legendre_on(200, lo, hi);
                x.iter().zip(&w).map(|(s, q)| q * self.value(*s) * profile.density_at(*s, 0.0)).sum()
            }
        }
    }
}

/// `phi(t, rho) = E[g(t + T_r) | rho]` on the profile grid, for
/// `t` up to the end of the target's support.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedExitField {
    pub model: RadialModel,
    pub target: TimeDensity,
    pub tau_max: f64,
    pub dt: f64,
    pub d_rho: f64,
    pub n_t: usize,
    pub n_rho: usize,
    phi: Vec<f64>,
    /// Largest `|phi_t + L phi|` on the inner half of the ball, relative to
    /// the largest `|phi_t|` there.
    pub pde_residual: f64,
}

impl ConditionedExitField {
    pub fn phi(&self, i: usize, j: usize) -> f64 {
        if self.target.is_constant() {
            return 1.0;
        }
        self.phi[i * (self.n_rho + 1) + j]
    }

    pub fn radius(&self) -> f64 {
        self.model.radius()
    }

    /// `(phi, d phi / d rho)` on grid row `i`, by cubic Hermite
    /// interpolation with centred-difference slopes.
    fn row_eval(&self, i: usize, rho: f64) -> (f64, f64) {
        let n = self.n_rho;
        let h = self.d_rho;
        let p = |j: usize| self.phi(i, j);
        let slope = |j: usize| -> f64 {
            if j == 0 {
                0.0
            } else if j == n {
                (p(n) - p(n - 1)) / h
            } else {
                (p(j + 1) - p(j - 1)) / (2.0 * h)
            }
        };
        let x = rho / h;
        let j = (x.floor() as usize).min(n - 1);
        let t = x - j as f64;
        let (p0, p1, m0, m1) = (p(j), p(j + 1), slope(j) * h, slope(j + 1) * h);
        let t2 = t * t;
        let t3 = t2 * t;
        let value = (2.0 * t3 - 3.0 * t2 + 1.0) * p0 + (t3 - 2.0 * t2 + t) * m0 + (-2.0 * t3 + 3.0 * t2) * p1 + (t3 - t2) * m1;
        let deriv = ((6.0 * t2 - 6.0 * t) * p0 + (3.0 * t2 - 4.0 * t + 1.0) * m0 + (-6.0 * t2 + 6.0 * t) * p1 + (3.0 * t2 - 2.0 * t) * m1) / h;
        (value, deriv)
    }
}

/// Builds `phi` from the survival table: with cell means `G` of `g`,
/// `phi(t_i, rho) = sum_k G_{i+k} (u_k(rho) - u_{k+1}(rho))`.
pub fn phi_from_target(profile: &HittingProfile, target: &TimeDensity) -> Result<ConditionedExitField> {
    let z = target.normalization(profile);
    if (z - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::invalid(format!("target integrates to {z} against the exit law, not 1")));
    }
    if target.value(0.0) < 0.0 {
        return Err(Error::invalid("target density must be nonnegative"));
    }
    let mut field = ConditionedExitField {
        model: profile.model,
        target: *target,
        tau_max: profile.tau_max,
        dt: profile.ds,
        d_rho: profile.d_rho,
        n_t: 0,
        n_rho: profile.n_rho,
        phi: Vec::new(),
        pde_residual: 0.0,
    };
    if target.is_constant() {
        return Ok(field);
    }
    let end = target.support_end();
    if end > 0.9 * profile.tau_max {
        return Err(Error::invalid("target support must end before 0.9 tau_max"));
    }
    let n_t = ((end / profile.ds).ceil() as usize).min(profile.n_s);
    let cells: Vec<f64> = (0..profile.n_s)
        .map(|k| target.cell_mean(profile.s(k), profile.s(k + 1)))
        .collect();
    let n_support = cells.iter().rposition(|g| *g != 0.0).map_or(0, |k| k + 1).max(n_t);
    let width = profile.n_rho + 1;
    let mut phi = vec![0.0; (n_t + 1) * width];
    for j in 0..profile.n_rho {
        let drops: Vec<f64> = (0..profile.n_s)
            .map(|k| profile.survival(k, j) - profile.survival(k + 1, j))
            .collect();
        for i in 0..=n_t {
            let mut acc = 0.0;
            for k in 0..(n_support - i) {
                acc += cells[i + k] * drops[k];
            }
            phi[i * width + j] = acc;
        }
    }
    for i in 0..=n_t {
        phi[i * width + profile.n_rho] = target.value(profile.s(i));
    }
    field.n_t = n_t;
    field.phi = phi;
    field.pde_residual = pde_residual(&field);
    Ok(field)
}

fn pde_residual(field: &ConditionedExitField) -> f64 {
    let (dt, h) = (field.dt, field.d_rho);
    let j_max = field.n_rho / 2;
    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for i in 1..field.n_t {
        for j in 1..j_max {
            let rho = j as f64 * h;
            let phi_t = (field.phi(i + 1, j) - field.phi(i - 1, j)) / (2.0 * dt);
            let d1 = (field.phi(i, j + 1) - field.phi(i, j - 1)) / (2.0 * h);
            let d2 = (field.phi(i, j + 1) - 2.0 * field.phi(i, j) + field.phi(i, j - 1)) / (h * h);
            let gen = 0.5 * (d2 + field.model.log_area_derivative(rho) * d1);
            worst = worst.max((phi_t + gen).abs());
            scale = scale.max(phi_t.abs());
        }
    }
    if scale > 0.0 {
        worst / scale
    } else {
        0.0
    }
}

/// Radial drift `d/d rho ln phi(t, rho)` of the conditioned process.
pub fn conditioned_exit_drift(field: &ConditionedExitField, t: f64, rho: f64) -> Result<f64> {
    let r = field.radius();
    if rho >= r {
        return Err(Error::Boundary { rho });
    }
    if !(rho >= 0.0) || !(t >= 0.0) {
        return Err(Error::invalid(format!("need t >= 0 and rho >= 0, got t = {t}, rho = {rho}")));
    }
    Ok(drift_unchecked(field, t, rho))
}

/// Zero past the end of the target's support, where `phi` vanishes.
#[inline]
fn drift_unchecked(field: &ConditionedExitField, t: f64, rho: f64) -> f64 {
    if field.target.is_constant() || rho == 0.0 {
        return 0.0;
    }
    let x = t / field.dt;
    if x >= field.n_t as f64 {
        return 0.0;
    }
    let i = x.floor() as usize;
    let w = x - i as f64;
    let (p0, d0) = field.row_eval(i, rho);
    let (p1, d1) = field.row_eval((i + 1).min(field.n_t), rho);
    let p = (1.0 - w) * p0 + w * p1;
    let d = (1.0 - w) * d0 + w * d1;
    if p > 0.0 {
        d / p
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitSample {
    pub path_id: u64,
    pub exit_time: f64,
    /// The path was still inside at `tau_max`.
    pub censored: bool,
}

/// Default time step, `r^2 / 800`.
pub fn default_exit_step(r: f64) -> f64 {
    r * r / 800.0
}

/// Simulates flat Brownian motion in the profile's dimension from the
/// centre with the extra radial drift, until it leaves the ball.
///
/// The exit time is interpolated linearly within the crossing step, and
/// crossings between grid points are caught with the Brownian-bridge
/// crossing probability. Steps shrink where the inward drift is strong.
pub fn sample_conditioned_exit(
    field: &ConditionedExitField,
    h: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<ExitSample>> {
    let d = field.model.flat_dimension().ok_or_else(|| {
        Error::Unsupported(format!("exit sampling needs a flat radial model, not {:?}", field.model))
    })?;
    if d > 4 {
        return Err(Error::Unsupported(format!("exit sampling supports dimensions up to 4, got {d}")));
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::out_of_range("h", h, "step must be positive"));
    }
    if n_paths == 0 {
        return Err(Error::invalid("n_paths must be at least 1"));
    }
    let r = field.radius();
    let tau_max = field.tau_max;
    map_paths(n_paths, seed, |path_id, rng| {
        let mut x = [0.0f64; 4];
        let mut t = 0.0;
        loop {
            if t >= tau_max {
                return Ok(ExitSample {
                    path_id,
                    exit_time: tau_max,
                    censored: true,
                });
            }
            let rho = x[..d].iter().map(|v| v * v).sum::<f64>().sqrt();
            let dist = r - rho;
            let drift = drift_unchecked(field, t, rho);
            let mut hk = h;
            if drift < 0.0 {
                hk = hk.min(INWARD_STEP_FRACTION * dist / -drift);
            }
            hk = hk.max(MIN_STEP).min(tau_max - t);
            let sq = hk.sqrt();
            let mut next = x;
            for i in 0..d {
                let radial = if rho > 0.0 { drift * x[i] / rho } else { 0.0 };
                next[i] = x[i] + radial * hk + sq * standard_normal(rng);
            }
            let rho_next = next[..d].iter().map(|v| v * v).sum::<f64>().sqrt();
            if !rho_next.is_finite() {
                return Err(Error::Numerical {
                    step: (t / h) as usize,
                    message: "exit path is not finite".into(),
                });
            }
            if rho_next >= r {
                let frac = (dist / (rho_next - rho)).clamp(0.0, 1.0);
                return Ok(ExitSample {
                    path_id,
                    exit_time: t + frac * hk,
                    censored: false,
                });
            }
            let dist_next = r - rho_next;
            let p_cross = if d == 1 {
                let up = (-2.0 * (r - x[0]) * (r - next[0]) / hk).exp();
                let down = (-2.0 * (r + x[0]) * (r + next[0]) / hk).exp();
                1.0 - (1.0 - up) * (1.0 - down)
            } else {
                (-2.0 * dist * dist_next / hk).exp()
            };
            if p_cross > 1e-300 && uniform(rng) < p_cross {
                return Ok(ExitSample {
                    path_id,
                    exit_time: t + 0.5 * hk,
                    censored: false,
                });
            }
            x = next;
            t += hk;
        }
    })
}

/// Writes `path_id, exit_time, censored`.
pub fn write_exits_csv<W: Write>(out: &mut W, exits: &[ExitSample]) -> io::Result<()> {
    write_row(out, &["path_id".into(), "exit_time".into(), "censored".into()])?;
    for e in exits {
        write_row(
            out,
            &[e.path_id.to_string(), fmt_f64(e.exit_time), u8::from(e.censored).to_string()],
        )?;
    }
    Ok(())
}

/// Writes `s, rho, u, f` on every `s_stride`-th time and `rho_stride`-th
/// radial node.
pub fn write_profile_csv<W: Write>(
    out: &mut W,
    profile: &HittingProfile,
    s_stride: usize,
    rho_stride: usize,
) -> io::Result<()> {
    write_row(out, &["s".into(), "rho".into(), "u".into(), "f".into()])?;
    for i in (0..=profile.n_s).step_by(s_stride.max(1)) {
        for j in (0..=profile.n_rho).step_by(rho_stride.max(1)) {
            write_row(
                out,
                &[
                    fmt_f64(profile.s(i)),
                    fmt_f64(profile.rho(j)),
                    fmt_f64(profile.survival(i, j)),
                    fmt_f64(profile.exit_density(i, j)),
                ],
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interval() -> HittingProfile {
        exit_density(&ProfileSpec::new(RadialModel::EuclideanInterval { radius: 1.0 }).with_grid(6000, 50)).unwrap()
    }

    #[test]
    fn interval_series_examples() {
        let (u, _) = interval_series(1.0, 1.0, 0.0);
        assert!((u - 0.3708).abs() < 1e-4, "{u}");
        // Image and eigen forms agree where both converge.
        for x in [0.0, 0.3, 0.9] {
            let s = 0.999_999;
            let (a, fa) = interval_series(1.0, s, x);
            let (b, fb) = interval_series(1.0, 1.000_001, x);
            assert!((a - b).abs() < 1e-6 && (fa - fb).abs() < 1e-5, "{x}: {a} {b}");
        }
    }

    #[test]
    fn interval_mean_and_conservation() {
        let p = interval();
        assert!((p.mean_exit_time(0) - 1.0).abs() < 1e-3);
        for j in 0..p.n_rho {
            assert!(p.mass_defect(j).abs() < 1e-6, "{j}: {}", p.mass_defect(j));
        }
        for j in 0..p.n_rho {
            assert_eq!(p.survival(0, j), 1.0);
            for i in 1..=p.n_s {
                assert!(p.survival(i, j) <= p.survival(i - 1, j) + 1e-15);
            }
        }
        assert_eq!(p.survival(10, p.n_rho), 0.0);
    }

    #[test]
    fn ball3_series_examples() {
        // E[T] = (r^2 - rho^2) / 3 in three dimensions.
        let p = exit_density(&ProfileSpec::new(RadialModel::EuclideanBall3 { radius: 1.0 }).with_grid(4000, 20)).unwrap();
        assert!((p.mean_exit_time(0) - 1.0 / 3.0).abs() < 1e-4);
        assert!((p.mean_exit_time(10) - 0.25).abs() < 1e-4);
        for s in [0.2, 0.7] {
            let (a, _) = ball3_series(1.0, 1.0 - 1e-9, s);
            let (b, _) = ball3_series(1.0, 1.0 + 1e-9, s);
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_target_has_no_drift() {
        let p = interval();
        let g = TimeDensity::constant();
        let f = phi_from_target(&p, &g).unwrap();
        assert_eq!(f.phi(3, 4), 1.0);
        assert_eq!(conditioned_exit_drift(&f, 0.2, 0.5).unwrap(), 0.0);
        assert!(matches!(conditioned_exit_drift(&f, 0.2, 1.0), Err(Error::Boundary { .. })));
    }

    #[test]
    fn unnormalized_target_is_rejected() {
        let p = interval();
        let g = TimeDensity::unnormalized(TimeShape::Indicator { a: 0.2, b: 0.6 }, 1.0);
        assert!(matches!(phi_from_target(&p, &g), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn indicator_field_is_normalized_and_harmonic() {
        let p = exit_density(&ProfileSpec::new(RadialModel::EuclideanInterval { radius: 1.0 })).unwrap();
        let g = TimeDensity::indicator(&p, 0.2, 0.6).unwrap();
        let f = phi_from_target(&p, &g).unwrap();
        assert!((f.phi(0, 0) - 1.0).abs() < 1e-6);
        assert!(f.pde_residual < 1e-3, "{}", f.pde_residual);
        for j in 0..f.n_rho {
            assert!(f.phi(100, j) > 0.0);
        }
        assert_eq!(conditioned_exit_drift(&f, 0.3, 0.0).unwrap(), 0.0);
    }

    fn cn_error(n_s: usize, n_rho: usize, s_min: f64) -> f64 {
        let model = RadialModel::RadialGrid {
            area: AreaFunction::Power(0),
            radius: 1.0,
        };
        let p = exit_density(&ProfileSpec::new(model).with_grid(n_s, n_rho)).unwrap();
        let mut worst = 0.0f64;
        for i in (0..=p.n_s).filter(|i| p.s(*i) >= s_min) {
            for j in 0..=p.n_rho {
                let (u, _) = interval_series(1.0, p.s(i), p.rho(j));
                worst = worst.max((p.survival(i, j) - u).abs());
            }
        }
        worst
    }

    #[test]
    fn crank_nicolson_matches_interval_series() {
        let e = cn_error(12000, 600, 0.0);
        assert!(e < 1e-4, "{e}");
        // Second order once the start-up discontinuity has diffused.
        let (a, b, c) = (cn_error(750, 25, 0.1), cn_error(1500, 50, 0.1), cn_error(3000, 100, 0.1));
        for ratio in [a / b, b / c] {
            assert!((3.5..4.5).contains(&ratio), "{a} {b} {c}");
        }
    }

    #[test]
    fn crank_nicolson_sphere_cap_conserves_mass() {
        let model = RadialModel::RadialGrid {
            area: AreaFunction::Sine,
            radius: 0.5,
        };
        let p = exit_density(&ProfileSpec::new(model)).unwrap();
        for j in [0, 50, 150] {
            assert!(p.mass_defect(j).abs() < 1e-6, "{}", p.mass_defect(j));
        }
        // Small caps are nearly flat: E[T] close to r^2 / 2.
        assert!((p.mean_exit_time(0) / 0.125 - 1.0).abs() < 0.02);
    }

    #[test]
    fn bump_field_matches_conditional_density_ratio() {
        let p = exit_density(&ProfileSpec::new(RadialModel::EuclideanInterval { radius: 1.0 })).unwrap();
        let tau = 0.3;
        let g = TimeDensity::bump(&p, tau, 0.05 * tau).unwrap();
        let f = phi_from_target(&p, &g).unwrap();
        assert!((f.phi(0, 0) - 1.0).abs() < 1e-6);
        let f0 = interval_series(1.0, tau, 0.0).1;
        let mut worst = 0.0f64;
        for i in (0..=(0.5 * tau / f.dt) as usize).step_by(10) {
            for j in (0..=f.n_rho / 2).step_by(5) {
                let exact = interval_series(1.0, tau - p.s(i), p.rho(j)).1 / f0;
                worst = worst.max((f.phi(i, j) / exact - 1.0).abs());
            }
        }
        assert!(worst < 5e-2, "{worst}");
        // The bump's own closed form, phi = int g(t + s) f(s, rho) ds.
        let bump_phi = |t: f64, rho: f64| {
            let (x, w) = gauss_legendre_on(400, tau - 8.0 * 0.05 * tau - t, tau + 8.0 * 0.05 * tau - t);
            x.iter().zip(&w).map(|(s, q)| q * g.value(t + s) * interval_series(1.0, *s, rho).1).sum::<f64>()
        };
        let drift = conditioned_exit_drift(&f, 0.1, 0.5).unwrap();
        let e = 1e-5;
        let exact = (bump_phi(0.1, 0.5 + e).ln() - bump_phi(0.1, 0.5 - e).ln()) / (2.0 * e);
        assert!(drift > 0.0);
        assert!((drift / exact - 1.0).abs() < 0.05, "{drift} {exact}");
        // The exact Dirac limit, for scale.
        let dirac = (interval_series(1.0, 0.2, 0.5 + e).1.ln() - interval_series(1.0, 0.2, 0.5 - e).1.ln()) / (2.0 * e);
        assert!((drift / dirac - 1.0).abs() < 0.1, "{drift} {dirac}");
    }
}
