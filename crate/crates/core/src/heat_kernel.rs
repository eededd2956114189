//! Heat kernels of the driftless generator `1/2 Delta` on the catalog.
//!
//! Euclidean and hyperbolic kernels are closed forms. The circle uses the
//! wrapped Gaussian for `t <= 1` and its Fourier series above; the sphere
//! uses the Legendre (zonal harmonic) series with a certified tail bound.

use std::f64::consts::PI;

use crate::development::{sample_bm_with, EndpointObserver};
use crate::error::{Error, Result};
use crate::geometry::{angle_difference, ManifoldModel, Point, TangentVector, Vec4};
use crate::quadrature::{gauss_legendre_on, simpson};
use crate::rng::{map_paths, standard_normal};
use crate::stats::MeanSe;

/// Smallest time at which the series kernels are certified.
pub const T_MIN: f64 = 0.01;

/// Absolute tolerance for dropping series terms.
const SERIES_TOL: f64 = 1e-18;
/// Below this ratio of value to the sum of absolute terms the sphere series
/// has lost too many digits and the short-time parametrix is used instead.
const CANCELLATION_RATIO: f64 = 1e-8;
/// Circle representation switch point.
const CIRCLE_SWITCH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelEval {
    pub t: f64,
    pub value: f64,
    pub log_value: f64,
    pub truncation_terms: usize,
    /// Set when the sphere series lost precision and the leading-order
    /// parametrix was used.
    pub approximate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelGradient {
    pub vector: TangentVector,
    /// The radius was clamped away from the sphere's cut locus.
    pub clamped: bool,
    pub approximate: bool,
}

fn check_time(model: &ManifoldModel, t: f64) -> Result<()> {
    if !t.is_finite() || t <= 0.0 {
        return Err(Error::out_of_range("t", t, "t must be positive"));
    }
    if matches!(model, ManifoldModel::Circle | ManifoldModel::Sphere2) && t < T_MIN {
        return Err(Error::out_of_range(
            "t",
            t,
            format!("series kernels are certified for t >= {T_MIN}"),
        ));
    }
    Ok(())
}

// ---- sphere ------------------------------------------------------------

/// Zonal series `K(c) = sum_l (2l+1)/(4 pi) e^{-l(l+1)t/2} P_l(c)` and its
/// derivative in `c`.
struct ZonalSum {
    value: f64,
    deriv: f64,
    abs_sum: f64,
    terms: usize,
}

fn zonal_sum(t: f64, c: f64) -> ZonalSum {
    let c = c.clamp(-1.0, 1.0);
    let inv4pi = 1.0 / (4.0 * PI);
    let (mut p_prev, mut p) = (0.0, 1.0);
    let (mut dp_prev, mut dp) = (0.0, 0.0);
    let mut decay = 1.0; // e^{-l(l+1)t/2}
    let step = (-t).exp();
    let mut step_pow = step; // e^{-(l+1)t}
    let (mut value, mut deriv, mut abs_sum) = (0.0, 0.0, 0.0);
    let mut l = 0usize;
    loop {
        let lf = l as f64;
        let coef = (2.0 * lf + 1.0) * inv4pi * decay;
        value += coef * p;
        deriv += coef * dp;
        abs_sum += (coef * p).abs();
        let bound = coef * (1.0 + lf * (lf + 1.0));
        if l >= 2 && bound < SERIES_TOL {
            break;
        }
        let p_next = ((2.0 * lf + 1.0) * c * p - lf * p_prev) / (lf + 1.0);
        let dp_next = dp_prev + (2.0 * lf + 1.0) * p;
        p_prev = p;
        p = p_next;
        dp_prev = dp;
        dp = dp_next;
        decay *= step_pow;
        step_pow *= step;
        l += 1;
    }
    ZonalSum {
        value,
        deriv,
        abs_sum,
        terms: l + 1,
    }
}

/// Sphere kernel at angle `theta` given `c = cos(theta)`: returns the log
/// value and `K'(c) / K(c)`.
fn sphere_eval(t: f64, c: f64, theta: f64) -> (f64, f64, usize, bool) {
    let z = zonal_sum(t, c);
    if z.value > CANCELLATION_RATIO * z.abs_sum {
        return (z.value.ln(), z.deriv / z.value, z.terms, false);
    }
    // Leading-order parametrix of the sphere heat kernel.
    let s = theta.sin();
    let log_value =
        -(2.0 * PI * t).ln() + 0.5 * (theta / s).ln() - theta * theta / (2.0 * t) + t / 8.0;
    let score = theta / t - 0.5 * (1.0 / theta - theta.cos() / s);
    (log_value, score / s, z.terms, true)
}

// ---- circle ------------------------------------------------------------

/// Circle kernel at signed angle `delta`: log value and
/// `d/d delta ln k(delta)`.
fn circle_eval(t: f64, delta: f64) -> (f64, f64, usize) {
    if t <= CIRCLE_SWITCH {
        // ln k = -ln(2 pi t)/2 - delta^2/(2t) + ln sum_n exp(-((delta + 2 pi n)^2 - delta^2)/(2t))
        let (mut sum, mut dsum) = (1.0, -delta / t);
        let mut terms = 1;
        let mut n = 1i64;
        loop {
            let mut added = 0.0;
            for k in [n, -n] {
                let s = delta + 2.0 * PI * k as f64;
                let w = (-(s * s - delta * delta) / (2.0 * t)).exp();
                sum += w;
                dsum += -s / t * w;
                added += w;
                terms += 1;
            }
            if added < SERIES_TOL {
                break;
            }
            n += 1;
        }
        let log_value = -0.5 * (2.0 * PI * t).ln() - delta * delta / (2.0 * t) + sum.ln();
        (log_value, dsum / sum, terms)
    } else {
        let mut value = 1.0 / (2.0 * PI);
        let mut deriv = 0.0;
        let mut n = 1;
        loop {
            let nf = n as f64;
            let w = (-nf * nf * t / 2.0).exp();
            value += w * (nf * delta).cos() / PI;
            deriv -= nf * w * (nf * delta).sin() / PI;
            if w * nf < SERIES_TOL {
                break;
            }
            n += 1;
        }
        (value.ln(), deriv / value, n as usize)
    }
}

/// Fourier representation of the circle kernel, exposed for cross-checks.
pub fn circle_kernel_fourier(t: f64, delta: f64) -> f64 {
    let mut value = 1.0 / (2.0 * PI);
    let mut n = 1;
    loop {
        let nf = n as f64;
        let w = (-nf * nf * t / 2.0).exp();
        value += w * (nf * delta).cos() / PI;
        if w < SERIES_TOL {
            break;
        }
        n += 1;
    }
    value
}

/// Wrapped-Gaussian representation of the circle kernel.
pub fn circle_kernel_wrapped(t: f64, delta: f64) -> f64 {
    let mut value = 0.0;
    for n in -50i64..=50 {
        let s = delta + 2.0 * PI * n as f64;
        value += (-s * s / (2.0 * t)).exp();
    }
    value / (2.0 * PI * t).sqrt()
}

// ---- hyperbolic --------------------------------------------------------

/// ln(sinh r / r), stable for small and large r.
fn ln_sinhc(r: f64) -> f64 {
    if r < 1e-4 {
        r * r / 6.0
    } else if r < 20.0 {
        (r.sinh() / r).ln()
    } else {
        r - std::f64::consts::LN_2 - r.ln() + (-(-2.0 * r).exp()).ln_1p()
    }
}

/// coth r - 1/r, stable near zero.
fn coth_minus_inv(r: f64) -> f64 {
    if r < 1e-3 {
        r / 3.0 - r.powi(3) / 45.0
    } else {
        1.0 / r.tanh() - 1.0 / r
    }
}

fn hyperbolic_log(t: f64, r: f64) -> f64 {
    -1.5 * (2.0 * PI * t).ln() - t / 2.0 - ln_sinhc(r) - r * r / (2.0 * t)
}

// ---- public surface ----------------------------------------------------

/// `ln q_t` as a function of the geodesic distance `r` (signed angle on the
/// circle).
pub fn radial_log_kernel(model: &ManifoldModel, t: f64, r: f64) -> Result<KernelEval> {
    check_time(model, t)?;
    if !r.is_finite() {
        return Err(Error::invalid("radius must be finite"));
    }
    let (log_value, terms, approximate) = match model {
        ManifoldModel::Euclidean(d) => (
            -0.5 * *d as f64 * (2.0 * PI * t).ln() - r * r / (2.0 * t),
            1,
            false,
        ),
        ManifoldModel::Circle => {
            let (lv, _, n) = circle_eval(t, r);
            (lv, n, false)
        }
        ManifoldModel::Sphere2 => {
            let theta = r.abs().min(PI);
            let (lv, _, n, approx) = sphere_eval(t, theta.cos(), theta);
            (lv, n, approx)
        }
        ManifoldModel::Hyperbolic3 => (hyperbolic_log(t, r.abs()), 1, false),
    };
    Ok(KernelEval {
        t,
        value: log_value.exp(),
        log_value,
        truncation_terms: terms,
        approximate,
    })
}

/// Heat kernel `q_t(x, y)` with respect to the Riemannian volume.
pub fn log_heat_kernel(model: &ManifoldModel, t: f64, x: &Point, y: &Point) -> Result<KernelEval> {
    model.check_point(x)?;
    model.check_point(y)?;
    check_time(model, t)?;
    let r = match model {
        ManifoldModel::Circle => angle_difference(x.coords[0], y.coords[0]),
        _ => model.distance(x, y),
    };
    radial_log_kernel(model, t, r)
}

/// `nabla_x ln q_t(x, y)`. On the sphere the radius is clamped to
/// `pi - 1e-3` near the cut locus, which is reported through `clamped`.
pub fn grad_log_heat_kernel(
    model: &ManifoldModel,
    t: f64,
    x: &Point,
    y: &Point,
) -> Result<KernelGradient> {
    model.check_point(x)?;
    model.check_point(y)?;
    check_time(model, t)?;
    Ok(grad_log_kernel_unchecked(model, t, x, y))
}

/// [`grad_log_heat_kernel`] without input validation, for drift loops.
#[inline]
pub(crate) fn grad_log_kernel_unchecked(
    model: &ManifoldModel,
    t: f64,
    x: &Point,
    y: &Point,
) -> KernelGradient {
    let mut clamped = false;
    let mut approximate = false;
    let v = match model {
        ManifoldModel::Euclidean(_) => (y.coords - x.coords) / t,
        ManifoldModel::Circle => {
            let delta = angle_difference(x.coords[0], y.coords[0]);
            let (_, dlog, _) = circle_eval(t, delta);
            // q(x, y) = k(theta_y - theta_x)
            Vec4::new(-dlog, 0.0, 0.0, 0.0)
        }
        ManifoldModel::Sphere2 => {
            let mut c = x.coords.dot(&y.coords).clamp(-1.0, 1.0);
            let mut w = y.coords - x.coords * c;
            let limit = PI - crate::geometry::CUT_LOCUS_MARGIN;
            let mut theta = model.distance(x, y);
            if theta > limit {
                clamped = true;
                theta = limit;
                c = limit.cos();
                let n = w.norm();
                w = if n > 0.0 { w * (limit.sin() / n) } else { w };
            }
            let (_, ratio, _, approx) = sphere_eval(t, c, theta);
            approximate = approx;
            w * ratio
        }
        ManifoldModel::Hyperbolic3 => {
            // y + <x,y> x, written so that it vanishes exactly at y = x.
            let dxy = y.coords - x.coords;
            let w = dxy - x.coords * (0.5 * model.inner(&dxy, &dxy));
            let r = model.distance(x, y);
            let factor = if r < 1e-8 {
                1.0 / 3.0 + 1.0 / t
            } else {
                (coth_minus_inv(r) + r / t) / r.sinh()
            };
            w * factor
        }
    };
    KernelGradient {
        vector: TangentVector::new(v),
        clamped,
        approximate,
    }
}

/// `ln q_t(x, y)` without validation.
#[inline]
pub(crate) fn log_kernel_unchecked(model: &ManifoldModel, t: f64, x: &Point, y: &Point) -> f64 {
    match model {
        ManifoldModel::Euclidean(d) => {
            -0.5 * *d as f64 * (2.0 * PI * t).ln() - (y.coords - x.coords).norm_squared() / (2.0 * t)
        }
        ManifoldModel::Circle => circle_eval(t, angle_difference(x.coords[0], y.coords[0])).0,
        ManifoldModel::Sphere2 => {
            let theta = model.distance(x, y);
            sphere_eval(t, x.coords.dot(&y.coords), theta).0
        }
        ManifoldModel::Hyperbolic3 => hyperbolic_log(t, model.distance(x, y)),
    }
}

fn ln_sphere_area(d: usize) -> f64 {
    // area of the unit sphere S^{d-1}
    let half = d as f64 / 2.0;
    std::f64::consts::LN_2 + half * PI.ln() - statrs::function::gamma::ln_gamma(half)
}

/// Density of `d(m, X_t)` at radius `r` for Brownian motion started at `m`.
pub fn radial_density(model: &ManifoldModel, t: f64, r: f64) -> Result<f64> {
    if r < 0.0 || r > model.max_radius() {
        return Err(Error::out_of_range("r", r, "outside the model's radial range"));
    }
    let k = radial_log_kernel(model, t, r)?;
    Ok(match model {
        ManifoldModel::Euclidean(d) => {
            if *d > 1 && r == 0.0 {
                0.0
            } else {
                (k.log_value + ln_sphere_area(*d) + (*d as f64 - 1.0) * r.ln()).exp()
            }
        }
        ManifoldModel::Circle => 2.0 * k.value,
        ManifoldModel::Sphere2 => 2.0 * PI * r.sin() * k.value,
        ManifoldModel::Hyperbolic3 => {
            if r == 0.0 {
                0.0
            } else {
                let ln_sinh = r.ln() + ln_sinhc(r);
                (k.log_value + (4.0 * PI).ln() + 2.0 * ln_sinh).exp()
            }
        }
    })
}

/// `P(d(m, X_t) <= r)` by Gauss-Legendre quadrature of [`radial_density`].
pub fn radial_cdf(model: &ManifoldModel, t: f64, r: f64) -> Result<f64> {
    if r <= 0.0 {
        return Ok(0.0);
    }
    let panels = 8 + (r / t.sqrt()).ceil() as usize;
    let width = r / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let (x, w) = gauss_legendre_on(16, p as f64 * width, (p + 1) as f64 * width);
        for (x, w) in x.iter().zip(&w) {
            total += w * radial_density(model, t, *x)?;
        }
    }
    Ok(total.min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SemigroupMethod {
    /// Product quadrature; available on the circle and the sphere.
    Quadrature,
    /// Monte Carlo with `n_samples` draws of `X_t`.
    MonteCarlo { n_samples: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SemigroupValue {
    pub value: f64,
    pub error_estimate: f64,
}

/// A quadrature node carrying the kernel weight `q_t(x, y) dy` and the
/// weight of its gradient in `x`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct KernelNode {
    pub y: Point,
    pub weight: f64,
    pub grad_weight: Vec4,
}

/// Kernel-weighted quadrature nodes around `x` on the circle or sphere.
pub(crate) fn kernel_nodes(
    model: &ManifoldModel,
    t: f64,
    x: &Point,
    resolution: usize,
) -> Result<Vec<KernelNode>> {
    check_time(model, t)?;
    match model {
        ManifoldModel::Circle => {
            let n = 256 * resolution;
            let dx = 2.0 * PI / n as f64;
            Ok((0..n)
                .map(|j| {
                    let delta = -PI + (j as f64 + 0.5) * dx;
                    let (lv, dlog, _) = circle_eval(t, delta);
                    let w = lv.exp() * dx;
                    let mut y = x.coords;
                    y[0] = crate::geometry::wrap_angle(y[0] + delta);
                    KernelNode {
                        y: Point::new(y),
                        weight: w,
                        grad_weight: Vec4::new(-dlog * w, 0.0, 0.0, 0.0),
                    }
                })
                .collect())
        }
        ManifoldModel::Sphere2 => {
            let u = model.initial_frame(x)?;
            let e1 = u.frame.column(0).into_owned();
            let e2 = u.frame.column(1).into_owned();
            let split = (12.0 * t.sqrt()).min(PI);
            let mut thetas = Vec::new();
            let n_theta = 48 * resolution;
            let (a, wa) = gauss_legendre_on(n_theta, 0.0, split);
            thetas.extend(a.into_iter().zip(wa));
            if split < PI {
                let (b, wb) = gauss_legendre_on(n_theta, split, PI);
                thetas.extend(b.into_iter().zip(wb));
            }
            let n_phi = 64 * resolution;
            let dphi = 2.0 * PI / n_phi as f64;
            let mut nodes = Vec::with_capacity(thetas.len() * n_phi);
            for (theta, wt) in thetas {
                let (c, s) = (theta.cos(), theta.sin());
                let (lv, ratio, _, _) = sphere_eval(t, c, theta);
                let q = lv.exp();
                for j in 0..n_phi {
                    let phi = j as f64 * dphi;
                    let dir = e1 * phi.cos() + e2 * phi.sin();
                    let y = x.coords * c + dir * s;
                    let w = q * s * wt * dphi;
                    // grad_x q = q K'/K (y - c x), and y - c x = s dir
                    nodes.push(KernelNode {
                        y: Point::new(y),
                        weight: w,
                        grad_weight: dir * (s * ratio * w),
                    });
                }
            }
            Ok(nodes)
        }
        other => Err(Error::Unsupported(format!(
            "quadrature semigroup is only available on Circle and Sphere2, not {other}"
        ))),
    }
}

fn quadrature_value(
    model: &ManifoldModel,
    t: f64,
    xi: &(dyn Fn(&Point) -> f64 + Sync),
    x: &Point,
    resolution: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for node in kernel_nodes(model, t, x, resolution)? {
        let v = xi(&node.y);
        if v < 0.0 {
            return Err(Error::invalid(format!("xi is negative ({v}) at a quadrature node")));
        }
        total += node.weight * v;
    }
    Ok(total)
}

/// `Q_t xi(x) = int q_t(x, y) xi(y) dy`, with an error estimate.
pub fn semigroup_apply(
    model: &ManifoldModel,
    t: f64,
    xi: &(dyn Fn(&Point) -> f64 + Sync),
    x: &Point,
    method: SemigroupMethod,
) -> Result<SemigroupValue> {
    model.check_point(x)?;
    check_time(model, t)?;
    match method {
        SemigroupMethod::Quadrature => {
            let fine = quadrature_value(model, t, xi, x, 2)?;
            let coarse = quadrature_value(model, t, xi, x, 1)?;
            Ok(SemigroupValue {
                value: fine,
                error_estimate: (fine - coarse).abs(),
            })
        }
        SemigroupMethod::MonteCarlo { n_samples, seed } => {
            if n_samples < 2 {
                return Err(Error::invalid("Monte Carlo semigroup needs at least 2 samples"));
            }
            let values: Vec<f64> = match model {
                ManifoldModel::Euclidean(_) | ManifoldModel::Circle => {
                    let d = model.dim();
                    map_paths(n_samples, seed, |_, rng| {
                        let mut v = Vec4::zeros();
                        for i in 0..d {
                            v[i] = t.sqrt() * standard_normal(rng);
                        }
                        Ok(xi(&model.exp_unchecked(x, &v)))
                    })?
                }
                _ => {
                    let n_steps = ((800.0 * t).ceil() as usize).max(1);
                    let u0 = model.initial_frame(x)?;
                    sample_bm_with(
                        model,
                        &u0,
                        &crate::geometry::VectorField::Zero,
                        t,
                        n_steps,
                        n_samples,
                        seed,
                        |_| EndpointObserver::default(),
                    )?
                    .into_iter()
                    .map(|end| xi(&end.base))
                    .collect()
                }
            };
            if let Some(v) = values.iter().find(|v| **v < 0.0) {
                return Err(Error::invalid(format!("xi sample is negative ({v})")));
            }
            let stats = MeanSe::from_values(values.iter().copied());
            Ok(SemigroupValue {
                value: stats.mean,
                error_estimate: stats.std_error,
            })
        }
    }
}

/// `nabla Q_t xi(x)` by differentiating the kernel under the quadrature
/// (circle and sphere only).
pub fn semigroup_gradient(
    model: &ManifoldModel,
    t: f64,
    xi: &(dyn Fn(&Point) -> f64 + Sync),
    x: &Point,
) -> Result<(f64, TangentVector)> {
    model.check_point(x)?;
    let mut value = 0.0;
    let mut grad = Vec4::zeros();
    for node in kernel_nodes(model, t, x, 2)? {
        let v = xi(&node.y);
        if v < 0.0 {
            return Err(Error::invalid(format!("xi is negative ({v}) at a quadrature node")));
        }
        value += node.weight * v;
        grad += node.grad_weight * v;
    }
    Ok((value, TangentVector::new(model.project_tangent(x, &grad))))
}

/// Integrates a radial function against [`radial_density`] on `[0, r_max]`.
pub fn radial_expectation<F: Fn(f64) -> f64>(
    model: &ManifoldModel,
    t: f64,
    r_max: f64,
    f: F,
) -> Result<f64> {
    let density = |r: f64| radial_density(model, t, r).map(|p| p * f(r)).unwrap_or(f64::NAN);
    let v = simpson(density, 0.0, r_max, 4000);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical {
            step: 0,
            message: "radial expectation is not finite".into(),
        })
    }
}
