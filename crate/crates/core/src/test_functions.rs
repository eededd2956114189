//! Positive test functions `xi` with closed-form gradients, and closed-form
//! semigroups where they exist.

use crate::error::{Error, Result};
use crate::flat::FlatTransition;
use crate::geometry::{ManifoldModel, Point, Vec4, MAX_EUCLIDEAN_DIM};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TestFunction {
    Constant(f64),
    /// `exp(<a, y> - |a|^2 T / 2)`, the exponential martingale at time `T`.
    ExpTilt { tilt: Vec4, horizon: f64 },
    /// `exp(-|y - c|^2 / (2 w^2))`.
    GaussianBump { center: Vec4, width: f64 },
    /// `1 + a <y, e>` on the sphere with `|a| < 1`, `|e| = 1`.
    SphereLinear { strength: f64, pole: Vec4 },
    /// `1 + tanh(<a, y>) / 2`, a smoothed linear ramp.
    SmoothRamp { direction: Vec4 },
}

fn pad(v: &[f64]) -> Result<Vec4> {
    if v.is_empty() || v.len() > MAX_EUCLIDEAN_DIM || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!(
            "expected 1 to {MAX_EUCLIDEAN_DIM} finite coordinates, got {v:?}"
        )));
    }
    let mut out = Vec4::zeros();
    for (i, x) in v.iter().enumerate() {
        out[i] = *x;
    }
    Ok(out)
}

impl TestFunction {
    pub fn exp_tilt(tilt: &[f64], horizon: f64) -> Result<Self> {
        Ok(TestFunction::ExpTilt {
            tilt: pad(tilt)?,
            horizon,
        })
    }

    pub fn gaussian_bump(center: &[f64], width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::out_of_range("width", width, "must be positive"));
        }
        Ok(TestFunction::GaussianBump {
            center: pad(center)?,
            width,
        })
    }

    pub fn sphere_linear(strength: f64, pole: [f64; 3]) -> Result<Self> {
        let e = Vec4::new(pole[0], pole[1], pole[2], 0.0);
        let n = e.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::invalid("pole must be a nonzero vector"));
        }
        if !(strength.abs() < 1.0) {
            return Err(Error::out_of_range("strength", strength, "|a| < 1 keeps xi positive"));
        }
        Ok(TestFunction::SphereLinear {
            strength,
            pole: e / n,
        })
    }

    pub fn smooth_ramp(direction: &[f64]) -> Result<Self> {
        Ok(TestFunction::SmoothRamp {
            direction: pad(direction)?,
        })
    }

    pub fn validate(&self, model: &ManifoldModel) -> Result<()> {
        let fits = |v: &Vec4| match model {
            ManifoldModel::Euclidean(d) => (*d..4).all(|i| v[i] == 0.0),
            _ => false,
        };
        let ok = match self {
            TestFunction::Constant(c) => *c > 0.0 && c.is_finite(),
            TestFunction::ExpTilt { tilt, horizon } => fits(tilt) && *horizon >= 0.0,
            TestFunction::GaussianBump { center, .. } => fits(center),
            TestFunction::SmoothRamp { direction } => fits(direction),
            TestFunction::SphereLinear { .. } => *model == ManifoldModel::Sphere2,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("test function {self:?} is not defined on {model}")))
        }
    }

    #[inline]
    pub fn value(&self, y: &Point) -> f64 {
        let y = &y.coords;
        match self {
            TestFunction::Constant(c) => *c,
            TestFunction::ExpTilt { tilt, horizon } => {
                (tilt.dot(y) - 0.5 * tilt.norm_squared() * horizon).exp()
            }
            TestFunction::GaussianBump { center, width } => {
                (-(y - center).norm_squared() / (2.0 * width * width)).exp()
            }
            TestFunction::SphereLinear { strength, pole } => 1.0 + strength * y.dot(pole),
            TestFunction::SmoothRamp { direction } => 1.0 + 0.5 * direction.dot(y).tanh(),
        }
    }

    /// Riemannian gradient at `y`, as an ambient tangent vector.
    #[inline]
    pub fn gradient(&self, y: &Point) -> Vec4 {
        let yc = &y.coords;
        match self {
            TestFunction::Constant(_) => Vec4::zeros(),
            TestFunction::ExpTilt { tilt, .. } => tilt * self.value(y),
            TestFunction::GaussianBump { center, width } => {
                (center - yc) * (self.value(y) / (width * width))
            }
            TestFunction::SphereLinear { strength, pole } => (pole - yc * yc.dot(pole)) * *strength,
            TestFunction::SmoothRamp { direction } => {
                let c = direction.dot(yc).cosh();
                direction * (0.5 / (c * c))
            }
        }
    }

    /// `Q_s xi(x)` in closed form, if available. `flat` is the Gaussian
    /// transition of the flat model's drift over time `s`.
    pub fn semigroup_value(&self, model: &ManifoldModel, flat: Option<&FlatTransition>, s: f64, x: &Point) -> Option<f64> {
        match (self, model) {
            (TestFunction::Constant(c), _) => Some(*c),
            (TestFunction::SphereLinear { strength, pole }, ManifoldModel::Sphere2) => {
                Some(1.0 + strength * (-s).exp() * x.coords.dot(pole))
            }
            (TestFunction::ExpTilt { tilt, horizon }, ManifoldModel::Euclidean(_)) => {
                let tr = flat.cloned().unwrap_or_else(|| FlatTransition::brownian(model.dim(), s));
                let mean = tr.mean(&x.coords);
                let quad = (tr.cov * tilt).dot(tilt);
                Some((tilt.dot(&mean) + 0.5 * quad - 0.5 * tilt.norm_squared() * horizon).exp())
            }
            (TestFunction::GaussianBump { center, width }, ManifoldModel::Euclidean(d)) => {
                let tr = flat.cloned().unwrap_or_else(|| FlatTransition::brownian(*d, s));
                let (k_inv, log_det) = tr.smoothed_inverse(width * width)?;
                let r = tr.mean(&x.coords) - center;
                let log_ratio = *d as f64 * (width * width).ln() - log_det;
                Some((0.5 * log_ratio - 0.5 * (k_inv * r).dot(&r)).exp())
            }
            _ => None,
        }
    }

    /// `nabla ln Q_s xi(x)` in closed form, if available.
    pub fn semigroup_grad_log(
        &self,
        model: &ManifoldModel,
        flat: Option<&FlatTransition>,
        s: f64,
        x: &Point,
    ) -> Option<Vec4> {
        match (self, model) {
            (TestFunction::Constant(_), _) => Some(Vec4::zeros()),
            (TestFunction::SphereLinear { strength, pole }, ManifoldModel::Sphere2) => {
                let damp = strength * (-s).exp();
                let q = 1.0 + damp * x.coords.dot(pole);
                Some((pole - x.coords * x.coords.dot(pole)) * (damp / q))
            }
            (TestFunction::ExpTilt { tilt, .. }, ManifoldModel::Euclidean(_)) => Some(match flat {
                Some(tr) => tr.mean_map.transpose() * tilt,
                None => *tilt,
            }),
            (TestFunction::GaussianBump { center, width }, ManifoldModel::Euclidean(d)) => {
                let tr = flat.cloned().unwrap_or_else(|| FlatTransition::brownian(*d, s));
                let (k_inv, _) = tr.smoothed_inverse(width * width)?;
                let r = tr.mean(&x.coords) - center;
                Some(-(tr.mean_map.transpose() * (k_inv * r)))
            }
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
        (-(x - mean) * (x - mean) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = ManifoldModel::Euclidean(2);
        let y = m.point(&[0.3, -0.4]).unwrap();
        let cases = [
            TestFunction::exp_tilt(&[0.5, -0.2], 1.0).unwrap(),
            TestFunction::gaussian_bump(&[1.0, 0.5], 0.7).unwrap(),
            TestFunction::smooth_ramp(&[0.8, 0.3]).unwrap(),
        ];
        for f in cases {
            let g = f.gradient(&y);
            for i in 0..2 {
                let mut e = Vec4::zeros();
                e[i] = 1e-6;
                let fd = (f.value(&Point::new(y.coords + e)) - f.value(&Point::new(y.coords - e))) / 2e-6;
                assert!((fd - g[i]).abs() < 1e-8, "{f:?}");
            }
        }
    }

    #[test]
    fn brownian_semigroup_closed_forms() {
        let m = ManifoldModel::Euclidean(1);
        let x = m.point(&[0.2]).unwrap();
        let bump = TestFunction::gaussian_bump(&[1.0], 0.5).unwrap();
        // Gaussian convolution: N(x; c, w^2 + s) scaled by sqrt(2 pi) w.
        let v = bump.semigroup_value(&m, None, 0.75, &x).unwrap();
        let exact = normal_pdf(0.2, 1.0, 1.0) * (2.0 * PI).sqrt() * 0.5;
        assert!((v - exact).abs() < 1e-14);
        let g = bump.semigroup_grad_log(&m, None, 0.75, &x).unwrap();
        assert!((g[0] - 0.8).abs() < 1e-14);
    }

    #[test]
    fn sphere_linear_is_an_eigenfunction() {
        let m = ManifoldModel::Sphere2;
        let f = TestFunction::sphere_linear(0.5, [0.0, 0.0, 1.0]).unwrap();
        let x = m.point(&[1.0, 0.0, 0.0]).unwrap();
        let g = f.semigroup_grad_log(&m, None, 1.0, &x).unwrap();
        assert!((g[2] - 0.5 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((g[2] - 0.18394).abs() < 1e-5);
    }
}
