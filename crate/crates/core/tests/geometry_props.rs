use std::f64::consts::PI;

use csde_core::geometry::{ManifoldModel, Point, TangentVector, Vec4};
use csde_core::heat_kernel::{
    circle_kernel_fourier, circle_kernel_wrapped, grad_log_heat_kernel, log_heat_kernel, radial_cdf,
};
use proptest::prelude::*;

fn sphere_point(a: [f64; 3]) -> Option<Point> {
    let v = Vec4::new(a[0], a[1], a[2], 0.0);
    let n = v.norm();
    (n > 0.1).then(|| Point::new(v / n))
}

fn hyperbolic_point(a: [f64; 3]) -> Point {
    let s = (1.0 + a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    Point::new(Vec4::new(s, a[0], a[1], a[2]))
}

fn tangent(m: &ManifoldModel, x: &Point, a: [f64; 4]) -> TangentVector {
    TangentVector::new(m.project_tangent(x, &Vec4::from(a)))
}

fn coords3() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-1.5..1.5f64)
}

fn coords4() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-1.0..1.0f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sphere_exp_log_roundtrip(a in coords3(), b in coords4(), scale in 0.0..3.0f64) {
        let m = ManifoldModel::Sphere2;
        let Some(x) = sphere_point(a) else { return Ok(()) };
        let v = tangent(&m, &x, b);
        let len = m.norm(&v.coords);
        prop_assume!(len > 1e-6);
        let v = TangentVector::new(v.coords * (scale / len));
        let y = m.exp_map(&x, &v).unwrap();
        prop_assert!(m.constraint_residual(&y) < 1e-12);
        prop_assert!((m.distance(&x, &y) - scale).abs() < 1e-9);
        let back = m.log_map(&x, &y).unwrap();
        prop_assert!((back.coords - v.coords).norm() < 1e-8);
    }

    #[test]
    fn hyperbolic_exp_log_roundtrip(a in coords3(), b in coords4(), scale in 0.0..3.0f64) {
        let m = ManifoldModel::Hyperbolic3;
        let x = hyperbolic_point(a);
        let v = tangent(&m, &x, b);
        prop_assert!(m.tangency_residual(&x, &v) < 1e-12);
        let len = m.norm(&v.coords);
        prop_assume!(len > 1e-6);
        let v = TangentVector::new(v.coords * (scale / len));
        let y = m.exp_map(&x, &v).unwrap();
        prop_assert!(m.constraint_residual(&y) < 1e-9);
        prop_assert!((m.distance(&x, &y) - scale).abs() < 1e-8);
        let back = m.log_map(&x, &y).unwrap();
        prop_assert!((back.coords - v.coords).norm() < 1e-7 * (1.0 + scale.exp()));
    }

    #[test]
    fn transport_is_an_isometry(a in coords3(), b in coords4(), c in coords4(), d in coords4(), sphere in any::<bool>()) {
        let (m, x) = if sphere {
            let Some(x) = sphere_point(a) else { return Ok(()) };
            (ManifoldModel::Sphere2, x)
        } else {
            (ManifoldModel::Hyperbolic3, hyperbolic_point(a))
        };
        let v = tangent(&m, &x, b);
        let w1 = tangent(&m, &x, c);
        let w2 = tangent(&m, &x, d);
        let y = m.exp_map(&x, &v).unwrap();
        let p1 = m.parallel_transport(&x, &v, &w1).unwrap();
        let p2 = m.parallel_transport(&x, &v, &w2).unwrap();
        prop_assert!(m.tangency_residual(&y, &p1) < 1e-9);
        let before = m.inner(&w1.coords, &w2.coords);
        let after = m.inner(&p1.coords, &p2.coords);
        prop_assert!((before - after).abs() < 1e-9 * (1.0 + before.abs()));
    }

    #[test]
    fn initial_frames_transport_to_frames(a in coords3(), b in coords4()) {
        let m = ManifoldModel::Hyperbolic3;
        let x = hyperbolic_point(a);
        let u = m.initial_frame(&x).unwrap();
        prop_assert!(m.frame_residual(&u) < 1e-10);
        let xi = Vec4::new(b[0], b[1], b[2], 0.0) * 0.1;
        let moved = m.orthonormalize(&m.transport_frame(&u, &xi));
        prop_assert!(m.frame_residual(&moved) < 1e-10);
        prop_assert!(m.constraint_residual(&moved.base) < 1e-10);
    }

    #[test]
    fn kernel_gradient_matches_difference_quotient(a in coords3(), c in coords3(), b in coords4(), t in 0.05..2.0f64, sphere in any::<bool>()) {
        let (m, x, y) = if sphere {
            let (Some(x), Some(y)) = (sphere_point(a), sphere_point(c)) else { return Ok(()) };
            (ManifoldModel::Sphere2, x, y)
        } else {
            (ManifoldModel::Hyperbolic3, hyperbolic_point(a), hyperbolic_point(c))
        };
        prop_assume!(m.distance(&x, &y) < 2.8);
        let g = grad_log_heat_kernel(&m, t, &x, &y).unwrap();
        prop_assume!(!g.approximate && !g.clamped);
        let w = tangent(&m, &x, b);
        let h = 1e-5;
        let fwd = m.exp_map(&x, &TangentVector::new(w.coords * h)).unwrap();
        let bwd = m.exp_map(&x, &TangentVector::new(w.coords * -h)).unwrap();
        let fwd = m.project_point(&fwd);
        let bwd = m.project_point(&bwd);
        let num = (log_heat_kernel(&m, t, &fwd, &y).unwrap().log_value
            - log_heat_kernel(&m, t, &bwd, &y).unwrap().log_value)
            / (2.0 * h);
        let exact = m.inner(&g.vector.coords, &w.coords);
        prop_assert!((num - exact).abs() < 1e-4 * (1.0 + exact.abs()), "{num} vs {exact}");
    }

    #[test]
    fn circle_representations_agree(t in 0.05..5.0f64, delta in -PI..PI) {
        let f = circle_kernel_fourier(t, delta);
        let w = circle_kernel_wrapped(t, delta);
        prop_assert!((f - w).abs() < 1e-12 * (1.0 + f));
    }
}

#[test]
fn compact_kernels_have_unit_mass() {
    for t in [0.05, 0.3, 1.0, 4.0] {
        let s = radial_cdf(&ManifoldModel::Sphere2, t, PI).unwrap();
        assert!((s - 1.0).abs() < 1e-10, "sphere t={t}: {s}");
        let c = radial_cdf(&ManifoldModel::Circle, t, PI).unwrap();
        assert!((c - 1.0).abs() < 1e-10, "circle t={t}: {c}");
    }
    let h = radial_cdf(&ManifoldModel::Hyperbolic3, 0.5, 40.0).unwrap();
    assert!((h - 1.0).abs() < 1e-10, "hyperbolic: {h}");
}

/// Chapman-Kolmogorov on the circle by periodic trapezoid quadrature.
#[test]
fn circle_semigroup_property() {
    let n = 2000;
    let dz = 2.0 * PI / n as f64;
    for (s, t, y) in [(0.1, 0.2, 0.4), (0.5, 1.5, 2.9), (0.02, 0.03, -1.0)] {
        let total: f64 = (0..n)
            .map(|k| {
                let z = k as f64 * dz;
                circle_kernel_wrapped(s, z) * circle_kernel_wrapped(t, y - z)
            })
            .sum::<f64>()
            * dz;
        let direct = circle_kernel_wrapped(s + t, y);
        assert!((total - direct).abs() < 1e-10 * direct.max(1.0), "{total} vs {direct}");
    }
}
