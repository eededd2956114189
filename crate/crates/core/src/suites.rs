//! Acceptance suites. Each criterion runs a fixed experiment from a base
//! seed and returns its test reports; a criterion passes when all of its
//! reports pass.

use std::f64::consts::PI;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::conditioning::{
    endpoint_drift, sample_csde_with, sample_enlarged_with, write_endpoints_csv, ConditioningSpec,
    EndpointSummaryObserver, TargetLaw,
};
use crate::curvature_transport::{transport_ode, OmegaConvention, TransportMode};
use crate::development::{
    develop_path, sample_bm_with, write_paths_csv, EndpointObserver, PathRecorder, SnapshotObserver,
};
use crate::error::{Error, Result};
use crate::estimators::{bismut_gradient, covariant_ibp_check_with, martingale_constancy, NewtonObserver};
use crate::geometry::{ManifoldModel, Point, Vec4, VectorField};
use crate::heat_kernel::radial_cdf;
use crate::hitting_time::{
    default_exit_step, exit_density, phi_from_target, sample_conditioned_exit, write_exits_csv, AreaFunction,
    HittingProfile, ProfileSpec, RadialModel, TimeDensity,
};
use crate::stats::{chisq_atoms, energy_distance_test, ks_test, MeanSe, TestReport, ALPHA, Z_BAND};
use crate::test_functions::TestFunction;

pub struct Criterion {
    pub id: usize,
    pub name: &'static str,
    pub run: fn(u64) -> Result<Vec<TestReport>>,
}

pub const CRITERIA: [Criterion; 10] = [
    Criterion { id: 1, name: "flat_bridge", run: flat_bridge },
    Criterion { id: 2, name: "development", run: development },
    Criterion { id: 3, name: "two_routes", run: two_routes },
    Criterion { id: 4, name: "transport", run: transport },
    Criterion { id: 5, name: "bismut", run: bismut },
    Criterion { id: 6, name: "omega_control", run: omega_control },
    Criterion { id: 7, name: "newton_martingale", run: newton_martingale },
    Criterion { id: 8, name: "hitting_time", run: hitting_time },
    Criterion { id: 9, name: "bridge_invariance", run: bridge_invariance },
    Criterion { id: 10, name: "reproducibility", run: reproducibility },
];

/// Default base seed for all suites.
pub const DEFAULT_SEED: u64 = 20_240_601;

/// Every accepted suite name, including `all`.
pub fn suite_names() -> Vec<&'static str> {
    CRITERIA.iter().map(|c| c.name).chain(["all"]).collect()
}

pub fn find_criterion(name: &str) -> Result<&'static Criterion> {
    CRITERIA.iter().find(|c| c.name == name).ok_or_else(|| {
        Error::invalid(format!("unknown suite {name:?}; valid suites are {}", suite_names().join(", ")))
    })
}

/// Runs one named suite, or every criterion for `all`.
pub fn run_suite(name: &str, seed: u64) -> Result<Vec<TestReport>> {
    if name == "all" {
        let mut out = Vec::new();
        for c in &CRITERIA {
            out.extend((c.run)(seed)?);
        }
        return Ok(out);
    }
    (find_criterion(name)?.run)(seed)
}

pub fn all_pass(reports: &[TestReport]) -> bool {
    !reports.is_empty() && reports.iter().all(|r| r.pass)
}

fn sub_seed(seed: u64, criterion: u64, k: u64) -> u64 {
    seed.wrapping_add(criterion << 32).wrapping_add(k)
}

fn with_samples(mut r: TestReport, n: usize, seed: u64) -> TestReport {
    r.n_samples = n;
    r.seed = Some(seed);
    r
}

fn north() -> Point {
    Point::new(Vec4::new(0.0, 0.0, 1.0, 0.0))
}

fn sphere_atoms() -> Result<TargetLaw> {
    let s2 = ManifoldModel::Sphere2;
    Ok(TargetLaw::Atoms(vec![
        (s2.point(&[1.0, 0.0, 0.0])?, 0.3),
        (s2.point(&[0.0, 0.6, -0.8])?, 0.7),
    ]))
}

fn flat_bridge(seed: u64) -> Result<Vec<TestReport>> {
    let m = ManifoldModel::Euclidean(1);
    let y = m.point(&[1.0])?;
    let spec = ConditioningSpec::new(m, m.point(&[0.0])?, VectorField::Zero, 1.0, TargetLaw::Dirac(y))?.with_steps(800)?;
    let n = 10_000;
    let s = sub_seed(seed, 1, 0);
    let snaps = sample_csde_with(&spec, n, s, |_| SnapshotObserver::new(vec![400]))?;
    let mid: Vec<f64> = snaps.iter().map(|p| p.frames[0].base.coords[0]).collect();
    let law = Normal::new(0.5, 0.5).expect("valid normal");
    let ks = ks_test("flat_bridge/marginal_t0.5", &mid, |x| law.cdf(x), ALPHA, Some(s))?;
    let eps = spec.gap();
    let gap = MeanSe::from_values(snaps.iter().map(|p| m.distance(&p.end.last.base, &y).powi(2)));
    let gap = with_samples(TestReport::from_tolerance("flat_bridge/gap_mean_square", gap.mean, 2.0 * eps), n, s);
    Ok(vec![ks, gap])
}

/// Equiprobable radial bins by bisection on the CDF.
fn radial_bin_edges(model: &ManifoldModel, t: f64, bins: usize) -> Result<Vec<f64>> {
    let mut edges = vec![0.0];
    for k in 1..bins {
        let target = k as f64 / bins as f64;
        let (mut lo, mut hi) = (0.0, PI);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if radial_cdf(model, t, mid)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        edges.push(0.5 * (lo + hi));
    }
    edges.push(f64::INFINITY);
    Ok(edges)
}

fn development(seed: u64) -> Result<Vec<TestReport>> {
    let s2 = ManifoldModel::Sphere2;
    let m = north();
    let u0 = s2.initial_frame(&m)?;
    let (t, n, bins) = (0.5, 10_000, 20);
    let s = sub_seed(seed, 2, 0);
    let ends = sample_bm_with(&s2, &u0, &VectorField::Zero, t, 400, n, s, |_| EndpointObserver)?;
    let edges = radial_bin_edges(&s2, t, bins)?;
    let mut counts = vec![0u64; bins];
    for f in &ends {
        let r = s2.distance(&m, &f.base);
        let k = edges.partition_point(|e| *e <= r).clamp(1, bins) - 1;
        counts[k] += 1;
    }
    let chi = chisq_atoms("development/sphere2_radial_law", &counts, &vec![1.0 / bins as f64; bins], ALPHA, Some(s))?;

    // Flat development is the driving path itself.
    let e3 = ManifoldModel::Euclidean(3);
    let x0 = e3.point(&[0.3, -0.2, 0.1])?;
    let u = e3.initial_frame(&x0)?;
    let s_flat = sub_seed(seed, 2, 1);
    let mut worst: f64 = 0.0;
    for id in 0..20 {
        let path = develop_path(&e3, &u, &VectorField::Zero, None, 1.0, 800, s_flat, id)?;
        let mut x = x0.coords;
        for (k, db) in path.driver.iter().enumerate() {
            x += db;
            worst = worst.max((path.frames[k + 1].base.coords - x).amax());
        }
    }
    let flat = with_samples(TestReport::from_tolerance("development/euclidean_reduction", worst, 1e-12), 20, s_flat);
    Ok(vec![chi, flat])
}

fn two_routes(seed: u64) -> Result<Vec<TestReport>> {
    let s2 = ManifoldModel::Sphere2;
    let spec = ConditioningSpec::new(s2, north(), VectorField::Zero, 1.0, sphere_atoms()?)?.with_steps(800)?;
    let steps = vec![200, 400, 600];
    let (n_law, n_atoms) = (500, 2000);
    let (sa, sb) = (sub_seed(seed, 3, 0), sub_seed(seed, 3, 1));
    let csde = sample_csde_with(&spec, n_atoms, sa, |_| SnapshotObserver::new(steps.clone()))?;
    let enlarged = sample_enlarged_with(&spec, n_law, sb, |_| SnapshotObserver::new(steps.clone()))?;
    let mut out = Vec::new();
    for (j, t) in [0.25, 0.5, 0.75].into_iter().enumerate() {
        let a: Vec<Point> = csde[..n_law].iter().map(|p| p.frames[j].base).collect();
        let b: Vec<Point> = enlarged.iter().map(|p| p.frames[j].base).collect();
        out.push(energy_distance_test(
            &format!("two_routes/energy_t{t}"),
            &a,
            &b,
            |x, y| s2.distance(x, y),
            200,
            ALPHA,
            sub_seed(seed, 3, 2 + j as u64),
        )?);
    }
    let mut counts = [0u64; 2];
    for p in &csde {
        let atom = p.end.attached.and_then(|a| a.atom).ok_or_else(|| Error::Degenerate("path without atom".into()))?;
        counts[atom] += 1;
    }
    out.push(chisq_atoms("two_routes/endpoint_atoms", &counts, &[0.3, 0.7], ALPHA, Some(sa))?);
    Ok(out)
}

/// `max |Lambda_T - c I|` along one developed path.
fn transport_error(model: ManifoldModel, horizon: f64, n_steps: usize, c: f64, seed: u64) -> Result<f64> {
    let u0 = model.initial_frame(&model.point(&origin_coords(&model))?)?;
    let path = develop_path(&model, &u0, &VectorField::Zero, None, horizon, n_steps, seed, 0)?;
    let tm = transport_ode(&path, &VectorField::Zero, TransportMode::Lambda)?;
    let d = model.dim();
    let last = tm.last();
    let mut err: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { c } else { 0.0 };
            err = err.max((last[(i, j)] - target).abs());
        }
    }
    Ok(err)
}

fn origin_coords(model: &ManifoldModel) -> Vec<f64> {
    match model {
        ManifoldModel::Euclidean(d) => vec![0.0; *d],
        ManifoldModel::Circle => vec![0.0],
        ManifoldModel::Sphere2 => vec![0.0, 0.0, 1.0],
        ManifoldModel::Hyperbolic3 => vec![1.0, 0.0, 0.0, 0.0],
    }
}

fn transport(seed: u64) -> Result<Vec<TestReport>> {
    let s = sub_seed(seed, 4, 0);
    let e = std::f64::consts::E;
    let sphere = transport_error(ManifoldModel::Sphere2, 2.0, 1600, (-1.0f64).exp(), s)?;
    let hyper = transport_error(ManifoldModel::Hyperbolic3, 1.0, 800, e, s)?;
    let u0 = ManifoldModel::Euclidean(2).initial_frame(&Point::new(Vec4::zeros()))?;
    let path = develop_path(&ManifoldModel::Euclidean(2), &u0, &VectorField::Zero, None, 1.0, 800, s, 0)?;
    let tm = transport_ode(&path, &VectorField::Zero, TransportMode::Lambda)?;
    let flat = tm
        .matrices
        .iter()
        .map(|m| (m - nalgebra::DMatrix::identity(2, 2)).amax())
        .fold(0.0f64, f64::max);
    let coarse = transport_error(ManifoldModel::Sphere2, 2.0, 50, (-1.0f64).exp(), s)?;
    let fine = transport_error(ManifoldModel::Sphere2, 2.0, 100, (-1.0f64).exp(), s)?;
    let ratio = coarse / fine;
    // Second order: the ratio lies in [3.5, 4.5].
    let halving = TestReport::from_tolerance("transport/step_halving_ratio_minus_4", (ratio - 4.0).abs(), 0.5);
    Ok(vec![
        TestReport::from_tolerance("transport/sphere2_lambda_2", sphere, 1e-6),
        TestReport::from_tolerance("transport/hyperbolic3_lambda_1", hyper, 1e-6),
        TestReport::from_tolerance("transport/flat_identity", flat, 0.0),
        halving,
    ])
}

fn gradient_report(name: &str, value: &[f64], std_error: &[f64], target: &[f64], n: usize, seed: u64) -> TestReport {
    let (mut worst, mut at) = (0.0f64, 0);
    for i in 0..value.len() {
        let z = if std_error[i] > 0.0 {
            (value[i] - target[i]) / std_error[i]
        } else if value[i] == target[i] {
            0.0
        } else {
            f64::INFINITY
        };
        if z.abs() >= worst.abs() {
            worst = z;
            at = i;
        }
    }
    TestReport::from_z_score(name, value[at], worst, Z_BAND, n, Some(seed))
}

fn bismut(seed: u64) -> Result<Vec<TestReport>> {
    let mut out = Vec::new();
    let e1 = ManifoldModel::Euclidean(1);
    let x0 = e1.point(&[0.0])?;
    let n_flat = 100_000;
    for (k, a) in [0.25, 0.5, 1.0].into_iter().enumerate() {
        let s = sub_seed(seed, 5, k as u64);
        let xi = TestFunction::exp_tilt(&[a], 1.0)?;
        let g = bismut_gradient(&e1, &x0, &VectorField::Zero, &xi, 1.0, 8, n_flat, s)?;
        out.push(gradient_report(&format!("bismut/exp_tilt_a{a}"), &g.value, &g.std_error, &[a], n_flat, s));
    }
    let s2 = ManifoldModel::Sphere2;
    let m = s2.point(&[1.0, 0.0, 0.0])?;
    let u0 = s2.initial_frame(&m)?;
    let pole = Vec4::new(0.0, 0.0, 1.0, 0.0);
    let exact = s2.frame_coords(&u0, &(pole * (0.5 * (-1.0f64).exp())));
    let xi = TestFunction::sphere_linear(0.5, [0.0, 0.0, 1.0])?;
    let n_sphere = 100_000;
    let s = sub_seed(seed, 5, 3);
    let g = bismut_gradient(&s2, &m, &VectorField::Zero, &xi, 1.0, 200, n_sphere, s)?;
    out.push(gradient_report("bismut/sphere2_eigenfunction", &g.value, &g.std_error, &[exact[0], exact[1]], n_sphere, s));
    let s = sub_seed(seed, 5, 4);
    let n_const = 20_000;
    let g = bismut_gradient(&s2, &m, &VectorField::Zero, &TestFunction::Constant(1.0), 1.0, 200, n_const, s)?;
    out.push(gradient_report("bismut/constant_xi", &g.value, &g.std_error, &[0.0, 0.0], n_const, s));
    Ok(out)
}

fn omega_control(seed: u64) -> Result<Vec<TestReport>> {
    let n = 40_000;
    let mut out = Vec::new();
    let cases = [
        (
            "ou_d1",
            ManifoldModel::Euclidean(1),
            vec![0.3],
            VectorField::ornstein_uhlenbeck(1, 0.5)?,
            TestFunction::gaussian_bump(&[1.0], 0.7)?,
            OmegaConvention::SignFlipped,
        ),
        (
            "shear_d2",
            ManifoldModel::Euclidean(2),
            vec![0.3, 0.2],
            VectorField::linear(2, &[-0.5, 1.0, 0.0, -0.5])?,
            TestFunction::gaussian_bump(&[1.0, -0.5], 0.7)?,
            OmegaConvention::TransposeFlipped,
        ),
    ];
    for (k, (name, model, x, field, xi, flipped)) in cases.into_iter().enumerate() {
        let m = model.point(&x)?;
        let s = sub_seed(seed, 6, k as u64);
        let ok = covariant_ibp_check_with(&model, &m, &field, &xi, 1.0, 200, n, s, OmegaConvention::Standard)?;
        out.push(ok.report(&format!("omega_control/{name}_standard"), s));
        let bad = covariant_ibp_check_with(&model, &m, &field, &xi, 1.0, 200, n, s, flipped)?;
        let z = bad.max_abs_z();
        out.push(TestReport::from_detection(
            format!("omega_control/{name}_{flipped:?}"),
            bad.rhs.value[0],
            z,
            10.0,
            n,
            Some(s),
        ));
    }
    Ok(out)
}

fn newton_martingale(seed: u64) -> Result<Vec<TestReport>> {
    let e1 = ManifoldModel::Euclidean(1);
    let flat_atoms = TargetLaw::Atoms(vec![(e1.point(&[-1.0])?, 0.3), (e1.point(&[1.5])?, 0.7)]);
    let cases = [
        ("flat_dirac", e1, e1.point(&[0.0])?, TargetLaw::Dirac(e1.point(&[1.0])?), 4000),
        ("flat_atoms", e1, e1.point(&[0.0])?, flat_atoms, 4000),
        (
            "sphere2_dirac",
            ManifoldModel::Sphere2,
            north(),
            TargetLaw::Dirac(ManifoldModel::Sphere2.point(&[1.0, 0.0, 0.0])?),
            2000,
        ),
        ("sphere2_atoms", ManifoldModel::Sphere2, north(), sphere_atoms()?, 2000),
    ];
    let at_steps: Vec<usize> = (0..8).map(|k| 100 * k).collect();
    let mut out = Vec::new();
    for (k, (name, model, m, target, n)) in cases.into_iter().enumerate() {
        let candidates: Vec<Point> = target.points().into_iter().map(|(p, _)| p).collect();
        let spec = ConditioningSpec::new(model, m, VectorField::Zero, 1.0, target)?.with_steps(800)?;
        let s = sub_seed(seed, 7, k as u64);
        let field = VectorField::Zero;
        let samples = sample_csde_with(&spec, n, s, |_| {
            NewtonObserver::new(model, &field, &candidates, 1.0, at_steps.clone())
        })?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        out.push(martingale_constancy(&format!("newton_martingale/{name}"), &samples, model.dim(), s)?);
    }
    Ok(out)
}

/// Sup-norm distance between a radial-grid solve with `A = 1` and the
/// interval series on the default grid.
pub fn radial_solver_error(series: &HittingProfile) -> Result<f64> {
    let grid = exit_density(&ProfileSpec::new(RadialModel::RadialGrid {
        area: AreaFunction::Power(0),
        radius: series.model.radius(),
    }))?;
    let mut worst: f64 = 0.0;
    for i in 0..=grid.n_s {
        for j in 0..=grid.n_rho {
            worst = worst.max((grid.survival(i, j) - series.survival_at(grid.s(i), grid.rho(j))).abs());
        }
    }
    Ok(worst)
}

fn hitting_time(seed: u64) -> Result<Vec<TestReport>> {
    let p = exit_density(&ProfileSpec::new(RadialModel::EuclideanInterval { radius: 1.0 }))?;
    let mut out = vec![TestReport::from_tolerance(
        "hitting_time/series_mean",
        (p.mean_exit_time(0) - 1.0).abs(),
        3e-3,
    )];
    let h = default_exit_step(1.0);
    let n = 10_000;
    let s = sub_seed(seed, 8, 0);
    let free = phi_from_target(&p, &TimeDensity::constant())?;
    let exits = sample_conditioned_exit(&free, h, n, s)?;
    let survival = p.survival_at(1.0, 0.0);
    let mc = MeanSe::from_values(exits.iter().map(|e| f64::from(u8::from(e.exit_time > 1.0))));
    out.push(TestReport::from_z_score("hitting_time/survival_1", mc.mean, mc.z_against(survival), Z_BAND, n, Some(s)));
    out.push(TestReport::from_tolerance("hitting_time/survival_1_value", (survival - 0.3708).abs(), 1e-4));
    let times: Vec<f64> = exits.iter().map(|e| e.exit_time).collect();
    out.push(ks_test("hitting_time/true_law_ks", &times, |t| 1.0 - p.survival_at(t.max(0.0), 0.0), ALPHA, Some(s))?);
    let s = sub_seed(seed, 8, 1);
    let g = TimeDensity::indicator(&p, 0.2, 0.6)?;
    let field = phi_from_target(&p, &g)?;
    let times: Vec<f64> = sample_conditioned_exit(&field, h, n, s)?.iter().map(|e| e.exit_time).collect();
    out.push(ks_test("hitting_time/indicator_ks", &times, |t| g.exit_cdf(&p, t), ALPHA, Some(s))?);
    out.push(TestReport::from_tolerance("hitting_time/radial_solver", radial_solver_error(&p)?, 1e-4));
    Ok(out)
}

fn bridge_invariance(_seed: u64) -> Result<Vec<TestReport>> {
    let mut out = Vec::new();
    for (d, b) in [(1usize, vec![0.7]), (2, vec![0.3, -0.5])] {
        let model = ManifoldModel::Euclidean(d);
        let y = model.point(&vec![1.0; d])?;
        let drift = VectorField::constant(&b)?;
        let plain = ConditioningSpec::new(model, model.point(&vec![0.0; d])?, VectorField::Zero, 1.0, TargetLaw::Dirac(y))?;
        let tilted = ConditioningSpec::new(model, model.point(&vec![0.0; d])?, drift.clone(), 1.0, TargetLaw::Dirac(y))?;
        let mut worst: f64 = 0.0;
        for i in 0..10 {
            let t = 0.1 * i as f64;
            for j in 0..=16 {
                let mut c = vec![-2.0 + 0.25 * j as f64; d];
                if d > 1 {
                    c[1] = 1.5 - 0.2 * j as f64;
                }
                let x = model.point(&c)?;
                let a = endpoint_drift(&plain, t, &x)?.vector.coords;
                let total = endpoint_drift(&tilted, t, &x)?.vector.coords + drift.value(&x);
                worst = worst.max((a - total).amax());
            }
        }
        out.push(TestReport::from_tolerance(format!("bridge_invariance/euclidean_{d}"), worst, 1e-12));
    }
    Ok(out)
}

/// Artifacts of a small run: paths, endpoints and exits CSVs.
fn artifact_bytes(seed: u64) -> Result<Vec<u8>> {
    let s2 = ManifoldModel::Sphere2;
    let spec = ConditioningSpec::new(s2, north(), VectorField::Zero, 1.0, sphere_atoms()?)?.with_steps(200)?;
    let paths = sample_csde_with(&spec, 20, seed, |_| PathRecorder::new(s2))?;
    let ends = sample_csde_with(&spec, 50, seed, |_| EndpointSummaryObserver::new(s2))?;
    let p = exit_density(&ProfileSpec::new(RadialModel::EuclideanInterval { radius: 1.0 }).with_grid(2400, 100))?;
    let g = TimeDensity::indicator(&p, 0.2, 0.6)?;
    let exits = sample_conditioned_exit(&phi_from_target(&p, &g)?, default_exit_step(1.0), 200, seed)?;
    let mut buf = Vec::new();
    write_paths_csv(&mut buf, &paths).expect("in-memory write");
    write_endpoints_csv(&mut buf, &s2, &ends).expect("in-memory write");
    write_exits_csv(&mut buf, &exits).expect("in-memory write");
    Ok(buf)
}

fn report_bytes(reports: &[TestReport]) -> Vec<u8> {
    reports.iter().flat_map(|r| (r.to_json_line() + "\n").into_bytes()).collect()
}

fn reproducibility(seed: u64) -> Result<Vec<TestReport>> {
    let s = sub_seed(seed, 10, 0);
    let same = |a: &[u8], b: &[u8]| if a == b && !a.is_empty() { 0.0 } else { 1.0 };
    let artifacts = same(&artifact_bytes(s)?, &artifact_bytes(s)?);
    let mut rerun: f64 = 0.0;
    for c in [flat_bridge as fn(u64) -> Result<Vec<TestReport>>, transport, bridge_invariance] {
        rerun = rerun.max(same(&report_bytes(&c(seed)?), &report_bytes(&c(seed)?)));
    }
    Ok(vec![
        with_samples(TestReport::from_tolerance("reproducibility/csv_artifacts", artifacts, 0.0), 2, s),
        with_samples(TestReport::from_tolerance("reproducibility/report_json", rerun, 0.0), 2, seed),
    ])
}
