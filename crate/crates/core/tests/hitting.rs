use csde_core::hitting_time::{
    default_exit_step, exit_density, phi_from_target, sample_conditioned_exit, write_exits_csv, ProfileSpec,
    RadialModel, TimeDensity,
};
use csde_core::stats::{ks_test, MeanSe, ALPHA, Z_BAND};

fn interval_profile() -> csde_core::hitting_time::HittingProfile {
    exit_density(&ProfileSpec::new(RadialModel::EuclideanInterval { radius: 1.0 })).unwrap()
}

#[test]
fn true_law_conditioning_reproduces_exit_law() {
    let p = interval_profile();
    let field = phi_from_target(&p, &TimeDensity::constant()).unwrap();
    let exits = sample_conditioned_exit(&field, default_exit_step(1.0), 10_000, 11).unwrap();
    assert!(exits.iter().all(|e| !e.censored));
    let times: Vec<f64> = exits.iter().map(|e| e.exit_time).collect();
    let report = ks_test("exit law", &times, |s| 1.0 - p.survival_at(s.max(0.0), 0.0), ALPHA, Some(11)).unwrap();
    assert!(report.pass, "{}", report.summary());
    let mean = MeanSe::from_values(times.iter().copied());
    assert!(mean.z_against(1.0).abs() < Z_BAND);
}

#[test]
fn indicator_target_is_reached() {
    let p = interval_profile();
    let g = TimeDensity::indicator(&p, 0.2, 0.6).unwrap();
    let field = phi_from_target(&p, &g).unwrap();
    let exits = sample_conditioned_exit(&field, default_exit_step(1.0), 10_000, 12).unwrap();
    let times: Vec<f64> = exits.iter().map(|e| e.exit_time).collect();
    let report = ks_test("indicator law", &times, |s| g.exit_cdf(&p, s), ALPHA, Some(12)).unwrap();
    assert!(report.pass, "{}", report.summary());
}

#[test]
fn h_transform_weights_have_unit_mean() {
    let p = interval_profile();
    let g = TimeDensity::indicator(&p, 0.2, 0.6).unwrap();
    let free = phi_from_target(&p, &TimeDensity::constant()).unwrap();
    let exits = sample_conditioned_exit(&free, default_exit_step(1.0), 20_000, 13).unwrap();
    let weights = MeanSe::from_values(exits.iter().map(|e| g.value(e.exit_time)));
    assert!(weights.z_against(1.0).abs() < Z_BAND, "{weights:?}");
}

#[test]
fn ball3_exit_mean() {
    let p = exit_density(&ProfileSpec::new(RadialModel::EuclideanBall3 { radius: 1.0 })).unwrap();
    let field = phi_from_target(&p, &TimeDensity::constant()).unwrap();
    let exits = sample_conditioned_exit(&field, default_exit_step(1.0), 10_000, 14).unwrap();
    let mean = MeanSe::from_values(exits.iter().map(|e| e.exit_time));
    assert!(mean.z_against(1.0 / 3.0).abs() < Z_BAND, "{mean:?}");
}

#[test]
fn exit_samples_are_reproducible() {
    let p = interval_profile();
    let field = phi_from_target(&p, &TimeDensity::bump(&p, 0.3, 0.015).unwrap()).unwrap();
    let run = || {
        let exits = sample_conditioned_exit(&field, default_exit_step(1.0), 500, 5).unwrap();
        let mut buf = Vec::new();
        write_exits_csv(&mut buf, &exits).unwrap();
        buf
    };
    assert_eq!(run(), run());
}
