//! One test per acceptance criterion. Each prints its individual checks.

use std::time::Instant;

use csde_core::suites::{all_pass, CRITERIA, DEFAULT_SEED};

fn check(id: usize) {
    let c = &CRITERIA[id - 1];
    assert_eq!(c.id, id);
    let start = Instant::now();
    let reports = (c.run)(DEFAULT_SEED).unwrap_or_else(|e| panic!("criterion {} ({}) errored: {e}", c.id, c.name));
    let pass = all_pass(&reports);
    println!(
        "criterion {:>2} {:<18} {} ({:.1} s)",
        c.id,
        c.name,
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    for r in &reports {
        println!("    {}", r.summary());
    }
    assert!(pass, "criterion {} ({}) failed", c.id, c.name);
}

macro_rules! criteria {
    ($($name:ident = $id:expr),* $(,)?) => {
        $(#[test] fn $name() { check($id) })*
    };
}

criteria! {
    criterion_01_flat_bridge = 1,
    criterion_02_development = 2,
    criterion_03_two_routes = 3,
    criterion_04_transport = 4,
    criterion_05_bismut = 5,
    criterion_06_omega_control = 6,
    criterion_07_newton_martingale = 7,
    criterion_08_hitting_time = 8,
    criterion_09_bridge_invariance = 9,
    criterion_10_reproducibility = 10,
}
