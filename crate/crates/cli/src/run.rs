use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use csde_core::conditioning::{
    sample_csde, sample_csde_with, sample_enlarged, sample_enlarged_with, write_endpoints_csv, ConditioningSpec,
    EndpointSummary, EndpointSummaryObserver,
};
use csde_core::development::{default_steps, sample_bm, sample_bm_with, write_paths_csv, PathSample};
use csde_core::estimators::{bismut_gradient, covariant_ibp_check};
use csde_core::hitting_time::{
    default_exit_step, exit_density, phi_from_target, sample_conditioned_exit, write_exits_csv, write_profile_csv,
};
use csde_core::output::{fmt_f64, write_row};
use csde_core::stats::{ks_test, TestReport, ALPHA, Z_BAND};
use csde_core::suites::{find_criterion, run_suite, DEFAULT_SEED};

use crate::config::ExperimentConfig;
use crate::{CliError, Command};

const DEFAULT_OUT: &str = "csde-lab-out";
const DEFAULT_SIM_PATHS: usize = 10;
const DEFAULT_GRADIENT_PATHS: usize = 10_000;
const DEFAULT_EXIT_PATHS: usize = 10_000;

/// Runs one command; `Ok(false)` means a statistical test failed.
pub fn execute(
    command: Command,
    cfg: &ExperimentConfig,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<bool, CliError> {
    if let Some(c) = &cfg.command {
        if c != command.name() {
            return Err(CliError::Config(format!(
                "config is written for {c:?} but the command is {:?}",
                command.name()
            )));
        }
    }
    let seed = seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let dir = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    match command {
        Command::Simulate => simulate(cfg, seed, &dir),
        Command::Verify => verify(cfg, seed, &dir),
        Command::Gradient => gradient(cfg, seed, &dir),
        Command::Hitting => hitting(cfg, seed, &dir),
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Writes `reports.jsonl` and echoes a summary per report.
fn write_reports(dir: &Path, reports: &[TestReport]) -> Result<bool, CliError> {
    let mut f = create(dir, "reports.jsonl")?;
    for r in reports {
        writeln!(f, "{}", r.to_json_line())?;
        println!("{}", r.summary());
    }
    f.flush()?;
    Ok(reports.iter().all(|r| r.pass))
}

fn simulate(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<bool, CliError> {
    let model = cfg.model()?;
    let m = cfg.start(&model)?;
    let field = cfg.field(&model)?;
    let horizon = cfg.horizon()?;
    let n_paths = cfg.n_paths.unwrap_or(DEFAULT_SIM_PATHS);
    let n_steps = cfg.n_steps.unwrap_or_else(|| default_steps(horizon));
    let record = cfg.record_paths.unwrap_or(true);
    let summarize = |paths: &[PathSample]| paths.iter().map(EndpointSummary::from_path).collect::<Vec<_>>();
    let (paths, ends) = match cfg.target(&model)? {
        None => {
            if record {
                let paths = sample_bm(&model, &m, &field, horizon, n_steps, n_paths, seed)?;
                let ends = summarize(&paths);
                (Some(paths), ends)
            } else {
                let u0 = model.initial_frame(&m)?;
                let ends = sample_bm_with(&model, &u0, &field, horizon, n_steps, n_paths, seed, |_| {
                    EndpointSummaryObserver::new(model)
                })?;
                (None, ends)
            }
        }
        Some(target) => {
            let mut spec = ConditioningSpec::new(model, m, field, horizon, target)?.with_steps(n_steps)?;
            if let Some(g) = cfg.terminal_gap {
                spec = spec.with_gap(g)?;
            }
            let enlarged = cfg.route()? == "enlarged";
            if record {
                let paths = if enlarged {
                    sample_enlarged(&spec, n_paths, seed)?
                } else {
                    sample_csde(&spec, n_paths, seed)?
                };
                let ends = summarize(&paths);
                (Some(paths), ends)
            } else {
                let make = |_| EndpointSummaryObserver::new(model);
                let ends = if enlarged {
                    sample_enlarged_with(&spec, n_paths, seed, make)?
                } else {
                    sample_csde_with(&spec, n_paths, seed, make)?
                };
                (None, ends)
            }
        }
    };
    if let Some(paths) = &paths {
        let mut f = create(dir, "paths.csv")?;
        write_paths_csv(&mut f, paths)?;
        f.flush()?;
    }
    let mut f = create(dir, "endpoints.csv")?;
    write_endpoints_csv(&mut f, &model, &ends)?;
    f.flush()?;
    println!("simulated {n_paths} paths on {model} with {n_steps} steps; output in {}", dir.display());
    Ok(true)
}

fn verify(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<bool, CliError> {
    let suite = cfg.suite.as_deref().unwrap_or("all");
    if suite != "all" {
        find_criterion(suite)?;
    }
    let reports = run_suite(suite, seed)?;
    write_reports(dir, &reports)
}

fn gradient(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<bool, CliError> {
    let model = cfg.model()?;
    let m = cfg.start(&model)?;
    let field = cfg.field(&model)?;
    let xi = cfg.test_function()?;
    let horizon = cfg.horizon()?;
    let n_steps = cfg.n_steps.unwrap_or_else(|| default_steps(horizon));
    let n_paths = cfg.n_paths.unwrap_or(DEFAULT_GRADIENT_PATHS);
    let d = model.dim();
    if let Some(e) = &cfg.expected {
        if e.len() != d {
            return Err(CliError::Config(format!("expected gradient has {} entries, model dimension is {d}", e.len())));
        }
    }
    let mut reports = Vec::new();
    let mut f = create(dir, "gradient.csv")?;
    match cfg.method()? {
        "ibp" => {
            let check = covariant_ibp_check(&model, &m, &field, &xi, horizon, n_steps, n_paths, seed)?;
            write_row(&mut f, &["coordinate".into(), "lhs".into(), "rhs".into(), "rhs_std_error".into()])?;
            for i in 0..d {
                write_row(
                    &mut f,
                    &[i.to_string(), fmt_f64(check.lhs[i]), fmt_f64(check.rhs.value[i]), fmt_f64(check.rhs.std_error[i])],
                )?;
            }
            reports.push(check.report("gradient/integration_by_parts", seed));
        }
        _ => {
            let g = bismut_gradient(&model, &m, &field, &xi, horizon, n_steps, n_paths, seed)?;
            write_row(&mut f, &["coordinate".into(), "value".into(), "std_error".into()])?;
            for i in 0..d {
                write_row(&mut f, &[i.to_string(), fmt_f64(g.value[i]), fmt_f64(g.std_error[i])])?;
            }
            if let Some(expected) = &cfg.expected {
                for (i, z) in g.z_scores(expected, 0.0).into_iter().enumerate() {
                    reports.push(TestReport::from_z_score(
                        format!("gradient/coordinate_{i}"),
                        g.value[i],
                        z,
                        Z_BAND,
                        n_paths,
                        Some(seed),
                    ));
                }
            }
        }
    }
    f.flush()?;
    write_reports(dir, &reports)
}

fn hitting(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<bool, CliError> {
    let h = cfg
        .hitting
        .as_ref()
        .ok_or_else(|| CliError::Config("missing field \"hitting\"".into()))?;
    let spec = h.profile_spec()?;
    let profile = exit_density(&spec)?;
    let g = h.time_density(&profile)?;
    let field = phi_from_target(&profile, &g)?;
    let [s_stride, rho_stride] = h.profile_stride.unwrap_or([10, 10]);
    let mut f = create(dir, "profile.csv")?;
    write_profile_csv(&mut f, &profile, s_stride, rho_stride)?;
    f.flush()?;
    let mut reports = vec![TestReport::from_tolerance(
        "hitting/phi_normalization",
        (field.phi(0, 0) - 1.0).abs(),
        1e-6,
    )];
    if !g.is_constant() {
        reports.push(TestReport::from_tolerance("hitting/pde_residual", field.pde_residual, 1e-3));
    }
    let n_paths = h.n_paths.unwrap_or(DEFAULT_EXIT_PATHS);
    if n_paths > 0 {
        let step = h.step.unwrap_or_else(|| default_exit_step(spec.model.radius()));
        let exits = sample_conditioned_exit(&field, step, n_paths, seed)?;
        let mut f = create(dir, "exits.csv")?;
        write_exits_csv(&mut f, &exits)?;
        f.flush()?;
        let times: Vec<f64> = exits.iter().map(|e| e.exit_time).collect();
        reports.push(ks_test("hitting/exit_law_ks", &times, |t| g.exit_cdf(&profile, t), ALPHA, Some(seed))?);
    }
    write_reports(dir, &reports)
}
