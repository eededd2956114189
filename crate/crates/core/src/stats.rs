//! Hypothesis tests that turn law-equality claims into pass/fail reports.

use rand::seq::SliceRandom;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::output::{fmt_f64, json_f64, json_str};
use crate::rng::path_stream;

/// Significance level used by every statistical check.
pub const ALPHA: f64 = 0.01;
/// Half-width, in standard errors, of the acceptance band for estimates.
pub const Z_BAND: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestKind {
    /// Pass when `p_value >= threshold`.
    PValue,
    /// Pass when `|z_score| <= threshold`.
    ZScore,
    /// Deterministic check: pass when `statistic <= threshold`.
    Tolerance,
    /// Negative control: pass when `|z_score| >= threshold`.
    Detection,
}

impl TestKind {
    fn as_str(self) -> &'static str {
        match self {
            TestKind::PValue => "p_value",
            TestKind::ZScore => "z_score",
            TestKind::Tolerance => "tolerance",
            TestKind::Detection => "detection",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestReport {
    pub name: String,
    pub kind: TestKind,
    pub statistic: f64,
    pub p_value: Option<f64>,
    pub z_score: Option<f64>,
    pub threshold: f64,
    pub pass: bool,
    pub n_samples: usize,
    pub seed: Option<u64>,
}

impl TestReport {
    pub fn from_p_value(
        name: impl Into<String>,
        statistic: f64,
        p_value: f64,
        alpha: f64,
        n_samples: usize,
        seed: Option<u64>,
    ) -> Self {
        TestReport {
            name: name.into(),
            kind: TestKind::PValue,
            statistic,
            p_value: Some(p_value),
            z_score: None,
            threshold: alpha,
            pass: p_value >= alpha,
            n_samples,
            seed,
        }
    }

    pub fn from_z_score(
        name: impl Into<String>,
        statistic: f64,
        z_score: f64,
        band: f64,
        n_samples: usize,
        seed: Option<u64>,
    ) -> Self {
        TestReport {
            name: name.into(),
            kind: TestKind::ZScore,
            statistic,
            p_value: None,
            z_score: Some(z_score),
            threshold: band,
            pass: z_score.abs() <= band,
            n_samples,
            seed,
        }
    }

    /// A negative control that must reject: `|z| >= min_z`.
    pub fn from_detection(
        name: impl Into<String>,
        statistic: f64,
        z_score: f64,
        min_z: f64,
        n_samples: usize,
        seed: Option<u64>,
    ) -> Self {
        TestReport {
            name: name.into(),
            kind: TestKind::Detection,
            statistic,
            p_value: None,
            z_score: Some(z_score),
            threshold: min_z,
            pass: z_score.abs() >= min_z,
            n_samples,
            seed,
        }
    }

    /// A deterministic comparison `error <= tolerance`.
    pub fn from_tolerance(name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        TestReport {
            name: name.into(),
            kind: TestKind::Tolerance,
            statistic: error,
            p_value: None,
            z_score: None,
            threshold: tolerance,
            pass: error <= tolerance,
            n_samples: 0,
            seed: None,
        }
    }

    /// Renames the report, keeping the verdict.
    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// One JSON object on a single line; floats carry 17 significant digits.
    pub fn to_json_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(json_f64).unwrap_or_else(|| "null".to_string());
        let seed = self.seed.map(|s| s.to_string()).unwrap_or_else(|| "null".into());
        format!(
            "{{\"name\":{},\"kind\":\"{}\",\"statistic\":{},\"p_value\":{},\"z_score\":{},\"threshold\":{},\"pass\":{},\"n_samples\":{},\"seed\":{}}}",
            json_str(&self.name),
            self.kind.as_str(),
            json_f64(self.statistic),
            opt(self.p_value),
            opt(self.z_score),
            json_f64(self.threshold),
            self.pass,
            self.n_samples,
            seed
        )
    }

    /// Human-readable summary line.
    pub fn summary(&self) -> String {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        let detail = match self.kind {
            TestKind::PValue => format!(
                "stat={} p={} (alpha={})",
                fmt_short(self.statistic),
                fmt_short(self.p_value.unwrap_or(f64::NAN)),
                self.threshold
            ),
            TestKind::Detection => format!(
                "value={} z={} (need |z| >= {})",
                fmt_short(self.statistic),
                fmt_short(self.z_score.unwrap_or(f64::NAN)),
                self.threshold
            ),
            TestKind::ZScore => format!(
                "value={} z={} (band={})",
                fmt_short(self.statistic),
                fmt_short(self.z_score.unwrap_or(f64::NAN)),
                self.threshold
            ),
            TestKind::Tolerance => format!(
                "err={} (tol={})",
                fmt_short(self.statistic),
                fmt_f64(self.threshold)
            ),
        };
        format!("[{verdict}] {}: {detail}", self.name)
    }
}

fn fmt_short(x: f64) -> String {
    format!("{x:.5e}")
}

/// Running mean and standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanSe {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
}

impl MeanSe {
    pub fn from_values<I: IntoIterator<Item = f64>>(values: I) -> Self {
        let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
        for v in values {
            n += 1;
            let delta = v - mean;
            mean += delta / n as f64;
            m2 += delta * (v - mean);
        }
        let variance = if n > 1 { m2 / (n - 1) as f64 } else { f64::NAN };
        MeanSe {
            n,
            mean,
            variance,
            std_error: (variance / n as f64).sqrt(),
        }
    }

    /// z-score of the mean against `target`.
    pub fn z_against(&self, target: f64) -> f64 {
        (self.mean - target) / self.std_error
    }
}

/// Self-normalized importance-sampling estimate `sum w f / sum w` with a
/// delta-method standard error.
pub fn self_normalized(values: &[f64], weights: &[f64]) -> Result<MeanSe> {
    if values.len() != weights.len() || values.len() < 2 {
        return Err(Error::invalid("need matching value/weight samples (n >= 2)"));
    }
    let n = values.len() as f64;
    let w_mean: f64 = weights.iter().sum::<f64>() / n;
    if w_mean <= 0.0 || !w_mean.is_finite() {
        return Err(Error::Degenerate("importance weights are all zero".into()));
    }
    let est = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / (n * w_mean);
    let resid = MeanSe::from_values(
        values
            .iter()
            .zip(weights)
            .map(|(v, w)| w * (v - est) / w_mean),
    );
    Ok(MeanSe {
        n: values.len(),
        mean: est,
        variance: resid.variance,
        std_error: resid.std_error,
    })
}

/// Two-sample energy-distance test with a permutation p-value.
///
/// The statistic is the V-statistic `2 E d(A,B) - E d(A,A') - E d(B,B')`.
pub fn energy_distance_test<P, D>(
    name: &str,
    sample_a: &[P],
    sample_b: &[P],
    distance: D,
    n_permutations: usize,
    alpha: f64,
    seed: u64,
) -> Result<TestReport>
where
    D: Fn(&P, &P) -> f64,
{
    const MIN_SIDE: usize = 10;
    let (na, nb) = (sample_a.len(), sample_b.len());
    if na.min(nb) < MIN_SIDE {
        return Err(Error::Underpowered {
            n: na.min(nb),
            min: MIN_SIDE,
        });
    }
    let n = na + nb;
    let pooled: Vec<&P> = sample_a.iter().chain(sample_b).collect();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = distance(pooled[i], pooled[j]);
            if !(d >= 0.0) {
                return Err(Error::invalid(format!("distance {d} is not nonnegative")));
            }
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let row_sums: Vec<f64> = (0..n).map(|i| dist[i * n..(i + 1) * n].iter().sum()).collect();
    let total: f64 = row_sums.iter().sum();

    let statistic_for = |in_a: &[f64]| -> f64 {
        let mut s_aa = 0.0;
        let mut r_a = 0.0;
        for i in 0..n {
            if in_a[i] == 1.0 {
                r_a += row_sums[i];
                let row = &dist[i * n..(i + 1) * n];
                s_aa += row.iter().zip(in_a).map(|(d, m)| d * m).sum::<f64>();
            }
        }
        let s_ab = r_a - s_aa;
        let s_bb = total - r_a - s_ab;
        let (fa, fb) = (na as f64, nb as f64);
        2.0 * s_ab / (fa * fb) - s_aa / (fa * fa) - s_bb / (fb * fb)
    };

    let mut labels: Vec<f64> = (0..n).map(|i| if i < na { 1.0 } else { 0.0 }).collect();
    let observed = statistic_for(&labels);
    let slack = 1e-12 * observed.abs().max(1e-300);
    let mut exceed = 0usize;
    for p in 0..n_permutations {
        let mut rng = path_stream(seed, p as u64);
        labels.shuffle(&mut rng);
        if statistic_for(&labels) >= observed - slack {
            exceed += 1;
        }
    }
    let p_value = (exceed + 1) as f64 / (n_permutations + 1) as f64;
    Ok(TestReport::from_p_value(name, observed, p_value, alpha, n, Some(seed)))
}

/// Asymptotic Kolmogorov survival function with Stephens' small-sample
/// correction.
pub fn kolmogorov_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov test against an explicit CDF.
pub fn ks_test<F: Fn(f64) -> f64>(
    name: &str,
    sample: &[f64],
    cdf: F,
    alpha: f64,
    seed: Option<u64>,
) -> Result<TestReport> {
    if sample.is_empty() {
        return Err(Error::invalid("KS test needs a nonempty sample"));
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    let p = kolmogorov_p_value(d, sorted.len());
    Ok(TestReport::from_p_value(name, d, p, alpha, sorted.len(), seed))
}

/// Pearson chi-square test of counts against cell probabilities.
pub fn chisq_atoms(
    name: &str,
    counts: &[u64],
    expected_probs: &[f64],
    alpha: f64,
    seed: Option<u64>,
) -> Result<TestReport> {
    if counts.len() != expected_probs.len() || counts.len() < 2 {
        return Err(Error::invalid("need at least two cells with matching probabilities"));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("counts sum to zero"));
    }
    let psum: f64 = expected_probs.iter().sum();
    if (psum - 1.0).abs() > 1e-9 || expected_probs.iter().any(|p| *p < 0.0) {
        return Err(Error::invalid(format!("cell probabilities sum to {psum}, not 1")));
    }
    let mut stat = 0.0;
    for (cell, (c, p)) in counts.iter().zip(expected_probs).enumerate() {
        let e = p * total as f64;
        if e < 5.0 {
            return Err(Error::Binning { cell, expected: e });
        }
        stat += (*c as f64 - e).powi(2) / e;
    }
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("positive degrees of freedom");
    let p = 1.0 - dist.cdf(stat);
    Ok(TestReport::from_p_value(name, stat, p, alpha, total as usize, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, uniform};

    #[test]
    fn energy_identical_samples() {
        let a: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let r = energy_distance_test("same", &a, &a, |x, y| (x - y).abs(), 200, ALPHA, 1).unwrap();
        assert!(r.statistic.abs() < 1e-12);
        assert!(r.pass);
    }

    #[test]
    fn energy_separated_clusters() {
        let mut rng = path_stream(5, 0);
        let a: Vec<f64> = (0..30).map(|_| 0.1 * standard_normal(&mut rng)).collect();
        let b: Vec<f64> = (0..30).map(|_| 100.0 + 0.1 * standard_normal(&mut rng)).collect();
        let r = energy_distance_test("far", &a, &b, |x, y| (x - y).abs(), 200, ALPHA, 2).unwrap();
        assert!(r.p_value.unwrap() <= 1.0 / 201.0 + 1e-15);
        assert!(!r.pass);
    }

    #[test]
    fn energy_null_calibration() {
        let mut rng = path_stream(2024, 0);
        let a: Vec<f64> = (0..500).map(|_| standard_normal(&mut rng)).collect();
        let b: Vec<f64> = (0..500).map(|_| standard_normal(&mut rng)).collect();
        let r = energy_distance_test("null", &a, &b, |x, y| (x - y).abs(), 200, ALPHA, 3).unwrap();
        assert!(r.pass, "{}", r.summary());
        let p = r.p_value.unwrap() * 201.0;
        assert!((p - p.round()).abs() < 1e-9 && p >= 1.0);
    }

    #[test]
    fn energy_underpowered() {
        let a = vec![0.0; 5];
        let b = vec![1.0; 20];
        assert!(matches!(
            energy_distance_test("x", &a, &b, |x: &f64, y: &f64| (x - y).abs(), 10, ALPHA, 0),
            Err(Error::Underpowered { n: 5, .. })
        ));
    }

    #[test]
    fn ks_hand_computations() {
        let r = ks_test("one", &[0.5], |x| x.clamp(0.0, 1.0), ALPHA, None).unwrap();
        assert_eq!(r.statistic, 0.5);
        let n = 40;
        let q: Vec<f64> = (1..=n).map(|k| (k as f64 - 0.5) / n as f64).collect();
        let r = ks_test("quantiles", &q, |x| x.clamp(0.0, 1.0), ALPHA, None).unwrap();
        assert!((r.statistic - 0.5 / n as f64).abs() < 1e-15);
    }

    #[test]
    fn ks_null_case() {
        let mut rng = path_stream(99, 0);
        let s: Vec<f64> = (0..10_000).map(|_| uniform(&mut rng)).collect();
        let r = ks_test("null", &s, |x| x.clamp(0.0, 1.0), ALPHA, Some(99)).unwrap();
        assert!(r.pass, "{}", r.summary());
    }

    #[test]
    fn kolmogorov_reference_points() {
        // lambda = 1.36 is the classical 5% point, 1.63 the 1% point
        let n = 1_000_000;
        let sn = (n as f64).sqrt();
        let p = kolmogorov_p_value(1.3581 / (sn + 0.12 + 0.11 / sn), n);
        assert!((p - 0.05).abs() < 1e-3, "{p}");
        let p = kolmogorov_p_value(1.6276 / (sn + 0.12 + 0.11 / sn), n);
        assert!((p - 0.01).abs() < 2e-4, "{p}");
    }

    #[test]
    fn chisq_examples() {
        let r = chisq_atoms("prop", &[30, 70], &[0.3, 0.7], ALPHA, None).unwrap();
        assert_eq!(r.statistic, 0.0);
        let r = chisq_atoms("hand", &[60, 40], &[0.5, 0.5], ALPHA, None).unwrap();
        assert!((r.statistic - 4.0).abs() < 1e-12);
        assert!(matches!(
            chisq_atoms("sparse", &[1, 99], &[0.01, 0.99], ALPHA, None),
            Err(Error::Binning { cell: 0, .. })
        ));
        let mut rng = path_stream(17, 0);
        let mut counts = [0u64; 2];
        for _ in 0..10_000 {
            counts[usize::from(uniform(&mut rng) >= 0.3)] += 1;
        }
        let r = chisq_atoms("null", &counts, &[0.3, 0.7], ALPHA, Some(17)).unwrap();
        assert!(r.pass, "{}", r.summary());
    }

    #[test]
    fn report_pass_rule() {
        assert!(TestReport::from_z_score("z", 0.0, -2.9, Z_BAND, 1, None).pass);
        assert!(!TestReport::from_z_score("z", 0.0, 3.1, Z_BAND, 1, None).pass);
        assert!(TestReport::from_p_value("p", 0.0, 0.01, ALPHA, 1, None).pass);
        assert!(!TestReport::from_p_value("p", 0.0, 0.0099, ALPHA, 1, None).pass);
    }

    #[test]
    fn json_line_shape() {
        let r = TestReport::from_z_score("a \"q\"", 0.25, 1.0, 3.0, 10, Some(4));
        let line = r.to_json_line();
        assert!(line.starts_with("{\"name\":\"a \\\"q\\\"\""));
        assert!(line.contains("\"statistic\":2.5000000000000000e-1"));
        assert!(line.contains("\"p_value\":null"));
        assert!(!line.contains('\n'));
    }

    #[test]
    fn self_normalized_matches_plain_mean_for_unit_weights() {
        let v = [1.0, 2.0, 3.0, 4.0];
        let s = self_normalized(&v, &[1.0; 4]).unwrap();
        let m = MeanSe::from_values(v);
        assert!((s.mean - m.mean).abs() < 1e-15);
        assert!((s.std_error - m.std_error).abs() < 1e-15);
        assert!(matches!(self_normalized(&v, &[0.0; 4]), Err(Error::Degenerate(_))));
    }
}
