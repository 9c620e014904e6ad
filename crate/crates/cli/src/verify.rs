//! Randomized verification suites with machine-readable verdicts.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use dpca::analysis::{check_center_property, check_dk_expansion, check_sdp_optimality, estimate_sigma_star, PropertyReport};
use dpca::estimator::{distributed_pca, full_sample_pca, local_pca, PcaOptions};
use dpca::linalg::{subspace_distance, sym_eig, window_gap, SymMatrix, Window};
use dpca::models::{derive_seed, haar_orthogonal, machine_rng, sample_partition, spiked_model, InnovationKind, Partition};
use dpca::runtime::{run_local, RunOptions, TransportKind};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Preset};
use crate::error::{CliError, CliResult};
use crate::experiment::{generate_partitions, population_model, replicate_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Dk,
    Sdp,
    Center,
    Unbiased,
    Adversarial,
    Transport,
    /// `m = 1` against the pooled estimator, and ledger arithmetic.
    Oracle,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Dk,
        Suite::Sdp,
        Suite::Center,
        Suite::Unbiased,
        Suite::Adversarial,
        Suite::Transport,
        Suite::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Dk => "dk",
            Suite::Sdp => "sdp",
            Suite::Center => "center",
            Suite::Unbiased => "unbiased",
            Suite::Adversarial => "adversarial",
            Suite::Transport => "transport",
            Suite::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let names: Vec<_> = Suite::ALL.iter().map(|s| s.name()).collect();
                CliError::Config(format!("unknown suite {s:?} (expected one of {})", names.join(", ")))
            })
    }
}

/// Result of one property inside a suite.
#[derive(Clone, Debug, Serialize)]
pub struct PropertyVerdict {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Smallest margin seen over all cases; negative means some case failed.
    pub worst_slack: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub detail: Value,
}

impl PropertyVerdict {
    fn strict(name: &str, cases: usize, failures: usize, worst_slack: f64, detail: Value) -> Self {
        PropertyVerdict {
            name: name.into(),
            cases,
            failures,
            worst_slack,
            passed: failures == 0,
            detail,
        }
    }

    fn from_report(r: &PropertyReport) -> Self {
        Self::strict(
            &r.name,
            r.candidates,
            r.violations,
            r.worst_slack + r.tolerance,
            json!({ "tolerance": r.tolerance }),
        )
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Verdict {
    pub suite: String,
    pub passed: bool,
    pub seconds: f64,
    pub properties: Vec<PropertyVerdict>,
    /// Failing cases with enough context to replay them.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub failing_cases: Vec<Value>,
}

impl Verdict {
    pub fn property(&self, name: &str) -> Option<&PropertyVerdict> {
        self.properties.iter().find(|p| p.name == name)
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Smaller case counts, for smoke tests. Verdicts are not comparable to full runs.
    pub quick: bool,
    pub timeout: Duration,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            quick: false,
            timeout: dpca::runtime::DEFAULT_TIMEOUT,
        }
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> CliResult<Verdict> {
    let start = Instant::now();
    let (properties, failing_cases) = match suite {
        Suite::Dk => dk_suite(opts)?,
        Suite::Sdp => sdp_suite(opts)?,
        Suite::Center => center_suite(opts)?,
        Suite::Unbiased => unbiased_suite(opts)?,
        Suite::Adversarial => adversarial_suite(opts)?,
        Suite::Transport => transport_suite(opts)?,
        Suite::Oracle => oracle_suite(opts)?,
    };
    Ok(Verdict {
        suite: suite.name().into(),
        passed: properties.iter().all(|p| p.passed),
        seconds: start.elapsed().as_secs_f64(),
        properties,
        failing_cases,
    })
}

/// Writes `<suite>.json` (and `<suite>_failures.json` when cases failed) into `dir`.
pub fn write_verdict(verdict: &Verdict, dir: &Path) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    if !verdict.failing_cases.is_empty() {
        let path = dir.join(format!("{}_failures.json", verdict.suite));
        let json = serde_json::to_vec_pretty(&verdict.failing_cases).expect("cases serialize");
        fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
    }
    let path = dir.join(format!("{}.json", verdict.suite));
    let json = serde_json::to_vec_pretty(verdict).expect("verdict serializes");
    fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

type SuiteOutput = (Vec<PropertyVerdict>, Vec<Value>);

fn case_rng(opts: &VerifyOptions, tag: u64, case: u64) -> rand_chacha::ChaCha8Rng {
    machine_rng(derive_seed(&[opts.seed, tag, case]), 0)
}

// ---- perturbation expansion ----

/// `A = Q diag(values) Q^T` whose window is separated from the rest of the
/// spectrum by at least `gap`, and a random symmetric `E` with `||E||_2 = eps * gap(A)`.
pub fn dk_triple(d: usize, window: Window, eps: f64, seed: u64) -> CliResult<(SymMatrix, SymMatrix)> {
    let mut rng = machine_rng(seed, 1);
    let q = haar_orthogonal(d, &mut rng)?.into_matrix();
    let mut values = Vec::with_capacity(d);
    let mut level = 0.0;
    for i in (0..d).rev() {
        let step = if i + 1 == window.start || i + 1 == window.end() { 1.0 } else { 0.0 };
        level += step + rng.random::<f64>();
        values.push(level);
    }
    values.reverse();
    let mut scaled = q.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= values[j];
    }
    let a = SymMatrix::new(scaled * q.transpose())?;
    let gap = window_gap(&sym_eig(&a)?.0, window)?.min(1e6);
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let e = SymMatrix::new(g)?;
    let norm = e.spectral_norm()?;
    Ok((a, e.scaled(eps * gap / norm)))
}

const DK_CHECKS: [&str; 9] = [
    "projector_quadratic",
    "frame_residual",
    "frame_lower",
    "frame_upper",
    "projector_lower",
    "projector_upper",
    "linear_isometry",
    "projector_relative",
    "projector_spectral",
];

fn dk_suite(opts: &VerifyOptions) -> CliResult<SuiteOutput> {
    let per = if opts.quick { 12 } else { 112 };
    let mut worst = [f64::INFINITY; DK_CHECKS.len()];
    let mut fails = [0usize; DK_CHECKS.len()];
    let mut failing = Vec::new();
    let (mut triples, mut out_of_regime) = (0usize, 0usize);
    for d in [5usize, 20, 50] {
        for k in [1usize, 3, 5] {
            for i in 0..per {
                let seed = derive_seed(&[opts.seed, 0xd1, triples as u64]);
                triples += 1;
                let window = Window {
                    start: (i * 7) % (d - k + 1),
                    len: k,
                };
                let eps = 0.1 * (0.05 + 0.95 * (i as f64 + 0.5) / per as f64);
                let (a, e) = dk_triple(d, window, eps, seed)?;
                let report = check_dk_expansion(&a, &e, window)?;
                if !report.in_regime {
                    out_of_regime += 1;
                }
                for c in &report.checks {
                    let j = DK_CHECKS.iter().position(|n| *n == c.name).expect("known check");
                    worst[j] = worst[j].min(c.slack);
                    if !c.holds {
                        fails[j] += 1;
                        failing.push(json!({
                            "check": c.name, "d": d, "k": k, "window_start": window.start,
                            "eps_target": eps, "seed": seed, "value": c.value, "bound": c.bound,
                        }));
                    }
                }
            }
        }
    }
    let mut props: Vec<PropertyVerdict> = DK_CHECKS
        .iter()
        .enumerate()
        .map(|(j, name)| PropertyVerdict::strict(name, triples, fails[j], worst[j], Value::Null))
        .collect();
    props.push(PropertyVerdict::strict(
        "in_regime",
        triples,
        out_of_regime,
        if out_of_regime == 0 { 0.0 } else { -1.0 },
        Value::Null,
    ));

    // Halving E should divide the second-order residual by about four.
    let cases = if opts.quick { 20 } else { 100 };
    let mut ratios = Vec::with_capacity(cases);
    let mut bad = 0;
    let mut worst_ratio_slack = f64::INFINITY;
    for t in 0..cases {
        let d = [5usize, 20, 50][t % 3];
        // A window spanning all of R^d never moves; its residual is roundoff.
        let k = [1usize, 3, 5][(t / 3) % 3].min(d - 1);
        let window = Window {
            start: t % (d - k + 1),
            len: k,
        };
        let seed = derive_seed(&[opts.seed, 0xd2, t as u64]);
        let (a, e) = dk_triple(d, window, 0.01, seed)?;
        let r1 = check_dk_expansion(&a, &e, window)?.projector_residual;
        let r2 = check_dk_expansion(&a, &e.scaled(0.5), window)?.projector_residual;
        let ratio = r1 / r2;
        let slack = (ratio - 3.5).min(4.5 - ratio);
        worst_ratio_slack = worst_ratio_slack.min(if slack.is_nan() { -1.0 } else { slack });
        if !(3.5..=4.5).contains(&ratio) {
            bad += 1;
            failing.push(json!({ "check": "quadratic_decay", "d": d, "k": k, "seed": seed, "ratio": ratio }));
        }
        ratios.push(ratio);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    props.push(PropertyVerdict::strict(
        "quadratic_decay",
        cases,
        bad,
        worst_ratio_slack,
        json!({ "mean_ratio": mean, "interval": [3.5, 4.5] }),
    ));
    Ok((props, failing))
}

// ---- optimality properties ----

fn spiked_parts(d: usize, m: usize, n: usize, lambda: f64, seed: u64) -> CliResult<Vec<Partition>> {
    let model = spiked_model(d, lambda)?;
    (0..m)
        .map(|l| sample_partition(&model, &InnovationKind::Gaussian, n, l, seed).map_err(CliError::from))
        .collect()
}

fn sdp_suite(opts: &VerifyOptions) -> CliResult<SuiteOutput> {
    let candidates = if opts.quick { 40 } else { 200 };
    let mut props = Vec::new();
    let mut failing = Vec::new();

    // The aggregated projector average, the matrix the coordinator actually diagonalizes.
    let parts = spiked_parts(20, 10, 100, 50.0, derive_seed(&[opts.seed, 0x5d]))?;
    let result = distributed_pca(&parts, 3, PcaOptions::default())?;
    let r = check_sdp_optimality(&result.sigma_tilde, 3, candidates, &mut case_rng(opts, 0x5d, 1))?;
    let mut v = PropertyVerdict::from_report(&r);
    v.name = "sdp_optimality_aggregate".into();
    props.push(v);

    // A generic positive semidefinite matrix.
    let mut rng = case_rng(opts, 0x5d, 2);
    let g = DMatrix::from_fn(15, 15, |_, _| rng.sample::<f64, _>(StandardNormal));
    let s = SymMatrix::new(&g * g.transpose())?;
    let r = check_sdp_optimality(&s, 4, candidates, &mut rng)?;
    let mut v = PropertyVerdict::from_report(&r);
    v.name = "sdp_optimality_gram".into();
    props.push(v);

    for p in &props {
        if !p.passed {
            failing.push(json!({ "property": p.name, "seed": opts.seed, "worst_slack": p.worst_slack }));
        }
    }
    Ok((props, failing))
}

fn center_suite(opts: &VerifyOptions) -> CliResult<SuiteOutput> {
    let candidates = if opts.quick { 40 } else { 200 };
    let parts = spiked_parts(20, 10, 100, 20.0, derive_seed(&[opts.seed, 0xce]))?;
    let estimates = parts.iter().map(|p| local_pca(p, 3)).collect::<Result<Vec<_>, _>>()?;
    let result = distributed_pca(&parts, 3, PcaOptions::default())?;
    let r = check_center_property(&estimates, &result, candidates, &mut case_rng(opts, 0xce, 1))?;
    let v = PropertyVerdict::from_report(&r);
    let failing = if v.passed {
        Vec::new()
    } else {
        vec![json!({ "property": v.name, "seed": opts.seed, "worst_slack": v.worst_slack })]
    };
    Ok((vec![v], failing))
}

// ---- Monte Carlo suites ----

/// Replicates of the local projector average on the Gaussian spiked model
/// (d = 20, n = 200, K = 3, lambda = 50).
fn unbiased_suite(opts: &VerifyOptions) -> CliResult<SuiteOutput> {
    let replicates = if opts.quick { 200 } else { 2000 };
    let model = spiked_model(20, 50.0)?;
    let r = estimate_sigma_star(
        &model,
        &InnovationKind::Gaussian,
        200,
        3,
        replicates,
        derive_seed(&[opts.seed, 0x0b]),
    )?;
    let threshold = 5.0 / (replicates as f64).sqrt();
    let detail = json!({
        "replicates": r.replicates,
        "offdiag_max": r.offdiag_max,
        "offdiag_threshold": threshold,
        "bias": r.bias,
        "bias_se": r.bias_se,
        "star_gap": r.star_gap,
    });
    let offdiag = PropertyVerdict::strict(
        "offdiag_block",
        1,
        usize::from(r.offdiag_max > threshold),
        threshold - r.offdiag_max,
        detail.clone(),
    );
    let bias = PropertyVerdict::strict(
        "bias_within_3se",
        1,
        usize::from(r.bias > 3.0 * r.bias_se),
        3.0 * r.bias_se - r.bias,
        Value::Null,
    );
    let failing = if offdiag.passed && bias.passed { Vec::new() } else { vec![detail] };
    Ok((vec![offdiag, bias], failing))
}

/// Share of replicates whose aggregate is orthogonal to the truth.
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-8;
pub const ORTHOGONALITY_FREQUENCY: f64 = 0.95;

/// The adversarial mixture in the regime where every local top eigenvector
/// lands in the bulk: lambda = 2, d = 1600, n = 256, m = 20.
fn adversarial_suite(opts: &VerifyOptions) -> CliResult<SuiteOutput> {
    let mut config = ExperimentConfig::preset(Preset::Adversarial, false);
    config.seed = opts.seed;
    if opts.quick {
        config.reps = 4;
    }
    let cell = config.cells()?[0];
    let truth = population_model(&config, &cell)?.top_frame();
    let v1 = truth.column(0);
    let inner: Vec<f64> = (0..config.reps)
        .into_par_iter()
        .map(|rep| -> CliResult<f64> {
            let parts = generate_partitions(&config, &cell, replicate_seed(config.seed, &cell, rep))?;
            let result = distributed_pca(&parts, 1, PcaOptions::default())?;
            let u = result.frame.column(0);
            Ok(u.iter().zip(&v1).map(|(a, b)| a * b).sum::<f64>().abs())
        })
        .collect::<CliResult<_>>()?;
    let orthogonal = inner.iter().filter(|&&x| x <= ORTHOGONALITY_TOLERANCE).count();
    let frequency = orthogonal as f64 / inner.len() as f64;
    let failing: Vec<Value> = inner
        .iter()
        .enumerate()
        .filter(|(_, &x)| x > ORTHOGONALITY_TOLERANCE)
        .map(|(rep, &x)| json!({ "rep": rep, "seed": replicate_seed(config.seed, &cell, rep), "inner_product": x }))
        .collect();
    let max_inner = inner.iter().cloned().fold(0.0, f64::max);
    let passed = frequency >= ORTHOGONALITY_FREQUENCY;
    let prop = PropertyVerdict {
        name: "orthogonal_aggregate".into(),
        cases: inner.len(),
        failures: inner.len() - orthogonal,
        worst_slack: frequency - ORTHOGONALITY_FREQUENCY,
        passed,
        detail: json!({
            "d": cell.d, "m": cell.m, "n": cell.n, "lambda": cell.lambda,
            "frequency": frequency,
            "required": ORTHOGONALITY_FREQUENCY,
            "tolerance": ORTHOGONALITY_TOLERANCE,
            "max_inner_product": max_inner,
        }),
    };
    Ok((vec![prop], if passed { Vec::new() } else { failing }))
}

// ---- protocol ----

const EXACT: f64 = 1e-10;

fn transport_suite(opts: &VerifyOptions) -> CliResult<SuiteOutput> {
    let (d, m, n, k, extra) = (30, 4, 60, 3, 2);
    let parts = spiked_parts(d, m, n, 30.0, derive_seed(&[opts.seed, 0x7a]))?;
    let reference = distributed_pca(
        &parts,
        k,
        PcaOptions {
            extra,
            eigenvalue_round: true,
            ..PcaOptions::default()
        },
    )?;
    let ref_values = reference.refined.clone().expect("eigenvalue round ran");
    let expected_frames = (m * (k + extra) * d) as u64;
    let mut props = Vec::new();
    let mut failing = Vec::new();
    for kind in [TransportKind::InMemory, TransportKind::Files, TransportKind::Tcp] {
        let run = run_local(
            parts.clone(),
            kind,
            k,
            RunOptions {
                extra,
                eigenvalue_round: true,
                ..RunOptions::default()
            },
            Default::default(),
            opts.timeout,
            None,
        )?;
        let rho = subspace_distance(&run.frame, &reference.frame)?;
        let values = run.refined.clone().unwrap_or_default();
        let value_gap = values
            .iter()
            .zip(&ref_values)
            .map(|(a, b)| (a - b).abs())
            .fold(if values.len() == k { 0.0 } else { f64::INFINITY }, f64::max);
        let ledger = &run.ledger;
        let ledger_ok = ledger.frame_floats() == expected_frames
            && ledger.broadcast_floats() == (m * k * d) as u64
            && ledger.rayleigh_floats() == (m * k) as u64
            && ledger.frame_floats() == reference.ledger.frame_floats();
        let ok = rho <= EXACT && value_gap <= EXACT && ledger_ok;
        let detail = json!({
            "rho_vs_in_process": rho,
            "eigenvalue_gap": value_gap,
            "frame_floats": ledger.frame_floats(),
            "expected_frame_floats": expected_frames,
            "broadcast_floats": ledger.broadcast_floats(),
            "rayleigh_floats": ledger.rayleigh_floats(),
        });
        if !ok {
            failing.push(json!({ "transport": kind.name(), "seed": opts.seed, "detail": detail.clone() }));
        }
        props.push(PropertyVerdict::strict(
            &format!("transport_{}", kind.name()),
            1,
            usize::from(!ok),
            EXACT - rho.max(value_gap),
            detail,
        ));
    }
    Ok((props, failing))
}

fn oracle_suite(opts: &VerifyOptions) -> CliResult<SuiteOutput> {
    let mut props = Vec::new();
    let mut failing = Vec::new();

    let mut worst = 0.0f64;
    let settings = [(20usize, 100usize, 3usize), (60, 30, 3), (100, 500, 5)];
    for (i, &(d, n, k)) in settings.iter().enumerate() {
        let parts = spiked_parts(d, 1, n, 50.0, derive_seed(&[opts.seed, 0x0c, i as u64]))?;
        let dp = distributed_pca(&parts, k, PcaOptions::default())?;
        let fp = full_sample_pca(&parts, k)?;
        let rho = subspace_distance(&dp.frame, &fp.frame)?;
        worst = worst.max(rho);
        if rho > EXACT {
            failing.push(json!({ "property": "single_machine_is_pooled", "d": d, "n": n, "k": k, "rho": rho }));
        }
    }
    props.push(PropertyVerdict::strict(
        "single_machine_is_pooled",
        settings.len(),
        failing.len(),
        EXACT - worst,
        json!({ "max_rho": worst }),
    ));

    let (d, m, n, k) = (25, 6, 40, 3);
    let parts = spiked_parts(d, m, n, 50.0, derive_seed(&[opts.seed, 0x1e]))?;
    let mut bad = 0;
    for extra in [0usize, 1, 5] {
        let r = distributed_pca(
            &parts,
            k,
            PcaOptions {
                extra,
                ..PcaOptions::default()
            },
        )?;
        let expected = (m * (k + extra) * d) as u64;
        if r.ledger.frame_floats() != expected {
            bad += 1;
            failing.push(json!({ "property": "ledger", "extra": extra, "got": r.ledger.frame_floats(), "expected": expected }));
        }
    }
    props.push(PropertyVerdict::strict("ledger_frames", 3, bad, 0.0, Value::Null));
    Ok((props, failing))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!(matches!("nope".parse::<Suite>(), Err(CliError::Config(_))));
    }

    #[test]
    fn triples_hit_the_requested_epsilon() {
        let window = Window { start: 2, len: 3 };
        let (a, e) = dk_triple(10, window, 0.05, 9).unwrap();
        let gap = window_gap(&sym_eig(&a).unwrap().0, window).unwrap();
        assert!(gap >= 1.0);
        assert!((e.spectral_norm().unwrap() / gap - 0.05).abs() < 1e-12);
    }

    #[test]
    fn quick_suites_pass_and_serialize() {
        let opts = VerifyOptions {
            quick: true,
            ..VerifyOptions::default()
        };
        let dir = tempfile::tempdir().unwrap();
        for suite in [Suite::Dk, Suite::Sdp, Suite::Center, Suite::Oracle] {
            let v = run_suite(suite, &opts).unwrap();
            assert!(v.passed, "{v:?}");
            let path = write_verdict(&v, dir.path()).unwrap();
            let back: Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
            assert_eq!(back["suite"], suite.name());
            assert_eq!(back["passed"], true);
        }
    }

    #[test]
    fn failing_cases_are_dumped() {
        let v = Verdict {
            suite: "x".into(),
            passed: false,
            seconds: 0.0,
            properties: vec![],
            failing_cases: vec![json!({ "seed": 3 })],
        };
        let dir = tempfile::tempdir().unwrap();
        write_verdict(&v, dir.path()).unwrap();
        let dumped: Value = serde_json::from_slice(&fs::read(dir.path().join("x_failures.json")).unwrap()).unwrap();
        assert_eq!(dumped[0]["seed"], 3);
    }
}
