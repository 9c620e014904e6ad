//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Pass criterion numbers to run a subset:
//! `cargo test --test acceptance -- 2 5`.

use std::process::ExitCode;
use std::time::Instant;

use dpca::analysis::{fit_scaling_regression, model_quantities, theoretical_error_curve, ExperimentRecord, Regime};
use dpca::models::spiked_model;
use dpca_cli::config::{ExperimentConfig, Method, Preset};
use dpca_cli::experiment::{sweep, SweepOptions};
use dpca_cli::verify::{run_suite, Suite, Verdict, VerifyOptions};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn mean_rho<'a>(records: impl Iterator<Item = &'a ExperimentRecord>) -> f64 {
    let (sum, count) = records.fold((0.0, 0usize), |(s, c), r| (s + r.rho, c + 1));
    sum / count as f64
}

fn run_sweep(config: &ExperimentConfig) -> Vec<ExperimentRecord> {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut opts = SweepOptions::new(dir.path());
    opts.plots = false;
    sweep(config, &opts).expect("sweep runs").records
}

fn verdict_line(v: &Verdict) -> String {
    v.properties
        .iter()
        .map(|p| format!("{}:{}/{}", p.name, p.cases - p.failures, p.cases))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Desk-scale scaling sweep: all four log-log exponents near +-1/2 and a tight fit.
fn scaling_exponents() -> Outcome {
    let config = ExperimentConfig::preset(Preset::Scaling, false);
    assert_eq!(config.reps, 50);
    let records = run_sweep(&config);
    let fit = fit_scaling_regression(&records).expect("fit");
    let (bd, bm, bn, bdelta) = (
        fit.beta_d.unwrap_or(f64::NAN),
        fit.beta_m.unwrap_or(f64::NAN),
        fit.beta_n.unwrap_or(f64::NAN),
        fit.beta_delta.unwrap_or(f64::NAN),
    );
    let neg = |b: f64| (-0.58..=-0.42).contains(&b);
    let passed = (0.42..=0.58).contains(&bd) && neg(bm) && neg(bn) && neg(bdelta) && fit.r_squared >= 0.98;
    outcome(
        passed,
        format!(
            "beta_d={bd:.4} beta_m={bm:.4} beta_n={bn:.4} beta_delta={bdelta:.4} R2={:.5} over {} cells (need |beta|-0.5 within 0.08, R2 >= 0.98)",
            fit.r_squared, fit.cells
        ),
    )
}

/// DP, FP and DP5 on shared data at d=200, m=10, n=500, lambda=50, 100 replicates.
fn dp_fp_equivalence() -> Outcome {
    let config = ExperimentConfig::preset(Preset::Comparison, false);
    assert_eq!(config.reps, 100);
    let records = run_sweep(&config);
    let of = |m: Method| mean_rho(records.iter().filter(|r| r.method == m.to_string()));
    let (dp, fp, dp5) = (of(Method::DP), of(Method::Full), of(Method::Distributed { extra: 5 }));
    let (r1, r2) = ((dp - fp).abs() / fp, (dp5 - dp).abs() / dp);
    outcome(
        r1 <= 0.10 && r2 <= 0.10,
        format!("mean rho DP={dp:.5} FP={fp:.5} DP5={dp5:.5}; |DP-FP|/FP={r1:.4} |DP5-DP|/DP={r2:.4} (need <= 0.10)"),
    )
}

/// N = 3000 split over m in {1, 2, 5, 10, 25, 50}: no m worse than 1.25x the single machine.
fn splitting_flatness() -> Outcome {
    let config = ExperimentConfig::preset(Preset::Splitting, false);
    let records = run_sweep(&config);
    let ms = [1usize, 2, 5, 10, 25, 50];
    let means: Vec<f64> = ms.iter().map(|&m| mean_rho(records.iter().filter(|r| r.m == m))).collect();
    let base = means[0];
    let ratios: Vec<String> = ms.iter().zip(&means).map(|(m, v)| format!("m={m}:{:.3}", v / base)).collect();
    outcome(
        means.iter().all(|&v| v <= 1.25 * base),
        format!("rho(m)/rho(1) {} with rho(1)={base:.5} (need every ratio <= 1.25)", ratios.join(" ")),
    )
}

fn suite(s: Suite) -> Verdict {
    run_suite(s, &VerifyOptions::default()).expect("suite runs")
}

/// Undersampled local PCA under the adversarial mixture: the aggregate is orthogonal to the truth.
fn adversarial_failure() -> Outcome {
    let v = suite(Suite::Adversarial);
    let p = &v.properties[0];
    outcome(
        v.passed,
        format!(
            "|<v1_tilde, v1>| <= 1e-8 in {}/{} replicates (frequency {:.3}, need >= 0.95); max inner product {:.2e}",
            p.cases - p.failures,
            p.cases,
            p.detail["frequency"].as_f64().unwrap_or(f64::NAN),
            p.detail["max_inner_product"].as_f64().unwrap_or(f64::NAN)
        ),
    )
}

/// 1000+ random perturbation triples with zero bound violations, and quadratic decay of the residual.
fn perturbation_suite() -> Outcome {
    let v = suite(Suite::Dk);
    let triples = v.properties[0].cases;
    let q = v.property("quadratic_decay").expect("decay check");
    let violations: usize = v.properties.iter().filter(|p| p.name != "quadratic_decay").map(|p| p.failures).sum();
    outcome(
        v.passed && triples >= 1000 && q.cases >= 100,
        format!(
            "{triples} triples, {violations} violations; decay ratio in [3.5, 4.5] on {}/{} (mean {:.3})",
            q.cases - q.failures,
            q.cases,
            q.detail["mean_ratio"].as_f64().unwrap_or(f64::NAN)
        ),
    )
}

/// Monte Carlo mean of 2000 local projectors shares the population eigenvectors.
fn unbiasedness() -> Outcome {
    let v = suite(Suite::Unbiased);
    let d = &v.properties[0].detail;
    let f = |k: &str| d[k].as_f64().unwrap_or(f64::NAN);
    outcome(
        v.passed,
        format!(
            "offdiag max {:.4} (need <= {:.4}); bias {:.4} vs 3 SE {:.4}",
            f("offdiag_max"),
            f("offdiag_threshold"),
            f("bias"),
            3.0 * f("bias_se")
        ),
    )
}

/// Single machine equals pooled PCA, randomized optimality checks, transports and ledger.
fn oracle_properties() -> Outcome {
    let verdicts: Vec<Verdict> = [Suite::Oracle, Suite::Sdp, Suite::Center, Suite::Transport]
        .into_iter()
        .map(suite)
        .collect();
    let candidates_ok = verdicts
        .iter()
        .filter(|v| v.suite == "sdp" || v.suite == "center")
        .all(|v| v.properties.iter().all(|p| p.cases >= 200));
    outcome(
        verdicts.iter().all(|v| v.passed) && candidates_ok,
        verdicts.iter().map(verdict_line).collect::<Vec<_>>().join(" | "),
    )
}

/// Substituted at desk scale: reference curves use unit constants (shape only) and the
/// full-size grids sit behind --paper-scale. Checks that both substitutions are in place.
fn substitutions() -> Outcome {
    let model = spiked_model(200, 50.0).expect("model");
    let q = model_quantities(&model, 3).expect("quantities");
    let curve = theoretical_error_curve(&model, 3, 10, 500, &Regime::General).expect("curve");
    let unit_variance = q.condition_number * (3.0 * q.effective_rank / 5000.0).sqrt();
    let unit_bias = q.condition_number.powi(2) * 3f64.sqrt() * q.effective_rank / 500.0;
    let constants_ok = (curve.variance - unit_variance).abs() < 1e-12 && (curve.bias - unit_bias).abs() < 1e-12;

    let full = ExperimentConfig::preset(Preset::Scaling, true);
    let cells = full.cells().expect("cells");
    let max_d = cells.iter().map(|c| c.d).max().unwrap_or(0);
    let max_n = cells.iter().map(|c| c.n).max().unwrap_or(0);
    let split = ExperimentConfig::preset(Preset::Splitting, true).cells().expect("cells");
    let max_m = split.iter().map(|c| c.m).max().unwrap_or(0);
    let grids_ok = max_d == 1600 && max_n >= 2000 && max_m == 300 && full.reps == 100;
    outcome(
        constants_ok && grids_ok,
        format!(
            "substituted: unit-constant bounds (variance {:.4}, bias {:.4}); quantile-based tail summaries; \
             --paper-scale grids d<={max_d} n<={max_n} m<={max_m} with {} reps, not run here",
            curve.variance, curve.bias, full.reps
        ),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 8] = [
    (1, "scaling exponents", scaling_exponents),
    (2, "DP vs FP equivalence", dp_fp_equivalence),
    (3, "splitting flatness", splitting_flatness),
    (4, "adversarial failure", adversarial_failure),
    (5, "perturbation bounds", perturbation_suite),
    (6, "unbiasedness", unbiasedness),
    (7, "oracle and property suite", oracle_properties),
    (8, "desk-scale substitutions", substitutions),
];

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!(
            "{verdict} criterion {id} ({name}): {} [{:.1}s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
