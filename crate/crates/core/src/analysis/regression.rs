use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One Monte Carlo replicate of one experiment cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub delta: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub method: String,
    pub rep: usize,
    pub rho: f64,
    pub ms: f64,
    pub comm_floats: u64,
}

/// Least-squares fit of `log rho = b0 + b1 log d + b2 log m + b3 log n + b4 log delta`.
///
/// Coefficients of covariates that never vary are `None` and listed in `dropped`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub intercept: f64,
    pub beta_d: Option<f64>,
    pub beta_m: Option<f64>,
    pub beta_n: Option<f64>,
    pub beta_delta: Option<f64>,
    pub r_squared: f64,
    /// Number of cells (distinct `(d, m, n, delta)`) in the fit.
    pub cells: usize,
    pub dropped: Vec<String>,
}

const NAMES: [&str; 4] = ["d", "m", "n", "delta"];

/// Fits the scaling law to the per-cell mean error.
///
/// Records are grouped by `(d, m, n, delta)` and `rho` is averaged within
/// each cell before taking logs, so every cell counts once regardless of its
/// replicate count.
pub fn fit_scaling_regression(records: &[ExperimentRecord]) -> Result<RegressionFit> {
    let mut cells: BTreeMap<(usize, usize, usize, u64), (f64, usize)> = BTreeMap::new();
    for r in records {
        if !(r.rho > 0.0 && r.rho.is_finite()) {
            return Err(Error::invalid(format!("record rep {} has rho = {}; logs need rho > 0", r.rep, r.rho)));
        }
        if r.d == 0 || r.m == 0 || r.n == 0 || !(r.delta > 0.0) {
            return Err(Error::invalid("covariates must be positive"));
        }
        let e = cells.entry((r.d, r.m, r.n, r.delta.to_bits())).or_insert((0.0, 0));
        e.0 += r.rho;
        e.1 += 1;
    }
    let rows: Vec<([f64; 4], f64)> = cells
        .iter()
        .map(|(&(d, m, n, delta), &(sum, count))| {
            (
                [(d as f64).ln(), (m as f64).ln(), (n as f64).ln(), f64::from_bits(delta).ln()],
                (sum / count as f64).ln(),
            )
        })
        .collect();
    fit_log_linear(&rows)
}

/// OLS of `y` on an intercept plus the four log covariates in `rows`.
pub fn fit_log_linear(rows: &[([f64; 4], f64)]) -> Result<RegressionFit> {
    if rows.is_empty() {
        return Err(Error::invalid("no observations"));
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (j, name) in NAMES.iter().enumerate() {
        let first = rows[0].0[j];
        if rows.iter().all(|r| (r.0[j] - first).abs() <= 1e-12) {
            dropped.push(name.to_string());
        } else {
            kept.push(j);
        }
    }
    if !dropped.is_empty() {
        log::warn!("constant covariates dropped from the fit: {}", dropped.join(", "));
    }
    let p = kept.len() + 1;
    if rows.len() < p {
        return Err(Error::invalid(format!("{} observations cannot identify {p} coefficients", rows.len())));
    }
    let x = DMatrix::from_fn(rows.len(), p, |i, c| if c == 0 { 1.0 } else { rows[i].0[kept[c - 1]] });
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));

    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-10 * smax {
        return Err(Error::invalid(format!(
            "design is collinear among {:?}",
            kept.iter().map(|&j| NAMES[j]).collect::<Vec<_>>()
        )));
    }
    let beta = svd
        .solve(&y, 0.0)
        .map_err(|e| Error::invalid(format!("least squares failed: {e}")))?;

    let fitted = &x * &beta;
    let mean = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = (&y - &fitted).norm_squared();
    let r_squared = if ss_tot > 0.0 { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) } else { 1.0 };

    let mut coef = [None; 4];
    for (c, &j) in kept.iter().enumerate() {
        coef[j] = Some(beta[c + 1]);
    }
    Ok(RegressionFit {
        intercept: beta[0],
        beta_d: coef[0],
        beta_m: coef[1],
        beta_n: coef[2],
        beta_delta: coef[3],
        r_squared,
        cells: rows.len(),
        dropped,
    })
}
