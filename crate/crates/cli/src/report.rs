//! Per-cell summaries, scaling-law fits and log-log plots.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dpca::analysis::{fit_scaling_regression, theoretical_error_curve, ExperimentRecord, RegressionFit, Regime};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Cell, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::experiment::population_model;

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub delta: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub method: String,
    pub reps: usize,
    pub mean_rho: f64,
    pub sd_rho: f64,
    /// Empirical 0.9-quantile of rho, a finite-sample stand-in for a tail norm.
    pub q90_rho: f64,
    pub mean_ms: f64,
    pub comm_floats: u64,
    /// Reference bound with unit constants, symmetric-innovation regime (no bias term).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound_symmetric: Option<f64>,
    /// Reference bound with unit constants including the bias term.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound_general: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<RegressionFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cells: Vec<CellSummary>,
    pub fits: Vec<FitOutcome>,
    pub plots: Vec<String>,
}

impl Summary {
    pub fn fit(&self, method: &str) -> Option<&RegressionFit> {
        self.fits.iter().find(|f| f.method == method).and_then(|f| f.fit.as_ref())
    }

    pub fn cell(&self, method: &str, pred: impl Fn(&CellSummary) -> bool) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.method == method && pred(c))
    }
}

type CellKey = (usize, usize, usize, u64, String);

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Groups records by `(d, m, n, delta, method)` in first-appearance order.
pub fn summarize(records: &[ExperimentRecord], config: Option<&ExperimentConfig>) -> CliResult<Vec<CellSummary>> {
    let mut order: Vec<CellKey> = Vec::new();
    let mut groups: BTreeMap<CellKey, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.d, r.m, r.n, r.delta.to_bits(), r.method.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let lambdas: BTreeMap<(usize, usize, usize, u64), f64> = match config {
        Some(c) => c
            .cells()?
            .into_iter()
            .map(|cell| ((cell.d, cell.m, cell.n, c.delta(&cell).to_bits()), cell.lambda))
            .collect(),
        None => BTreeMap::new(),
    };
    let mut out = Vec::with_capacity(order.len());
    for key in order {
        let rows = &groups[&key];
        let count = rows.len() as f64;
        let mut rhos: Vec<f64> = rows.iter().map(|r| r.rho).collect();
        let mean = rhos.iter().sum::<f64>() / count;
        let sd = if rows.len() > 1 {
            (rhos.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1.0)).sqrt()
        } else {
            0.0
        };
        rhos.sort_by(f64::total_cmp);
        let first = rows[0];
        let (mut bound_symmetric, mut bound_general) = (None, None);
        if let (Some(cfg), Some(&lambda)) = (config, lambdas.get(&(key.0, key.1, key.2, key.3))) {
            let cell = Cell {
                d: first.d,
                m: first.m,
                n: first.n,
                lambda,
            };
            let model = population_model(cfg, &cell)?;
            bound_symmetric = Some(theoretical_error_curve(&model, cfg.k, cell.m, cell.n, &Regime::Symmetric)?.total);
            bound_general = Some(theoretical_error_curve(&model, cfg.k, cell.m, cell.n, &Regime::General)?.total);
        }
        out.push(CellSummary {
            d: first.d,
            m: first.m,
            n: first.n,
            delta: first.delta,
            k: first.k,
            method: first.method.clone(),
            reps: rows.len(),
            mean_rho: mean,
            sd_rho: sd,
            q90_rho: quantile(&rhos, 0.9),
            mean_ms: rows.iter().map(|r| r.ms).sum::<f64>() / count,
            comm_floats: first.comm_floats,
            bound_symmetric,
            bound_general,
        });
    }
    Ok(out)
}

fn varying(records: &[&ExperimentRecord]) -> usize {
    let distinct = |f: &dyn Fn(&ExperimentRecord) -> u64| {
        let mut v: Vec<u64> = records.iter().map(|r| f(r)).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    [
        distinct(&|r| r.d as u64),
        distinct(&|r| r.m as u64),
        distinct(&|r| r.n as u64),
        distinct(&|r| r.delta.to_bits()),
    ]
    .iter()
    .filter(|&&c| c >= 2)
    .count()
}

/// One fit per method, when at least two covariates vary across its records.
pub fn fit_by_method(records: &[ExperimentRecord]) -> Vec<FitOutcome> {
    let mut methods: Vec<&str> = Vec::new();
    for r in records {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|method| {
            let rows: Vec<&ExperimentRecord> = records.iter().filter(|r| r.method == method).collect();
            if varying(&rows) < 2 {
                return FitOutcome {
                    method: method.into(),
                    fit: None,
                    note: Some("fewer than two covariates vary; no regression".into()),
                };
            }
            let owned: Vec<ExperimentRecord> = rows.into_iter().cloned().collect();
            match fit_scaling_regression(&owned) {
                Ok(fit) => FitOutcome {
                    method: method.into(),
                    fit: Some(fit),
                    note: None,
                },
                Err(e) => FitOutcome {
                    method: method.into(),
                    fit: None,
                    note: Some(e.to_string()),
                },
            }
        })
        .collect()
}

const COVARIATES: [&str; 4] = ["d", "m", "n", "delta"];

fn covariate(c: &CellSummary, i: usize) -> f64 {
    match i {
        0 => c.d as f64,
        1 => c.m as f64,
        2 => c.n as f64,
        _ => c.delta,
    }
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

/// For covariate `i`: one series per method and combination of the other covariates.
fn series_for(cells: &[CellSummary], i: usize) -> Vec<Series> {
    let mut groups: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for c in cells {
        let others: Vec<String> = (0..4)
            .filter(|&j| j != i)
            .map(|j| format!("{}={}", COVARIATES[j], covariate(c, j)))
            .collect();
        let label = format!("{} {}", c.method, others.join(" "));
        let point = (covariate(c, i), c.mean_rho);
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, pts)) => pts.push(point),
            None => groups.push((label, vec![point])),
        }
    }
    groups
        .into_iter()
        .filter(|(_, pts)| pts.len() >= 2)
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label, points }
        })
        .collect()
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    (lo / 1.25, hi * 1.25)
}

fn plot_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::format(path, format!("plot: {e}"))
}

fn draw_plot(path: &Path, xlabel: &str, series: &[Series]) -> CliResult<()> {
    let root = SVGBackend::new(path, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_error(path, e))?;
    let (x0, x1) = padded_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = padded_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("rho error vs {xlabel} (log-log)"), ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(44)
        .y_label_area_size(64)
        .build_cartesian_2d((x0..x1).log_scale(), (y0..y1).log_scale())
        .map_err(|e| plot_error(path, e))?;
    chart
        .configure_mesh()
        .x_desc(xlabel)
        .y_desc("mean rho")
        .draw()
        .map_err(|e| plot_error(path, e))?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_error(path, e))?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| plot_error(path, e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_error(path, e))?;
    root.present().map_err(|e| plot_error(path, e))
}

/// Writes `rho_vs_<covariate>.svg` for every covariate that varies; returns file names.
pub fn write_plots(cells: &[CellSummary], dir: &Path) -> CliResult<Vec<String>> {
    let mut written = Vec::new();
    for (i, name) in COVARIATES.iter().enumerate() {
        let series = series_for(cells, i);
        if series.is_empty() {
            continue;
        }
        let file = format!("rho_vs_{name}.svg");
        draw_plot(&dir.join(&file), name, &series)?;
        written.push(file);
    }
    Ok(written)
}

/// Summaries, fits and (optionally) plots for `records`, written into `dir`.
pub fn write_report(records: &[ExperimentRecord], config: Option<&ExperimentConfig>, dir: &Path, plots: bool) -> CliResult<Summary> {
    let cells = summarize(records, config)?;
    let fits = fit_by_method(records);
    for f in &fits {
        if let Some(fit) = &f.fit {
            if !fit.dropped.is_empty() {
                log::warn!("{}: constant covariates dropped: {}", f.method, fit.dropped.join(", "));
            }
        }
    }
    let plots = if plots { write_plots(&cells, dir)? } else { Vec::new() };
    let summary = Summary { cells, fits, plots };
    let path = dir.join(SUMMARY_FILE);
    let json = serde_json::to_vec_pretty(&summary).expect("summary serializes");
    fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
    Ok(summary)
}
