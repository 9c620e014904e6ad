//! A single estimator run on one cell: in-process, through spawned local
//! workers, or against workers already listening elsewhere.

use std::collections::BTreeMap;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dpca::analysis::ExperimentRecord;
use dpca::estimator::{distributed_pca, full_sample_pca, PcaOptions};
use dpca::linalg::{subspace_distance, Frame};
use dpca::models::Partition;
use dpca::runtime::{run_distributed, ClusterConfig, CommLedger, FilesTransport, RunOptions, TcpTransport, TransportKind};
use serde::Serialize;

use crate::config::{Cell, ExperimentConfig, Method};
use crate::error::{CliError, CliResult};
use crate::experiment::{generate_partitions, population_model, replicate_seed};
use crate::gen::{load_partitions, single_cell};

/// Where the machines' data live.
#[derive(Clone, Debug)]
pub enum DataSource {
    /// Drawn on the fly from the config (replicate 0 of its single cell).
    Generated,
    /// A directory written by `gen`.
    Directory(PathBuf),
    /// Workers already serving their partitions: `host:port` per machine for
    /// tcp, or one shared directory for files.
    Remote { transport: TransportKind, endpoints: Vec<String> },
}

#[derive(Clone, Debug, Serialize)]
pub struct RunOutput {
    pub method: String,
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub lambda: f64,
    #[serde(rename = "K")]
    pub k: usize,
    /// `d x K` top eigenvectors, one row per coordinate.
    pub frame: Vec<Vec<f64>>,
    /// Averaged Rayleigh quotients for DP, pooled eigenvalues for FP.
    pub eigenvalues: Vec<f64>,
    /// Distance to the population eigenspace.
    pub rho: f64,
    pub machines: Vec<usize>,
    pub partial: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ledger: Option<LedgerSummary>,
    pub record: ExperimentRecord,
}

#[derive(Clone, Debug, Serialize)]
pub struct LedgerSummary {
    pub frame_floats: u64,
    pub local_eigenvalue_floats: u64,
    pub broadcast_floats: u64,
    pub rayleigh_floats: u64,
    pub total_floats: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub per_machine: CommLedger,
}

impl LedgerSummary {
    fn new(l: &CommLedger) -> Self {
        LedgerSummary {
            frame_floats: l.frame_floats(),
            local_eigenvalue_floats: l.local_eigenvalue_floats(),
            broadcast_floats: l.broadcast_floats(),
            rayleigh_floats: l.rayleigh_floats(),
            total_floats: l.total_floats(),
            bytes_up: l.bytes_up(),
            bytes_down: l.bytes_down(),
            per_machine: l.clone(),
        }
    }
}

fn frame_rows(frame: &Frame) -> Vec<Vec<f64>> {
    frame.as_matrix().row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn resolve(endpoint: &str, machine: usize) -> CliResult<SocketAddr> {
    endpoint
        .to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .ok_or_else(|| CliError::Config(format!("machine {machine}: cannot resolve endpoint {endpoint:?}")))
}

fn single_method(config: &ExperimentConfig) -> CliResult<Method> {
    match config.methods.as_slice() {
        [m] => Ok(*m),
        many => Err(CliError::Config(format!(
            "run takes one method, the config lists {}; pick one with --method",
            many.len()
        ))),
    }
}

/// Runs the config's single method on its single cell. DP runs always include
/// the eigenvalue round so that `eigenvalues` is populated.
pub fn run_once(config: &ExperimentConfig, source: &DataSource, timeout: Duration) -> CliResult<RunOutput> {
    let method = single_method(config)?;
    let (config, cell, parts): (ExperimentConfig, Cell, Option<Vec<Partition>>) = match source {
        DataSource::Generated => {
            config.validate()?;
            let cell = single_cell(config)?;
            let parts = generate_partitions(config, &cell, replicate_seed(config.seed, &cell, 0))?;
            (config.clone(), cell, Some(parts))
        }
        DataSource::Directory(dir) => {
            let (manifest, parts) = load_partitions(dir)?;
            let mut c = config.clone();
            c.model = manifest.model;
            c.innovation = manifest.innovation;
            c.k = manifest.k;
            c.seed = manifest.master_seed;
            let cell = manifest.cell();
            c.panels = vec![crate::config::Panel {
                d: vec![cell.d],
                m: vec![cell.m],
                n: vec![cell.n],
                lambda: vec![cell.lambda],
                total: None,
            }];
            c.validate()?;
            (c, cell, Some(parts))
        }
        DataSource::Remote { .. } => {
            config.validate()?;
            (config.clone(), single_cell(config)?, None)
        }
    };
    let truth = population_model(&config, &cell)?.top_frame();
    let start = Instant::now();

    let (frame, eigenvalues, machines, partial, ledger) = match (method, &parts) {
        (Method::Full, Some(parts)) => {
            let est = full_sample_pca(parts, config.k)?;
            let values = est.eigenvalues.values().to_vec();
            (est.frame, values, (0..parts.len()).collect(), false, None)
        }
        (Method::Full, None) => {
            return Err(CliError::Config("FP needs the raw data; it cannot run against remote workers".into()));
        }
        (Method::Distributed { extra }, _) => {
            let opts = RunOptions {
                extra,
                eigenvalue_round: true,
                allow_partial: config.allow_partial,
                ..RunOptions::default()
            };
            let result = match (source, parts) {
                (DataSource::Remote { transport, endpoints }, _) => {
                    let mut cluster = ClusterConfig::new(cell.m, *transport);
                    cluster.endpoints = endpoints.clone();
                    cluster.timeout = timeout;
                    cluster.validate()?;
                    match transport {
                        TransportKind::Tcp => {
                            let map = endpoints
                                .iter()
                                .enumerate()
                                .map(|(l, e)| Ok((l, resolve(e, l)?)))
                                .collect::<CliResult<BTreeMap<_, _>>>()?;
                            let mut t = TcpTransport::new(map, timeout);
                            run_distributed(&cluster, &mut t, config.k, opts)?
                        }
                        TransportKind::Files => {
                            let dir = endpoints
                                .first()
                                .ok_or_else(|| CliError::Config("files transport needs the shared directory".into()))?;
                            let mut t = FilesTransport::new(dir)?;
                            run_distributed(&cluster, &mut t, config.k, opts)?
                        }
                        TransportKind::InMemory => {
                            return Err(CliError::Config("remote workers need the tcp or files transport".into()));
                        }
                    }
                }
                (_, Some(parts)) => match config.transport {
                    None => distributed_pca(
                        &parts,
                        config.k,
                        PcaOptions {
                            extra,
                            eigenvalue_round: true,
                            ..PcaOptions::default()
                        },
                    )?,
                    Some(kind) => {
                        dpca::runtime::run_local(parts, kind, config.k, opts, Default::default(), timeout, None)?
                    }
                },
                (_, None) => unreachable!("only remote sources come without partitions"),
            };
            let values = result.refined.clone().unwrap_or_default();
            (result.frame, values, result.machines, result.partial, Some(result.ledger))
        }
    };
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let rho = subspace_distance(&frame, &truth)?;
    let comm_floats = match &ledger {
        Some(l) => l.frame_floats() + l.broadcast_floats() + l.rayleigh_floats(),
        None => (cell.m * cell.n * cell.d) as u64,
    };
    Ok(RunOutput {
        method: method.to_string(),
        d: cell.d,
        m: cell.m,
        n: cell.n,
        lambda: cell.lambda,
        k: config.k,
        frame: frame_rows(&frame),
        eigenvalues,
        rho,
        machines,
        partial,
        ledger: ledger.as_ref().map(LedgerSummary::new),
        record: ExperimentRecord {
            d: cell.d,
            m: cell.m,
            n: cell.n,
            delta: config.delta(&cell),
            k: config.k,
            method: method.to_string(),
            rep: 0,
            rho,
            ms,
            comm_floats,
        },
    })
}

/// Writes `run.json` and a one-row `records.csv` into `dir`.
pub fn write_run(output: &RunOutput, dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join("run.json");
    let json = serde_json::to_vec_pretty(output).expect("run output serializes");
    std::fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
    crate::experiment::write_records(&dir.join(crate::experiment::RECORDS_FILE), std::slice::from_ref(&output.record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Panel, Preset};
    use dpca::runtime::DEFAULT_TIMEOUT;

    fn cell_config(method: Method) -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(Preset::Comparison, false);
        c.panels = vec![Panel {
            d: vec![30],
            m: vec![1],
            n: vec![200],
            lambda: vec![50.0],
            total: None,
        }];
        c.methods = vec![method];
        c
    }

    #[test]
    fn single_machine_matches_pooled() {
        let dp = run_once(&cell_config(Method::DP), &DataSource::Generated, DEFAULT_TIMEOUT).unwrap();
        let fp = run_once(&cell_config(Method::Full), &DataSource::Generated, DEFAULT_TIMEOUT).unwrap();
        assert!((dp.rho - fp.rho).abs() <= 1e-10);
        assert_eq!(dp.frame.len(), 30);
        assert_eq!(dp.frame[0].len(), 3);
        assert_eq!(dp.eigenvalues.len(), 3);
        // With one machine the aggregate is a projector, so its eigenvectors are an
        // arbitrary basis of the span; only the sum of the Rayleigh quotients is pinned.
        let (a, b): (f64, f64) = (dp.eigenvalues.iter().sum(), fp.eigenvalues.iter().sum());
        assert!((a - b).abs() < 1e-9 * b);
        assert_eq!(dp.ledger.as_ref().unwrap().frame_floats, 90);
    }

    #[test]
    fn generated_directory_and_on_the_fly_agree() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cell_config(Method::DP);
        c.panels[0].m = vec![3];
        crate::gen::generate(&c, dir.path()).unwrap();
        let a = run_once(&c, &DataSource::Generated, DEFAULT_TIMEOUT).unwrap();
        let b = run_once(&c, &DataSource::Directory(dir.path().into()), DEFAULT_TIMEOUT).unwrap();
        assert_eq!(a.frame, b.frame);
        assert_eq!(a.rho, b.rho);
    }

    #[test]
    fn several_methods_rejected() {
        let mut c = cell_config(Method::DP);
        c.methods.push(Method::Full);
        assert!(matches!(run_once(&c, &DataSource::Generated, DEFAULT_TIMEOUT), Err(CliError::Config(_))));
    }
}
