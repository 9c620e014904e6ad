//! Monte Carlo replicates, cells and resumable sweeps.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dpca::analysis::ExperimentRecord;
use dpca::estimator::{distributed_pca, full_sample_pca, AggregateResult, CovarianceOptions, PcaOptions};
use dpca::linalg::{subspace_distance, Frame};
use dpca::models::{adversarial_model, derive_seed, sample_partition, spiked_model, CovarianceModel, InnovationKind, Partition};
use dpca::runtime::{run_local, RunOptions, DEFAULT_TIMEOUT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Cell, ExperimentConfig, Method, ModelKind};
use crate::error::{CliError, CliResult};
use crate::report::{write_report, Summary};

pub const RECORDS_FILE: &str = "records.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Seed shared by every method within one replicate of one cell.
pub fn replicate_seed(master: u64, cell: &Cell, rep: usize) -> u64 {
    derive_seed(&[
        master,
        cell.d as u64,
        cell.m as u64,
        cell.n as u64,
        cell.lambda.to_bits(),
        rep as u64,
    ])
}

pub fn population_model(config: &ExperimentConfig, cell: &Cell) -> CliResult<CovarianceModel> {
    Ok(match config.model {
        ModelKind::Spiked => spiked_model(cell.d, cell.lambda)?,
        ModelKind::Adversarial => adversarial_model(cell.lambda, cell.d)?,
    })
}

fn innovation(config: &ExperimentConfig) -> InnovationKind {
    match config.model {
        ModelKind::Spiked => config.innovation.kind(),
        ModelKind::Adversarial => InnovationKind::SphereMixture,
    }
}

/// The `m` partitions of one replicate; machine `l` draws from stream `l` of `seed`.
pub fn generate_partitions(config: &ExperimentConfig, cell: &Cell, seed: u64) -> CliResult<Vec<Partition>> {
    let model = population_model(config, cell)?;
    let kind = innovation(config);
    (0..cell.m)
        .map(|l| sample_partition(&model, &kind, cell.n, l, seed).map_err(CliError::from))
        .collect()
}

/// Output of one method on one replicate.
#[derive(Clone, Debug)]
pub struct MethodOutcome {
    pub frame: Frame,
    pub aggregate: Option<AggregateResult>,
    pub ms: f64,
    pub comm_floats: u64,
}

/// Runs `method` on `parts`, in-process or through spawned workers.
pub fn run_method(
    config: &ExperimentConfig,
    method: Method,
    parts: &[Partition],
    timeout: Duration,
) -> CliResult<MethodOutcome> {
    let start = Instant::now();
    match method {
        Method::Full => {
            let est = full_sample_pca(parts, config.k)?;
            let (m, n, d) = (parts.len(), parts[0].n(), parts[0].dim());
            Ok(MethodOutcome {
                frame: est.frame,
                aggregate: None,
                ms: start.elapsed().as_secs_f64() * 1e3,
                // The pooled estimator needs every raw sample at one place.
                comm_floats: (m * n * d) as u64,
            })
        }
        Method::Distributed { extra } => {
            let result = match config.transport {
                None => distributed_pca(
                    parts,
                    config.k,
                    PcaOptions {
                        extra,
                        eigenvalue_round: config.eigenvalue_round,
                        ..PcaOptions::default()
                    },
                )?,
                Some(kind) => run_local(
                    parts.to_vec(),
                    kind,
                    config.k,
                    RunOptions {
                        extra,
                        eigenvalue_round: config.eigenvalue_round,
                        allow_partial: config.allow_partial,
                        ..RunOptions::default()
                    },
                    CovarianceOptions::default(),
                    timeout,
                    None,
                )?,
            };
            let l = &result.ledger;
            Ok(MethodOutcome {
                frame: result.frame.clone(),
                comm_floats: l.frame_floats() + l.broadcast_floats() + l.rayleigh_floats(),
                aggregate: Some(result),
                ms: start.elapsed().as_secs_f64() * 1e3,
            })
        }
    }
}

/// One record per method for replicate `rep` of `cell`.
pub fn run_replicate(config: &ExperimentConfig, cell: &Cell, rep: usize, timeout: Duration) -> CliResult<Vec<ExperimentRecord>> {
    let seed = replicate_seed(config.seed, cell, rep);
    let parts = generate_partitions(config, cell, seed)?;
    let truth = population_model(config, cell)?.top_frame();
    let delta = config.delta(cell);
    config
        .methods
        .iter()
        .map(|&method| {
            let out = run_method(config, method, &parts, timeout)?;
            Ok(ExperimentRecord {
                d: cell.d,
                m: cell.m,
                n: cell.n,
                delta,
                k: config.k,
                method: method.to_string(),
                rep,
                rho: subspace_distance(&out.frame, &truth)?,
                ms: out.ms,
                comm_floats: out.comm_floats,
            })
        })
        .collect()
}

/// Every replicate of `cell`, replicates in parallel, ordered by `(rep, method)`.
pub fn run_cell(config: &ExperimentConfig, cell: &Cell, timeout: Duration) -> CliResult<Vec<ExperimentRecord>> {
    let per_rep: Vec<Vec<ExperimentRecord>> = (0..config.reps)
        .into_par_iter()
        .map(|rep| run_replicate(config, cell, rep, timeout))
        .collect::<CliResult<_>>()?;
    Ok(per_rep.into_iter().flatten().collect())
}

/// Records with `rho = scale * sqrt(d / (m n delta))` exactly; exercises the
/// reporting pipeline without sampling.
pub fn synthetic_cell(config: &ExperimentConfig, cell: &Cell, scale: f64) -> Vec<ExperimentRecord> {
    let delta = config.delta(cell);
    let rho = scale * (cell.d as f64 / (cell.m as f64 * cell.n as f64 * delta)).sqrt();
    (0..config.reps)
        .flat_map(|rep| {
            config.methods.iter().map(move |method| ExperimentRecord {
                d: cell.d,
                m: cell.m,
                n: cell.n,
                delta,
                k: config.k,
                method: method.to_string(),
                rep,
                rho,
                ms: 0.0,
                comm_floats: (cell.m * (config.k + method.extra()) * cell.d) as u64,
            })
        })
        .collect()
}

// ---- CSV ----

pub fn write_records(path: &Path, records: &[ExperimentRecord]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::format(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| CliError::format(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn append_records(path: &Path, records: &[ExperimentRecord]) -> CliResult<()> {
    let fresh = !path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in records {
        w.serialize(r).map_err(|e| CliError::format(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_records(path: &Path) -> CliResult<Vec<ExperimentRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::format(path, e))?;
    let headers = r.headers().map_err(|e| CliError::format(path, e))?.clone();
    let expected = ["d", "m", "n", "delta", "K", "method", "rep", "rho", "ms", "comm_floats"];
    if headers.iter().ne(expected.iter().copied()) {
        return Err(CliError::format(path, format!("unexpected header {:?}", headers)));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| CliError::format(path, e)))
        .collect()
}

// ---- sweeps ----

/// Checkpoint state of a sweep directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    /// SHA-256 of the canonical config JSON.
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Keys of cells whose records are all in the CSV.
    pub completed: Vec<String>,
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    format!("{:x}", Sha256::digest(&json))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub out: PathBuf,
    /// Discard any previous checkpoint in `out`.
    pub fresh: bool,
    pub timeout: Duration,
    /// Emit exact power-law records instead of running the estimators.
    pub synthetic: bool,
    pub plots: bool,
}

impl SweepOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        SweepOptions {
            out: out.into(),
            fresh: false,
            timeout: DEFAULT_TIMEOUT,
            synthetic: false,
            plots: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub records: Vec<ExperimentRecord>,
    pub computed_cells: usize,
    pub reused_cells: usize,
    pub summary: Summary,
}

/// Runs every cell not already checkpointed in `opts.out`, then writes the
/// summary and plots. A rerun with the same config recomputes nothing.
pub fn sweep(config: &ExperimentConfig, opts: &SweepOptions) -> CliResult<SweepOutcome> {
    config.validate()?;
    fs::create_dir_all(&opts.out).map_err(|e| CliError::io(&opts.out, e))?;
    let csv_path = opts.out.join(RECORDS_FILE);
    let manifest_path = opts.out.join(MANIFEST_FILE);
    let hash = config_hash(config);

    let mut manifest = Manifest {
        config_hash: hash.clone(),
        config: config.clone(),
        completed: Vec::new(),
    };
    let mut records = Vec::new();
    if !opts.fresh && manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| CliError::io(&manifest_path, e))?;
        let old: Manifest = serde_json::from_str(&text).map_err(|e| CliError::format(&manifest_path, e))?;
        if old.config_hash != hash {
            return Err(CliError::Config(format!(
                "{} holds a sweep with a different config; pick another --out or pass --fresh",
                opts.out.display()
            )));
        }
        manifest.completed = old.completed;
        if csv_path.exists() {
            // Drop rows from a cell that was interrupted before its checkpoint.
            let done: BTreeSet<&str> = manifest.completed.iter().map(String::as_str).collect();
            let cells = config.cells()?;
            let keep: Vec<(usize, usize, usize, u64)> = cells
                .iter()
                .filter(|c| done.contains(c.key().as_str()))
                .map(|c| (c.d, c.m, c.n, config.delta(c).to_bits()))
                .collect();
            let all = read_records(&csv_path)?;
            let total = all.len();
            records = all
                .into_iter()
                .filter(|r| keep.contains(&(r.d, r.m, r.n, r.delta.to_bits())))
                .collect();
            if records.len() != total {
                write_records(&csv_path, &records)?;
            }
        }
    } else if csv_path.exists() {
        fs::remove_file(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    }

    let (mut computed, mut reused) = (0, 0);
    for cell in config.cells()? {
        let key = cell.key();
        if manifest.completed.contains(&key) {
            reused += 1;
            continue;
        }
        let start = Instant::now();
        let rows = if opts.synthetic {
            synthetic_cell(config, &cell, 1.0)
        } else {
            run_cell(config, &cell, opts.timeout)?
        };
        log::info!("{key}: {} records in {:.1}s", rows.len(), start.elapsed().as_secs_f64());
        append_records(&csv_path, &rows)?;
        records.extend(rows);
        manifest.completed.push(key);
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&manifest_path, &json)?;
        computed += 1;
    }
    if !csv_path.exists() {
        write_records(&csv_path, &records)?;
    }
    let summary = write_report(&records, Some(config), &opts.out, opts.plots)?;
    Ok(SweepOutcome {
        records,
        computed_cells: computed,
        reused_cells: reused,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Panel, Preset};

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(Preset::Comparison, false);
        c.panels = vec![Panel {
            d: vec![8, 16],
            m: vec![2, 4],
            n: vec![30],
            lambda: vec![50.0],
            total: None,
        }];
        c.reps = 3;
        c
    }

    #[test]
    fn replicates_are_paired_across_methods() {
        let c = tiny();
        let cell = c.cells().unwrap()[0];
        let a = run_replicate(&c, &cell, 1, DEFAULT_TIMEOUT).unwrap();
        let b = run_replicate(&c, &cell, 1, DEFAULT_TIMEOUT).unwrap();
        let no_time = |v: &[ExperimentRecord]| v.iter().map(|r| ExperimentRecord { ms: 0.0, ..r.clone() }).collect::<Vec<_>>();
        assert_eq!(no_time(&a), no_time(&b));
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].comm_floats, (2 * 3 * 8) as u64);
        assert_eq!(a[1].comm_floats, (2 * 30 * 8) as u64);
        assert_eq!(a[2].comm_floats, (2 * 8 * 8) as u64);
        let s2 = 2f64.sqrt() * 3f64.sqrt();
        assert!(a.iter().all(|r| r.rho > 0.0 && r.rho < s2));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        let cell = c.cells().unwrap()[0];
        let recs = run_cell(&c, &cell, DEFAULT_TIMEOUT).unwrap();
        let path = dir.path().join("r.csv");
        write_records(&path, &recs).unwrap();
        assert_eq!(read_records(&path).unwrap(), recs);
        let header = fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("d,m,n,delta,K,method,rep,rho,ms,comm_floats\n"));
    }

    #[test]
    fn sweep_resumes_without_recomputation() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        let mut opts = SweepOptions::new(dir.path());
        opts.plots = false;
        let first = sweep(&c, &opts).unwrap();
        assert_eq!((first.computed_cells, first.reused_cells), (4, 0));
        let before = fs::read(dir.path().join(RECORDS_FILE)).unwrap();
        let second = sweep(&c, &opts).unwrap();
        assert_eq!((second.computed_cells, second.reused_cells), (0, 4));
        assert_eq!(fs::read(dir.path().join(RECORDS_FILE)).unwrap(), before);
        assert_eq!(second.records, first.records);

        let mut other = c.clone();
        other.seed += 1;
        assert!(matches!(sweep(&other, &opts), Err(CliError::Config(_))));
    }

    #[test]
    fn interrupted_cell_is_recomputed() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        let mut opts = SweepOptions::new(dir.path());
        opts.plots = false;
        let full = sweep(&c, &opts).unwrap();
        // Forget the last checkpoint, as if the process died after writing rows.
        let mpath = dir.path().join(MANIFEST_FILE);
        let mut m: Manifest = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        m.completed.pop();
        fs::write(&mpath, serde_json::to_vec(&m).unwrap()).unwrap();
        let again = sweep(&c, &opts).unwrap();
        assert_eq!((again.computed_cells, again.reused_cells), (1, 3));
        let strip = |v: &[ExperimentRecord]| v.iter().map(|r| (r.d, r.m, r.method.clone(), r.rep, r.rho.to_bits())).collect::<Vec<_>>();
        assert_eq!(strip(&again.records), strip(&full.records));
    }
}
