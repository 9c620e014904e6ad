//! Partition files on disk: generation and checked loading.

use std::fs;
use std::path::{Path, PathBuf};

use dpca::models::Partition;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Cell, ExperimentConfig, Innovation, ModelKind};
use crate::error::{CliError, CliResult};
use crate::experiment::{generate_partitions, replicate_seed};

pub const DATA_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub machine: usize,
    pub file: String,
    /// Master seed the partition was drawn from (stream `machine`).
    pub seed: u64,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub model: ModelKind,
    pub innovation: Innovation,
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub lambda: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub master_seed: u64,
    pub files: Vec<PartitionFile>,
}

impl DataManifest {
    pub fn cell(&self) -> Cell {
        Cell {
            d: self.d,
            m: self.m,
            n: self.n,
            lambda: self.lambda,
        }
    }
}

pub fn partition_file_name(machine: usize) -> String {
    format!("partition_{machine}.bin")
}

/// The single cell a `gen` or `run` invocation operates on.
pub fn single_cell(config: &ExperimentConfig) -> CliResult<Cell> {
    let cells = config.cells()?;
    match cells.as_slice() {
        [cell] => Ok(*cell),
        _ => Err(CliError::Config(format!(
            "expected exactly one (d, m, n, lambda) cell, the config describes {}; narrow it with --d/--m/--n/--lambda",
            cells.len()
        ))),
    }
}

/// Writes one binary partition per machine plus `manifest.json` into `dir`.
/// The data are replicate 0 of the cell, so they match the first replicate of a sweep.
pub fn generate(config: &ExperimentConfig, dir: &Path) -> CliResult<DataManifest> {
    config.validate()?;
    let cell = single_cell(config)?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let seed = replicate_seed(config.seed, &cell, 0);
    let parts = generate_partitions(config, &cell, seed)?;
    let mut files = Vec::with_capacity(parts.len());
    for p in &parts {
        let name = partition_file_name(p.machine());
        let path = dir.join(&name);
        let bytes = p.to_bytes();
        fs::write(&path, &bytes).map_err(|e| CliError::io(&path, e))?;
        files.push(PartitionFile {
            machine: p.machine(),
            file: name,
            seed: p.seed(),
            bytes: bytes.len() as u64,
            sha256: format!("{:x}", Sha256::digest(&bytes)),
        });
    }
    let manifest = DataManifest {
        model: config.model,
        innovation: config.innovation,
        d: cell.d,
        m: cell.m,
        n: cell.n,
        lambda: cell.lambda,
        k: config.k,
        master_seed: config.seed,
        files,
    };
    let path = dir.join(DATA_MANIFEST);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> CliResult<DataManifest> {
    let path = dir.join(DATA_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(&path, e))
}

/// Reads one partition listed in the manifest, checking its digest.
pub fn load_partition(dir: &Path, entry: &PartitionFile) -> CliResult<Partition> {
    let path: PathBuf = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    let digest = format!("{:x}", Sha256::digest(&bytes));
    if digest != entry.sha256 {
        return Err(CliError::format(&path, "sha256 does not match the manifest"));
    }
    let p = Partition::from_bytes(&bytes).map_err(|e| CliError::format(&path, e))?;
    if p.machine() != entry.machine {
        return Err(CliError::format(
            &path,
            format!("holds machine {}, manifest says {}", p.machine(), entry.machine),
        ));
    }
    Ok(p)
}

pub fn load_partitions(dir: &Path) -> CliResult<(DataManifest, Vec<Partition>)> {
    let manifest = read_manifest(dir)?;
    let parts = manifest
        .files
        .iter()
        .map(|f| load_partition(dir, f))
        .collect::<CliResult<Vec<_>>>()?;
    Ok((manifest, parts))
}
