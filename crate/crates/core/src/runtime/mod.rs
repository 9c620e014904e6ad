//! Coordinator/worker execution of the one-shot protocol.
//!
//! Round one: the coordinator sends `RequestTopK` to every worker and each
//! replies with its local frame. The optional eigenvalue round broadcasts the
//! aggregated frame and collects Rayleigh quotients. Each round is a barrier;
//! replies are re-sorted by machine index before aggregation, so arrival order
//! never affects the result.

pub mod codec;
mod ledger;
mod transport;

pub use codec::{decode, encode, Envelope, ErrorCode, Message};
pub use ledger::{CommLedger, MachineCost};
pub use transport::{
    reply_path, request_path, serve_connection, stop_path, worker_serve_files, worker_serve_tcp, FilesCluster,
    FilesTransport, InMemoryCluster, TcpCluster, TcpTransport, Transport,
};

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{aggregate_with, eigenvalue_round, AggregateOptions, AggregateResult, CovarianceOptions, LocalCovariance, SubspaceEstimate};
use crate::models::Partition;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const TIMEOUT_ENV: &str = "DPCA_TIMEOUT_SECS";

/// Answers protocol messages for one machine. Holds the machine's samples so
/// `Sigma_hat` is available to both rounds without recomputation.
pub struct Worker {
    cov: LocalCovariance<'static>,
    last_frames: Option<(usize, Vec<u8>)>,
}

impl Worker {
    pub fn new(partition: Partition, opts: CovarianceOptions) -> Result<Self> {
        Ok(Worker {
            cov: LocalCovariance::owned(partition, opts)?,
            last_frames: None,
        })
    }

    pub fn machine(&self) -> usize {
        self.cov.machine()
    }

    pub fn dim(&self) -> usize {
        self.cov.dim()
    }

    fn error(&self, code: ErrorCode, text: impl Into<String>) -> Envelope {
        Envelope::new(
            self.machine(),
            Message::Error {
                code,
                text: text.into(),
            },
        )
    }

    pub fn handle(&mut self, request: &Envelope) -> Envelope {
        let machine = self.machine();
        if request.machine != machine {
            return self.error(
                ErrorCode::Malformed,
                format!("request addressed to machine {}, this is machine {machine}", request.machine),
            );
        }
        match &request.message {
            Message::RequestTopK { rank } => {
                let d = self.dim();
                if *rank == 0 || *rank > d {
                    return self.error(ErrorCode::InvalidK, format!("K = {rank} must lie in 1..={d}"));
                }
                match self.cov.top_k(*rank) {
                    Ok(est) => Envelope::new(machine, Message::Frames(est)),
                    Err(e) => self.error(ErrorCode::Internal, e.to_string()),
                }
            }
            Message::BroadcastFrame(frame) => {
                if frame.dim() != self.dim() {
                    return self.error(
                        ErrorCode::DimensionMismatch,
                        format!("frame has d = {}, local data has d = {}", frame.dim(), self.dim()),
                    );
                }
                match self.cov.rayleigh(frame) {
                    Ok(values) => Envelope::new(machine, Message::RayleighValues(values)),
                    Err(e) => self.error(ErrorCode::Internal, e.to_string()),
                }
            }
            other => self.error(
                ErrorCode::Malformed,
                format!("workers do not accept {} messages", other.kind_name()),
            ),
        }
    }

    /// Decodes, handles and encodes. Never fails: problems become `Error` replies.
    pub fn handle_bytes(&mut self, bytes: &[u8]) -> Vec<u8> {
        let reply = match decode(bytes) {
            Ok(req) => {
                if let Message::RequestTopK { rank } = req.message {
                    if let Some((cached, out)) = &self.last_frames {
                        if *cached == rank && req.machine == self.machine() {
                            return out.clone();
                        }
                    }
                }
                self.handle(&req)
            }
            Err(e) => self.error(ErrorCode::Malformed, e.to_string()),
        };
        let out = encode(&reply).unwrap_or_else(|e| {
            encode(&self.error(ErrorCode::Internal, e.to_string())).expect("error messages always encode")
        });
        if let Message::Frames(est) = &reply.message {
            self.last_frames = Some((est.rank(), out.clone()));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    InMemory,
    Files,
    Tcp,
}

impl FromStr for TransportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "inmemory" | "in-memory" | "memory" => Ok(TransportKind::InMemory),
            "files" | "file" => Ok(TransportKind::Files),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(Error::invalid(format!(
                "unknown transport {other:?} (expected inmemory, files or tcp)"
            ))),
        }
    }
}

impl TransportKind {
    pub fn name(self) -> &'static str {
        match self {
            TransportKind::InMemory => "inmemory",
            TransportKind::Files => "files",
            TransportKind::Tcp => "tcp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// Number of machines `m`; machine indices are `0..m`.
    pub machines: usize,
    pub transport: TransportKind,
    /// `host:port` per machine for tcp, a single shared directory for files,
    /// empty for in-memory.
    #[serde(default)]
    pub endpoints: Vec<String>,
    #[serde(default = "default_timeout", with = "secs")]
    pub timeout: Duration,
}

fn default_timeout() -> Duration {
    DEFAULT_TIMEOUT
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl ClusterConfig {
    pub fn new(machines: usize, transport: TransportKind) -> Self {
        ClusterConfig {
            machines,
            transport,
            endpoints: Vec::new(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    /// Applies `DPCA_TIMEOUT_SECS` when set.
    pub fn with_env_timeout(mut self) -> Result<Self> {
        if let Ok(raw) = std::env::var(TIMEOUT_ENV) {
            let secs: f64 = raw
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{TIMEOUT_ENV}={raw:?} is not a number of seconds")))?;
            self.timeout = Duration::try_from_secs_f64(secs)
                .map_err(|_| Error::invalid(format!("{TIMEOUT_ENV}={raw:?} is not a valid duration")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.machines == 0 {
            return Err(Error::invalid("a cluster needs at least one machine"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.endpoints {
            if !seen.insert(e) {
                return Err(Error::invalid(format!("duplicate endpoint {e}")));
            }
        }
        match self.transport {
            TransportKind::Tcp if self.endpoints.len() != self.machines => Err(Error::invalid(format!(
                "tcp needs one endpoint per machine ({} given for m = {})",
                self.endpoints.len(),
                self.machines
            ))),
            TransportKind::Files if self.endpoints.len() > 1 => {
                Err(Error::invalid("files transport takes a single shared directory"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Extra eigenvectors per machine (`DPx`).
    #[serde(default)]
    pub extra: usize,
    #[serde(default)]
    pub eigenvalue_round: bool,
    /// Aggregate over the machines that answered instead of failing.
    #[serde(default)]
    pub allow_partial: bool,
    #[serde(default)]
    pub aggregate: AggregateOptions,
}

/// Sends `request(l)` to every machine, then waits for each reply.
/// Returns one outcome per machine, in machine order.
fn round(
    transport: &mut dyn Transport,
    machines: &[usize],
    timeout: Duration,
    request: impl Fn(usize) -> Envelope,
) -> Vec<(usize, Result<Envelope>)> {
    let mut sent = Vec::with_capacity(machines.len());
    for &l in machines {
        let outcome = encode(&request(l)).and_then(|bytes| transport.send(l, &bytes));
        sent.push((l, outcome));
    }
    let deadline = Instant::now() + timeout;
    sent.into_iter()
        .map(|(l, outcome)| {
            let reply = outcome.and_then(|_| transport.recv(l, deadline)).and_then(|bytes| {
                decode(&bytes).map_err(|e| Error::Protocol {
                    machine: l,
                    reason: format!("undecodable reply: {e}"),
                })
            });
            let reply = reply.and_then(|env| {
                if env.machine != l {
                    return Err(Error::Protocol {
                        machine: l,
                        reason: format!("reply claims to come from machine {}", env.machine),
                    });
                }
                if let Message::Error { code, text } = &env.message {
                    return Err(Error::Protocol {
                        machine: l,
                        reason: format!("{}: {text}", code.name()),
                    });
                }
                Ok(env)
            });
            (l, reply)
        })
        .collect()
}

/// Keeps the successes; fails on the first error unless `allow_partial`.
fn settle<T>(outcomes: Vec<(usize, Result<T>)>, allow_partial: bool) -> Result<Vec<(usize, T)>> {
    let mut ok = Vec::new();
    let mut first_err = None;
    for (l, r) in outcomes {
        match r {
            Ok(v) => ok.push((l, v)),
            Err(e) => {
                log::warn!("machine {l}: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) if !allow_partial || ok.is_empty() => Err(e),
        _ => Ok(ok),
    }
}

/// Runs the protocol against machines `0..config.machines` over `transport`.
pub fn run_distributed(
    config: &ClusterConfig,
    transport: &mut dyn Transport,
    k: usize,
    opts: RunOptions,
) -> Result<AggregateResult> {
    config.validate()?;
    if k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    let rank = k + opts.extra;
    let machines: Vec<usize> = (0..config.machines).collect();

    let replies = round(transport, &machines, config.timeout, |l| {
        Envelope::new(l, Message::RequestTopK { rank })
    });
    let mut dim = None;
    let estimates: Vec<(usize, Result<SubspaceEstimate>)> = replies
        .into_iter()
        .map(|(l, r)| {
            let est = r.and_then(|env| match env.message {
                Message::Frames(est) if est.rank() == rank => Ok(est),
                Message::Frames(est) => Err(Error::Protocol {
                    machine: l,
                    reason: format!("sent rank {}, requested {rank}", est.rank()),
                }),
                other => Err(Error::Protocol {
                    machine: l,
                    reason: format!("expected Frames, got {}", other.kind_name()),
                }),
            });
            let est = est.and_then(|est| match dim {
                None => {
                    dim = Some(est.dim());
                    Ok(est)
                }
                Some(d) if d == est.dim() => Ok(est),
                Some(d) => Err(Error::Protocol {
                    machine: l,
                    reason: format!("dimension {} differs from {d}", est.dim()),
                }),
            });
            (l, est)
        })
        .collect();
    let estimates: Vec<SubspaceEstimate> = settle(estimates, opts.allow_partial)?
        .into_iter()
        .map(|(_, e)| e)
        .collect();
    let mut result = aggregate_with(&estimates, k, opts.aggregate)?;
    result.partial = result.machines.len() < config.machines;

    if opts.eigenvalue_round {
        let frame = result.frame.clone();
        let d = frame.dim();
        let replies = round(transport, &result.machines, config.timeout, |l| {
            Envelope::new(l, Message::BroadcastFrame(frame.clone()))
        });
        let values: Vec<(usize, Result<Vec<f64>>)> = replies
            .into_iter()
            .map(|(l, r)| {
                let v = r.and_then(|env| match env.message {
                    Message::RayleighValues(v) if v.len() == k => Ok(v),
                    other => Err(Error::Protocol {
                        machine: l,
                        reason: format!("expected {k} Rayleigh values, got {}", other.kind_name()),
                    }),
                });
                (l, v)
            })
            .collect();
        let values = settle(values, opts.allow_partial)?;
        if values.len() < result.machines.len() {
            result.partial = true;
        }
        for (l, _) in &values {
            result.ledger.record_eigenvalue_round(*l, k, d);
        }
        let values: Vec<Vec<f64>> = values.into_iter().map(|(_, v)| v).collect();
        result.refined = Some(eigenvalue_round(&values)?);
    }
    Ok(result)
}

static SCRATCH_COUNTER: AtomicUsize = AtomicUsize::new(0);

/// Spawns local workers over the chosen transport, runs the protocol and shuts
/// the workers down. Partitions must carry machine indices `0..m`.
///
/// `scratch` is the shared directory for the files transport; without it a
/// fresh directory under the system temp dir is used and removed afterwards.
pub fn run_local(
    partitions: Vec<Partition>,
    transport: TransportKind,
    k: usize,
    opts: RunOptions,
    covariance: CovarianceOptions,
    timeout: Duration,
    scratch: Option<&Path>,
) -> Result<AggregateResult> {
    let m = partitions.len();
    let mut indices: Vec<usize> = partitions.iter().map(Partition::machine).collect();
    indices.sort_unstable();
    if indices != (0..m).collect::<Vec<_>>() {
        return Err(Error::invalid("partitions must be numbered 0..m without gaps"));
    }
    let workers = partitions
        .into_iter()
        .map(|p| Worker::new(p, covariance))
        .collect::<Result<Vec<_>>>()?;
    let mut config = ClusterConfig::new(m, TransportKind::InMemory);
    config.timeout = timeout;
    match transport {
        TransportKind::InMemory => {
            let mut cluster = InMemoryCluster::spawn(workers);
            run_distributed(&config, &mut cluster, k, opts)
        }
        TransportKind::Files => {
            let (dir, temporary) = match scratch {
                Some(d) => (d.to_path_buf(), false),
                None => (fresh_scratch_dir(), true),
            };
            let result = {
                let mut cluster = FilesCluster::spawn(&dir, workers)?;
                run_distributed(&config, &mut cluster, k, opts)
            };
            if temporary {
                let _ = std::fs::remove_dir_all(&dir);
            }
            result
        }
        TransportKind::Tcp => {
            let mut cluster = TcpCluster::spawn_local(workers, timeout)?;
            run_distributed(&config, &mut cluster, k, opts)
        }
    }
}

fn fresh_scratch_dir() -> PathBuf {
    let n = SCRATCH_COUNTER.fetch_add(1, Ordering::Relaxed);
    std::env::temp_dir().join(format!("dpca-files-{}-{n}", std::process::id()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{sample_partition, spiked_model, InnovationKind};

    fn worker(machine: usize, d: usize) -> Worker {
        let model = spiked_model(d, 20.0).unwrap();
        let p = sample_partition(&model, &InnovationKind::Gaussian, 30, machine, 1).unwrap();
        Worker::new(p, CovarianceOptions::default()).unwrap()
    }

    #[test]
    fn worker_protocol_conformance() {
        let mut w = worker(0, 6);
        let req = encode(&Envelope::new(0, Message::RequestTopK { rank: 2 })).unwrap();
        let first = w.handle_bytes(&req);
        let frames = decode(&first).unwrap();
        let Message::Frames(est) = frames.message else { panic!("expected frames") };
        assert_eq!(est.rank(), 2);
        let bcast = encode(&Envelope::new(0, Message::BroadcastFrame(est.frame.clone()))).unwrap();
        let Message::RayleighValues(v) = decode(&w.handle_bytes(&bcast)).unwrap().message else {
            panic!("expected Rayleigh values")
        };
        for (a, b) in v.iter().zip(est.eigenvalues.values()) {
            assert!((a - b).abs() < 1e-10 * b);
        }
        assert_eq!(w.handle_bytes(&req), first);
    }

    #[test]
    fn worker_errors() {
        let mut w = worker(0, 6);
        let req = encode(&Envelope::new(0, Message::RequestTopK { rank: 7 })).unwrap();
        let reply = decode(&w.handle_bytes(&req)).unwrap();
        assert!(matches!(reply.message, Message::Error { code: ErrorCode::InvalidK, .. }));
        let reply = decode(&w.handle_bytes(b"garbage")).unwrap();
        assert!(matches!(reply.message, Message::Error { code: ErrorCode::Malformed, .. }));
    }

    #[test]
    fn config_validation() {
        assert!(ClusterConfig::new(0, TransportKind::InMemory).validate().is_err());
        let mut c = ClusterConfig::new(2, TransportKind::Tcp);
        c.endpoints = vec!["127.0.0.1:1".into(), "127.0.0.1:1".into()];
        assert!(c.validate().is_err());
        c.endpoints[1] = "127.0.0.1:2".into();
        assert!(c.validate().is_ok());
        assert_eq!("files".parse::<TransportKind>().unwrap(), TransportKind::Files);
    }

    #[test]
    fn in_memory_ledger_counts() {
        let workers = (0..3).map(|l| worker(l, 10)).collect();
        let mut cluster = InMemoryCluster::spawn(workers);
        let config = ClusterConfig::new(3, TransportKind::InMemory);
        let res = run_distributed(&config, &mut cluster, 2, RunOptions::default()).unwrap();
        assert_eq!(res.ledger.frame_floats(), 60);
        assert_eq!(res.ledger.broadcast_floats(), 0);
    }
}
