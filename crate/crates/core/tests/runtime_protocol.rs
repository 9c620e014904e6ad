use std::time::Duration;

use dpca::estimator::{distributed_pca, CovarianceOptions, PcaOptions, SubspaceEstimate};
use dpca::linalg::{subspace_distance, Frame, Spectrum};
use dpca::models::{machine_rng, sample_partition, spiked_model, InnovationKind, Partition};
use dpca::runtime::{
    decode, encode, run_distributed, run_local, ClusterConfig, Envelope, ErrorCode, FilesCluster, InMemoryCluster,
    Message, RunOptions, TcpCluster, TransportKind, Worker,
};
use dpca::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn partitions(d: usize, m: usize, n: usize, seed: u64) -> Vec<Partition> {
    let model = spiked_model(d, 50.0).unwrap();
    (0..m)
        .map(|l| sample_partition(&model, &InnovationKind::Gaussian, n, l, seed).unwrap())
        .collect()
}

fn workers(parts: &[Partition]) -> Vec<Worker> {
    parts
        .iter()
        .map(|p| Worker::new(p.clone(), CovarianceOptions::default()).unwrap())
        .collect()
}

const TIMEOUT: Duration = Duration::from_secs(10);

#[test]
fn all_transports_agree_with_the_in_process_estimator() {
    let parts = partitions(24, 4, 50, 17);
    let opts = RunOptions {
        extra: 2,
        eigenvalue_round: true,
        ..RunOptions::default()
    };
    let reference = distributed_pca(
        &parts,
        3,
        PcaOptions {
            extra: 2,
            eigenvalue_round: true,
            ..PcaOptions::default()
        },
    )
    .unwrap();
    let scratch = tempfile::tempdir().unwrap();
    for kind in [TransportKind::InMemory, TransportKind::Files, TransportKind::Tcp] {
        let r = run_local(parts.clone(), kind, 3, opts, CovarianceOptions::default(), TIMEOUT, Some(scratch.path())).unwrap();
        assert!(subspace_distance(&r.frame, &reference.frame).unwrap() <= 1e-10, "{kind:?}");
        let (a, b) = (r.refined.as_ref().unwrap(), reference.refined.as_ref().unwrap());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-10 * y.abs().max(1.0), "{kind:?}");
        }
        assert_eq!(r.ledger.frame_floats(), 4 * 5 * 24);
        assert_eq!(r.ledger.broadcast_floats(), 4 * 3 * 24);
        assert_eq!(r.ledger.rayleigh_floats(), 4 * 3);
        assert_eq!(r.ledger.local_eigenvalue_floats(), 4 * 5);
        assert_eq!(r.machines, vec![0, 1, 2, 3]);
        assert!(!r.partial);
    }
}

#[test]
fn ledger_counts_are_exact() {
    for (m, k, x, d) in [(3, 2, 0, 10), (5, 1, 4, 7), (2, 3, 3, 6)] {
        let parts = partitions(d, m, 12, 3);
        let r = run_local(
            parts,
            TransportKind::InMemory,
            k,
            RunOptions {
                extra: x,
                ..RunOptions::default()
            },
            CovarianceOptions::default(),
            TIMEOUT,
            None,
        )
        .unwrap();
        assert_eq!(r.ledger.frame_floats(), (m * (k + x) * d) as u64);
        assert_eq!(r.ledger.broadcast_floats() + r.ledger.rayleigh_floats(), 0);
        let per = dpca::runtime::codec::frames_len(k + x, d) as u64;
        assert_eq!(r.ledger.bytes_up(), m as u64 * per);
    }
}

#[test]
fn killed_tcp_worker_fails_the_run() {
    let parts = partitions(10, 3, 20, 5);
    let mut cluster = TcpCluster::spawn_local(workers(&parts), Duration::from_secs(2)).unwrap();
    cluster.kill(1);
    let mut config = ClusterConfig::new(3, TransportKind::Tcp);
    config.endpoints = (0..3).map(|l| cluster.endpoint(l).unwrap().to_string()).collect();
    config.timeout = Duration::from_secs(2);
    match run_distributed(&config, &mut cluster, 2, RunOptions::default()) {
        Err(Error::Transport { machine, .. }) => assert_eq!(machine, 1),
        other => panic!("expected a transport error for machine 1, got {other:?}"),
    }
}

#[test]
fn killed_worker_can_be_skipped_when_allowed() {
    let parts = partitions(10, 3, 20, 5);
    let mut cluster = InMemoryCluster::spawn(workers(&parts));
    cluster.kill(2);
    let mut config = ClusterConfig::new(3, TransportKind::InMemory);
    config.timeout = Duration::from_secs(2);
    assert!(matches!(
        run_distributed(&config, &mut cluster, 2, RunOptions::default()),
        Err(Error::Transport { machine: 2, .. })
    ));
    let opts = RunOptions {
        allow_partial: true,
        ..RunOptions::default()
    };
    let r = run_distributed(&config, &mut cluster, 2, opts).unwrap();
    assert!(r.partial);
    assert_eq!(r.machines, vec![0, 1]);
    let expected = distributed_pca(&parts[..2], 2, PcaOptions::default()).unwrap();
    assert!(subspace_distance(&r.frame, &expected.frame).unwrap() <= 1e-10);
}

#[test]
fn files_worker_that_never_answers_times_out() {
    let parts = partitions(8, 2, 10, 1);
    let dir = tempfile::tempdir().unwrap();
    let mut cluster = FilesCluster::spawn(dir.path(), workers(&parts)).unwrap();
    cluster.kill(0);
    let mut config = ClusterConfig::new(2, TransportKind::Files);
    config.timeout = Duration::from_millis(300);
    assert!(matches!(
        run_distributed(&config, &mut cluster, 1, RunOptions::default()),
        Err(Error::Transport { machine: 0, .. })
    ));
}

#[test]
fn mixed_dimensions_are_a_protocol_error() {
    let mut parts = partitions(8, 2, 10, 1);
    parts.push(sample_partition(&spiked_model(9, 50.0).unwrap(), &InnovationKind::Gaussian, 10, 2, 1).unwrap());
    let r = run_local(parts, TransportKind::InMemory, 2, RunOptions::default(), CovarianceOptions::default(), TIMEOUT, None);
    assert!(matches!(r, Err(Error::Protocol { machine: 2, .. })), "{r:?}");
}

#[test]
fn oversized_k_is_reported_by_the_worker() {
    let parts = partitions(5, 2, 10, 1);
    let r = run_local(parts, TransportKind::InMemory, 6, RunOptions::default(), CovarianceOptions::default(), TIMEOUT, None);
    assert!(matches!(r, Err(Error::Protocol { .. })), "{r:?}");
}

#[test]
fn worker_answers_bad_requests_and_keeps_serving() {
    let parts = partitions(6, 1, 10, 1);
    let mut w = Worker::new(parts[0].clone(), CovarianceOptions::default()).unwrap();
    let bad = encode(&Envelope::new(0, Message::BroadcastFrame(Frame::identity(4)))).unwrap();
    let reply = decode(&w.handle_bytes(&bad)).unwrap();
    assert!(matches!(reply.message, Message::Error { code: ErrorCode::DimensionMismatch, .. }));
    let ok = encode(&Envelope::new(0, Message::RequestTopK { rank: 2 })).unwrap();
    assert!(matches!(decode(&w.handle_bytes(&ok)).unwrap().message, Message::Frames(_)));
}

fn arbitrary_message(seed: u64, kind: u8) -> Message {
    let mut rng = machine_rng(seed, 0);
    let d = 1 + (seed % 9) as usize;
    let k = 1 + (seed / 9 % d as u64) as usize;
    match kind % 5 {
        0 => Message::RequestTopK { rank: k },
        1 => {
            let g = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut vals: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 10.0).collect();
            vals.sort_by(|a, b| b.total_cmp(a));
            let est = SubspaceEstimate::new(
                (seed % 7) as usize,
                Frame::orthonormalize(g).unwrap(),
                Spectrum::new(vals).unwrap(),
                3 + (seed % 50) as usize,
            )
            .unwrap();
            Message::Frames(est)
        }
        2 => Message::BroadcastFrame(Frame::orthonormalize(DMatrix::from_fn(d, k, |_, _| rng.sample(StandardNormal))).unwrap()),
        3 => Message::RayleighValues((0..k).map(|_| rng.sample(StandardNormal)).collect()),
        _ => Message::Error {
            code: ErrorCode::Internal,
            text: format!("failure {seed} é"),
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn codec_roundtrip_and_truncation(seed in any::<u64>(), kind in 0u8..5, machine in 0usize..1000) {
        let env = Envelope::new(machine, arbitrary_message(seed, kind));
        let bytes = encode(&env).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back).unwrap(), bytes.clone());
        prop_assert_eq!(back.machine, machine);
        for cut in 0..bytes.len() {
            prop_assert!(decode(&bytes[..cut]).is_err());
        }
    }
}

#[test]
fn empty_rayleigh_values_cannot_be_encoded() {
    assert!(encode(&Envelope::new(0, Message::RayleighValues(vec![]))).is_err());
}
