use dpca::estimator::sample_covariance;
use dpca::linalg::{subspace_distance, top_k_eigen, Frame, Spectrum, SymMatrix};
use dpca::models::{
    factor_model, heterogeneous_common_eigenspace, sample_adversarial, sample_innovations, sample_partition,
    spiked_model, CustomEntries, FactorModelSpec, InnovationKind, Partition,
};
use dpca::estimator::CovarianceOptions;
use nalgebra::DMatrix;

/// Mean of `x x^T` over `chunks` partitions of `n` draws each (machine indices `0..chunks`).
fn empirical_covariance(chunks: usize, draw: impl Fn(usize) -> Partition) -> DMatrix<f64> {
    let mut acc: Option<DMatrix<f64>> = None;
    for l in 0..chunks {
        let c = sample_covariance(&draw(l), CovarianceOptions::default()).unwrap().into_matrix();
        acc = Some(match acc {
            Some(a) => a + c,
            None => c,
        });
    }
    acc.unwrap() / chunks as f64
}

fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut worst) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        worst = worst.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    worst
}

#[test]
fn gaussian_covariance_matches_population() {
    let model = spiked_model(20, 50.0).unwrap();
    let emp = empirical_covariance(10, |l| sample_partition(&model, &InnovationKind::Gaussian, 100_000, l, 42).unwrap());
    let err = (emp - model.covariance().as_matrix()).amax();
    assert!(err <= 0.05 * 50.0, "max entry error {err}");
}

#[test]
fn adversarial_covariance_rows_and_branches() {
    let (lambda, d) = (3.0, 20);
    let emp = empirical_covariance(10, |l| sample_adversarial(lambda, d, 100_000, l, 9).unwrap());
    let mut truth = DMatrix::identity(d, d);
    truth[(0, 0)] = lambda;
    assert!((emp - truth).amax() <= 0.05);

    let p = sample_adversarial(lambda, d, 100_000, 0, 10).unwrap();
    let mut spike = 0usize;
    for row in p.data().row_iter() {
        let sq = row.norm_squared();
        if (sq - 2.0 * lambda).abs() < 1e-9 {
            spike += 1;
        } else {
            assert!((sq - 2.0 * (d - 1) as f64).abs() < 1e-9, "row norm^2 {sq}");
        }
    }
    let freq = spike as f64 / 100_000.0;
    assert!((freq - 0.5).abs() <= 0.01, "spike branch frequency {freq}");
}

#[test]
fn rademacher_rows_have_norm_d() {
    let z = sample_innovations(&InnovationKind::Rademacher, 13, 500, 0, 1).unwrap();
    for row in z.row_iter() {
        assert_eq!(row.norm_squared(), 13.0);
    }
}

#[test]
fn sampling_is_deterministic_per_stream() {
    let model = spiked_model(12, 50.0).unwrap();
    for kind in [InnovationKind::Gaussian, InnovationKind::Rademacher, InnovationKind::Custom(CustomEntries::uniform())] {
        let a = sample_partition(&model, &kind, 40, 3, 77).unwrap();
        let b = sample_partition(&model, &kind, 40, 3, 77).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let other = sample_partition(&model, &kind, 40, 4, 77).unwrap();
        assert_ne!(a.to_bytes(), other.to_bytes());
    }
}

#[test]
fn sign_flips_preserve_marginals() {
    // Two-sample KS critical value at alpha = 0.01 for two samples of 10^4.
    let n = 10_000;
    let critical = 1.628 * (2.0 / n as f64).sqrt();
    for kind in [InnovationKind::Gaussian, InnovationKind::Rademacher] {
        let a = sample_innovations(&kind, 6, n, 0, 5).unwrap();
        let b = sample_innovations(&kind, 6, n, 1, 5).unwrap();
        for j in 0..6 {
            let plain: Vec<f64> = a.column(j).iter().copied().collect();
            let flipped: Vec<f64> = b.column(j).iter().map(|v| -v).collect();
            let ks = ks_statistic(plain, flipped);
            assert!(ks < critical, "{} coordinate {j}: KS {ks} >= {critical}", kind.name());
        }
    }
}

#[test]
fn sample_mean_is_small() {
    let model = spiked_model(30, 50.0).unwrap();
    let draws = 100_000;
    let p = sample_partition(&model, &InnovationKind::Rademacher, draws, 0, 3).unwrap();
    let mean = p.data().row_mean();
    let bound = 4.0 * (model.covariance().trace() / draws as f64).sqrt();
    assert!(mean.norm() <= bound, "{} > {bound}", mean.norm());
}

#[test]
fn heterogeneous_models_share_the_top_space() {
    let mut s1 = vec![1.0; 8];
    s1[0] = 10.0;
    let mut s2 = vec![1.0; 8];
    s2[0] = 7.0;
    let models =
        heterogeneous_common_eigenspace(8, 1, &[Spectrum::new(s1).unwrap(), Spectrum::new(s2).unwrap()], 4).unwrap();
    assert!(subspace_distance(&models[0].top_frame(), &models[1].top_frame()).unwrap() < 1e-12);
    assert!((models[0].effective_rank() - 17.0 / 10.0).abs() < 1e-12);
    assert!((models[1].condition_number() - 7.0 / 6.0).abs() < 1e-12);
}

#[test]
fn factor_model_without_residual_stays_in_the_loading_span() {
    let common = Frame::standard(6, &[1, 4]).unwrap();
    let spec = FactorModelSpec::isotropic(common.clone(), &[vec![9.0, 4.0]], &[0.0]).unwrap();
    let p = factor_model(&spec, 50, 0, 1).unwrap();
    let proj = common.as_matrix() * common.as_matrix().transpose();
    let residual = p.data() - p.data() * proj;
    assert!(residual.amax() < 1e-12);
}

#[test]
fn factor_model_covariance_and_top_space() {
    let common = Frame::standard(10, &[0, 3, 7]).unwrap();
    let spec = FactorModelSpec::isotropic(common.clone(), &[vec![12.0, 8.0, 5.0]], &[1.5]).unwrap();
    let pop: SymMatrix = spec.covariance(0);
    let emp = empirical_covariance(10, |l| factor_model(&spec, 100_000, 0, 6 + l as u64).unwrap());
    assert!((emp - pop.as_matrix()).amax() <= 0.05 * 12.0);
    let (_, top) = top_k_eigen(&pop, 3).unwrap();
    assert!(subspace_distance(&top, &common).unwrap() < 1e-10);
}
