use dpca::analysis::check_dk_expansion;
use dpca::linalg::{
    projection, sin_theta, subspace_distance, sym_eig, top_k_eigen, top_k_eigen_with, EigenSolver, Frame, SymMatrix,
    Window,
};
use dpca::models::{haar_orthogonal, machine_rng};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = machine_rng(seed, 0);
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn random_frame(d: usize, k: usize, seed: u64) -> Frame {
    Frame::orthonormalize(gaussian(d, k, seed)).unwrap()
}

fn random_symmetric(d: usize, seed: u64) -> SymMatrix {
    let g = gaussian(d, d, seed);
    SymMatrix::new((&g + g.transpose()) * 0.5).unwrap()
}

/// `A = Q diag(lambda) Q^T` with the window `start..start+len` separated from
/// the rest of the spectrum by at least `gap`.
fn matrix_with_window_gap(d: usize, window: Window, gap: f64, seed: u64) -> SymMatrix {
    let mut rng = machine_rng(seed, 1);
    let q = haar_orthogonal(d, &mut rng).unwrap().into_matrix();
    let mut values = Vec::with_capacity(d);
    let mut level = 0.0;
    for i in (0..d).rev() {
        let step = if i + 1 == window.start || i + 1 == window.end() { gap } else { 0.0 };
        level += step + rng.random::<f64>();
        values.push(level);
    }
    values.reverse();
    let mut scaled = q.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= values[j];
    }
    let a = scaled * q.transpose();
    SymMatrix::new((&a + a.transpose()) * 0.5).unwrap()
}

fn perturbation(d: usize, norm: f64, seed: u64) -> SymMatrix {
    let e = random_symmetric(d, seed);
    let s = e.spectral_norm().unwrap();
    e.scaled(norm / s)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distance_is_symmetric_and_rotation_invariant(d in 2usize..20, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let k = 1 + ((d - 1) as f64 * k_frac) as usize;
        let u = random_frame(d, k, seed);
        let v = random_frame(d, k, seed.wrapping_add(1));
        let uv = subspace_distance(&u, &v).unwrap();
        prop_assert!((uv - subspace_distance(&v, &u).unwrap()).abs() < 1e-12);
        prop_assert!(uv >= 0.0 && uv <= (2.0 * k as f64).sqrt() + 1e-12);

        let q = haar_orthogonal(d, &mut machine_rng(seed, 7)).unwrap().into_matrix();
        let qu = Frame::new(&q * u.as_matrix()).unwrap();
        let qv = Frame::new(&q * v.as_matrix()).unwrap();
        prop_assert!((subspace_distance(&qu, &qv).unwrap() - uv).abs() < 1e-10);

        // Right-multiplying by a K x K rotation does not change the span.
        let h = haar_orthogonal(k, &mut machine_rng(seed, 8)).unwrap().into_matrix();
        let uh = Frame::new(u.as_matrix() * h).unwrap();
        prop_assert!(subspace_distance(&u, &uh).unwrap() < 1e-10);
    }

    #[test]
    fn distance_matches_principal_angles_and_projectors(d in 2usize..16, seed in any::<u64>()) {
        let k = 1 + (seed as usize % d);
        let u = random_frame(d, k, seed);
        let v = random_frame(d, k, seed ^ 0xabc);
        let rho = subspace_distance(&u, &v).unwrap();
        let sines = sin_theta(&u, &v).unwrap();
        let from_angles = (2.0 * sines.iter().map(|s| s * s).sum::<f64>()).sqrt();
        prop_assert!((rho - from_angles).abs() < 1e-10);
        let direct = (projection(&u).as_matrix() - projection(&v).as_matrix()).norm();
        prop_assert!((rho - direct).abs() < 1e-10);
    }

    #[test]
    fn eigendecomposition_reconstructs(d in 1usize..30, seed in any::<u64>()) {
        let a = random_symmetric(d, seed);
        let (spec, basis) = sym_eig(&a).unwrap();
        let q = basis.as_matrix();
        let recon = q * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(spec.values())) * q.transpose();
        prop_assert!((recon - a.as_matrix()).amax() < 1e-10 * a.frobenius_norm().max(1.0));
        prop_assert!(basis.orthonormality_error() < 1e-12);
        prop_assert!(spec.values().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn top_k_matches_brute_force(d in 2usize..50, seed in any::<u64>()) {
        let k = 1 + (seed as usize % d.min(6));
        let a = random_symmetric(d, seed);
        let (full, basis) = sym_eig(&a).unwrap();
        // Skip near-ties at the cut where the top-k span is ill-defined.
        prop_assume!(k == d || full.values()[k - 1] - full.values()[k] > 1e-3);
        for solver in [EigenSolver::Auto, EigenSolver::Dense] {
            let (vals, frame) = top_k_eigen_with(&a, k, solver).unwrap();
            for j in 0..k {
                prop_assert!((vals.values()[j] - full.values()[j]).abs() < 1e-9);
            }
            let truth = basis.columns(0, k).unwrap();
            prop_assert!(subspace_distance(&frame, &truth).unwrap() < 1e-6);
        }
    }
}

#[test]
fn iterative_solver_agrees_with_dense_on_large_spiked() {
    let d = 300;
    let mut values = vec![1.0; d];
    values[..4].copy_from_slice(&[40.0, 30.0, 20.0, 10.0]);
    let q = haar_orthogonal(d, &mut machine_rng(5, 0)).unwrap().into_matrix();
    let mut scaled = q.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= values[j];
    }
    let a = SymMatrix::new({
        let m = scaled * q.transpose();
        (&m + m.transpose()) * 0.5
    })
    .unwrap();
    let (_, dense) = top_k_eigen_with(&a, 4, EigenSolver::Dense).unwrap();
    let (vals, iter) = top_k_eigen_with(&a, 4, EigenSolver::Subspace).unwrap();
    assert!(subspace_distance(&dense, &iter).unwrap() < 1e-8);
    assert!((vals.values()[3] - 10.0).abs() < 1e-8);
    let (_, auto) = top_k_eigen(&a, 4).unwrap();
    assert!(subspace_distance(&dense, &auto).unwrap() < 1e-8);
}

/// 1000 random triples across `d in {5, 20, 50}`, `K in {1, 3, 5}` and every
/// admissible window offset, all with `||E|| / gap <= 1/10`.
#[test]
fn dk_inequalities_hold_on_random_triples() {
    let mut violations = Vec::new();
    let mut trial = 0u64;
    for d in [5usize, 20, 50] {
        for k in [1usize, 3, 5] {
            if k > d {
                continue;
            }
            let per = 112;
            for i in 0..per {
                trial += 1;
                let start = (i * 7) % (d - k + 1);
                let window = Window { start, len: k };
                let a = matrix_with_window_gap(d, window, 1.0, trial);
                let eps_target = 0.1 * (0.05 + 0.95 * (i as f64 + 0.5) / per as f64);
                let gap = dpca::linalg::window_gap(&sym_eig(&a).unwrap().0, window).unwrap();
                let e = perturbation(d, eps_target * gap.min(1e6), trial ^ 0xdead);
                let report = check_dk_expansion(&a, &e, window).unwrap();
                assert!(report.in_regime, "eps = {}", report.epsilon);
                assert!(report.projector_residual >= 0.0 && report.frame_residual >= 0.0);
                for v in report.violations() {
                    violations.push((d, k, start, v.clone()));
                }
            }
        }
    }
    assert!(trial >= 1000, "only {trial} triples");
    assert!(violations.is_empty(), "{violations:?}");
}

#[test]
fn projector_residual_decays_quadratically() {
    let mut ratios = Vec::new();
    for t in 0..100u64 {
        let d = [5usize, 20, 50][t as usize % 3];
        // A window covering all of R^d never moves, so its residual is pure roundoff.
        let k = [1usize, 3, 5][(t as usize / 3) % 3].min(d - 1);
        let window = Window { start: (t as usize) % (d - k + 1), len: k };
        let a = matrix_with_window_gap(d, window, 1.0, 500 + t);
        let gap = dpca::linalg::window_gap(&sym_eig(&a).unwrap().0, window).unwrap();
        let e = perturbation(d, 0.01 * gap.min(1e6), 900 + t);
        let r1 = check_dk_expansion(&a, &e, window).unwrap().projector_residual;
        let r2 = check_dk_expansion(&a, &e.scaled(0.5), window).unwrap().projector_residual;
        ratios.push(r1 / r2);
    }
    let bad: Vec<_> = ratios.iter().filter(|r| !(3.5..=4.5).contains(*r)).collect();
    assert!(bad.is_empty(), "ratios outside [3.5, 4.5]: {bad:?}");
}
