use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{sign_normalize_columns, Frame, Spectrum, SymMatrix};
use crate::error::{Error, Result};

/// How [`top_k_eigen_with`] computes the leading eigenpairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EigenSolver {
    /// Subspace iteration when the block is small relative to `d`, dense otherwise.
    /// Falls back to the dense path whenever the iteration cannot certify its answer.
    #[default]
    Auto,
    /// Full tridiagonalization + implicit QR.
    Dense,
    /// Block power iteration with Rayleigh-Ritz; errors if it does not converge.
    Subspace,
}

/// Smallest dimension for which `Auto` tries the iterative path.
const SUBSPACE_MIN_DIM: usize = 64;
/// Relative residual `||A x - theta x|| / ||A||` accepted by subspace iteration.
const SUBSPACE_TOLERANCE: f64 = 1e-10;
const SUBSPACE_SEED: u64 = 0x5eed_b10c;
/// Sweeps between convergence-rate checkpoints.
const CHECK_EVERY: usize = 8;

/// Full eigendecomposition, eigenvalues descending, each eigenvector sign-normalized.
pub fn sym_eig(mat: &SymMatrix) -> Result<(Spectrum, Frame)> {
    let (values, vectors) = dense_eig(mat.as_matrix())?;
    Ok((Spectrum::new(values)?, Frame::from_matrix_unchecked(vectors)))
}

pub fn top_k_eigen(mat: &SymMatrix, k: usize) -> Result<(Spectrum, Frame)> {
    top_k_eigen_with(mat, k, EigenSolver::Auto)
}

pub fn top_k_eigen_with(mat: &SymMatrix, k: usize, solver: EigenSolver) -> Result<(Spectrum, Frame)> {
    let d = mat.dim();
    if k == 0 || k > d {
        return Err(Error::invalid(format!("K = {k} must lie in 1..={d}")));
    }
    let (values, vectors) = top_k_raw(mat.as_matrix(), k, solver)?;
    Ok((Spectrum::new(values)?, Frame::from_matrix_unchecked(vectors)))
}

/// Leading eigenpairs of `scale * B^T B` for a row factor `B` (`r x d`).
///
/// When `r < d` the work happens on the `r x r` Gram matrix `scale * B B^T`
/// and eigenvectors are mapped back through `B^T`; this is exact and much
/// cheaper when few samples (or few stacked frames) span the matrix.
pub fn top_k_factored(rows: &DMatrix<f64>, scale: f64, k: usize) -> Result<(Spectrum, Frame)> {
    let (r, d) = rows.shape();
    if k == 0 || k > d {
        return Err(Error::invalid(format!("K = {k} must lie in 1..={d}")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid("factor scale must be positive and finite"));
    }
    if r >= d || k > r {
        let full = SymMatrix::symmetrized((rows.transpose() * rows) * scale);
        return top_k_eigen(&full, k);
    }
    let gram = SymMatrix::symmetrized((rows * rows.transpose()) * scale);
    let (mu, u) = top_k_raw(gram.as_matrix(), k, EigenSolver::Auto)?;
    if !(mu[k - 1] > 1e-12 * mu[0].abs().max(f64::MIN_POSITIVE)) {
        // Rank below k: the null-space directions are not reachable through B^T.
        let full = SymMatrix::symmetrized((rows.transpose() * rows) * scale);
        return top_k_eigen(&full, k);
    }
    let mut v = rows.tr_mul(&u);
    for (j, mut col) in v.column_iter_mut().enumerate() {
        col *= (scale / mu[j]).sqrt();
    }
    if super::orthonormality_error(&v) > 1e-12 {
        v = Frame::orthonormalize(v)?.into_matrix();
    }
    sign_normalize_columns(&mut v);
    Ok((Spectrum::new(mu)?, Frame::from_matrix_unchecked(v)))
}

fn top_k_raw(a: &DMatrix<f64>, k: usize, solver: EigenSolver) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let d = a.nrows();
    match solver {
        EigenSolver::Dense => dense_top_k(a, k),
        EigenSolver::Subspace => subspace_top_k(a, k, 10 * d),
        EigenSolver::Auto => {
            if d >= SUBSPACE_MIN_DIM && 3 * block_size(k, d) <= d {
                // Past ~d/2 sweeps the dense path is cheaper.
                match subspace_top_k(a, k, d / 2) {
                    Ok(res) => return Ok(res),
                    Err(Error::NoConvergence(msg)) => {
                        log::debug!("subspace iteration fell back to dense: {msg}");
                    }
                    Err(e) => return Err(e),
                }
            }
            dense_top_k(a, k)
        }
    }
}

fn dense_top_k(a: &DMatrix<f64>, k: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (mut values, vectors) = dense_eig(a)?;
    values.truncate(k);
    Ok((values, vectors.columns(0, k).into_owned()))
}

fn dense_eig(a: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    let d = a.nrows();
    let eig = SymmetricEigen::try_new(a.clone(), f64::EPSILON, 100 * d.max(10))
        .ok_or_else(|| Error::NoConvergence("symmetric QR iteration".into()))?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    sign_normalize_columns(&mut vectors);
    Ok((values, vectors))
}

fn block_size(k: usize, d: usize) -> usize {
    (k + k.max(8)).min(d)
}

/// Block power iteration with a Rayleigh-Ritz step every sweep.
///
/// Converges to the largest-magnitude invariant subspace, so the answer is
/// only accepted when the k-th Ritz value dominates every Ritz value's
/// magnitude floor in the block.
fn subspace_top_k(a: &DMatrix<f64>, k: usize, max_iter: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let d = a.nrows();
    let b = block_size(k, d);
    let mut rng = ChaCha8Rng::seed_from_u64(SUBSPACE_SEED);
    let start = DMatrix::from_fn(d, b, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut q = start.qr().q();

    // Residual at the last checkpoint, used to project how many sweeps remain.
    let mut checkpoint: Option<f64> = None;
    for sweep in 0..max_iter {
        let z = a * &q;
        let t = SymMatrix::symmetrized(q.tr_mul(&z));
        let (theta, w) = dense_eig(t.as_matrix())?;
        let x = &q * &w;
        let ax = &z * &w;
        let scale = theta
            .iter()
            .fold(0.0f64, |m, t| m.max(t.abs()))
            .max(f64::MIN_POSITIVE);
        let residual = (0..k)
            .map(|j| (ax.column(j) - x.column(j) * theta[j]).norm())
            .fold(0.0f64, f64::max)
            / scale;
        if residual <= SUBSPACE_TOLERANCE {
            let floor = theta.iter().fold(f64::INFINITY, |m, t| m.min(t.abs()));
            if theta[k - 1] < floor {
                return Err(Error::NoConvergence(
                    "block captured large negative eigenvalues".into(),
                ));
            }
            let mut vectors = x.columns(0, k).into_owned();
            sign_normalize_columns(&mut vectors);
            return Ok((theta[..k].to_vec(), vectors));
        }
        if sweep % CHECK_EVERY == CHECK_EVERY - 1 {
            if let Some(prev) = checkpoint {
                let rate = (residual / prev).powf(1.0 / CHECK_EVERY as f64);
                let needed = (SUBSPACE_TOLERANCE / residual).ln() / rate.ln();
                if !(rate < 1.0) || sweep as f64 + needed > max_iter as f64 {
                    return Err(Error::NoConvergence(format!(
                        "residual {residual:.1e} shrinking by {rate:.4} per sweep"
                    )));
                }
            }
            checkpoint = Some(residual);
        }
        q = ax.qr().q();
    }
    Err(Error::NoConvergence(format!(
        "subspace iteration exceeded {max_iter} sweeps"
    )))
}
