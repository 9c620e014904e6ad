use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::local_pca;
use crate::linalg::{subspace_distance, top_k_factored, Frame, SymMatrix};
use crate::models::{sample_partition, CovarianceModel, InnovationKind};

const BATCHES: usize = 10;
const MIN_REPLICATES: usize = 100;

/// Monte Carlo estimate of `Sigma* = E[V_hat V_hat^T]` for one machine.
#[derive(Clone, Debug, Serialize)]
pub struct SigmaStarReport {
    pub replicates: usize,
    pub batches: usize,
    #[serde(skip)]
    pub sigma_star: SymMatrix,
    #[serde(skip)]
    pub frame: Frame,
    /// `rho(V*_K, V_K)` for the top-`K` frame of the estimate.
    pub bias: f64,
    /// Batch-means standard error of `bias` (see [`estimate_sigma_star`]).
    pub bias_se: f64,
    /// Largest `|(V^T Sigma* V)_{ij}|` with `i < K <= j`.
    pub offdiag_max: f64,
    /// Batch-means standard error of each entry of that block, at the arg-max entry.
    pub offdiag_se: f64,
    /// `lambda_K - lambda_{K+1}` of the estimate.
    pub star_gap: f64,
}

/// Averages `replicates` independent local projectors (replicate `b` uses
/// stream `b` of `seed`) and measures how far the result's top-`K` eigenspace
/// sits from the truth.
///
/// Uncertainty comes from 10 batch means. The standard error of `bias` is the
/// first-order propagation of the batch-means error of the off-diagonal block
/// `B = V_perp^T Sigma* V_K`: the eigenspace moves by about `B / gap`, so
/// `se = sqrt(2) ||SE(B)||_F / gap`.
pub fn estimate_sigma_star(
    model: &CovarianceModel,
    kind: &InnovationKind,
    n: usize,
    k: usize,
    replicates: usize,
    seed: u64,
) -> Result<SigmaStarReport> {
    if replicates < MIN_REPLICATES {
        return Err(Error::invalid(format!("need at least {MIN_REPLICATES} replicates, got {replicates}")));
    }
    let d = model.dim();
    if k == 0 || k >= d {
        return Err(Error::invalid(format!("K = {k} must lie in 1..{d}")));
    }
    let basis = model.basis().as_matrix();
    let mut stacked = DMatrix::<f64>::zeros(replicates * k, d);
    // Per batch, the running sum of the block `V_K^T (v v^T) V_perp` in the true eigenbasis.
    let mut batch_blocks = vec![DMatrix::<f64>::zeros(k, d - k); BATCHES];
    let mut batch_counts = [0usize; BATCHES];
    for b in 0..replicates {
        let p = sample_partition(model, kind, n, b, seed)?;
        let v = local_pca(&p, k)?.frame.into_matrix();
        stacked.rows_mut(b * k, k).copy_from(&v.transpose());
        let coords = basis.tr_mul(&v);
        let g = b * BATCHES / replicates;
        batch_blocks[g] += coords.rows(0, k) * coords.rows(k, d - k).transpose();
        batch_counts[g] += 1;
    }
    let scale = 1.0 / replicates as f64;
    let sigma_star = SymMatrix::new(stacked.tr_mul(&stacked) * scale)?;
    // Sigma* has rank at most B K, so its top eigenpairs come cheaply from the stacked frames.
    let (spec, top) = top_k_factored(&stacked, scale, k + 1)?;
    let frame = top.columns(0, k)?;
    let truth = model.top_frame();
    let bias = subspace_distance(&frame, &truth)?;
    let star_gap = spec.values()[k - 1] - spec.values()[k];

    let overall: DMatrix<f64> = batch_blocks.iter().fold(DMatrix::zeros(k, d - k), |acc, b| acc + b) * scale;
    let batch_means: Vec<DMatrix<f64>> = batch_blocks
        .iter()
        .zip(batch_counts)
        .map(|(s, c)| s / c as f64)
        .collect();
    let mut se_sq_sum = 0.0;
    let (mut offdiag_max, mut offdiag_se) = (0.0f64, 0.0);
    for i in 0..k {
        for j in 0..d - k {
            let mean = batch_means.iter().map(|b| b[(i, j)]).sum::<f64>() / BATCHES as f64;
            let var = batch_means.iter().map(|b| (b[(i, j)] - mean).powi(2)).sum::<f64>() / (BATCHES - 1) as f64;
            let se = (var / BATCHES as f64).sqrt();
            se_sq_sum += se * se;
            let value = overall[(i, j)].abs();
            if value > offdiag_max {
                offdiag_max = value;
                offdiag_se = se;
            }
        }
    }
    let bias_se = if star_gap > 0.0 {
        std::f64::consts::SQRT_2 * se_sq_sum.sqrt() / star_gap
    } else {
        f64::INFINITY
    };
    Ok(SigmaStarReport {
        replicates,
        batches: BATCHES,
        sigma_star,
        frame,
        bias,
        bias_se,
        offdiag_max,
        offdiag_se,
        star_gap,
    })
}
