use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{AggregateResult, SubspaceEstimate};
use crate::linalg::{projection, subspace_distance, top_k_eigen, Frame, SymMatrix};
use crate::models::haar_orthogonal;

/// Outcome of a randomized "nothing beats the candidate" check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyReport {
    pub name: String,
    pub candidates: usize,
    pub violations: usize,
    /// Smallest `(candidate objective) - (optimum objective)`; stays `>= -tolerance` on success.
    pub worst_slack: f64,
    pub tolerance: f64,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Random symmetric `P` with `0 <= P <= I` and `trace(P) <= K`.
///
/// Even-numbered draws are rank-`K` projectors (extreme points), the rest
/// have eigenvalues spread over `[0, 1]`.
pub fn random_feasible_projector(d: usize, k: usize, draw: usize, rng: &mut ChaCha8Rng) -> Result<SymMatrix> {
    let q = haar_orthogonal(d, rng)?.into_matrix();
    let mut mu: Vec<f64> = if draw.is_multiple_of(2) {
        (0..d).map(|i| if i < k { 1.0 } else { 0.0 }).collect()
    } else {
        (0..d).map(|_| rng.random::<f64>()).collect()
    };
    let sum: f64 = mu.iter().sum();
    if sum > k as f64 {
        let s = k as f64 / sum;
        mu.iter_mut().for_each(|v| *v *= s);
    }
    let mut scaled = q.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= mu[j];
    }
    Ok(SymMatrix::symmetrized(scaled * q.transpose()))
}

fn inner(a: &SymMatrix, b: &SymMatrix) -> f64 {
    a.as_matrix().component_mul(b.as_matrix()).sum()
}

/// The projector onto the top-`K` eigenspace of `s` maximizes `<P, S>` over
/// `{0 <= P <= I, trace(P) <= K}` when the top `K` eigenvalues of `s` are
/// nonnegative. Compares it against `candidates` random feasible points.
pub fn check_sdp_optimality(s: &SymMatrix, k: usize, candidates: usize, rng: &mut ChaCha8Rng) -> Result<PropertyReport> {
    let (_, top) = top_k_eigen(s, k)?;
    let best = inner(&projection(&top), s);
    let tolerance = 1e-9 * s.frobenius_norm().max(1.0);
    let mut worst = f64::INFINITY;
    let mut violations = 0;
    for c in 0..candidates {
        let p = random_feasible_projector(s.dim(), k, c, rng)?;
        let slack = best - inner(&p, s);
        worst = worst.min(slack);
        if slack < -tolerance {
            violations += 1;
        }
    }
    Ok(PropertyReport {
        name: "sdp_optimality".into(),
        candidates,
        violations,
        worst_slack: worst,
        tolerance,
    })
}

/// `V_tilde` minimizes `sum_l rho^2(U, V_l)` over rank-`K` frames `U`.
///
/// Half of the candidates are Haar-random frames, the other half small random
/// rotations of `V_tilde` itself (the hard cases).
pub fn check_center_property(
    estimates: &[SubspaceEstimate],
    result: &AggregateResult,
    candidates: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PropertyReport> {
    if estimates.is_empty() {
        return Err(Error::invalid("no estimates"));
    }
    let k = result.frame.rank();
    let d = result.frame.dim();
    let cost = |u: &Frame| -> Result<f64> {
        let mut acc = 0.0;
        for e in estimates {
            let v = if e.rank() == k { e.frame.clone() } else { e.frame.columns(0, k)? };
            acc += subspace_distance(u, &v)?.powi(2);
        }
        Ok(acc)
    };
    let best = cost(&result.frame)?;
    let tolerance = 1e-8;
    let mut worst = f64::INFINITY;
    let mut violations = 0;
    for c in 0..candidates {
        let u = if c % 2 == 0 {
            haar_orthogonal(d, rng)?.columns(0, k)?
        } else {
            let scale = 10f64.powf(-1.0 - 4.0 * rng.random::<f64>());
            let noise = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal) * scale);
            Frame::orthonormalize(result.frame.as_matrix() + noise)?
        };
        let slack = cost(&u)? - best;
        worst = worst.min(slack);
        if slack < -tolerance {
            violations += 1;
        }
    }
    Ok(PropertyReport {
        name: "center_property".into(),
        candidates,
        violations,
        worst_slack: worst,
        tolerance,
    })
}
