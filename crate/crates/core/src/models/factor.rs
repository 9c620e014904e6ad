use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{machine_rng, CovarianceModel, Partition};
use crate::error::{Error, Result};
use crate::linalg::{subspace_distance, sym_eig, Frame, SymMatrix};

/// Largest allowed distance between a loading span and the common eigenspace.
const COMMON_SPAN_TOLERANCE: f64 = 1e-8;

/// Per-machine factor models `X = B f + u` whose loadings share one column space.
#[derive(Clone, Debug)]
pub struct FactorModelSpec {
    loadings: Vec<DMatrix<f64>>,
    residual_covs: Vec<SymMatrix>,
    residual_roots: Vec<DMatrix<f64>>,
    common: Frame,
}

impl FactorModelSpec {
    /// `loadings[l]` is `d x K` with full column rank; `residual_covs[l]` is
    /// PSD `d x d`; `common` is the shared `d x K` frame.
    pub fn new(loadings: Vec<DMatrix<f64>>, residual_covs: Vec<SymMatrix>, common: Frame) -> Result<Self> {
        if loadings.is_empty() || loadings.len() != residual_covs.len() {
            return Err(Error::invalid(format!(
                "need one residual covariance per loading matrix ({} vs {})",
                loadings.len(),
                residual_covs.len()
            )));
        }
        let (d, k) = (common.dim(), common.rank());
        let mut residual_roots = Vec::with_capacity(loadings.len());
        for (l, (b, su)) in loadings.iter().zip(&residual_covs).enumerate() {
            if b.shape() != (d, k) || su.dim() != d {
                return Err(Error::invalid(format!(
                    "machine {l}: loadings {}x{} and residual {}x{} do not match d = {d}, K = {k}",
                    b.nrows(),
                    b.ncols(),
                    su.dim(),
                    su.dim()
                )));
            }
            let span = Frame::orthonormalize(b.clone())?;
            let rho = subspace_distance(&span, &common)?;
            if rho > COMMON_SPAN_TOLERANCE {
                return Err(Error::invalid(format!(
                    "machine {l}: loading span is {rho:.3e} away from the common eigenspace"
                )));
            }
            residual_roots.push(psd_sqrt(su, l)?);
        }
        Ok(FactorModelSpec {
            loadings,
            residual_covs,
            residual_roots,
            common,
        })
    }

    /// `B_l = V diag(sqrt(strengths[l]))` and `Sigma_u = residual_scale * I`.
    pub fn isotropic(common: Frame, strengths: &[Vec<f64>], residual_scale: &[f64]) -> Result<Self> {
        if strengths.len() != residual_scale.len() {
            return Err(Error::invalid("need one residual scale per machine"));
        }
        let (d, k) = (common.dim(), common.rank());
        let mut loadings = Vec::new();
        let mut residuals = Vec::new();
        for (s, &sigma) in strengths.iter().zip(residual_scale) {
            if s.len() != k || s.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::invalid(format!("need {k} positive factor strengths per machine")));
            }
            if !(sigma >= 0.0) {
                return Err(Error::invalid("residual scale must be nonnegative"));
            }
            let mut b = common.as_matrix().clone();
            for (j, mut col) in b.column_iter_mut().enumerate() {
                col *= s[j].sqrt();
            }
            loadings.push(b);
            residuals.push(SymMatrix::identity(d).scaled(sigma));
        }
        Self::new(loadings, residuals, common)
    }

    pub fn machines(&self) -> usize {
        self.loadings.len()
    }

    pub fn dim(&self) -> usize {
        self.common.dim()
    }

    pub fn k(&self) -> usize {
        self.common.rank()
    }

    pub fn common(&self) -> &Frame {
        &self.common
    }

    pub fn loadings(&self, machine: usize) -> &DMatrix<f64> {
        &self.loadings[machine]
    }

    pub fn residual_cov(&self, machine: usize) -> &SymMatrix {
        &self.residual_covs[machine]
    }

    /// Eigenvalues of `B^T B` (the factor strengths `Lambda_K`), descending.
    pub fn factor_strengths(&self, machine: usize) -> Result<Vec<f64>> {
        let b = &self.loadings[machine];
        let (s, _) = sym_eig(&SymMatrix::symmetrized(b.transpose() * b))?;
        Ok(s.values().to_vec())
    }

    /// `B B^T + Sigma_u`.
    pub fn covariance(&self, machine: usize) -> SymMatrix {
        let b = &self.loadings[machine];
        SymMatrix::symmetrized(b * b.transpose() + self.residual_covs[machine].as_matrix())
    }

    /// Population model of one machine, with target rank `K`.
    pub fn population_model(&self, machine: usize) -> Result<CovarianceModel> {
        let (s, v) = sym_eig(&self.covariance(machine))?;
        CovarianceModel::new(s, v, self.k())
    }
}

fn psd_sqrt(m: &SymMatrix, machine: usize) -> Result<DMatrix<f64>> {
    let (s, v) = sym_eig(m)?;
    let scale = s.values()[0].abs().max(1.0);
    let last = s.values()[s.len() - 1];
    if last < -1e-10 * scale {
        return Err(Error::invalid(format!(
            "machine {machine}: residual covariance has eigenvalue {last}"
        )));
    }
    let mut w = v.as_matrix().clone();
    for (j, mut col) in w.column_iter_mut().enumerate() {
        col *= s.values()[j].max(0.0).sqrt();
    }
    Ok(&w * v.as_matrix().transpose())
}

/// `n` samples `X = B f + Sigma_u^{1/2} g` with `f`, `g` standard normal.
pub fn factor_model(spec: &FactorModelSpec, n: usize, machine: usize, master_seed: u64) -> Result<Partition> {
    if machine >= spec.machines() {
        return Err(Error::invalid(format!(
            "machine {machine} out of range for a {}-machine factor model",
            spec.machines()
        )));
    }
    if n == 0 {
        return Err(Error::invalid("a partition needs at least one sample"));
    }
    let (d, k) = (spec.dim(), spec.k());
    let mut rng = machine_rng(master_seed, machine);
    let f = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let g = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let data = f * spec.loadings[machine].transpose() + g * &spec.residual_roots[machine];
    Partition::new(machine, master_seed, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::top_k_eigen;

    fn common() -> Frame {
        Frame::orthonormalize(DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, -1.0])).unwrap()
    }

    #[test]
    fn zero_residual_samples_lie_in_loading_span() {
        let spec = FactorModelSpec::isotropic(common(), &[vec![5.0, 2.0]], &[0.0]).unwrap();
        let p = factor_model(&spec, 30, 0, 7).unwrap();
        let v = common();
        let x = p.data().transpose();
        let residual = &x - v.as_matrix() * v.as_matrix().tr_mul(&x);
        assert!(residual.amax() < 1e-12);
    }

    #[test]
    fn population_eigenspace_is_loading_span() {
        let spec = FactorModelSpec::isotropic(common(), &[vec![5.0, 2.0], vec![3.0, 1.5]], &[0.5, 1.0]).unwrap();
        for l in 0..2 {
            let (_, top) = top_k_eigen(&spec.covariance(l), 2).unwrap();
            assert!(subspace_distance(&top, &common()).unwrap() < 1e-10);
        }
        let s = spec.factor_strengths(1).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-12 && (s[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn mismatched_spans_rejected() {
        let b = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let err = FactorModelSpec::new(vec![b], vec![SymMatrix::identity(4)], common());
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }
}
