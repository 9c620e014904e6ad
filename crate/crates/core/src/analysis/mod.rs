//! Error-bound reference curves, perturbation checks, bias estimation and
//! the scaling-law regression.

mod bias;
mod dk;
mod properties;
mod regression;

pub use bias::{estimate_sigma_star, SigmaStarReport};
pub use dk::{check_dk_expansion, BoundCheck, DKReport, DK_REGIME};
pub use properties::{check_center_property, check_sdp_optimality, random_feasible_projector, PropertyReport};
pub use regression::{fit_scaling_regression, ExperimentRecord, RegressionFit};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Spectrum;
use crate::models::{CovarianceModel, FactorModelSpec};

/// `(Delta, kappa, r)` of a covariance at target rank `K`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModelQuantities {
    pub gap: f64,
    pub condition_number: f64,
    pub effective_rank: f64,
}

pub fn model_quantities(model: &CovarianceModel, k: usize) -> Result<ModelQuantities> {
    spectrum_quantities(model.spectrum(), k)
}

pub fn spectrum_quantities(spectrum: &Spectrum, k: usize) -> Result<ModelQuantities> {
    let d = spectrum.len();
    if k == 0 || k > d {
        return Err(Error::invalid(format!("K = {k} must lie in 1..={d}")));
    }
    let gap = spectrum.gap_after(k);
    if !(gap > 0.0) {
        return Err(Error::gap(format!("lambda_{k} - lambda_{} = {gap}", k + 1)));
    }
    let top = spectrum.values()[0];
    Ok(ModelQuantities {
        gap,
        condition_number: top / gap,
        effective_rank: spectrum.sum() / top,
    })
}

/// Which error bound to evaluate.
#[derive(Clone, Debug)]
pub enum Regime {
    /// Identical machines, symmetric innovation: no bias term.
    Symmetric,
    /// Identical machines, general sub-Gaussian data.
    General,
    /// One model per machine sharing the top-`K` eigenspace.
    Heterogeneous { models: Vec<CovarianceModel>, symmetric: bool },
    /// Per-machine factor models; adds the residual-distortion term.
    Factor { spec: FactorModelSpec, symmetric: bool },
}

impl Regime {
    fn name(&self) -> &'static str {
        match self {
            Regime::Symmetric => "symmetric",
            Regime::General => "general",
            Regime::Heterogeneous { .. } => "heterogeneous",
            Regime::Factor { .. } => "factor",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MachineBound {
    pub machine: usize,
    pub condition_number: f64,
    pub effective_rank: f64,
    /// `S_l = kappa_l sqrt(K r_l / N)`.
    pub variance: f64,
    /// `B_l = kappa_l^2 sqrt(K) r_l / n` (0 under symmetric innovation).
    pub bias: f64,
}

/// Shape-only error bound terms; every universal constant is set to 1.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub regime: String,
    pub k: usize,
    pub m: usize,
    pub n: usize,
    pub total_samples: usize,
    /// `sqrt(mean_l S_l^2)`; equals `kappa sqrt(K r / N)` for identical machines.
    pub variance: f64,
    /// `mean_l B_l`; equals `kappa^2 sqrt(K) r / n` for identical machines.
    pub bias: f64,
    /// `(sqrt(K) / m) sum_l ||Sigma_u||_2 / lambda_K(Lambda_K)`; 0 outside the factor regime.
    pub heterogeneity: f64,
    pub total: f64,
    pub machines: Vec<MachineBound>,
}

/// Reference error curve at `(m, n)`. For the homogeneous regimes `model`
/// describes every machine; the heterogeneous regimes carry their own models
/// and must list exactly `m` of them.
pub fn theoretical_error_curve(model: &CovarianceModel, k: usize, m: usize, n: usize, regime: &Regime) -> Result<BoundReport> {
    if m == 0 || n == 0 {
        return Err(Error::invalid("m and n must be positive"));
    }
    let (models, symmetric): (Vec<CovarianceModel>, bool) = match regime {
        Regime::Symmetric => (vec![model.clone(); m], true),
        Regime::General => (vec![model.clone(); m], false),
        Regime::Heterogeneous { models, symmetric } => (models.clone(), *symmetric),
        Regime::Factor { spec, symmetric } => (
            (0..spec.machines()).map(|l| spec.population_model(l)).collect::<Result<_>>()?,
            *symmetric,
        ),
    };
    if models.len() != m {
        return Err(Error::invalid(format!("regime lists {} machines, m = {m}", models.len())));
    }
    let big_n = m * n;
    let kf = k as f64;
    let mut machines = Vec::with_capacity(m);
    for (l, model) in models.iter().enumerate() {
        let q = model_quantities(model, k)?;
        let variance = q.condition_number * (kf * q.effective_rank / big_n as f64).sqrt();
        let bias = if symmetric {
            0.0
        } else {
            q.condition_number.powi(2) * kf.sqrt() * q.effective_rank / n as f64
        };
        machines.push(MachineBound {
            machine: l,
            condition_number: q.condition_number,
            effective_rank: q.effective_rank,
            variance,
            bias,
        });
    }
    let variance = (machines.iter().map(|b| b.variance.powi(2)).sum::<f64>() / m as f64).sqrt();
    let bias = machines.iter().map(|b| b.bias).sum::<f64>() / m as f64;
    let heterogeneity = match regime {
        Regime::Factor { spec, .. } => {
            let mut acc = 0.0;
            for l in 0..m {
                let resid = spec.residual_cov(l).spectral_norm()?;
                let strengths = spec.factor_strengths(l)?;
                acc += resid / strengths[k - 1];
            }
            kf.sqrt() * acc / m as f64
        }
        _ => 0.0,
    };
    Ok(BoundReport {
        regime: regime.name().to_string(),
        k,
        m,
        n,
        total_samples: big_n,
        variance,
        bias,
        heterogeneity,
        total: variance + bias + heterogeneity,
        machines,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Frame;
    use crate::models::spiked_model;

    #[test]
    fn spiked_quantities_match_closed_form() {
        for (d, lambda) in [(10, 50.0), (200, 100.0), (7, 4.5)] {
            let q = model_quantities(&spiked_model(d, lambda).unwrap(), 3).unwrap();
            let gap = lambda / 4.0 - 1.0;
            assert!((q.gap - gap).abs() < 1e-12);
            assert!((q.condition_number - lambda / gap).abs() < 1e-9);
            assert!((q.effective_rank - (1.75 * lambda + d as f64 - 3.0) / lambda).abs() < 1e-12);
        }
    }

    #[test]
    fn single_spike_quantities() {
        let (lambda, d) = (3.0, 20);
        let mut v = vec![1.0; d];
        v[0] = lambda;
        let m = CovarianceModel::diagonal(v, 1).unwrap();
        let q = model_quantities(&m, 1).unwrap();
        assert!((q.effective_rank - (lambda + d as f64 - 1.0) / lambda).abs() < 1e-12);
        assert!((q.condition_number - lambda / (lambda - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn identity_has_no_gap() {
        let m = CovarianceModel::diagonal(vec![1.0; 5], 5).unwrap();
        assert!(matches!(model_quantities(&m, 1), Err(Error::DegenerateGap(_))));
    }

    #[test]
    fn curve_shapes() {
        let model = spiked_model(50, 50.0).unwrap();
        let sym = theoretical_error_curve(&model, 3, 4, 100, &Regime::Symmetric).unwrap();
        assert_eq!(sym.bias, 0.0);
        let doubled = theoretical_error_curve(&model, 3, 8, 100, &Regime::Symmetric).unwrap();
        assert!((doubled.variance.powi(2) * 2.0 - sym.variance.powi(2)).abs() < 1e-12);

        let general = theoretical_error_curve(&model, 3, 4, 100, &Regime::General).unwrap();
        let q = model_quantities(&model, 3).unwrap();
        let expected = q.condition_number.powi(2) * 3f64.sqrt() * q.effective_rank / 100.0;
        assert!((general.bias - expected).abs() < 1e-12);
        assert!((general.variance - q.condition_number * (3.0 * q.effective_rank / 400.0).sqrt()).abs() < 1e-12);

        let het = Regime::Heterogeneous {
            models: vec![model.clone(); 4],
            symmetric: false,
        };
        let h = theoretical_error_curve(&model, 3, 4, 100, &het).unwrap();
        assert!((h.variance - general.variance).abs() < 1e-12);
        assert!((h.bias - general.bias).abs() < 1e-12);
    }

    #[test]
    fn factor_term() {
        let common = Frame::standard(6, &[0, 1]).unwrap();
        let spec = FactorModelSpec::isotropic(common, &[vec![9.0, 4.0], vec![16.0, 8.0]], &[0.5, 1.0]).unwrap();
        let model = spec.population_model(0).unwrap();
        let r = theoretical_error_curve(&model, 2, 2, 50, &Regime::Factor { spec, symmetric: true }).unwrap();
        let expected = 2f64.sqrt() / 2.0 * (0.5 / 4.0 + 1.0 / 8.0);
        assert!((r.heterogeneity - expected).abs() < 1e-12);
    }
}
