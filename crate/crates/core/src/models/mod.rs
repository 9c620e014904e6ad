//! Seeded data generators.
//!
//! Every generator draws from a per-machine ChaCha stream: the key comes from
//! the master seed and the stream id is the machine index, so partitions for
//! different machines never share random draws and can be produced in any
//! order or concurrently.

mod factor;
mod partition;

pub use factor::{factor_model, FactorModelSpec};
pub use partition::{Partition, HEADER_BYTES as PARTITION_HEADER_BYTES};

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{Frame, Spectrum, SymMatrix};

/// Random stream for machine `machine` under `master_seed`.
pub fn machine_rng(master_seed: u64, machine: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(machine as u64);
    rng
}

/// Mixes several integers into one seed (SplitMix64 finalizer chain).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Population covariance `Sigma = V diag(lambda) V^T` with a target rank `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceModel {
    spectrum: Spectrum,
    basis: Frame,
    k: usize,
    identity_basis: bool,
}

impl CovarianceModel {
    /// Requires a nonnegative spectrum of length `d`, a full `d x d` basis and
    /// a positive `K`-th eigengap when `K < d`.
    pub fn new(spectrum: Spectrum, basis: Frame, k: usize) -> Result<Self> {
        let d = spectrum.len();
        if basis.dim() != d || basis.rank() != d {
            return Err(Error::invalid(format!(
                "basis must be {d}x{d}, got {}x{}",
                basis.dim(),
                basis.rank()
            )));
        }
        if k == 0 || k > d {
            return Err(Error::invalid(format!("K = {k} must lie in 1..={d}")));
        }
        if spectrum.values()[d - 1] < 0.0 {
            return Err(Error::invalid("covariance spectrum must be nonnegative"));
        }
        if spectrum.values()[0] <= 0.0 {
            return Err(Error::invalid("covariance must be nonzero"));
        }
        if k < d && !(spectrum.gap_after(k) > 0.0) {
            return Err(Error::gap(format!(
                "lambda_{k} = lambda_{} = {}",
                k + 1,
                spectrum.values()[k]
            )));
        }
        let identity_basis = basis
            .as_matrix()
            .column_iter()
            .enumerate()
            .all(|(j, col)| col.iter().enumerate().all(|(i, &x)| x == if i == j { 1.0 } else { 0.0 }));
        Ok(CovarianceModel {
            spectrum,
            basis,
            k,
            identity_basis,
        })
    }

    pub fn diagonal(values: Vec<f64>, k: usize) -> Result<Self> {
        let d = values.len();
        Self::new(Spectrum::new(values)?, Frame::identity(d), k)
    }

    pub fn dim(&self) -> usize {
        self.spectrum.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    pub fn basis(&self) -> &Frame {
        &self.basis
    }

    /// `V_K`, the leading `K` eigenvectors.
    pub fn top_frame(&self) -> Frame {
        self.basis.columns(0, self.k).expect("k validated at construction")
    }

    /// `Delta = lambda_K - lambda_{K+1}` (with `lambda_{d+1} = 0`).
    pub fn gap(&self) -> f64 {
        self.spectrum.gap_after(self.k)
    }

    /// `kappa = lambda_1 / Delta`.
    pub fn condition_number(&self) -> f64 {
        self.spectrum.values()[0] / self.gap()
    }

    /// `r = Tr(Sigma) / lambda_1`.
    pub fn effective_rank(&self) -> f64 {
        self.spectrum.sum() / self.spectrum.values()[0]
    }

    pub fn covariance(&self) -> SymMatrix {
        let v = self.basis.as_matrix();
        let mut scaled = v.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.spectrum.values()[j];
        }
        SymMatrix::symmetrized(scaled * v.transpose())
    }

    /// Same covariance, different target rank.
    pub fn with_k(&self, k: usize) -> Result<Self> {
        Self::new(self.spectrum.clone(), self.basis.clone(), k)
    }
}

/// Spiked model `diag(lambda, lambda/2, lambda/4, 1, ..., 1)` with `K = 3`.
pub fn spiked_model(d: usize, lambda: f64) -> Result<CovarianceModel> {
    if d < 4 {
        return Err(Error::gap(format!(
            "spiked model needs d >= 4 for a bulk eigenvalue, got d = {d}"
        )));
    }
    if !(lambda > 4.0) || !lambda.is_finite() {
        return Err(Error::gap(format!(
            "lambda = {lambda} leaves no gap (need lambda > 4)"
        )));
    }
    let mut values = vec![1.0; d];
    values[0] = lambda;
    values[1] = lambda / 2.0;
    values[2] = lambda / 4.0;
    CovarianceModel::diagonal(values, 3)
}

/// Eigengap of the spiked model, `lambda / 4 - 1`.
pub fn spiked_gap(lambda: f64) -> f64 {
    lambda / 4.0 - 1.0
}

/// Inverse of [`spiked_gap`].
pub fn spiked_lambda_for_gap(delta: f64) -> f64 {
    4.0 * (delta + 1.0)
}

/// A symmetric unit-variance distribution for the entries of `Z`.
#[derive(Clone)]
pub struct CustomEntries {
    name: String,
    draw: Arc<dyn Fn(&mut ChaCha8Rng) -> f64 + Send + Sync>,
}

impl CustomEntries {
    /// The caller guarantees the distribution is symmetric about 0 with unit variance.
    pub fn new(name: impl Into<String>, draw: impl Fn(&mut ChaCha8Rng) -> f64 + Send + Sync + 'static) -> Self {
        CustomEntries {
            name: name.into(),
            draw: Arc::new(draw),
        }
    }

    /// Uniform on `[-sqrt(3), sqrt(3)]`.
    pub fn uniform() -> Self {
        let a = 3f64.sqrt();
        Self::new("uniform", move |rng| rng.random_range(-a..a))
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Debug for CustomEntries {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomEntries").field("name", &self.name).finish()
    }
}

/// Distribution of the whitened vector `Z = Lambda^{-1/2} V^T X`.
///
/// All kinds have `E Z = 0`, `E Z Z^T = I`, and are invariant under flipping
/// the sign of any single coordinate (symmetric innovation).
#[derive(Clone, Debug)]
pub enum InnovationKind {
    /// i.i.d. standard normal entries.
    Gaussian,
    /// i.i.d. `+-1` entries.
    Rademacher,
    /// With probability 1/2 `Z = sqrt(2) Y e_1` (`Y` Rademacher), otherwise
    /// `Z = (0, sqrt(2(d-1)) S)` with `S` uniform on the unit sphere of `R^{d-1}`.
    /// Under `diag(lambda, 1, ..., 1)` this is the adversarial family `D(lambda)`.
    SphereMixture,
    /// i.i.d. entries from a caller-supplied symmetric law.
    Custom(CustomEntries),
}

impl InnovationKind {
    pub fn name(&self) -> &str {
        match self {
            InnovationKind::Gaussian => "gaussian",
            InnovationKind::Rademacher => "rademacher",
            InnovationKind::SphereMixture => "sphere-mixture",
            InnovationKind::Custom(c) => c.name(),
        }
    }

    /// Whether `Z` and `Z` with one coordinate sign-flipped share a distribution.
    /// True for every built-in kind; for `Custom` it is the caller's contract.
    pub fn satisfies_symmetric_innovation(&self) -> bool {
        true
    }

    fn fill_row(&self, rng: &mut ChaCha8Rng, row: &mut [f64]) {
        match self {
            InnovationKind::Gaussian => {
                for z in row.iter_mut() {
                    *z = rng.sample(StandardNormal);
                }
            }
            InnovationKind::Rademacher => {
                for z in row.iter_mut() {
                    *z = if rng.random::<bool>() { 1.0 } else { -1.0 };
                }
            }
            InnovationKind::SphereMixture => {
                let d = row.len();
                row.fill(0.0);
                if !rng.random::<bool>() {
                    row[0] = if rng.random::<bool>() {
                        std::f64::consts::SQRT_2
                    } else {
                        -std::f64::consts::SQRT_2
                    };
                } else {
                    let mut norm2 = 0.0;
                    while norm2 == 0.0 {
                        norm2 = 0.0;
                        for z in row[1..].iter_mut() {
                            *z = rng.sample(StandardNormal);
                            norm2 += *z * *z;
                        }
                    }
                    let scale = (2.0 * (d - 1) as f64 / norm2).sqrt();
                    row[1..].iter_mut().for_each(|z| *z *= scale);
                }
            }
            InnovationKind::Custom(c) => {
                for z in row.iter_mut() {
                    *z = (c.draw)(rng);
                }
            }
        }
    }
}

/// Whitened draws `Z` (`n x d`, rows i.i.d.) for one machine.
pub fn sample_innovations(kind: &InnovationKind, d: usize, n: usize, machine: usize, master_seed: u64) -> Result<DMatrix<f64>> {
    if matches!(kind, InnovationKind::SphereMixture) && d < 2 {
        return Err(Error::invalid("sphere mixture needs d >= 2"));
    }
    let mut rng = machine_rng(master_seed, machine);
    // Column i of `zt` is sample i, so each draw is written contiguously.
    let mut zt = DMatrix::zeros(d, n);
    for mut col in zt.column_iter_mut() {
        kind.fill_row(&mut rng, col.as_mut_slice());
    }
    Ok(zt.transpose())
}

/// `n` rows `X = V Lambda^{1/2} Z` for machine `machine`.
pub fn sample_partition(
    model: &CovarianceModel,
    kind: &InnovationKind,
    n: usize,
    machine: usize,
    master_seed: u64,
) -> Result<Partition> {
    if n == 0 {
        return Err(Error::invalid("a partition needs at least one sample"));
    }
    let d = model.dim();
    let mut z = sample_innovations(kind, d, n, machine, master_seed)?;
    let roots: Vec<f64> = model.spectrum().values().iter().map(|l| l.sqrt()).collect();
    let data = if model.identity_basis {
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col *= roots[j];
        }
        z
    } else {
        // Rows: x^T = z^T Lambda^{1/2} V^T.
        let mut factor = model.basis().as_matrix().transpose();
        for (j, mut row) in factor.row_iter_mut().enumerate() {
            row *= roots[j];
        }
        z * factor
    };
    Partition::new(machine, master_seed, data)
}

/// Draws from `D(lambda)`: population covariance `diag(lambda, 1, ..., 1)`.
pub fn sample_adversarial(lambda: f64, d: usize, n: usize, machine: usize, master_seed: u64) -> Result<Partition> {
    let model = adversarial_model(lambda, d)?;
    sample_partition(&model, &InnovationKind::SphereMixture, n, machine, master_seed)
}

/// `diag(lambda, 1, ..., 1)` with `K = 1`, the population covariance of `D(lambda)`.
pub fn adversarial_model(lambda: f64, d: usize) -> Result<CovarianceModel> {
    if !(lambda >= 2.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("D(lambda) needs lambda >= 2, got {lambda}")));
    }
    if d < 2 {
        return Err(Error::invalid("D(lambda) needs d >= 2"));
    }
    let mut values = vec![1.0; d];
    values[0] = lambda;
    CovarianceModel::diagonal(values, 1)
}

/// Models sharing one random top-`K` eigenspace; bulk bases are rotated
/// independently per machine.
pub fn heterogeneous_common_eigenspace(
    d: usize,
    k: usize,
    spectra: &[Spectrum],
    basis_seed: u64,
) -> Result<Vec<CovarianceModel>> {
    if spectra.is_empty() {
        return Err(Error::invalid("need at least one spectrum"));
    }
    if k == 0 || k > d {
        return Err(Error::invalid(format!("K = {k} must lie in 1..={d}")));
    }
    for (l, s) in spectra.iter().enumerate() {
        if s.len() != d {
            return Err(Error::invalid(format!("spectrum {l} has length {} != {d}", s.len())));
        }
        if k < d && !(s.gap_after(k) > 0.0) {
            return Err(Error::gap(format!("spectrum {l} has no gap after position {k}")));
        }
    }
    let shared = haar_orthogonal(d, &mut machine_rng(basis_seed, 0))?;
    let shared = shared.as_matrix();
    let top = shared.columns(0, k);
    let bulk = shared.columns(k, d - k);
    spectra
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let mut basis = DMatrix::zeros(d, d);
            basis.columns_mut(0, k).copy_from(&top);
            if d > k {
                let rot = haar_orthogonal(d - k, &mut machine_rng(basis_seed, l + 1))?;
                basis.columns_mut(k, d - k).copy_from(&(bulk * rot.as_matrix()));
            }
            let basis = Frame::orthonormalize(basis)?;
            CovarianceModel::new(s.clone(), basis, k)
        })
        .collect()
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix, `diag(R) > 0`).
pub fn haar_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Result<Frame> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    Frame::orthonormalize(g)
}
