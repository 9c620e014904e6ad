//! Local PCA, projector averaging and the full-sample / DPx baselines.

use std::borrow::Cow;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eig, top_k_eigen, top_k_factored, Frame, Spectrum, SymMatrix};
use crate::models::Partition;
use crate::runtime::CommLedger;

/// How a machine turns its samples into `Sigma_hat`.
///
/// The default (no centering, divisor `n`) is `(1/n) sum x_i x_i^T`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovarianceOptions {
    /// Subtract the sample mean first.
    #[serde(default)]
    pub center: bool,
    /// Divide by `n - 1` instead of `n`.
    #[serde(default)]
    pub unbiased: bool,
}

impl CovarianceOptions {
    fn divisor(&self, n: usize) -> Result<f64> {
        if self.unbiased {
            if n < 2 {
                return Err(Error::invalid("divisor n - 1 needs at least two samples"));
            }
            Ok((n - 1) as f64)
        } else {
            Ok(n as f64)
        }
    }
}

/// A machine's `Sigma_hat`, kept in factored form: `scale * R^T R` where the
/// rows `R` are the (optionally centered) samples.
#[derive(Clone, Debug)]
pub struct LocalCovariance<'a> {
    machine: usize,
    rows: Cow<'a, DMatrix<f64>>,
    scale: f64,
}

impl<'a> LocalCovariance<'a> {
    pub fn new(partition: &'a Partition, opts: CovarianceOptions) -> Result<Self> {
        Self::build(partition.machine(), Cow::Borrowed(partition.data()), opts)
    }

    pub fn owned(partition: Partition, opts: CovarianceOptions) -> Result<LocalCovariance<'static>> {
        let machine = partition.machine();
        LocalCovariance::build(machine, Cow::Owned(partition.into_data()), opts)
    }

    fn build(machine: usize, mut rows: Cow<'a, DMatrix<f64>>, opts: CovarianceOptions) -> Result<Self> {
        let n = rows.nrows();
        let scale = 1.0 / opts.divisor(n)?;
        if opts.center {
            for mut col in rows.to_mut().column_iter_mut() {
                let mean = col.sum() / n as f64;
                col.add_scalar_mut(-mean);
            }
        }
        Ok(LocalCovariance { machine, rows, scale })
    }

    pub fn machine(&self) -> usize {
        self.machine
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn matrix(&self) -> SymMatrix {
        SymMatrix::symmetrized((self.rows.transpose() * self.rows.as_ref()) * self.scale)
    }

    /// Top-`k` eigenpairs. With fewer samples than dimensions the work runs on
    /// the `n x n` Gram matrix instead of the `d x d` covariance.
    pub fn top_k(&self, k: usize) -> Result<SubspaceEstimate> {
        let d = self.dim();
        if k == 0 || k > d {
            return Err(Error::invalid(format!("K = {k} must lie in 1..={d}")));
        }
        let (values, frame) = top_k_of_rows(&self.rows, self.scale, k)?;
        SubspaceEstimate::new(self.machine, frame, values, self.n())
    }

    /// `v^T Sigma_hat v` for each column of `frame`, computed as `scale * ||R v||^2`.
    pub fn rayleigh(&self, frame: &Frame) -> Result<Vec<f64>> {
        if frame.dim() != self.dim() {
            return Err(Error::invalid(format!(
                "frame has d = {}, machine {} has d = {}",
                frame.dim(),
                self.machine,
                self.dim()
            )));
        }
        let xv = self.rows.as_ref() * frame.as_matrix();
        Ok(xv.column_iter().map(|c| c.norm_squared() * self.scale).collect())
    }
}

/// `Sigma_hat` of one partition.
pub fn sample_covariance(partition: &Partition, opts: CovarianceOptions) -> Result<SymMatrix> {
    Ok(LocalCovariance::new(partition, opts)?.matrix())
}

pub fn rayleigh_values(partition: &Partition, frame: &Frame, opts: CovarianceOptions) -> Result<Vec<f64>> {
    LocalCovariance::new(partition, opts)?.rayleigh(frame)
}

/// A machine's local top-`rank` eigenpairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceEstimate {
    pub machine: usize,
    pub frame: Frame,
    pub eigenvalues: Spectrum,
    pub n: usize,
}

impl SubspaceEstimate {
    pub fn new(machine: usize, frame: Frame, eigenvalues: Spectrum, n: usize) -> Result<Self> {
        if eigenvalues.len() != frame.rank() {
            return Err(Error::invalid(format!(
                "{} eigenvalues for a rank-{} frame",
                eigenvalues.len(),
                frame.rank()
            )));
        }
        Ok(SubspaceEstimate {
            machine,
            frame,
            eigenvalues,
            n,
        })
    }

    pub fn rank(&self) -> usize {
        self.frame.rank()
    }

    pub fn dim(&self) -> usize {
        self.frame.dim()
    }
}

pub fn local_pca(partition: &Partition, k: usize) -> Result<SubspaceEstimate> {
    local_pca_with(partition, k, CovarianceOptions::default())
}

/// Top-`k` eigenvectors of the partition's sample covariance.
pub fn local_pca_with(partition: &Partition, k: usize, opts: CovarianceOptions) -> Result<SubspaceEstimate> {
    LocalCovariance::new(partition, opts)?.top_k(k)
}

fn top_k_of_rows(rows: &DMatrix<f64>, scale: f64, k: usize) -> Result<(Spectrum, Frame)> {
    if rows.nrows() < rows.ncols() {
        top_k_factored(rows, scale, k)
    } else {
        let cov = SymMatrix::symmetrized((rows.transpose() * rows) * scale);
        top_k_eigen(&cov, k)
    }
}

/// Pooled-sample PCA: top-`k` of `(1/N) sum_all x x^T`.
pub fn full_sample_pca(partitions: &[Partition], k: usize) -> Result<SubspaceEstimate> {
    let mut sorted: Vec<&Partition> = partitions.iter().collect();
    sorted.sort_by_key(|p| p.machine());
    let first = *sorted.first().ok_or_else(|| Error::invalid("no partitions"))?;
    let d = first.dim();
    if k == 0 || k > d {
        return Err(Error::invalid(format!("K = {k} must lie in 1..={d}")));
    }
    if let Some(p) = sorted.iter().find(|p| p.dim() != d) {
        return Err(Error::invalid(format!("partition {} has d = {}, expected {d}", p.machine(), p.dim())));
    }
    let total: usize = sorted.iter().map(|p| p.n()).sum();
    let (values, frame) = if total < d {
        let owned: Vec<Partition> = sorted.iter().map(|p| (*p).clone()).collect();
        let stacked = Partition::concat(&owned)?;
        top_k_factored(stacked.data(), 1.0 / total as f64, k)?
    } else {
        let mut acc = DMatrix::zeros(d, d);
        for p in &sorted {
            acc += p.data().transpose() * p.data();
        }
        top_k_eigen(&SymMatrix::symmetrized(acc / total as f64), k)?
    };
    SubspaceEstimate::new(first.machine(), frame, values, total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateOptions {
    /// Weight machine `l` by `n_l / N` instead of `1/m`.
    #[serde(default)]
    pub weighted: bool,
}

/// Output of the aggregation step.
#[derive(Clone, Debug)]
pub struct AggregateResult {
    /// `(1/m) sum_l V_l V_l^T`.
    pub sigma_tilde: SymMatrix,
    /// Top-`K` eigenvectors of `sigma_tilde`.
    pub frame: Frame,
    /// Full spectrum of `sigma_tilde` (length `d`).
    pub spectrum: Spectrum,
    /// Averaged Rayleigh quotients, once the eigenvalue round has run.
    pub refined: Option<Vec<f64>>,
    pub ledger: CommLedger,
    /// Machine indices that contributed, ascending.
    pub machines: Vec<usize>,
    /// Set when some machines were dropped and the average reweighted.
    pub partial: bool,
}

impl AggregateResult {
    pub fn k(&self) -> usize {
        self.frame.rank()
    }
}

pub fn aggregate(estimates: &[SubspaceEstimate], k: usize) -> Result<AggregateResult> {
    aggregate_with(estimates, k, AggregateOptions::default())
}

/// Averages the projectors of `estimates` (summed in ascending machine order)
/// and returns the top-`k` eigenvectors of the average.
pub fn aggregate_with(estimates: &[SubspaceEstimate], k: usize, opts: AggregateOptions) -> Result<AggregateResult> {
    let mut sorted: Vec<&SubspaceEstimate> = estimates.iter().collect();
    sorted.sort_by_key(|e| e.machine);
    let first = *sorted.first().ok_or_else(|| Error::invalid("no estimates to aggregate"))?;
    let (d, r) = (first.dim(), first.rank());
    for e in &sorted {
        if e.dim() != d || e.rank() != r {
            return Err(Error::invalid(format!(
                "estimate from machine {} is {}x{}, expected {d}x{r}",
                e.machine,
                e.dim(),
                e.rank()
            )));
        }
    }
    if sorted.windows(2).any(|w| w[0].machine == w[1].machine) {
        return Err(Error::invalid("duplicate machine index among estimates"));
    }
    if k == 0 || k > r {
        return Err(Error::invalid(format!("K = {k} must lie in 1..={r} (the estimate rank)")));
    }

    let m = sorted.len();
    let total_n: usize = sorted.iter().map(|e| e.n).sum();
    let weights: Vec<f64> = sorted
        .iter()
        .map(|e| {
            if opts.weighted {
                e.n as f64 / total_n as f64
            } else {
                1.0 / m as f64
            }
        })
        .collect();

    // Rows of `stacked` are the frames' columns scaled by sqrt(w_l), so
    // sigma_tilde = stacked^T stacked.
    let mut stacked = DMatrix::zeros(m * r, d);
    for (i, e) in sorted.iter().enumerate() {
        let block = e.frame.as_matrix().transpose() * weights[i].sqrt();
        stacked.rows_mut(i * r, r).copy_from(&block);
    }
    let sigma_tilde = SymMatrix::symmetrized(stacked.transpose() * &stacked);

    let (frame, spectrum) = if m * r < d {
        let (_, frame) = top_k_factored(&stacked, 1.0, k)?;
        let (gram, _) = sym_eig(&SymMatrix::symmetrized(&stacked * stacked.transpose()))?;
        let mut values: Vec<f64> = gram.values().iter().map(|v| v.max(0.0)).collect();
        values.resize(d, 0.0);
        (frame, Spectrum::new(values)?)
    } else {
        let (spectrum, basis) = sym_eig(&sigma_tilde)?;
        (basis.columns(0, k)?, spectrum)
    };

    let mut ledger = CommLedger::new();
    for e in &sorted {
        ledger.record_frames(e.machine, e.rank(), d);
    }
    Ok(AggregateResult {
        sigma_tilde,
        frame,
        spectrum,
        refined: None,
        ledger,
        machines: sorted.iter().map(|e| e.machine).collect(),
        partial: false,
    })
}

/// `lambda_tilde_j = (1/m) sum_l values[l][j]`: the average of each machine's
/// Rayleigh quotients along the aggregated eigenvectors.
///
/// The averages need not be sorted; they follow the column order of `V_tilde`.
pub fn eigenvalue_round(per_machine: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_machine.first().ok_or_else(|| Error::invalid("no Rayleigh values"))?;
    let k = first.len();
    if k == 0 || per_machine.iter().any(|v| v.len() != k) {
        return Err(Error::invalid("every machine must report the same positive number of values"));
    }
    let m = per_machine.len() as f64;
    Ok((0..k).map(|j| per_machine.iter().map(|v| v[j]).sum::<f64>() / m).collect())
}

/// Runs the eigenvalue round in process and records its cost on `result`.
pub fn refine_eigenvalues(result: &mut AggregateResult, partitions: &[Partition], opts: CovarianceOptions) -> Result<()> {
    let mut sorted: Vec<&Partition> = partitions.iter().collect();
    sorted.sort_by_key(|p| p.machine());
    let values = sorted
        .iter()
        .map(|p| rayleigh_values(p, &result.frame, opts))
        .collect::<Result<Vec<_>>>()?;
    let (k, d) = (result.frame.rank(), result.frame.dim());
    for p in &sorted {
        result.ledger.record_eigenvalue_round(p.machine(), k, d);
    }
    result.refined = Some(eigenvalue_round(&values)?);
    Ok(())
}

/// In-process run of the one-shot protocol.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcaOptions {
    /// Extra eigenvectors each machine sends (`DPx`); 0 is the plain algorithm.
    #[serde(default)]
    pub extra: usize,
    #[serde(default)]
    pub eigenvalue_round: bool,
    #[serde(default)]
    pub covariance: CovarianceOptions,
    #[serde(default)]
    pub aggregate: AggregateOptions,
}

pub fn distributed_pca(partitions: &[Partition], k: usize, opts: PcaOptions) -> Result<AggregateResult> {
    let d = partitions.first().map(Partition::dim).ok_or_else(|| Error::invalid("no partitions"))?;
    let rank = k + opts.extra;
    if k == 0 || rank > d {
        return Err(Error::invalid(format!("K + x = {rank} must lie in 1..={d}")));
    }
    let estimates = partitions
        .iter()
        .map(|p| local_pca_with(p, rank, opts.covariance))
        .collect::<Result<Vec<_>>>()?;
    let mut result = aggregate_with(&estimates, k, opts.aggregate)?;
    if opts.eigenvalue_round {
        refine_eigenvalues(&mut result, partitions, opts.covariance)?;
    }
    Ok(result)
}

/// `DPx`: every machine sends its top `K + x` eigenvectors.
pub fn dp_extra(partitions: &[Partition], k: usize, extra: usize) -> Result<AggregateResult> {
    distributed_pca(
        partitions,
        k,
        PcaOptions {
            extra,
            ..PcaOptions::default()
        },
    )
}
