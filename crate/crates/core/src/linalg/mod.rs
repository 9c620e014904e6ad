//! Dense symmetric linear algebra on top of `nalgebra`.
//!
//! Three value types carry the invariants the rest of the crate relies on:
//! [`SymMatrix`] (symmetrized on construction), [`Frame`] (column-orthonormal
//! `d x K` matrix) and [`Spectrum`] (descending, finite eigenvalues).

mod eigen;
mod perturbation;
mod subspace;

pub use eigen::{sym_eig, top_k_eigen, top_k_eigen_with, top_k_factored, EigenSolver};
pub use perturbation::{dk_linear_term, window_gap, Window};
pub use subspace::{align, matrix_sign, projection, sin_theta, subspace_distance};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Orthonormality tolerance for [`Frame`] columns (max-abs of `F^T F - I`).
pub const FRAME_TOLERANCE: f64 = 1e-10;

/// A real symmetric `d x d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Symmetrizes `(A + A^T) / 2`. Rejects non-square or non-finite input.
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::invalid(format!(
                "symmetric matrix must be square, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        if mat.nrows() == 0 {
            return Err(Error::invalid("symmetric matrix must have positive dimension"));
        }
        if mat.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("matrix has non-finite entries"));
        }
        Ok(Self::symmetrized(mat))
    }

    pub(crate) fn symmetrized(mut mat: DMatrix<f64>) -> Self {
        let d = mat.nrows();
        for j in 0..d {
            for i in (j + 1)..d {
                let avg = 0.5 * (mat[(i, j)] + mat[(j, i)]);
                mat[(i, j)] = avg;
                mat[(j, i)] = avg;
            }
        }
        SymMatrix(mat)
    }

    pub fn from_diagonal(values: &[f64]) -> Result<Self> {
        let d = values.len();
        Self::new(DMatrix::from_fn(d, d, |i, j| if i == j { values[i] } else { 0.0 }))
    }

    pub fn identity(d: usize) -> Self {
        SymMatrix(DMatrix::identity(d, d))
    }

    pub fn zeros(d: usize) -> Self {
        SymMatrix(DMatrix::zeros(d, d))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    /// Largest absolute eigenvalue.
    pub fn spectral_norm(&self) -> Result<f64> {
        let (spec, _) = sym_eig(self)?;
        let v = spec.values();
        Ok(v[0].abs().max(v[v.len() - 1].abs()))
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// `v^T A v`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let d = self.dim();
        debug_assert_eq!(v.len(), d);
        let mut acc = 0.0;
        for j in 0..d {
            let col = self.0.column(j);
            let mut s = 0.0;
            for i in 0..d {
                s += col[i] * v[i];
            }
            acc += s * v[j];
        }
        acc
    }

    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix> {
        if self.dim() != other.dim() {
            return Err(Error::invalid("dimension mismatch in matrix sum"));
        }
        Ok(SymMatrix(&self.0 + &other.0))
    }

    pub fn scaled(&self, factor: f64) -> SymMatrix {
        SymMatrix(&self.0 * factor)
    }
}

/// A `d x K` matrix with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame(DMatrix<f64>);

impl Frame {
    /// Wraps `mat` after checking `||F^T F - I||_max <= FRAME_TOLERANCE`.
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        let (d, k) = mat.shape();
        if k == 0 || k > d {
            return Err(Error::invalid(format!(
                "frame must have 1 <= rank <= dim, got {d}x{k}"
            )));
        }
        if mat.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("frame has non-finite entries"));
        }
        let err = orthonormality_error(&mat);
        if err > FRAME_TOLERANCE {
            return Err(Error::invalid(format!(
                "frame columns not orthonormal (max deviation {err:.3e})"
            )));
        }
        Ok(Frame(mat))
    }

    /// Orthonormalizes the columns of `mat` (thin QR). Fails on rank deficiency.
    pub fn orthonormalize(mat: DMatrix<f64>) -> Result<Self> {
        let (d, k) = mat.shape();
        if k == 0 || k > d {
            return Err(Error::invalid(format!(
                "cannot orthonormalize a {d}x{k} matrix into a frame"
            )));
        }
        let scale = mat.amax().max(f64::MIN_POSITIVE);
        let qr = mat.qr();
        let r = qr.r();
        for i in 0..k {
            if r[(i, i)].abs() <= 1e-12 * scale {
                return Err(Error::Singular(format!(
                    "column {i} is linearly dependent on the previous ones"
                )));
            }
        }
        let mut q = qr.q();
        // Fix the QR sign ambiguity so the result follows the input columns.
        for i in 0..k {
            if r[(i, i)] < 0.0 {
                q.column_mut(i).neg_mut();
            }
        }
        Ok(Frame(q))
    }

    pub(crate) fn from_matrix_unchecked(mat: DMatrix<f64>) -> Self {
        debug_assert!(orthonormality_error(&mat) <= 1e-8);
        Frame(mat)
    }

    pub fn identity(d: usize) -> Self {
        Frame(DMatrix::identity(d, d))
    }

    /// Frame made of the standard basis vectors `e_i` for the given indices.
    pub fn standard(d: usize, indices: &[usize]) -> Result<Self> {
        let mut m = DMatrix::zeros(d, indices.len());
        for (j, &i) in indices.iter().enumerate() {
            if i >= d {
                return Err(Error::invalid(format!("basis index {i} out of range for dim {d}")));
            }
            m[(i, j)] = 1.0;
        }
        Frame::new(m)
    }

    /// A single normalized direction.
    pub fn from_vector(v: &[f64]) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::invalid("cannot build a frame from a zero vector"));
        }
        Frame::new(DMatrix::from_iterator(v.len(), 1, v.iter().map(|x| x / norm)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn rank(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.0.column(j).iter().copied().collect()
    }

    /// Columns `start..start + len` as a new frame.
    pub fn columns(&self, start: usize, len: usize) -> Result<Frame> {
        if len == 0 || start + len > self.rank() {
            return Err(Error::invalid(format!(
                "column window {start}..{} out of range for rank {}",
                start + len,
                self.rank()
            )));
        }
        Ok(Frame(self.0.columns(start, len).into_owned()))
    }

    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.0)
    }
}

fn orthonormality_error(mat: &DMatrix<f64>) -> f64 {
    let gram = mat.tr_mul(mat);
    let k = gram.nrows();
    let mut worst: f64 = 0.0;
    for j in 0..k {
        for i in 0..k {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

/// Eigenvalues in descending order.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum(Vec<f64>);

impl Spectrum {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("spectrum must be nonempty"));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("spectrum has non-finite values"));
        }
        if values.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::invalid("spectrum must be in descending order"));
        }
        Ok(Spectrum(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `lambda_k - lambda_{k+1}` for 1-based `k`, taking `lambda_{d+1} = 0`.
    pub fn gap_after(&self, k: usize) -> f64 {
        assert!(k >= 1 && k <= self.len(), "gap index out of range");
        let next = self.0.get(k).copied().unwrap_or(0.0);
        self.0[k - 1] - next
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn truncated(&self, k: usize) -> Spectrum {
        Spectrum(self.0[..k.min(self.len())].to_vec())
    }
}

/// Flip `v` so its largest-magnitude component is positive.
///
/// Near-ties (within `1e-10` relative) resolve to the lowest index.
pub(crate) fn apply_sign_convention(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return;
    }
    let cutoff = max * (1.0 - 1e-10);
    if let Some(pivot) = v.iter().position(|x| x.abs() >= cutoff) {
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

pub(crate) fn sign_normalize_columns(mat: &mut DMatrix<f64>) {
    for mut col in mat.column_iter_mut() {
        apply_sign_convention(col.as_mut_slice());
    }
}
