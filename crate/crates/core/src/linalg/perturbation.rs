//! First-order eigenspace perturbation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Frame, Spectrum, SymMatrix};
use crate::error::{Error, Result};

/// A contiguous block of eigenpairs: 0-based positions `start..start + len`
/// in a descending spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub len: usize,
}

impl Window {
    pub fn leading(len: usize) -> Self {
        Window { start: 0, len }
    }

    pub fn contains(&self, i: usize) -> bool {
        i >= self.start && i < self.start + self.len
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// `min(lambda_s - lambda_{s+1}, lambda_{s+K} - lambda_{s+K+1})` with the
/// spectrum padded by `+inf` above and `-inf` below.
pub fn window_gap(spectrum: &Spectrum, window: Window) -> Result<f64> {
    let v = spectrum.values();
    if window.len == 0 || window.end() > v.len() {
        return Err(Error::invalid(format!(
            "window {}..{} does not fit a spectrum of length {}",
            window.start,
            window.end(),
            v.len()
        )));
    }
    let above = if window.start == 0 {
        f64::INFINITY
    } else {
        v[window.start - 1] - v[window.start]
    };
    let below = if window.end() == v.len() {
        f64::INFINITY
    } else {
        v[window.end() - 1] - v[window.end()]
    };
    Ok(above.min(below))
}

/// Linear term `f(E U)` of the eigenspace expansion: column `j` is
/// `-G_j E u_{s+j}` with `G_j = sum_{i outside S} (lambda_i - lambda_{s+j})^{-1} u_i u_i^T`.
///
/// `basis` must hold all `d` eigenvectors of the unperturbed matrix, ordered
/// like `spectrum`.
pub fn dk_linear_term(
    spectrum: &Spectrum,
    basis: &Frame,
    window: Window,
    e: &SymMatrix,
) -> Result<DMatrix<f64>> {
    let d = spectrum.len();
    if basis.dim() != d || basis.rank() != d || e.dim() != d {
        return Err(Error::invalid(format!(
            "need a full {d}x{d} eigenbasis and a {d}x{d} perturbation"
        )));
    }
    let gap = window_gap(spectrum, window)?;
    if !(gap > 0.0) {
        return Err(Error::gap(format!(
            "window {}..{} has eigengap {gap}",
            window.start,
            window.end()
        )));
    }
    let lam = spectrum.values();
    let full = basis.as_matrix();
    let u = full.columns(window.start, window.len);
    // Coordinates of E U in the eigenbasis.
    let coords = full.tr_mul(&(e.as_matrix() * u));
    let mut weights = DMatrix::zeros(d, window.len);
    for j in 0..window.len {
        let lj = lam[window.start + j];
        for i in (0..d).filter(|&i| !window.contains(i)) {
            weights[(i, j)] = -coords[(i, j)] / (lam[i] - lj);
        }
    }
    Ok(full * weights)
}
