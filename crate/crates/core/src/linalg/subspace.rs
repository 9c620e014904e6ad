//! Distances and alignment between column spaces.

use nalgebra::DMatrix;

use super::{Frame, SymMatrix};
use crate::error::{Error, Result};

/// Smallest singular value accepted by [`matrix_sign`].
const SIGN_SINGULAR_FLOOR: f64 = 1e-12;

/// Orthogonal projector `F F^T`.
pub fn projection(frame: &Frame) -> SymMatrix {
    let f = frame.as_matrix();
    SymMatrix::symmetrized(f * f.transpose())
}

fn check_pair(u: &Frame, v: &Frame) -> Result<()> {
    if u.dim() != v.dim() || u.rank() != v.rank() {
        return Err(Error::invalid(format!(
            "frames must share shape: {}x{} vs {}x{}",
            u.dim(),
            u.rank(),
            v.dim(),
            v.rank()
        )));
    }
    Ok(())
}

/// `rho(U, V) = ||U U^T - V V^T||_F`.
///
/// Equal to `sqrt(2K - 2 ||U^T V||_F^2)`, but evaluated as
/// `sqrt(2) ||V - U U^T V||_F`: the difference form cancels catastrophically
/// near zero (about `1e-8` for identical frames), the residual form does not.
pub fn subspace_distance(u: &Frame, v: &Frame) -> Result<f64> {
    check_pair(u, v)?;
    let um = u.as_matrix();
    let vm = v.as_matrix();
    let residual = vm - um * um.tr_mul(vm);
    let k = u.rank() as f64;
    Ok((2.0 * residual.norm_squared()).min(2.0 * k).max(0.0).sqrt())
}

/// Sines of the principal angles between `Col(U)` and `Col(V)`, descending.
///
/// Computed as the singular values of `(I - U U^T) V`, which keeps full
/// relative accuracy for small angles.
pub fn sin_theta(u: &Frame, v: &Frame) -> Result<Vec<f64>> {
    check_pair(u, v)?;
    let um = u.as_matrix();
    let vm = v.as_matrix();
    let residual = vm - um * um.tr_mul(vm);
    let mut sines: Vec<f64> = residual
        .singular_values()
        .iter()
        .map(|s| s.clamp(0.0, 1.0))
        .collect();
    sines.sort_by(|a, b| b.total_cmp(a));
    Ok(sines)
}

/// Matrix sign function `sgn(H) = sum_j u_j v_j^T` over the SVD of `H`.
///
/// Errors when `H` is singular (smallest singular value at or below `1e-12`).
pub fn matrix_sign(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if h.nrows() != h.ncols() || h.nrows() == 0 {
        return Err(Error::invalid(format!(
            "matrix sign needs a nonempty square matrix, got {}x{}",
            h.nrows(),
            h.ncols()
        )));
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    let svd = h.clone().svd(true, true);
    let smin = svd.singular_values.iter().fold(f64::INFINITY, |m, s| m.min(*s));
    if smin <= SIGN_SINGULAR_FLOOR {
        return Err(Error::Singular(format!(
            "smallest singular value {smin:.3e} is not positive"
        )));
    }
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    Ok(u * vt)
}

/// Rotates `candidate` within its span to best match `reference`.
///
/// Returns `candidate * sgn(candidate^T reference)`, the orthogonal Procrustes
/// solution of `min_R ||candidate R - reference||_F`.
pub fn align(candidate: &Frame, reference: &Frame) -> Result<Frame> {
    check_pair(candidate, reference)?;
    let h = candidate.as_matrix().tr_mul(reference.as_matrix());
    let r = matrix_sign(&h)?;
    Ok(Frame::from_matrix_unchecked(candidate.as_matrix() * r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::SQRT_2;

    fn unit(angle_deg: f64) -> Frame {
        let t = angle_deg.to_radians();
        Frame::from_vector(&[t.cos(), t.sin()]).unwrap()
    }

    #[test]
    fn projection_examples() {
        let p = projection(&Frame::standard(2, &[0]).unwrap());
        assert_eq!(p.as_matrix(), &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let p = projection(&Frame::from_vector(&[1.0, 1.0]).unwrap());
        assert!((p.as_matrix() - DMatrix::from_element(2, 2, 0.5)).amax() < 1e-15);
        let p = projection(&Frame::standard(3, &[0, 1]).unwrap());
        assert_eq!(p.as_matrix(), &DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1.0, 0.0])));
        let m = p.as_matrix();
        assert!((m * m - m).norm() < 1e-10);
        assert!((p.trace() - 2.0).abs() < 1e-10);
    }

    #[test]
    fn distance_examples() {
        let e1 = Frame::standard(2, &[0]).unwrap();
        let e2 = Frame::standard(2, &[1]).unwrap();
        assert_eq!(subspace_distance(&e1, &e1).unwrap(), 0.0);
        assert!((subspace_distance(&e1, &e2).unwrap() - SQRT_2).abs() < 1e-15);

        // Direct Frobenius norm of diag(0,1,-1) is sqrt(2).
        let u = Frame::standard(3, &[0, 1]).unwrap();
        let v = Frame::standard(3, &[0, 2]).unwrap();
        let direct = (projection(&u).as_matrix() - projection(&v).as_matrix()).norm();
        assert!((direct - SQRT_2).abs() < 1e-15);
        assert!((subspace_distance(&u, &v).unwrap() - direct).abs() < 1e-15);

        assert!(subspace_distance(&u, &e1).is_err());
    }

    #[test]
    fn sin_theta_examples() {
        assert!(sin_theta(&unit(10.0), &unit(10.0)).unwrap()[0] < 1e-15);
        let s = sin_theta(&unit(0.0), &unit(30.0)).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15);
        let s = sin_theta(&unit(0.0), &unit(90.0)).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sign_function_examples() {
        let h = DMatrix::identity(3, 3) * 0.3;
        assert!((matrix_sign(&h).unwrap() - DMatrix::identity(3, 3)).amax() < 1e-15);
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -3.0]);
        let s = matrix_sign(&h).unwrap();
        assert!((s - DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).amax() < 1e-15);

        let t = 40f64.to_radians();
        let rot = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
        let s = matrix_sign(&(&rot * 0.7)).unwrap();
        assert!((&s - &rot).amax() < 1e-14);
        assert!((s.tr_mul(&s) - DMatrix::identity(2, 2)).amax() < 1e-10);

        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(matrix_sign(&singular), Err(Error::Singular(_))));
    }

    #[test]
    fn align_examples() {
        let r = unit(20.0);
        let neg = Frame::new(-r.as_matrix()).unwrap();
        let out = align(&neg, &r).unwrap();
        assert!((out.as_matrix() - r.as_matrix()).amax() < 1e-15);

        let swapped = Frame::standard(3, &[1, 0]).unwrap();
        let reference = Frame::standard(3, &[0, 1]).unwrap();
        let out = align(&swapped, &reference).unwrap();
        assert!((out.as_matrix() - reference.as_matrix()).amax() < 1e-15);

        let c = unit(35.0);
        let out = align(&c, &unit(0.0)).unwrap();
        assert!((out.as_matrix() - c.as_matrix()).amax() < 1e-15);
        assert!(subspace_distance(&out, &c).unwrap() <= 1e-10);

        let perp = align(&unit(90.0), &unit(0.0));
        assert!(matches!(perp, Err(Error::Singular(_))));
    }
}
