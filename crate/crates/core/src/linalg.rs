use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetric (spectral) square root of a positive-definite matrix.
pub fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sym_power(m, 0.5)
}

/// Inverse of the symmetric square root.
pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sym_power(m, -0.5)
}

fn sym_power(m: &DMatrix<f64>, power: f64) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::shape(format!("expected square matrix, got {}x{}", m.nrows(), m.ncols())));
    }
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.amax();
    if eig.eigenvalues.iter().any(|&l| !(l > 1e-14 * scale)) {
        return Err(Error::invalid("matrix is not positive definite"));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.powf(power)));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Cholesky factor with a descriptive error.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    nalgebra::Cholesky::new(m.clone()).ok_or_else(|| Error::invalid(format!("{what} is not positive definite")))
}

/// `ln |M|` from a Cholesky factor.
pub fn chol_logdet(c: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

/// Packs the lower triangle (row-major: (0,0), (1,0), (1,1), ...).
pub fn pack_lower(l: &DMatrix<f64>) -> Vec<f64> {
    let q = l.nrows();
    let mut out = Vec::with_capacity(q * (q + 1) / 2);
    for i in 0..q {
        for j in 0..=i {
            out.push(l[(i, j)]);
        }
    }
    out
}

pub fn unpack_lower(packed: &[f64], q: usize) -> Result<DMatrix<f64>> {
    if packed.len() != q * (q + 1) / 2 {
        return Err(Error::shape(format!(
            "expected {} packed lower-triangular entries for q={q}, got {}",
            q * (q + 1) / 2,
            packed.len()
        )));
    }
    let mut l = DMatrix::zeros(q, q);
    let mut k = 0;
    for i in 0..q {
        for j in 0..=i {
            l[(i, j)] = packed[k];
            k += 1;
        }
    }
    Ok(l)
}

pub fn outer(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    a * b.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let r = sym_sqrt(&m).unwrap();
        assert!((&r * &r - &m).amax() < 1e-12);
        assert!((r.transpose() - &r).amax() < 1e-14);
        let ri = sym_inv_sqrt(&m).unwrap();
        assert!((&ri * &r - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn tiny_scale_is_still_definite() {
        assert!(sym_sqrt(&(DMatrix::identity(2, 2) * 1e-300)).is_ok());
    }

    #[test]
    fn rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(sym_sqrt(&m).is_err());
    }

    #[test]
    fn pack_roundtrip() {
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 2.0]);
        assert_eq!(unpack_lower(&pack_lower(&l), 2).unwrap(), l);
    }
}
