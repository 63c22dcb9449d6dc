//! Symmetric tridiagonal Cholesky factorisation.

use crate::error::{Error, Result};

/// `A = L Lᵀ` for a symmetric positive-definite tridiagonal `A`, stored as
/// the diagonal of `L` and its subdiagonal.
#[derive(Debug, Clone)]
pub struct TridiagCholesky {
    diag: Vec<f64>,
    sub: Vec<f64>,
}

impl TridiagCholesky {
    /// `diag` has length m, `off` has length m − 1.
    pub fn factor(diag: &[f64], off: &[f64]) -> Result<Self> {
        let m = diag.len();
        if m == 0 || off.len() + 1 != m {
            return Err(Error::domain(format!(
                "tridiagonal factor: diag len {m}, off len {}",
                off.len()
            )));
        }
        let mut l = vec![0.0; m];
        let mut s = vec![0.0; m.saturating_sub(1)];
        for i in 0..m {
            let mut d = diag[i];
            if i > 0 {
                s[i - 1] = off[i - 1] / l[i - 1];
                d -= s[i - 1] * s[i - 1];
            }
            if !(d > 0.0) {
                return Err(Error::numeric(
                    "tridiagonal cholesky",
                    format!("matrix not positive definite at pivot {i}"),
                ));
            }
            l[i] = d.sqrt();
        }
        Ok(TridiagCholesky { diag: l, sub: s })
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Solves `A x = rhs` in place.
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let m = self.diag.len();
        debug_assert_eq!(rhs.len(), m);
        for i in 0..m {
            if i > 0 {
                rhs[i] -= self.sub[i - 1] * rhs[i - 1];
            }
            rhs[i] /= self.diag[i];
        }
        for i in (0..m).rev() {
            if i + 1 < m {
                rhs[i] -= self.sub[i] * rhs[i + 1];
            }
            rhs[i] /= self.diag[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_against_dense_product() {
        let diag = [4.0, 5.0, 6.0, 3.0];
        let off = [1.0, -2.0, 0.5];
        let chol = TridiagCholesky::factor(&diag, &off).unwrap();
        let x = [1.0, -1.0, 2.0, 0.25];
        let mut b = [0.0; 4];
        for i in 0..4 {
            b[i] = diag[i] * x[i];
            if i > 0 {
                b[i] += off[i - 1] * x[i - 1];
            }
            if i < 3 {
                b[i] += off[i] * x[i + 1];
            }
        }
        chol.solve_in_place(&mut b);
        for i in 0..4 {
            assert!((b[i] - x[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_indefinite() {
        assert!(TridiagCholesky::factor(&[1.0, 1.0], &[2.0]).is_err());
    }
}
