//! Small dense square matrices for per-point color-space algebra.
//!
//! Color counts are tiny (m ≤ ~8), so a row-major `Vec<f64>` with naive
//! O(m³) products is both simplest and fastest at this size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense `n×n` real matrix in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMat {
    n: usize,
    a: Vec<f64>,
}

impl SquareMat {
    pub fn zeros(n: usize) -> Self {
        SquareMat { n, a: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Config("matrix rows must form a square".into()));
        }
        Ok(SquareMat {
            n,
            a: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.n + j] = v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| {
                let row = &self.a[i * self.n..(i + 1) * self.n];
                row.iter().zip(x).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    pub fn mul_mat(&self, other: &SquareMat) -> SquareMat {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = SquareMat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let aik = self.get(i, k);
                if aik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.a[i * n + j] += aik * other.get(k, j);
                }
            }
        }
        out
    }

    /// Largest absolute entry of `self − other`.
    pub fn max_abs_diff(&self, other: &SquareMat) -> f64 {
        assert_eq!(self.n, other.n);
        self.a
            .iter()
            .zip(&other.a)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    /// Largest absolute asymmetry `|a_ij − a_ji|`.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Quadratic form `x†·self·x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi rotation method,
/// returned in ascending order.
///
/// # Errors
/// `Domain` if the matrix is measurably asymmetric, `Numerics` if the sweep
/// cap is reached before off-diagonal mass falls below `tol·‖M‖_F`.
pub fn symmetric_eigenvalues(mat: &SquareMat, tol: f64) -> Result<Vec<f64>> {
    let n = mat.n();
    let scale = mat.frobenius().max(1e-300);
    if mat.max_asymmetry() > 1e-9 * scale {
        return Err(Error::Domain(format!(
            "jacobi eigensolver needs a symmetric matrix (asymmetry {:.3e})",
            mat.max_asymmetry()
        )));
    }
    let mut a = mat.clone();
    // Symmetrize exactly so rotations preserve symmetry in floating point.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    let off = |a: &SquareMat| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a.get(i, j) * a.get(i, j);
                }
            }
        }
        s.sqrt()
    };
    for _sweep in 0..100 {
        if off(&a) <= tol * scale {
            let mut ev: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
            ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
            return Ok(ev);
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                // Stable tangent of the rotation angle.
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    Err(Error::Numerics(
        "jacobi eigensolver did not converge in 100 sweeps".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mul_and_quad_form() {
        let m = SquareMat::from_rows(&[&[2.0, 1.0], &[1.0, 3.0]]).unwrap();
        assert_eq!(m.mul_vec(&[1.0, 1.0]), vec![3.0, 4.0]);
        assert_eq!(m.quad_form(&[1.0, 1.0]), 7.0);
        let id = SquareMat::identity(2);
        assert_eq!(m.mul_mat(&id), m);
    }

    #[test]
    fn eigenvalues_of_known_matrices() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let m = SquareMat::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]).unwrap();
        let ev = symmetric_eigenvalues(&m, 1e-14).unwrap();
        assert!((ev[0] - 1.0).abs() < 1e-12);
        assert!((ev[1] - 3.0).abs() < 1e-12);

        // Diagonal matrix comes back sorted.
        let d = SquareMat::from_rows(&[&[5.0, 0.0, 0.0], &[0.0, -1.0, 0.0], &[0.0, 0.0, 2.0]])
            .unwrap();
        let ev = symmetric_eigenvalues(&d, 1e-14).unwrap();
        assert_eq!(ev, vec![-1.0, 2.0, 5.0]);

        // 3x3 with known spectrum: circulant-ish [[2,-1,-1],[-1,2,-1],[-1,-1,2]]
        // has eigenvalues {0, 3, 3}.
        let c = SquareMat::from_rows(&[
            &[2.0, -1.0, -1.0],
            &[-1.0, 2.0, -1.0],
            &[-1.0, -1.0, 2.0],
        ])
        .unwrap();
        let ev = symmetric_eigenvalues(&c, 1e-14).unwrap();
        assert!(ev[0].abs() < 1e-12);
        assert!((ev[1] - 3.0).abs() < 1e-12);
        assert!((ev[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_matrix_rejected() {
        let m = SquareMat::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]).unwrap();
        assert!(symmetric_eigenvalues(&m, 1e-12).is_err());
    }
}
