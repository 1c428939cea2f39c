//! Small dense Hermitian algebra for the IAA covariance.

use num_complex::Complex64;

use crate::error::{AoaError, Result};

/// Square complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    n: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![Complex64::new(0.0, 0.0); n * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.n + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: Complex64) {
        self.data[r * self.n + c] = v;
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    /// Largest entrywise deviation `|R − R^H|`.
    pub fn hermitian_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.n {
            for c in 0..self.n {
                worst = worst.max((self.get(r, c) - self.get(c, r).conj()).norm());
            }
        }
        worst
    }

    pub fn mul_vec(&self, x: &[Complex64]) -> Vec<Complex64> {
        self.data
            .chunks_exact(self.n)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Lower-triangular Cholesky factor `R = L·L^H` of a Hermitian positive
/// definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: CMatrix,
}

impl Cholesky {
    pub fn factor(r: &CMatrix) -> Result<Self> {
        let n = r.dim();
        let mut l = CMatrix::zeros(n);
        let scale = (0..n).map(|i| r.get(i, i).re.abs()).fold(0.0, f64::max);
        for j in 0..n {
            let mut d = r.get(j, j).re;
            for k in 0..j {
                d -= l.get(j, k).norm_sqr();
            }
            if !(d > scale * 1e-14) || !d.is_finite() {
                return Err(AoaError::Singular(format!(
                    "pivot {j} is {d:e} against diagonal scale {scale:e}"
                )));
            }
            let djj = d.sqrt();
            l.set(j, j, Complex64::new(djj, 0.0));
            for i in j + 1..n {
                let mut s = r.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k).conj();
                }
                l.set(i, j, s / djj);
            }
        }
        Ok(Self { l })
    }

    pub fn lower(&self) -> &CMatrix {
        &self.l
    }

    /// Solves `L·x = b` in place.
    pub fn forward_substitute(&self, b: &mut [Complex64]) {
        let n = self.l.dim();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l.get(i, k) * b[k];
            }
            b[i] = s / self.l.get(i, i).re;
        }
    }

    /// Solves `L^H·x = b` in place.
    pub fn backward_substitute(&self, b: &mut [Complex64]) {
        let n = self.l.dim();
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l.get(k, i).conj() * b[k];
            }
            b[i] = s / self.l.get(i, i).re;
        }
    }

    /// Solves `R·x = b`.
    pub fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        let mut x = b.to_vec();
        self.forward_substitute(&mut x);
        self.backward_substitute(&mut x);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn hermitian_pd() -> CMatrix {
        // B·B^H + I for a fixed B
        let b = [
            [c(1.0, 0.5), c(0.2, -0.1), c(0.0, 1.0)],
            [c(-0.3, 0.0), c(2.0, 0.0), c(0.5, 0.5)],
            [c(0.1, 0.1), c(-1.0, 0.2), c(0.7, -0.4)],
        ];
        let mut r = CMatrix::zeros(3);
        for i in 0..3 {
            for j in 0..3 {
                let mut s: Complex64 = (0..3).map(|k| b[i][k] * b[j][k].conj()).sum();
                if i == j {
                    s += 1.0;
                }
                r.set(i, j, s);
            }
        }
        r
    }

    #[test]
    fn factor_reconstructs() {
        let r = hermitian_pd();
        let ch = Cholesky::factor(&r).unwrap();
        let l = ch.lower();
        for i in 0..3 {
            for j in 0..3 {
                let s: Complex64 = (0..3).map(|k| l.get(i, k) * l.get(j, k).conj()).sum();
                assert!((s - r.get(i, j)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn solve_inverts() {
        let r = hermitian_pd();
        let b = vec![c(1.0, 2.0), c(-0.5, 0.0), c(0.0, 3.0)];
        let x = Cholesky::factor(&r).unwrap().solve(&b);
        let back = r.mul_vec(&x);
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).norm() < 1e-12);
        }
    }

    #[test]
    fn singular_rejected() {
        let mut r = CMatrix::zeros(2);
        r.set(0, 0, c(1.0, 0.0));
        r.set(0, 1, c(1.0, 0.0));
        r.set(1, 0, c(1.0, 0.0));
        r.set(1, 1, c(1.0, 0.0));
        assert!(matches!(Cholesky::factor(&r), Err(AoaError::Singular(_))));
        assert!(Cholesky::factor(&CMatrix::zeros(3)).is_err());
    }
}
