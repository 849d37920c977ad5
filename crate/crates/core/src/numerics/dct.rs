//! Orthonormal DCT-II and its inverse (DCT-III), applied along rows.
//!
//! Uses the dense basis matrix: `dct(x) = x · Cᵀ` and `idct(y) = y · C`
//! where `C[k][i] = s_k cos(π (i + ½) k / n)`, `s_0 = √(1/n)` and
//! `s_k = √(2/n)`.

use std::f64::consts::PI;

use super::matrix::{gemm, Trans};
use super::Matrix;

/// A cached orthonormal DCT-II basis for one length.
#[derive(Clone, Debug)]
pub struct Dct {
    basis: Matrix,
}

impl Dct {
    pub fn new(n: usize) -> Self {
        let mut basis = Matrix::zeros(n, n);
        if n > 0 {
            let s0 = (1.0 / n as f64).sqrt();
            let sk = (2.0 / n as f64).sqrt();
            for k in 0..n {
                let s = if k == 0 { s0 } else { sk };
                for i in 0..n {
                    // reduce the argument exactly in integers before scaling
                    let phase = ((2 * i + 1) * k) % (4 * n);
                    basis.set(k, i, s * (PI * phase as f64 / (2 * n) as f64).cos());
                }
            }
        }
        Self { basis }
    }

    pub fn len(&self) -> usize {
        self.basis.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.rows() == 0
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    /// Forward transform of every row. Panics if `m.cols() != self.len()`.
    pub fn forward(&self, m: &Matrix) -> Matrix {
        assert_eq!(m.cols(), self.len(), "dct length mismatch");
        let mut out = Matrix::zeros(m.rows(), m.cols());
        gemm(Trans::No, Trans::Yes, 1.0, m, &self.basis, 0.0, &mut out);
        out
    }

    pub fn inverse(&self, c: &Matrix) -> Matrix {
        assert_eq!(c.cols(), self.len(), "idct length mismatch");
        let mut out = Matrix::zeros(c.rows(), c.cols());
        gemm(Trans::No, Trans::No, 1.0, c, &self.basis, 0.0, &mut out);
        out
    }
}

pub fn dct_rows(m: &Matrix) -> Matrix {
    Dct::new(m.cols()).forward(m)
}

pub fn idct_rows(c: &Matrix) -> Matrix {
    Dct::new(c.cols()).inverse(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
    }

    /// Direct evaluation of the DCT-II sum, independent of the basis cache.
    fn dct_direct(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        (0..x.len())
            .map(|k| {
                let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                s * x
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * (PI * (i as f64 + 0.5) * k as f64 / n).cos())
                    .sum::<f64>()
            })
            .collect()
    }

    #[test]
    fn constant_row_has_only_dc() {
        let d = 16;
        let c = 2.5;
        let out = dct_rows(&Matrix::filled(1, d, c));
        assert!((out.get(0, 0) - c * (d as f64).sqrt()).abs() < 1e-12);
        for k in 1..d {
            assert!(out.get(0, k).abs() < 1e-12);
        }
    }

    #[test]
    fn agrees_with_direct_sum() {
        let x = random(1, 9, 1);
        let fast = dct_rows(&x);
        for (a, b) in fast.data().iter().zip(dct_direct(x.data())) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_and_parseval_up_to_64x1024() {
        for &(r, c) in &[(1, 1), (3, 7), (8, 128), (64, 1024)] {
            let x = random(r, c, (r * c) as u64);
            let y = dct_rows(&x);
            assert!(idct_rows(&y).max_abs_diff(&x) < 1e-9, "{r}x{c}");
            for row in 0..r {
                let nx: f64 = x.row(row).iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny: f64 = y.row(row).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((nx - ny).abs() < 1e-10, "{r}x{c} row {row}");
            }
        }
    }
}
