//! Small dense linear algebra: row-major matrices, Cholesky with jitter
//! escalation, triangular solves.
//!
//! Kriging and GP regression only ever factor symmetric positive definite
//! kernel matrices of moderate size, so this stays deliberately minimal and
//! deterministic: no pivoting, no blocking, fixed summation order.

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    /// Builds a symmetric matrix from `f(i, j)`, evaluating only `j <= i`.
    pub fn symmetric_from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn t(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(v) {
                acc += a * b;
            }
            out[i] = acc;
        }
        out
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = out.row_mut(i);
                for j in 0..other.cols {
                    dst[j] += a * src[j];
                }
            }
        }
        out
    }

    pub fn add_diag(&mut self, v: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self[(i, i)] += v;
        }
    }

    pub fn trace(&self) -> f64 {
        let n = self.rows.min(self.cols);
        (0..n).map(|i| self[(i, i)]).sum()
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower-triangular Cholesky factor of an SPD matrix, with the jitter that
/// was actually added to the diagonal to make the factorization succeed.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Mat,
    pub jitter: f64,
}

/// Factors `a + jitter*I`, escalating `jitter` by 10x from `base_jitter` up to
/// `max_jitter` until the factorization succeeds. The raw attempt with zero
/// jitter is not tried: kernel matrices here are at best borderline PD.
pub fn cholesky(a: &Mat, base_jitter: f64, max_jitter: f64) -> Result<Cholesky> {
    assert_eq!(a.rows(), a.cols(), "cholesky needs a square matrix");
    let mut jitter = base_jitter;
    loop {
        match try_factor(a, jitter) {
            Ok(l) => return Ok(Cholesky { l, jitter }),
            Err((pivot, diag)) => {
                let next = if jitter == 0.0 { base_jitter.max(f64::MIN_POSITIVE) } else { jitter * 10.0 };
                if next > max_jitter {
                    let cond = condition_estimate(a);
                    return Err(CoreError::SingularMatrix {
                        pivot,
                        diag,
                        jitter,
                        cond,
                    });
                }
                jitter = next;
            }
        }
    }
}

fn try_factor(a: &Mat, jitter: f64) -> std::result::Result<Mat, (usize, f64)> {
    let n = a.rows();
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            if i == j {
                sum += jitter;
            }
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err((i, sum));
                }
                l[(i, j)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Cheap spectral condition estimate via the Gershgorin upper bound over the
/// smallest diagonal entry. Only used in error diagnostics.
fn condition_estimate(a: &Mat) -> f64 {
    let n = a.rows();
    let mut hi: f64 = 0.0;
    let mut lo = f64::INFINITY;
    for i in 0..n {
        let r: f64 = a.row(i).iter().map(|v| v.abs()).sum();
        hi = hi.max(r);
        lo = lo.min(a[(i, i)].abs());
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

impl Cholesky {
    pub fn l(&self) -> &Mat {
        &self.l
    }

    /// Solves `(A + jitter*I) x = b`.
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward_sub(&mut x);
        self.backward_sub(&mut x);
        x
    }

    /// Solves `(A + jitter*I) X = B` column by column.
    pub fn solve_mat(&self, b: &Mat) -> Mat {
        let n = self.l.rows();
        assert_eq!(b.rows(), n);
        let mut out = Mat::zeros(n, b.cols());
        let mut col = vec![0.0; n];
        for j in 0..b.cols() {
            for i in 0..n {
                col[i] = b[(i, j)];
            }
            self.forward_sub(&mut col);
            self.backward_sub(&mut col);
            for i in 0..n {
                out[(i, j)] = col[i];
            }
        }
        out
    }

    /// Solves `L z = b` in place.
    pub fn forward_sub(&self, b: &mut [f64]) {
        let n = self.l.rows();
        for i in 0..n {
            let mut sum = b[i];
            let row = self.l.row(i);
            for k in 0..i {
                sum -= row[k] * b[k];
            }
            b[i] = sum / row[i];
        }
    }

    /// Solves `L^T x = b` in place.
    pub fn backward_sub(&self, b: &mut [f64]) {
        let n = self.l.rows();
        for i in (0..n).rev() {
            let mut sum = b[i];
            for k in i + 1..n {
                sum -= self.l[(k, i)] * b[k];
            }
            b[i] = sum / self.l[(i, i)];
        }
    }

    pub fn logdet(&self) -> f64 {
        let n = self.l.rows();
        let mut acc = 0.0;
        for i in 0..n {
            acc += self.l[(i, i)].ln();
        }
        2.0 * acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd3() -> Mat {
        // A = B^T B + I for a fixed B, guaranteed SPD.
        Mat::from_rows(&[
            vec![5.0, 2.0, 1.0],
            vec![2.0, 6.0, 3.0],
            vec![1.0, 3.0, 4.0],
        ])
    }

    #[test]
    fn cholesky_reconstructs_matrix() {
        let a = spd3();
        let ch = cholesky(&a, 0.0, 1e-4).unwrap();
        let l = ch.l();
        let lt = l.t();
        let back = l.matmul(&lt);
        for i in 0..3 {
            for j in 0..3 {
                assert!((back[(i, j)] - a[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn solve_matches_direct_inverse() {
        let a = spd3();
        let ch = cholesky(&a, 0.0, 1e-4).unwrap();
        let b = vec![1.0, -2.0, 0.5];
        let x = ch.solve_vec(&b);
        let ax = a.matvec(&x);
        for i in 0..3 {
            assert!((ax[i] - b[i]).abs() < 1e-12, "residual {}", ax[i] - b[i]);
        }
    }

    #[test]
    fn logdet_matches_hand_computed_2x2() {
        // det([[4, 1], [1, 3]]) = 11
        let a = Mat::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]);
        let ch = cholesky(&a, 0.0, 1e-4).unwrap();
        assert!((ch.logdet() - 11.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn jitter_escalates_on_rank_deficiency() {
        // Rank-1 ones(3,3): a base jitter below the f64 epsilon of the pivot
        // cancels away entirely, forcing escalation before success.
        let a = Mat::from_rows(&[vec![1.0; 3], vec![1.0; 3], vec![1.0; 3]]);
        let ok = cholesky(&a, 1e-20, 1e-4).unwrap();
        assert!(ok.jitter > 1e-17, "jitter stayed at {}", ok.jitter);
    }

    #[test]
    fn indefinite_matrix_is_rejected_with_diagnostics() {
        // Eigenvalues 3 and -1: no jitter within the cap can fix this.
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        let err = cholesky(&a, 1e-10, 1e-4).unwrap_err();
        match err {
            CoreError::SingularMatrix { cond, diag, .. } => {
                assert!(cond > 1.0);
                assert!(diag < 0.0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn matmul_and_transpose_agree_with_hand_product() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Mat::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = a.matmul(&b);
        assert_eq!(c.row(0), &[19.0, 22.0]);
        assert_eq!(c.row(1), &[43.0, 50.0]);
        let at = a.t();
        assert_eq!(at.row(0), &[1.0, 3.0]);
    }
}
