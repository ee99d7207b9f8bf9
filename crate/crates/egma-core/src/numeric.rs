//! Minimal dense linear algebra over `f64`.
//!
//! Everything downstream works on small row-major matrices: patch features
//! (n×d), sentence features (m×d), similarity matrices. This module also
//! carries the central finite-difference oracle used to validate every
//! analytic gradient in the loss modules, with the relative-error metric
//!
//! ```text
//! rel_err(a, f) = |a - f| / max(|a|, |f|, 1e-8)
//! ```

use crate::error::{EgmaError, Result};

/// Row-major dense matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from row-major data, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(EgmaError::ShapeMismatch {
                what: "matrix data length",
                expected: (rows, cols),
                got: (data.len(), 1),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(EgmaError::NonFiniteFunction {
                at: format!("matrix entry {pos}"),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        assert!(r > 0, "need at least one row");
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self (p×q) · other (q×r) -> p×r`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Row norms of a matrix, rejecting rows below the zero-vector threshold.
pub fn row_norms(m: &Matrix) -> Result<Vec<f64>> {
    (0..m.rows())
        .map(|i| {
            let n = norm(m.row(i));
            if n < 1e-12 {
                Err(EgmaError::ZeroVector { row: i, norm: n })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Pairwise cosine similarities: entry (a, b) = cos(A_a, B_b), each in [-1, 1].
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(EgmaError::ShapeMismatch {
            what: "cosine inner dimension",
            expected: (a.rows(), a.cols()),
            got: (b.rows(), b.cols()),
        });
    }
    let na = row_norms(a)?;
    let nb = row_norms(b)?;
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out.set(i, j, dot(a.row(i), b.row(j)) / (na[i] * nb[j]));
        }
    }
    Ok(out)
}

/// Backward pass for `cosine_matrix` into the left operand only: given
/// upstream gradient `g` on C = cosine_matrix(A, B), accumulate into `da`.
///
/// d cos(a,b)/da = b/(|a||b|) - cos(a,b) * a/|a|^2, symmetric in b.
pub fn cosine_backward_left(a: &Matrix, b: &Matrix, c: &Matrix, g: &Matrix, da: &mut Matrix) {
    let nb: Vec<f64> = (0..b.rows()).map(|j| norm(b.row(j))).collect();
    for i in 0..a.rows() {
        let na = norm(a.row(i));
        let ar = a.row(i);
        let dar = da.row_mut(i);
        for j in 0..b.rows() {
            let w = g.get(i, j);
            if w == 0.0 {
                continue;
            }
            let cij = c.get(i, j);
            let inv = 1.0 / (na * nb[j]);
            let br = b.row(j);
            for k in 0..ar.len() {
                dar[k] += w * (br[k] * inv - cij * ar[k] / (na * na));
            }
        }
    }
}

/// Backward pass for `cosine_matrix` into the right operand only.
pub fn cosine_backward_right(a: &Matrix, b: &Matrix, c: &Matrix, g: &Matrix, db: &mut Matrix) {
    let gt = g.transpose();
    let ct = c.transpose();
    cosine_backward_left(b, a, &ct, &gt, db);
}

/// Backward pass for `cosine_matrix` into both operands.
pub fn cosine_matrix_backward(a: &Matrix, b: &Matrix, c: &Matrix, g: &Matrix, da: &mut Matrix, db: &mut Matrix) {
    cosine_backward_left(a, b, c, g, da);
    cosine_backward_right(a, b, c, g, db);
}

/// Temperature-scaled log-softmax with max-shift for stability.
///
/// Entry i = v_i/t - log sum_j exp(v_j/t); exp of the output sums to 1.
pub fn log_softmax(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(EgmaError::NonPositiveTemperature { tau });
    }
    let scaled: Vec<f64> = v.iter().map(|x| x / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok(scaled.iter().map(|x| x - lse).collect())
}

/// Temperature-scaled softmax (exp of `log_softmax`).
pub fn softmax(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    Ok(log_softmax(v, tau)?.iter().map(|x| x.exp()).collect())
}

/// Central finite differences over a flat slice:
/// grad_i = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
pub fn finite_diff_grad_slice<F>(f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(EgmaError::NonFiniteFunction {
                at: format!("coordinate {i}"),
            });
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Central finite differences of a scalar function of a matrix.
pub fn finite_diff_grad<F>(f: F, x: &Matrix, eps: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> f64,
{
    let (rows, cols) = (x.rows(), x.cols());
    let grad = finite_diff_grad_slice(
        |flat| {
            let m = Matrix {
                rows,
                cols,
                data: flat.to_vec(),
            };
            f(&m)
        },
        x.data(),
        eps,
    )?;
    Ok(Matrix {
        rows,
        cols,
        data: grad,
    })
}

/// Outcome of comparing an analytic gradient against the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coordinate: usize,
    pub passed: bool,
}

/// rel_err(a, f) = |a - f| / max(|a|, |f|, 1e-8)
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare gradients coordinate-wise under the relative-error metric.
pub fn compare_grads(analytic: &[f64], numeric: &[f64], tolerance: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut max_rel_err = 0.0;
    let mut worst_coordinate = 0;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_err(a, n);
        if e > max_rel_err {
            max_rel_err = e;
            worst_coordinate = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_coordinate,
        passed: max_rel_err < tolerance,
    }
}
