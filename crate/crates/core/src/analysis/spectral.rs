//! Singular values by one-sided Jacobi rotations, and metrics built on them.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

use super::AnalysisError;

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOLERANCE: f64 = 1e-12;

const MAX_SWEEPS: usize = 80;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, AnalysisError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(AnalysisError::Shape(format!(
                "{rows}x{cols} matrix cannot hold {} values",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diag(&vec![T::one(); n])
    }

    pub fn diag(values: &[T]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, AnalysisError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AnalysisError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.get(r, c);
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, AnalysisError> {
        if self.cols != other.rows {
            return Err(AnalysisError::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..other.cols {
                    let o = &mut out.data[i * other.cols + j];
                    *o = *o + a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| v.is_zero())
    }
}

/// Singular values in descending order; there are `min(rows, cols)` of them.
pub fn singular_values<T: Real>(m: &Matrix<T>) -> Vec<T> {
    // Orthogonalize the columns of the taller orientation.
    let a = if m.rows >= m.cols { m.clone() } else { m.transpose() };
    let (rows, cols) = (a.rows, a.cols);
    let mut columns: Vec<Vec<T>> = (0..cols)
        .map(|c| (0..rows).map(|r| a.get(r, c)).collect())
        .collect();
    let tol = T::lit(RANK_TOLERANCE).max(T::epsilon() * T::lit(4.0));
    let dot = |x: &[T], y: &[T]| x.iter().zip(y).fold(T::zero(), |acc, (&p, &q)| acc + p * q);
    let scale = columns
        .iter()
        .map(|c| dot(c, c).sqrt())
        .fold(T::zero(), T::max);
    let negligible = scale * T::lit(RANK_TOLERANCE);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..cols {
            for j in i + 1..cols {
                let alpha = dot(&columns[i], &columns[i]);
                let beta = dot(&columns[j], &columns[j]);
                let gamma = dot(&columns[i], &columns[j]);
                if alpha.sqrt() <= negligible || beta.sqrt() <= negligible {
                    continue;
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (left, right) = columns.split_at_mut(j);
                for (x, y) in left[i].iter_mut().zip(right[0].iter_mut()) {
                    let (p, q) = (*x, *y);
                    *x = c * p - s * q;
                    *y = s * p + c * q;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<T> = columns.iter().map(|c| dot(c, c).sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    sv
}

/// `sigma_max / sigma_min`, or infinity when the matrix is numerically
/// rank deficient.
pub fn condition_number<T: Real>(m: &Matrix<T>) -> Result<T, AnalysisError> {
    if m.is_zero() {
        return Err(AnalysisError::Domain("condition number of a zero matrix".into()));
    }
    let sv = singular_values(m);
    let (max, min) = (sv[0], *sv.last().expect("at least one singular value"));
    if min < T::lit(RANK_TOLERANCE) * max {
        return Ok(T::infinity());
    }
    Ok(max / min)
}

/// Entropy of the normalized squared spectrum divided by `ln(min(rows, cols))`.
pub fn svd_entropy<T: Real>(m: &Matrix<T>) -> Result<T, AnalysisError> {
    let k = m.rows.min(m.cols);
    if k < 2 {
        return Err(AnalysisError::Domain(format!(
            "spectral entropy needs min(rows, cols) >= 2, got {}x{}",
            m.rows, m.cols
        )));
    }
    if m.is_zero() {
        return Err(AnalysisError::Domain("spectral entropy of a zero matrix".into()));
    }
    let energy: Vec<T> = singular_values(m).into_iter().map(|s| s * s).collect();
    let total: T = energy.iter().copied().sum();
    let h = energy
        .iter()
        .filter(|&&e| e > T::zero())
        .map(|&e| {
            let p = e / total;
            -p * p.ln()
        })
        .fold(T::zero(), |a, b| a + b);
    Ok((h / T::lit(k as f64).ln()).max(T::zero()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_spectra() {
        assert_eq!(condition_number(&Matrix::<f64>::identity(3)).unwrap(), 1.0);
        let d = Matrix::<f64>::diag(&[4.0, 2.0]);
        assert!((condition_number(&d).unwrap() - 2.0).abs() < 1e-15);
        let h = svd_entropy(&Matrix::diag(&[3f64.sqrt(), 1.0])).unwrap();
        let expected = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln()) / 2f64.ln();
        assert!((h - expected).abs() < 1e-12);
        assert!((expected - 0.8113).abs() < 1e-4);
    }

    #[test]
    fn rank_one_and_degenerate() {
        let r1 = Matrix::<f64>::from_rows(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]).unwrap();
        assert!(svd_entropy(&r1).unwrap().abs() < 1e-12);
        assert_eq!(condition_number(&r1).unwrap(), f64::INFINITY);
        assert!(condition_number(&Matrix::<f64>::zeros(2, 2)).is_err());
        assert!(svd_entropy(&Matrix::<f64>::zeros(2, 2)).is_err());
        assert!(svd_entropy(&Matrix::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).is_err());
    }

    #[test]
    fn wide_matches_tall() {
        let m = Matrix::<f64>::from_rows(&[vec![1.0, 2.0, 0.5, -1.0], vec![0.0, 3.0, 1.0, 2.0]]).unwrap();
        let a = singular_values(&m);
        let b = singular_values(&m.transpose());
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn f32_spectrum() {
        let d = Matrix::<f32>::diag(&[5.0, 1.0, 0.5]);
        assert!((condition_number(&d).unwrap() - 10.0).abs() < 1e-5);
    }
}
