//! Cholesky solves, symmetric eigendecomposition (cyclic Jacobi), softmax and
//! a top-2 PCA built on the eigensolver.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Numerically stable softmax (max-shifted).
pub fn softmax(q: &[f64]) -> Vec<f64> {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = q.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log(softmax(q))`, computed without forming tiny probabilities first.
pub fn log_softmax(q: &[f64]) -> Vec<f64> {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + q.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    q.iter().map(|v| v - lse).collect()
}

/// Lower-triangular Cholesky factor of an SPD matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self> {
        assert!(a.is_square(), "cholesky of non-square matrix");
        let n = a.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::SingularKernel { pivot: j, value: d });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.l.rows();
        assert_eq!(rhs.len(), n, "rhs length mismatch");
        let mut y = rhs.to_vec();
        for i in 0..n {
            let s = dot(&self.l.row(i)[..i], &y[..i]);
            y[i] = (y[i] - s) / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }

    /// Solves for every column of `rhs`.
    pub fn solve_matrix(&self, rhs: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(rhs.rows(), rhs.cols());
        for j in 0..rhs.cols() {
            let x = self.solve(&rhs.col(j));
            for (i, v) in x.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }

    pub fn inverse(&self) -> Matrix {
        self.solve_matrix(&Matrix::identity(self.l.rows())).symmetrize()
    }
}

/// Default jitter: `1e-10` times the mean diagonal.
pub fn default_jitter(k: &Matrix) -> f64 {
    let n = k.rows().max(1) as f64;
    1e-10 * (0..k.rows()).map(|i| k[(i, i)].abs()).sum::<f64>() / n
}

/// Solves `(k + jitter * I) x = rhs` by Cholesky.
pub fn solve_spd(k: &Matrix, rhs: &[f64], jitter: f64) -> Result<Vec<f64>> {
    assert!(k.is_square(), "solve_spd needs a square matrix");
    Ok(Cholesky::factor(&k.add_diag(jitter))?.solve(rhs))
}

/// Inverse of `k + jitter * I` for an SPD `k`.
pub fn inverse_spd(k: &Matrix, jitter: f64) -> Result<Matrix> {
    Ok(Cholesky::factor(&k.add_diag(jitter))?.inverse())
}

/// General square solve by Gaussian elimination with partial pivoting.
/// Returns `None` when a pivot collapses below `1e-13` relative to the
/// largest entry.
pub fn solve_general(a: &Matrix, rhs: &Matrix) -> Option<Matrix> {
    assert!(a.is_square());
    assert_eq!(a.rows(), rhs.rows());
    let n = a.rows();
    let m = rhs.cols();
    let mut aa = a.clone();
    let mut bb = rhs.clone();
    let scale = aa.as_slice().iter().fold(0.0f64, |s, v| s.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| aa[(i, c)].abs().total_cmp(&aa[(j, c)].abs()))
            .unwrap();
        if aa[(p, c)].abs() < 1e-13 * scale {
            return None;
        }
        if p != c {
            for j in 0..n {
                let t = aa[(c, j)];
                aa[(c, j)] = aa[(p, j)];
                aa[(p, j)] = t;
            }
            for j in 0..m {
                let t = bb[(c, j)];
                bb[(c, j)] = bb[(p, j)];
                bb[(p, j)] = t;
            }
        }
        for r in (c + 1)..n {
            let f = aa[(r, c)] / aa[(c, c)];
            if f == 0.0 {
                continue;
            }
            for j in c..n {
                aa[(r, j)] -= f * aa[(c, j)];
            }
            for j in 0..m {
                bb[(r, j)] -= f * bb[(c, j)];
            }
        }
    }
    let mut x = Matrix::zeros(n, m);
    for j in 0..m {
        for i in (0..n).rev() {
            let mut s = bb[(i, j)];
            for k in (i + 1)..n {
                s -= aa[(i, k)] * x[(k, j)];
            }
            x[(i, j)] = s / aa[(i, i)];
        }
    }
    Some(x)
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Eigenvalues, sorted descending.
    pub values: Vec<f64>,
    /// Eigenvectors as columns, in the same order as `values`.
    pub vectors: Matrix,
}

/// Cyclic Jacobi rotations until the off-diagonal mass is negligible.
pub fn sym_eigen(a: &Matrix) -> SymEigen {
    assert!(a.is_square(), "sym_eigen of non-square matrix");
    let n = a.rows();
    let mut m = a.symmetrize();
    let mut v = Matrix::identity(n);
    let total: f64 = m.as_slice().iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, new)] = v[(k, old)];
        }
    }
    SymEigen { values, vectors }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Definiteness {
    PositiveDefinite,
    NegativeDefinite,
    Indefinite,
    Semidefinite,
}

/// Classifies a symmetric matrix by the signs of its eigenvalues, with a
/// relative tolerance on "zero".
pub fn definiteness(a: &Matrix) -> Definiteness {
    let eig = sym_eigen(a);
    let scale = eig.values.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let pos = eig.values.iter().filter(|&&v| v > tol).count();
    let neg = eig.values.iter().filter(|&&v| v < -tol).count();
    let n = eig.values.len();
    if pos == n {
        Definiteness::PositiveDefinite
    } else if neg == n {
        Definiteness::NegativeDefinite
    } else if pos > 0 && neg > 0 {
        Definiteness::Indefinite
    } else {
        Definiteness::Semidefinite
    }
}

/// Top-2 principal components of a set of rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// 2 x cols, rows are unit-norm components.
    pub components: Matrix,
    pub eigenvalues: [f64; 2],
    pub explained_ratio: [f64; 2],
    /// Set when the centered covariance has rank < 2; the second component is
    /// zeroed in that case.
    pub degenerate: bool,
}

impl Pca2 {
    /// Projects rows with this basis, centering by the fitted mean.
    pub fn project(&self, rows: &Matrix) -> Matrix {
        assert_eq!(rows.cols(), self.mean.len(), "pca dimension mismatch");
        let mut centered = rows.clone();
        for i in 0..centered.rows() {
            for (v, m) in centered.row_mut(i).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        centered.matmul_nt(&self.components)
    }
}

/// Fits the top-2 PCA and returns `(projection, fitted basis)`.
pub fn pca_top2(rows: &Matrix) -> (Matrix, Pca2) {
    assert!(
        rows.rows() >= 2 && rows.cols() >= 2,
        "pca_top2 needs at least 2 rows and 2 columns"
    );
    let n = rows.rows();
    let d = rows.cols();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(rows.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = rows.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let cov = centered.matmul_tn(&centered).scale(1.0 / (n - 1) as f64);
    let eig = sym_eigen(&cov);
    let total: f64 = eig.values.iter().map(|v| v.max(0.0)).sum();
    let l1 = eig.values[0].max(0.0);
    let l2 = eig.values[1].max(0.0);
    let degenerate = total <= 0.0 || l2 <= 1e-12 * l1.max(f64::MIN_POSITIVE);
    let mut components = Matrix::zeros(2, d);
    for k in 0..d {
        components[(0, k)] = eig.vectors[(k, 0)];
        if !degenerate {
            components[(1, k)] = eig.vectors[(k, 1)];
        }
    }
    // sign convention: largest-magnitude coordinate positive
    for c in 0..2 {
        let row = components.row(c);
        let pivot = row
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        if pivot < 0.0 {
            components.row_mut(c).iter_mut().for_each(|v| *v = -*v);
        }
    }
    let (r1, r2) = if total > 0.0 {
        (l1 / total, if degenerate { 0.0 } else { l2 / total })
    } else {
        (0.0, 0.0)
    };
    let pca = Pca2 {
        mean,
        components,
        eigenvalues: [l1, if degenerate { 0.0 } else { l2 }],
        explained_ratio: [r1, r2],
        degenerate,
    };
    (pca.project(rows), pca)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_stable() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300 + 1e-400);
    }

    #[test]
    fn solve_spd_trivial_cases() {
        let x = solve_spd(&Matrix::identity(3), &[1.0, -2.0, 3.0], 0.0).unwrap();
        assert_eq!(x, vec![1.0, -2.0, 3.0]);
        let x = solve_spd(&Matrix::identity(2).scale(2.0), &[4.0, 6.0], 0.0).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-15 && (x[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn solve_spd_reports_singular() {
        let k = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        assert!(matches!(
            solve_spd(&k, &[1.0, 0.0], 0.0),
            Err(Error::SingularKernel { .. })
        ));
        // jitter rescues it
        assert!(solve_spd(&k, &[1.0, 0.0], 1e-6).is_ok());
    }

    #[test]
    fn pca_rank_one_line() {
        let rows: Vec<[f64; 2]> = (0..6).map(|i| [i as f64, 2.0 * i as f64]).collect();
        let (_, pca) = pca_top2(&Matrix::from_rows(&rows));
        let s5 = 5f64.sqrt();
        assert!((pca.components[(0, 0)] - 1.0 / s5).abs() < 1e-10);
        assert!((pca.components[(0, 1)] - 2.0 / s5).abs() < 1e-10);
        assert!(pca.degenerate);
        assert_eq!(pca.components.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn pca_axis_aligned() {
        // variances 9 and 1 along x and y
        let rows = Matrix::from_rows(&[[3.0, 0.0], [-3.0, 0.0], [0.0, 1.0], [0.0, -1.0]]);
        let (_, pca) = pca_top2(&rows);
        assert!((pca.components[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!(pca.components[(0, 1)].abs() < 1e-12);
        assert!(!pca.degenerate);
    }

    #[test]
    fn definiteness_classes() {
        assert_eq!(
            definiteness(&Matrix::identity(3)),
            Definiteness::PositiveDefinite
        );
        assert_eq!(
            definiteness(&Matrix::identity(3).scale(-1.0)),
            Definiteness::NegativeDefinite
        );
        assert_eq!(
            definiteness(&Matrix::diag(&[1.0, -1.0])),
            Definiteness::Indefinite
        );
        assert_eq!(
            definiteness(&Matrix::diag(&[1.0, 0.0])),
            Definiteness::Semidefinite
        );
    }

    #[test]
    fn general_solve_matches_known() {
        let a = Matrix::from_rows(&[[0.0, 2.0], [1.0, 1.0]]);
        let b = Matrix::column(&[4.0, 3.0]);
        let x = solve_general(&a, &b).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-14 && (x[(1, 0)] - 2.0).abs() < 1e-14);
        assert!(solve_general(&Matrix::zeros(2, 2), &b).is_none());
    }
}
