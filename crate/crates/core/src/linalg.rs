//! Small dense linear-algebra helpers shared by the simulator.
//!
//! Iterates are stored as `n x d` matrices (one row per node). The symmetric
//! eigensolver is a cyclic Jacobi rotation scheme: the matrices handled here
//! are at most a few hundred rows, and Jacobi gives deterministic, accurate
//! spectra for them.

use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 200;

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Eigenvalues sorted in descending order.
    pub values: Vec<f64>,
    /// Column `j` is the unit eigenvector for `values[j]`.
    pub vectors: Mat,
}

/// Cyclic Jacobi eigensolver for a symmetric matrix.
///
/// Sweeps until the off-diagonal Frobenius mass drops below `1e-12`.
pub fn sym_eigen(a: &Mat) -> SymEigen {
    assert!(a.is_square(), "sym_eigen needs a square matrix");
    let n = a.nrows();
    let mut m = a.clone();
    // symmetrize to remove round-off asymmetry
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    let mut v = Mat::identity(n, n);

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_mass(&m) < JACOBI_TOL {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
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
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;

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
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap());
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &v.column(i));
    }
    SymEigen { values, vectors }
}

fn off_diagonal_mass(m: &Mat) -> f64 {
    let n = m.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    s.sqrt()
}

impl SymEigen {
    /// Rebuilds `f(A) = V diag(f(lambda)) V^T`.
    pub fn apply_spectral<F: Fn(f64) -> f64>(&self, f: F) -> Mat {
        let n = self.values.len();
        let mut out = Mat::zeros(n, n);
        for (j, &lam) in self.values.iter().enumerate() {
            let w = f(lam);
            if w == 0.0 {
                continue;
            }
            let col = self.vectors.column(j);
            out += w * &col * col.transpose();
        }
        out
    }
}

/// Vector p-norm; `p = f64::INFINITY` gives the max-abs norm.
pub fn pnorm(x: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    } else if p == 2.0 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    } else if p == 1.0 {
        x.iter().map(|v| v.abs()).sum()
    } else {
        x.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// `||A||_max = max_i ||a_i||_p` over the rows of `A`.
pub fn max_row_norm(a: &Mat, p: f64) -> f64 {
    let mut row = vec![0.0; a.ncols()];
    let mut best = 0.0_f64;
    for i in 0..a.nrows() {
        for (j, r) in row.iter_mut().enumerate() {
            *r = a[(i, j)];
        }
        best = best.max(pnorm(&row, p));
    }
    best
}

/// Largest Euclidean distance of a row of `a` to the vector `x`.
pub fn max_row_distance(a: &Mat, x: &[f64]) -> f64 {
    let mut best = 0.0_f64;
    for i in 0..a.nrows() {
        let d2: f64 = (0..a.ncols()).map(|j| (a[(i, j)] - x[j]).powi(2)).sum();
        best = best.max(d2.sqrt());
    }
    best
}

/// Column means of `a`, i.e. the node average.
pub fn column_mean(a: &Mat) -> Vec<f64> {
    let n = a.nrows() as f64;
    (0..a.ncols()).map(|j| a.column(j).sum() / n).collect()
}

/// `1 x^T` with `n` rows.
pub fn broadcast_row(n: usize, x: &[f64]) -> Mat {
    Mat::from_fn(n, x.len(), |_, j| x[j])
}

/// Frobenius distance of `a` to the consensual matrix built from its own
/// column mean.
pub fn consensus_error(a: &Mat) -> f64 {
    let mean = column_mean(a);
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            s += (a[(i, j)] - mean[j]).powi(2);
        }
    }
    s.sqrt()
}

/// `||A||_M^2 = tr(A^T M A)` for a symmetric `n x n` weight matrix `M`.
pub fn weighted_sq_norm(a: &Mat, m: &Mat) -> f64 {
    let ma = m * a;
    a.component_mul(&ma).sum()
}

/// Largest absolute entry.
pub fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_recovers_diagonal() {
        let a = Mat::from_diagonal(&Vector::from_vec(vec![1.0, 3.0, 2.0]));
        let e = sym_eigen(&a);
        assert_eq!(e.values, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn jacobi_eigenpairs_satisfy_definition() {
        let a = Mat::from_row_slice(
            4,
            4,
            &[
                4.0, 1.0, 0.5, 0.0, 1.0, 3.0, 0.2, 0.1, 0.5, 0.2, 2.0, 0.3, 0.0, 0.1, 0.3, 1.0,
            ],
        );
        let e = sym_eigen(&a);
        for j in 0..4 {
            let v = e.vectors.column(j).into_owned();
            let r = &a * &v - e.values[j] * &v;
            assert!(r.norm() < 1e-10);
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
        let trace: f64 = e.values.iter().sum();
        assert!((trace - 10.0).abs() < 1e-12);
        for w in e.values.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn spectral_reconstruction_is_identity_map() {
        let a = Mat::from_row_slice(3, 3, &[2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0]);
        let e = sym_eigen(&a);
        let back = e.apply_spectral(|l| l);
        assert!((back - a).abs().max() < 1e-12);
    }

    #[test]
    fn norms() {
        assert_eq!(pnorm(&[3.0, -4.0], 2.0), 5.0);
        assert_eq!(pnorm(&[3.0, -4.0], f64::INFINITY), 4.0);
        assert_eq!(pnorm(&[3.0, -4.0], 1.0), 7.0);
        let a = Mat::from_row_slice(2, 2, &[1.0, 1.0, 3.0, 0.0]);
        assert_eq!(max_row_norm(&a, 1.0), 3.0);
        assert_eq!(max_row_norm(&a, f64::INFINITY), 3.0);
        assert!((consensus_error(&a) - 2.5f64.sqrt()).abs() < 1e-15);
    }
}
