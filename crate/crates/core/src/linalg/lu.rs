use crate::error::{dim_err, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Condition-number threshold above which a solve is reported as ill-conditioned.
pub const CONDITION_THRESHOLD: f64 = 1e12;

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Debug, Clone)]
pub struct Lu<T> {
    lu: Matrix<T>,
    perm: Vec<usize>,
}

impl<T: Scalar> Lu<T> {
    /// Factors a square matrix. Fails only on an exactly zero pivot.
    pub fn factor(a: &Matrix<T>) -> Result<Self> {
        if !a.is_square() {
            return Err(dim_err("LU factor", "square matrix", format!("{:?}", a.shape())));
        }
        let n = a.rows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[(k, k)].abs();
            for i in k + 1..n {
                let v = lu[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == T::zero() || !best.is_finite() {
                return Err(Error::IllConditioned {
                    what: "LU pivot",
                    cond: f64::INFINITY,
                    threshold: CONDITION_THRESHOLD,
                });
            }
            if p != k {
                perm.swap(p, k);
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = tmp;
                }
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let f = lu[(i, k)] / pivot;
                lu[(i, k)] = f;
                if f != T::zero() {
                    for j in k + 1..n {
                        let u = lu[(k, j)];
                        lu[(i, j)] -= f * u;
                    }
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.lu.rows()
    }

    /// Solves `A X = B` for every column of `B`.
    pub fn solve(&self, b: &Matrix<T>) -> Matrix<T> {
        let n = self.dim();
        assert_eq!(b.rows(), n, "LU solve shape mismatch");
        let m = b.cols();
        let mut x = Matrix::zeros(n, m);
        for i in 0..n {
            x.row_mut(i).copy_from_slice(b.row(self.perm[i]));
        }
        // forward substitution with unit lower factor
        for i in 0..n {
            for k in 0..i {
                let l = self.lu[(i, k)];
                if l != T::zero() {
                    for j in 0..m {
                        let v = x[(k, j)];
                        x[(i, j)] -= l * v;
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let u = self.lu[(i, k)];
                if u != T::zero() {
                    for j in 0..m {
                        let v = x[(k, j)];
                        x[(i, j)] -= u * v;
                    }
                }
            }
            let d = self.lu[(i, i)];
            for j in 0..m {
                x[(i, j)] /= d;
            }
        }
        x
    }

    /// Solves `Aᵀ X = B`.
    pub fn solve_transpose(&self, b: &Matrix<T>) -> Matrix<T> {
        let n = self.dim();
        assert_eq!(b.rows(), n, "LU solve shape mismatch");
        let m = b.cols();
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ z = b, Lᵀ y = z, x = Pᵀ y.
        let mut z = b.clone();
        for i in 0..n {
            for k in 0..i {
                let u = self.lu[(k, i)];
                if u != T::zero() {
                    for j in 0..m {
                        let v = z[(k, j)];
                        z[(i, j)] -= u * v;
                    }
                }
            }
            let d = self.lu[(i, i)];
            for j in 0..m {
                z[(i, j)] /= d;
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let l = self.lu[(k, i)];
                if l != T::zero() {
                    for j in 0..m {
                        let v = z[(k, j)];
                        z[(i, j)] -= l * v;
                    }
                }
            }
        }
        let mut x = Matrix::zeros(n, m);
        for i in 0..n {
            x.row_mut(self.perm[i]).copy_from_slice(z.row(i));
        }
        x
    }

    pub fn inverse(&self) -> Matrix<T> {
        self.solve(&Matrix::identity(self.dim()))
    }

    /// `‖A‖₁ ‖A⁻¹‖₁`, using an explicit inverse (matrices here are small).
    pub fn condition_estimate(&self, a: &Matrix<T>) -> f64 {
        let inv = self.inverse();
        let c = a.norm_1().to_f64_lossy() * inv.norm_1().to_f64_lossy();
        if c.is_finite() {
            c
        } else {
            f64::INFINITY
        }
    }
}

/// Factors `a` and rejects it when its condition estimate exceeds [`CONDITION_THRESHOLD`].
pub fn factor_checked<T: Scalar>(a: &Matrix<T>, what: &'static str) -> Result<Lu<T>> {
    let lu = Lu::factor(a).map_err(|e| match e {
        Error::IllConditioned { cond, threshold, .. } => Error::IllConditioned { what, cond, threshold },
        other => other,
    })?;
    if a.rows() > 0 {
        let cond = lu.condition_estimate(a);
        if cond > CONDITION_THRESHOLD {
            return Err(Error::IllConditioned {
                what,
                cond,
                threshold: CONDITION_THRESHOLD,
            });
        }
    }
    Ok(lu)
}
