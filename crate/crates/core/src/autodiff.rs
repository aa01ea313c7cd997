//! Matrix-valued reverse-mode automatic differentiation.
//!
//! A [`Graph`] evaluates eagerly: every operation computes its value when it
//! is recorded, so the same code path serves plain evaluation and gradient
//! computation. [`Graph::backward`] then propagates adjoints from a scalar
//! (`1 × 1`) output back to every recorded node.

use crate::activation::Activation;
use crate::error::Result;
use crate::linalg::{factor_checked, Lu, Matrix};
use crate::ren::sweep_row;
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    Hadamard(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Act(Var, Activation),
    Exp(Var),
    Solve { a: Var, b: Var, lu: Lu<T> },
    Block { src: Var, r0: usize, c0: usize },
    VStack(Vec<Var>),
    HStack(Vec<Var>),
    BlockDiag(Vec<Var>),
    DiagEmbed(Var),
    SumSquares(Var),
    Sum(Var),
    TrilSolve { d11: Var, bw: Var, slopes: Matrix<T> },
    TrilFromVec(Var),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Recording of matrix operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).hadamard(self.value(b));
        self.push(v, Op::Hadamard(a, b))
    }

    /// Adds the `1 × d` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let v = self.value(a).add_row(self.value(r).as_slice());
        self.push(v, Op::AddRow(a, r))
    }

    /// Scales the columns of `a` by the `1 × d` row `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let v = self.value(a).mul_row(self.value(r).as_slice());
        self.push(v, Op::MulRow(a, r))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return a;
        }
        let v = self.value(a).map(|x| act.apply(x));
        self.push(v, Op::Act(a, act))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::exp);
        self.push(v, Op::Exp(a))
    }

    /// `a⁻¹ b`, rejecting ill-conditioned `a`.
    pub fn solve(&mut self, a: Var, b: Var, what: &'static str) -> Result<Var> {
        let lu = factor_checked(self.value(a), what)?;
        let v = lu.solve(self.value(b));
        Ok(self.push(v, Op::Solve { a, b, lu }))
    }

    pub fn block(&mut self, src: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Var {
        let v = self.value(src).block(r0, c0, rows, cols);
        self.push(v, Op::Block { src, r0, c0 })
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::vstack(&vals);
        self.push(v, Op::VStack(parts.to_vec()))
    }

    pub fn hstack(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::hstack(&vals);
        self.push(v, Op::HStack(parts.to_vec()))
    }

    pub fn block_diag(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::block_diag(&vals);
        self.push(v, Op::BlockDiag(parts.to_vec()))
    }

    /// Embeds a `1 × k` row as the diagonal of a `k × k` matrix.
    pub fn diag_embed(&mut self, a: Var) -> Var {
        let v = Matrix::from_diag(self.value(a).as_slice());
        self.push(v, Op::DiagEmbed(a))
    }

    /// Places a `1 × q(q−1)/2` row, row-major, into the strictly lower triangle of a `q × q` matrix.
    pub fn tril_from_vec(&mut self, a: Var, q: usize) -> Var {
        let v = tril_from_slice(self.value(a).as_slice(), q);
        self.push(v, Op::TrilFromVec(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        self.push(Matrix::filled(1, 1, s), Op::SumSquares(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).as_slice().iter().copied().sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(a))
    }

    /// Row-by-row solution of `w = σ(w D₁₁ᵀ + b_w)` for each batch row of `bw`,
    /// with `d11` strictly lower triangular.
    pub fn tril_equilibrium(&mut self, d11: Var, bw: Var, act: Activation) -> Var {
        let d = self.value(d11);
        let b = self.value(bw);
        let (rows, q) = b.shape();
        let mut w = Matrix::zeros(rows, q);
        let mut slopes = Matrix::zeros(rows, q);
        let mut pre = vec![T::zero(); q];
        for r in 0..rows {
            sweep_row(d, b.row(r), act, w.row_mut(r), &mut pre, &mut |_| {});
            for (s, &p) in slopes.row_mut(r).iter_mut().zip(&pre) {
                *s = act.slope(p);
            }
        }
        self.push(w, Op::TrilSolve { d11, bw, slopes })
    }

    /// Adjoints of the scalar node `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Matrix::filled(1, 1, T::one()));
        for idx in (0..=out.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = gout.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&gout);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, gout.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, gout.clone());
                    accumulate(&mut grads, *a, gout.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, gout.scale(-T::one()));
                    accumulate(&mut grads, *a, gout.clone());
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, gout.scale(*s)),
                Op::Hadamard(a, b) => {
                    let ga = gout.hadamard(self.value(*b));
                    let gb = gout.hadamard(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, r) => {
                    accumulate(&mut grads, *r, column_sums(&gout));
                    accumulate(&mut grads, *a, gout.clone());
                }
                Op::MulRow(a, r) => {
                    let ga = gout.mul_row(self.value(*r).as_slice());
                    let gr = column_sums(&gout.hadamard(self.value(*a)));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *r, gr);
                }
                Op::Act(a, act) => {
                    let ga = gout.zip_map(self.value(*a), |g, x| g * act.slope(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, gout.hadamard(&node.value)),
                Op::Solve { a, b, lu } => {
                    let gb = lu.solve_transpose(&gout);
                    let ga = gb.matmul_t(&node.value).scale(-T::one());
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Block { src, r0, c0 } => {
                    let (sr, sc) = self.shape(*src);
                    let mut g = Matrix::zeros(sr, sc);
                    g.set_block(*r0, *c0, &gout);
                    accumulate(&mut grads, *src, g);
                }
                Op::VStack(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        accumulate(&mut grads, p, gout.block(r0, 0, r, c));
                        r0 += r;
                    }
                }
                Op::HStack(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        accumulate(&mut grads, p, gout.block(0, c0, r, c));
                        c0 += c;
                    }
                }
                Op::BlockDiag(parts) => {
                    let (mut r0, mut c0) = (0, 0);
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        accumulate(&mut grads, p, gout.block(r0, c0, r, c));
                        r0 += r;
                        c0 += c;
                    }
                }
                Op::DiagEmbed(a) => accumulate(&mut grads, *a, Matrix::row_vector(&gout.diag())),
                Op::SumSquares(a) => {
                    let s = gout[(0, 0)] * T::lit(2.0);
                    accumulate(&mut grads, *a, self.value(*a).scale(s));
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut grads, *a, Matrix::filled(r, c, gout[(0, 0)]));
                }
                Op::TrilSolve { d11, bw, slopes } => {
                    let (gd, gb) = tril_equilibrium_adjoint(self.value(*d11), &node.value, slopes, &gout);
                    accumulate(&mut grads, *d11, gd);
                    accumulate(&mut grads, *bw, gb);
                }
                Op::TrilFromVec(a) => {
                    let q = gout.rows();
                    let mut g = Vec::with_capacity(q * q.saturating_sub(1) / 2);
                    for i in 1..q {
                        g.extend_from_slice(&gout.row(i)[..i]);
                    }
                    accumulate(&mut grads, *a, Matrix::row_vector(&g));
                }
            }
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }
}

/// Strictly lower triangular `q × q` matrix filled row-major from `v`.
pub fn tril_from_slice<T: Scalar>(v: &[T], q: usize) -> Matrix<T> {
    assert_eq!(v.len(), q * q.saturating_sub(1) / 2, "strict lower triangle size");
    let mut m = Matrix::zeros(q, q);
    let mut idx = 0;
    for i in 1..q {
        m.row_mut(i)[..i].copy_from_slice(&v[idx..idx + i]);
        idx += i;
    }
    m
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign_scaled(&g, T::one()),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut s = Matrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (acc, &v) in s.as_mut_slice().iter_mut().zip(m.row(i)) {
            *acc += v;
        }
    }
    s
}

/// Adjoint of the triangular equilibrium layer.
///
/// Per sample, with `J = diag(σ'(s))`, differentiating `w = σ(D w + b)` gives
/// `(I − J D) dw = J (dD w + db)`. The adjoint `λ` solves the unit upper
/// triangular system `(I − Dᵀ J) λ = ḡ`, then `b̄ = J λ` and `D̄ = b̄ wᵀ`
/// restricted to the strictly lower triangle.
fn tril_equilibrium_adjoint<T: Scalar>(
    d11: &Matrix<T>,
    w: &Matrix<T>,
    slopes: &Matrix<T>,
    gout: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>) {
    let (rows, q) = w.shape();
    let mut gd = Matrix::zeros(q, q);
    let mut gb = Matrix::zeros(rows, q);
    let mut lambda = vec![T::zero(); q];
    for r in 0..rows {
        let g = gout.row(r);
        let j = slopes.row(r);
        for i in (0..q).rev() {
            let mut acc = g[i];
            for k in i + 1..q {
                acc += d11[(k, i)] * j[k] * lambda[k];
            }
            lambda[i] = acc;
        }
        let wr = w.row(r);
        let gbr = gb.row_mut(r);
        for i in 0..q {
            gbr[i] = j[i] * lambda[i];
        }
        for i in 1..q {
            let nu = gbr[i];
            if nu == T::zero() {
                continue;
            }
            for k in 0..i {
                gd[(i, k)] += nu * wr[k];
            }
        }
    }
    (gd, gb)
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, or zeros of the given shape when `v` does not influence the output.
    pub fn wrt(&self, v: Var, shape: (usize, usize)) -> Matrix<T> {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff(f: impl Fn(&Matrix<f64>) -> f64, x: &Matrix<f64>) -> Matrix<f64> {
        let h = 1e-6;
        Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            let mut xp = x.clone();
            xp[(i, j)] += h;
            let mut xm = x.clone();
            xm[(i, j)] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
    }

    fn assert_close(a: &Matrix<f64>, b: &Matrix<f64>, tol: f64) {
        let d = (a - b).max_abs();
        assert!(d < tol, "max diff {d:e}\n{a:?}\n{b:?}");
    }

    #[test]
    fn solve_gradient_matches_finite_differences() {
        let a0 = Matrix::<f64>::from_f64_rows(&[&[3.0, 0.5, 0.1], &[0.2, 2.0, -0.3], &[0.0, 0.4, 1.5]]);
        let b0 = Matrix::<f64>::from_f64_rows(&[&[1.0, -1.0], &[0.5, 2.0], &[0.3, 0.0]]);
        let eval = |a: &Matrix<f64>, b: &Matrix<f64>| {
            let mut g = Graph::new();
            let av = g.leaf(a.clone());
            let bv = g.leaf(b.clone());
            let x = g.solve(av, bv, "test").unwrap();
            let xt = g.transpose(x);
            let y = g.matmul(xt, av);
            let s = g.sum_squares(y);
            (g, av, bv, s)
        };
        let (g, av, bv, s) = eval(&a0, &b0);
        let grads = g.backward(s);
        let fa = finite_diff(|a| eval(a, &b0).0.value(eval(a, &b0).3)[(0, 0)], &a0);
        let fb = finite_diff(|b| eval(&a0, b).0.value(eval(&a0, b).3)[(0, 0)], &b0);
        assert_close(grads.get(av).unwrap(), &fa, 1e-6);
        assert_close(grads.get(bv).unwrap(), &fb, 1e-6);
    }

    #[test]
    fn broadcast_and_activation_gradients() {
        let x0 = Matrix::<f64>::from_f64_rows(&[&[0.3, -0.7, 1.1], &[-0.2, 0.9, 0.4]]);
        let r0 = Matrix::<f64>::from_f64_rows(&[&[0.5, 1.5, -2.0]]);
        let eval = |x: &Matrix<f64>, r: &Matrix<f64>| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let rv = g.leaf(r.clone());
            let e = g.exp(rv);
            let a = g.mul_row(xv, e);
            let b = g.add_row(a, rv);
            let c = g.activation(b, Activation::Tanh);
            let d = g.diag_embed(rv);
            let m = g.matmul(c, d);
            let s = g.sum(m);
            (g, xv, rv, s)
        };
        let (g, xv, rv, s) = eval(&x0, &r0);
        let grads = g.backward(s);
        let fx = finite_diff(
            |x| {
                let (g, _, _, s) = eval(x, &r0);
                g.value(s)[(0, 0)]
            },
            &x0,
        );
        let fr = finite_diff(
            |r| {
                let (g, _, _, s) = eval(&x0, r);
                g.value(s)[(0, 0)]
            },
            &r0,
        );
        assert_close(grads.get(xv).unwrap(), &fx, 1e-7);
        assert_close(grads.get(rv).unwrap(), &fr, 1e-7);
    }

    #[test]
    fn stacking_gradients_route_to_parts() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Matrix::filled(2, 2, 1.0));
        let b = g.leaf(Matrix::filled(1, 2, 2.0));
        let v = g.vstack(&[a, b]);
        let d = g.block_diag(&[a, b]);
        let blk = g.block(d, 2, 2, 1, 2);
        let s1 = g.sum_squares(v);
        let s2 = g.sum(blk);
        let s = g.add(s1, s2);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap(), &Matrix::filled(2, 2, 2.0));
        assert_eq!(grads.get(b).unwrap(), &Matrix::filled(1, 2, 5.0));
    }

    #[test]
    fn tril_equilibrium_gradient_matches_finite_differences() {
        let d0 = Matrix::<f64>::from_f64_rows(&[&[0.0, 0.0, 0.0], &[0.7, 0.0, 0.0], &[-0.4, 1.2, 0.0]]);
        let b0 = Matrix::<f64>::from_f64_rows(&[&[0.3, -0.2, 0.5], &[1.0, 0.4, -0.6]]);
        let eval = |d: &Matrix<f64>, b: &Matrix<f64>| {
            let mut g = Graph::new();
            let dv = g.leaf(d.clone());
            let bv = g.leaf(b.clone());
            let w = g.tril_equilibrium(dv, bv, Activation::Tanh);
            let s = g.sum_squares(w);
            (g, dv, bv, s)
        };
        let (g, dv, bv, s) = eval(&d0, &b0);
        let grads = g.backward(s);
        let mut fd = finite_diff(
            |d| {
                let (g, _, _, s) = eval(d, &b0);
                g.value(s)[(0, 0)]
            },
            &d0,
        );
        for i in 0..3 {
            for k in i..3 {
                fd[(i, k)] = 0.0;
            }
        }
        let fb = finite_diff(
            |b| {
                let (g, _, _, s) = eval(&d0, b);
                g.value(s)[(0, 0)]
            },
            &b0,
        );
        assert_close(grads.get(dv).unwrap(), &fd, 1e-7);
        assert_close(grads.get(bv).unwrap(), &fb, 1e-7);
    }
}
