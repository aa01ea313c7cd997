//! REN baseline with a strictly lower-triangular equilibrium layer.
//!
//! ```text
//! b_w = C₁x + D₁₂u + b_v
//! w   = σ(D₁₁w + b_w)          (solved row by row, D₁₁ strictly lower)
//! x⁺  = Ax + B₁w + B₂u + b_x
//! y   = C₂x + D₂₁w + D₂₂u + b_y
//! ```
//!
//! `{A, B₁, C₁, E, 𝒫}` come from the contracting construction with `l = q`.
//! No robustness certificate is claimed for the assembled network since `D₁₁`
//! is not accounted for in that construction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::autodiff::{tril_from_slice, Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::linalg::Matrix;
use crate::lti_param::{self, contracting_on_graph, ContractionVars, ExplicitLti, LtiDims, LtiVars};
use crate::model::StateSpaceModel;
use crate::params::{DirectParams, Leaves, ParamLayout};
use crate::r2dn::{advance_on_graph, feedback_on_graph, LtiStepVars};
use crate::scalar::Scalar;

fn default_eps() -> f64 {
    lti_param::DEFAULT_EPS
}

/// Shape and options of a REN baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenConfig {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    /// Number of equilibrium neurons.
    pub q: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl RenConfig {
    pub fn new(n: usize, m: usize, p: usize, q: usize) -> Self {
        Self {
            n,
            m,
            p,
            q,
            activation: Activation::Relu,
            eps: default_eps(),
        }
    }

    pub fn lti_dims(&self) -> LtiDims {
        LtiDims::new(self.n, self.m, self.p, self.q, self.q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.q == 0 {
            return Err(Error::Parameter("REN needs n ≥ 1 and q ≥ 1".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Parameter(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        let (n, m, p, q) = (self.n, self.m, self.p, self.q);
        let mut l = ParamLayout::default();
        l.push("lti.x", 2 * n, 2 * n);
        l.push("lti.y", n, n);
        l.push("lti.bcal1", n, q);
        l.push("lti.c1", q, n);
        l.push("lti.b2", n, m);
        l.push("lti.d12", q, m);
        l.push("lti.d21", p, q);
        l.push("lti.d22", p, m);
        l.push("lti.c2", p, n);
        l.push("lti.bx", 1, n);
        l.push("lti.bv", 1, q);
        l.push("lti.by", 1, p);
        l.push("ren.d11", 1, q * (q - 1) / 2);
        l
    }

    pub fn param_count(&self) -> usize {
        self.layout().len()
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> DirectParams<T> {
        DirectParams::init(self.layout(), rng)
    }
}

/// Realized REN.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitRen<T> {
    pub lti: ExplicitLti<T>,
    /// Strictly lower-triangular `q × q`.
    pub d11: Matrix<T>,
    pub activation: Activation,
}

/// One forward sweep of `w = σ(D w + b)` for a single sample.
///
/// Row `i` only reads `w[..i]`; `pre` receives the pre-activations and
/// `on_row` is invoked after each row is solved.
pub(crate) fn sweep_row<T: Scalar>(
    d11: &Matrix<T>,
    bw: &[T],
    act: Activation,
    w: &mut [T],
    pre: &mut [T],
    on_row: &mut impl FnMut(usize),
) {
    let q = bw.len();
    for i in 0..q {
        let row = &d11.row(i)[..i];
        let mut s = bw[i];
        for (&d, &wk) in row.iter().zip(&w[..i]) {
            s += d * wk;
        }
        pre[i] = s;
        w[i] = act.apply(s);
        on_row(i);
    }
}

fn check_strict_lower<T: Scalar>(d11: &Matrix<T>) -> Result<()> {
    if !d11.is_square() {
        return Err(dim_err("D11", "square", format!("{:?}", d11.shape())));
    }
    for i in 0..d11.rows() {
        for j in i..d11.cols() {
            if d11[(i, j)] != T::zero() {
                return Err(Error::Structure(format!(
                    "D11 must be strictly lower triangular, entry ({i}, {j}) = {}",
                    d11[(i, j)]
                )));
            }
        }
    }
    Ok(())
}

/// Exact solution of `w = σ(D₁₁w + b_w)` for strictly lower-triangular `D₁₁`.
pub fn solve_equilibrium<T: Scalar>(d11: &Matrix<T>, bw: &[T], act: Activation) -> Result<Vec<T>> {
    check_strict_lower(d11)?;
    if bw.len() != d11.rows() {
        return Err(dim_err("b_w", d11.rows(), bw.len()));
    }
    let mut w = vec![T::zero(); bw.len()];
    let mut pre = vec![T::zero(); bw.len()];
    sweep_row(d11, bw, act, &mut w, &mut pre, &mut |_| {});
    Ok(w)
}

/// `‖w − σ(D₁₁w + b_w)‖_∞`.
pub fn equilibrium_residual<T: Scalar>(d11: &Matrix<T>, bw: &[T], w: &[T], act: Activation) -> T {
    let dw = d11.matvec(w);
    w.iter()
        .zip(dw.iter().zip(bw))
        .map(|(&wi, (&a, &b))| (wi - act.apply(a + b)).abs())
        .fold(T::zero(), T::max)
}

impl<T: Scalar> ExplicitRen<T> {
    pub fn new(lti: ExplicitLti<T>, d11: Matrix<T>, activation: Activation) -> Result<Self> {
        let d = lti.validate()?;
        if d.q != d.l {
            return Err(dim_err(
                "REN feedback channel",
                format!("q = l = {}", d.q),
                format!("l = {}", d.l),
            ));
        }
        check_strict_lower(&d11)?;
        if d11.rows() != d.q {
            return Err(dim_err("D11", d.q, d11.rows()));
        }
        Ok(Self { lti, d11, activation })
    }

    pub fn neurons(&self) -> usize {
        self.d11.rows()
    }

    /// Batched step; `on_row` is told about every solved equilibrium row.
    pub fn step_observed(
        &self,
        x: &Matrix<T>,
        u: &Matrix<T>,
        on_row: &mut impl FnMut(usize),
    ) -> (Matrix<T>, Matrix<T>) {
        let bw = self.lti.feedback_input(x, u);
        let q = self.neurons();
        let mut w = Matrix::zeros(bw.rows(), q);
        let mut pre = vec![T::zero(); q];
        for r in 0..bw.rows() {
            sweep_row(&self.d11, bw.row(r), self.activation, w.row_mut(r), &mut pre, on_row);
        }
        self.lti.advance(x, &w, u)
    }
}

/// Single-sample REN step.
pub fn ren_step<T: Scalar>(model: &ExplicitRen<T>, x: &[T], u: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    model.step(x, u)
}

impl<T: Scalar> StateSpaceModel<T> for ExplicitRen<T> {
    fn state_dim(&self) -> usize {
        self.lti.a.rows()
    }

    fn input_dim(&self) -> usize {
        self.lti.b2.cols()
    }

    fn output_dim(&self) -> usize {
        self.lti.c2.rows()
    }

    fn step_unchecked(&self, x: &Matrix<T>, u: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
        self.step_observed(x, u, &mut |_| {})
    }

    fn lti(&self) -> &ExplicitLti<T> {
        &self.lti
    }
}

pub(crate) struct RenVars {
    pub lti: LtiVars,
    pub d11: Var,
    pub act: Activation,
}

pub(crate) fn contraction_vars(leaves: &Leaves) -> Result<ContractionVars> {
    Ok(ContractionVars {
        x: crate::r2dn::gram_vars(leaves)?,
        y: leaves.get("lti.y")?,
        bcal1: leaves.get("lti.bcal1")?,
        c1: leaves.get("lti.c1")?,
        b2: leaves.get("lti.b2")?,
        d12: leaves.get("lti.d12")?,
        d21: leaves.get("lti.d21")?,
        d22: leaves.get("lti.d22")?,
        c2: leaves.get("lti.c2")?,
        bx: leaves.get("lti.bx")?,
        bv: leaves.get("lti.bv")?,
        by: leaves.get("lti.by")?,
    })
}

pub(crate) fn realize_on_graph<T: Scalar>(g: &mut Graph<T>, leaves: &Leaves, cfg: &RenConfig) -> Result<RenVars> {
    cfg.validate()?;
    let cv = contraction_vars(leaves)?;
    let lti = contracting_on_graph(g, &cv, cfg.lti_dims(), T::lit(cfg.eps))?;
    let flat = leaves.get("ren.d11")?;
    let d11 = g.tril_from_vec(flat, cfg.q);
    Ok(RenVars {
        lti,
        d11,
        act: cfg.activation,
    })
}

pub(crate) fn step_on_graph<T: Scalar>(g: &mut Graph<T>, s: &LtiStepVars, v: &RenVars, x: Var, u: Var) -> (Var, Var) {
    let bw = feedback_on_graph(g, s, x, u);
    let w = g.tril_equilibrium(v.d11, bw, v.act);
    advance_on_graph(g, s, x, w, u)
}

/// Maps direct parameters to an explicit REN.
pub fn ren_realize<T: Scalar>(params: &DirectParams<T>, cfg: &RenConfig) -> Result<ExplicitRen<T>> {
    params.expect_layout(&cfg.layout())?;
    let mut g = Graph::new();
    let leaves = Leaves::new(&mut g, params);
    let v = realize_on_graph(&mut g, &leaves, cfg)?;
    Ok(ExplicitRen {
        lti: v.lti.extract(&g),
        d11: g.value(v.d11).clone(),
        activation: cfg.activation,
    })
}

/// Strictly lower-triangular matrix from its `q(q−1)/2` row-major entries.
pub fn d11_from_entries<T: Scalar>(entries: &[T], q: usize) -> Result<Matrix<T>> {
    if entries.len() != q * q.saturating_sub(1) / 2 {
        return Err(dim_err("D11 entries", q * q.saturating_sub(1) / 2, entries.len()));
    }
    Ok(tril_from_slice(entries, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equilibrium_hand_cases() {
        let w = solve_equilibrium(&Matrix::<f64>::zeros(3, 3), &[1.0, -2.0, 0.5], Activation::Relu).unwrap();
        assert_eq!(w, vec![1.0, 0.0, 0.5]);
        let d = Matrix::<f64>::from_f64_rows(&[&[0.0, 0.0], &[2.0, 0.0]]);
        let w = solve_equilibrium(&d, &[1.0, -1.0], Activation::Relu).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
        assert_eq!(equilibrium_residual(&d, &[1.0, -1.0], &w, Activation::Relu), 0.0);
    }

    #[test]
    fn nonzero_diagonal_is_a_structure_error() {
        let d = Matrix::<f64>::from_f64_rows(&[&[0.1, 0.0], &[0.0, 0.0]]);
        assert!(matches!(
            solve_equilibrium(&d, &[1.0, 1.0], Activation::Relu),
            Err(Error::Structure(_))
        ));
        let d = Matrix::<f64>::from_f64_rows(&[&[0.0, 0.3], &[0.0, 0.0]]);
        assert!(matches!(
            solve_equilibrium(&d, &[1.0, 1.0], Activation::Relu),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn zero_params_realize_to_zero_d11_and_a() {
        let cfg = RenConfig::new(2, 1, 1, 5);
        let theta = DirectParams::<f64>::zeros(cfg.layout());
        let ren = ren_realize(&theta, &cfg).unwrap();
        assert_eq!(ren.d11, Matrix::zeros(5, 5));
        assert_eq!(ren.lti.a, Matrix::zeros(2, 2));
    }

    #[test]
    fn realized_d11_has_exact_zero_diagonal() {
        let cfg = RenConfig::new(2, 1, 1, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta: DirectParams<f64> = cfg.init_params(&mut rng);
        let ren = ren_realize(&theta, &cfg).unwrap();
        for i in 0..7 {
            for j in i..7 {
                assert_eq!(ren.d11[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn d11_parameter_count_is_triangular() {
        let base = RenConfig::new(1, 1, 1, 1).param_count();
        for q in [2usize, 10, 40] {
            let cfg = RenConfig::new(1, 1, 1, q);
            // 𝓑₁, C₁, D₁₂, D₂₁ and b_v grow linearly in q
            assert_eq!(cfg.param_count() - base - 5 * (q - 1), q * (q - 1) / 2);
        }
    }

    #[test]
    fn scalar_hand_step() {
        let d = LtiDims::new(1, 1, 1, 1, 1);
        let mut lti = ExplicitLti::<f64>::zeros(d);
        lti.a[(0, 0)] = 0.5;
        lti.b1[(0, 0)] = 2.0;
        lti.c1[(0, 0)] = 1.0;
        lti.b2[(0, 0)] = 1.0;
        lti.c2[(0, 0)] = 1.0;
        lti.bv = vec![-1.0];
        let ren = ExplicitRen::new(lti, Matrix::zeros(1, 1), Activation::Relu).unwrap();
        // v = 3 − 1 = 2, w = 2, x⁺ = 1.5 + 4 + 1, y = 3
        let (xn, y) = ren_step(&ren, &[3.0], &[1.0]).unwrap();
        assert_eq!(xn, vec![6.5]);
        assert_eq!(y, vec![3.0]);
    }
}
