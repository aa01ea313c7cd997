//! Direct parameterizations of the linear part of the network.
//!
//! Free parameters in `ℝᴺ` are mapped to an explicit LTI system together with
//! a certificate `(E, 𝒫)` so that the contraction (or γ-Lipschitz) matrix
//! inequality holds by construction with margin `ε`:
//!
//! ```text
//! H = XᵀX + εI + (constraint terms),   H = [H11 H21ᵀ; H21 H22]
//! E = ½(H11 + H22 + Y − Yᵀ),  A = E⁻¹H21,  B₁ = E⁻¹𝓑₁,  𝒫 = H22
//! ```
//!
//! All construction goes through [`Graph`] so that gradients with respect to
//! the free parameters come for free; the plain constructors below simply
//! evaluate the graph and read the values back.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::linalg::{factor_checked, min_eigenvalue, Matrix};
use crate::scalar::Scalar;

/// Default margin `ε` added to `H`.
pub const DEFAULT_EPS: f64 = 1e-4;
/// Default slack keeping the Lipschitz `ℛ` strictly positive definite.
pub const DEFAULT_EPS_R: f64 = 0.01;

/// Dimensions of the LTI block: state `n`, input `m`, output `p`,
/// nonlinearity input `q` and nonlinearity output `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LtiDims {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub l: usize,
}

impl LtiDims {
    pub fn new(n: usize, m: usize, p: usize, q: usize, l: usize) -> Self {
        Self { n, m, p, q, l }
    }
}

/// The `XᵀX` term of `H`, either dense or low rank plus diagonal.
#[derive(Debug, Clone, PartialEq)]
pub enum GramFactor<T> {
    /// `X` is `2n × 2n`; contributes `XᵀX`.
    Full(Matrix<T>),
    /// `X̄` is `ν × 2n` and `δ` has `2n` raw entries; contributes `X̄ᵀX̄ + diag(exp δ)`.
    LowRank { xbar: Matrix<T>, delta: Vec<T> },
}

/// Free parameters of a Cayley-parameterized semi-orthogonal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CayleyParams<T> {
    pub x: Matrix<T>,
    pub y: Matrix<T>,
}

/// Shapes `(X, Y)` of the Cayley parameters producing a `rows × cols` matrix.
pub fn cayley_param_shapes(rows: usize, cols: usize) -> ((usize, usize), (usize, usize)) {
    let (r, c) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    ((c, c), (r - c, c))
}

/// Free parameters of the contracting parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionFreeParams<T> {
    pub x: GramFactor<T>,
    pub y: Matrix<T>,
    pub bcal1: Matrix<T>,
    pub c1: Matrix<T>,
    pub b2: Matrix<T>,
    pub d12: Matrix<T>,
    pub d21: Matrix<T>,
    pub d22: Matrix<T>,
    pub c2: Matrix<T>,
    pub bx: Vec<T>,
    pub bv: Vec<T>,
    pub by: Vec<T>,
    pub eps: T,
}

/// Free parameters of the γ-Lipschitz parameterization (with `D₂₂ = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzFreeParams<T> {
    pub x: GramFactor<T>,
    pub y: Matrix<T>,
    pub bcal1: Matrix<T>,
    pub c1: Matrix<T>,
    pub bcal2: Matrix<T>,
    pub c2: Matrix<T>,
    pub cayley12: CayleyParams<T>,
    pub cayley21: CayleyParams<T>,
    pub gamma: T,
    pub eps: T,
    pub eps_r: T,
    pub bx: Vec<T>,
    pub bv: Vec<T>,
    pub by: Vec<T>,
}

/// Realized LTI block and its certificate.
///
/// ```text
/// [x⁺]   [A  | B₁  B₂ ] [x]   [b_x]
/// [v ] = [C₁ | 0   D₁₂] [w] + [b_v]
/// [y ]   [C₂ | D₂₁ D₂₂] [u]   [b_y]
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitLti<T> {
    pub a: Matrix<T>,
    pub b1: Matrix<T>,
    pub b2: Matrix<T>,
    pub c1: Matrix<T>,
    pub c2: Matrix<T>,
    pub d12: Matrix<T>,
    pub d21: Matrix<T>,
    pub d22: Matrix<T>,
    pub bx: Vec<T>,
    pub bv: Vec<T>,
    pub by: Vec<T>,
    /// Invertible certificate matrix `E`.
    pub e: Matrix<T>,
    /// Positive definite certificate matrix `𝒫`.
    pub p: Matrix<T>,
}

impl<T: Scalar> ExplicitLti<T> {
    pub fn dims(&self) -> LtiDims {
        LtiDims {
            n: self.a.rows(),
            m: self.b2.cols(),
            p: self.c2.rows(),
            q: self.c1.rows(),
            l: self.b1.cols(),
        }
    }

    /// System with every matrix and bias zero and the identity certificate.
    pub fn zeros(d: LtiDims) -> Self {
        Self {
            a: Matrix::zeros(d.n, d.n),
            b1: Matrix::zeros(d.n, d.l),
            b2: Matrix::zeros(d.n, d.m),
            c1: Matrix::zeros(d.q, d.n),
            c2: Matrix::zeros(d.p, d.n),
            d12: Matrix::zeros(d.q, d.m),
            d21: Matrix::zeros(d.p, d.l),
            d22: Matrix::zeros(d.p, d.m),
            bx: vec![T::zero(); d.n],
            bv: vec![T::zero(); d.q],
            by: vec![T::zero(); d.p],
            e: Matrix::identity(d.n),
            p: Matrix::identity(d.n),
        }
    }

    /// Checks that every block is consistent with [`ExplicitLti::dims`].
    pub fn validate(&self) -> Result<LtiDims> {
        let d = self.dims();
        let checks: [(&str, (usize, usize), (usize, usize)); 10] = [
            ("A", self.a.shape(), (d.n, d.n)),
            ("B1", self.b1.shape(), (d.n, d.l)),
            ("B2", self.b2.shape(), (d.n, d.m)),
            ("C1", self.c1.shape(), (d.q, d.n)),
            ("C2", self.c2.shape(), (d.p, d.n)),
            ("D12", self.d12.shape(), (d.q, d.m)),
            ("D21", self.d21.shape(), (d.p, d.l)),
            ("D22", self.d22.shape(), (d.p, d.m)),
            ("E", self.e.shape(), (d.n, d.n)),
            ("P", self.p.shape(), (d.n, d.n)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(dim_err(name, format!("{want:?}"), format!("{got:?}")));
            }
        }
        for (name, len, want) in [
            ("b_x", self.bx.len(), d.n),
            ("b_v", self.bv.len(), d.q),
            ("b_y", self.by.len(), d.p),
        ] {
            if len != want {
                return Err(dim_err(name, want, len));
            }
        }
        Ok(d)
    }

    /// `b_w = x C₁ᵀ + u D₁₂ᵀ + b_v` for a batch of rows.
    pub fn feedback_input(&self, x: &Matrix<T>, u: &Matrix<T>) -> Matrix<T> {
        let mut v = x.matmul_t(&self.c1);
        if self.d12.cols() > 0 {
            v.add_assign_scaled(&u.matmul_t(&self.d12), T::one());
        }
        v.add_row(&self.bv)
    }

    /// State update and output given the nonlinearity output `w`.
    pub fn advance(&self, x: &Matrix<T>, w: &Matrix<T>, u: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
        let mut xn = x.matmul_t(&self.a);
        xn.add_assign_scaled(&w.matmul_t(&self.b1), T::one());
        let mut y = x.matmul_t(&self.c2);
        y.add_assign_scaled(&w.matmul_t(&self.d21), T::one());
        if self.b2.cols() > 0 {
            xn.add_assign_scaled(&u.matmul_t(&self.b2), T::one());
            y.add_assign_scaled(&u.matmul_t(&self.d22), T::one());
        }
        (xn.add_row(&self.bx), y.add_row(&self.by))
    }

    /// `d(a, b)`-style overshoot constant `√(σ̄/σ̲)` of `𝒫`.
    pub fn overshoot_constant(&self) -> T {
        let eig = crate::linalg::symmetric_eigenvalues(&self.p);
        match (eig.first(), eig.last()) {
            (Some(&lo), Some(&hi)) if lo > T::zero() => (hi / lo).sqrt(),
            _ => T::infinity(),
        }
    }
}

/// Which robustness property an [`LmiSpec`] certifies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LmiKind {
    /// Small-gain IQC on the `w → v` channel only.
    #[default]
    Contraction,
    /// Small-gain on `w → v` jointly with a γ-Lipschitz `u → y` channel.
    Lipschitz { gamma: f64 },
}

/// Target incremental IQC `(Q̄, S̄, R̄)` for the robust-LTI condition.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiSpec<T> {
    pub kind: LmiKind,
    pub q_bar: Matrix<T>,
    pub s_bar: Matrix<T>,
    pub r_bar: Matrix<T>,
}

impl<T: Scalar> LmiSpec<T> {
    /// Validates `Q̄ ≺ 0` and `R̄ + S̄ Q̄⁻¹ S̄ᵀ ≻ 0`.
    pub fn new(kind: LmiKind, q_bar: Matrix<T>, s_bar: Matrix<T>, r_bar: Matrix<T>) -> Result<Self> {
        if !q_bar.is_square() || !r_bar.is_square() || s_bar.shape() != (r_bar.rows(), q_bar.rows()) {
            return Err(dim_err(
                "IQC triple",
                "square Q̄, square R̄ and S̄ of shape (dim R̄, dim Q̄)",
                format!("{:?} {:?} {:?}", q_bar.shape(), s_bar.shape(), r_bar.shape()),
            ));
        }
        if q_bar.rows() > 0 && min_eigenvalue(&q_bar.scale(-T::one())) <= T::zero() {
            return Err(Error::Parameter("Q̄ must be negative definite".into()));
        }
        if r_bar.rows() > 0 {
            let lu = factor_checked(&q_bar, "Q̄")?;
            let sq = s_bar.matmul(&lu.solve(&s_bar.transpose()));
            if min_eigenvalue(&(&r_bar + &sq)) <= T::zero() {
                return Err(Error::Parameter("R̄ + S̄Q̄⁻¹S̄ᵀ must be positive definite".into()));
            }
        }
        Ok(Self {
            kind,
            q_bar,
            s_bar,
            r_bar,
        })
    }

    /// `Q̄ = −I_q`, `S̄ = 0`, `R̄ = I_l` on the `w → v` channel.
    pub fn contraction(q: usize, l: usize) -> Self {
        Self::new(
            LmiKind::Contraction,
            Matrix::identity(q).scale(-T::one()),
            Matrix::zeros(l, q),
            Matrix::identity(l),
        )
        .expect("contraction IQC is valid")
    }

    /// `Q̄ = diag(−I_q, −I_p/γ)`, `S̄ = 0`, `R̄ = diag(I_l, γ I_m)`.
    pub fn lipschitz(gamma: f64, d: LtiDims) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
        }
        let g = T::lit(gamma);
        let q_bar = Matrix::block_diag(&[
            &Matrix::identity(d.q).scale(-T::one()),
            &Matrix::identity(d.p).scale(-T::one() / g),
        ]);
        let r_bar = Matrix::block_diag(&[&Matrix::identity(d.l), &Matrix::identity(d.m).scale(g)]);
        Self::new(
            LmiKind::Lipschitz { gamma },
            q_bar,
            Matrix::zeros(d.l + d.m, d.q + d.p),
            r_bar,
        )
    }

    pub fn for_dims(kind: LmiKind, d: LtiDims) -> Result<Self> {
        match kind {
            LmiKind::Contraction => Ok(Self::contraction(d.q, d.l)),
            LmiKind::Lipschitz { gamma } => Self::lipschitz(gamma, d),
        }
    }

    /// Supply rate `[Δȳ; Δū]ᵀ [Q̄ S̄ᵀ; S̄ R̄] [Δȳ; Δū]`.
    pub fn supply(&self, dy: &[T], du: &[T]) -> T {
        let qy = self.q_bar.matvec(dy);
        let ru = self.r_bar.matvec(du);
        let su = self.s_bar.transpose().matvec(du);
        let mut s = T::zero();
        for i in 0..dy.len() {
            s += dy[i] * (qy[i] + T::lit(2.0) * su[i]);
        }
        for i in 0..du.len() {
            s += du[i] * ru[i];
        }
        s
    }
}

/// Outcome of [`lmi_residual`].
#[derive(Debug, Clone)]
pub struct LmiResidual<T> {
    /// `H − [𝒞ᵀ; 𝓑] ℛ⁻¹ [𝒞ᵀ; 𝓑]ᵀ + [Cᵀ; 0] Q̄ [Cᵀ; 0]ᵀ`, empty when `ℛ` is not positive definite.
    pub matrix: Matrix<T>,
    /// Smallest eigenvalue of `matrix`; `-∞` when `ℛ` fails.
    pub eigmin: T,
    /// Smallest eigenvalue of `ℛ`.
    pub r_eigmin: T,
}

impl<T: Scalar> LmiResidual<T> {
    pub fn certified(&self) -> bool {
        self.r_eigmin > T::zero() && self.eigmin > T::zero()
    }
}

/// Reassembles the robust-LTI inequality from a realized system and its
/// certificate and reports the residual and its smallest eigenvalue.
pub fn lmi_residual<T: Scalar>(sys: &ExplicitLti<T>, spec: &LmiSpec<T>) -> Result<LmiResidual<T>> {
    let d = sys.validate()?;
    let n = d.n;
    let (c, dmat, b) = match spec.kind {
        LmiKind::Contraction => (sys.c1.clone(), Matrix::zeros(d.q, d.l), sys.b1.clone()),
        LmiKind::Lipschitz { .. } => {
            let mut dm = Matrix::zeros(d.q + d.p, d.l + d.m);
            dm.set_block(0, d.l, &sys.d12);
            dm.set_block(d.q, 0, &sys.d21);
            dm.set_block(d.q, d.l, &sys.d22);
            (
                Matrix::vstack(&[&sys.c1, &sys.c2]),
                dm,
                Matrix::hstack(&[&sys.b1, &sys.b2]),
            )
        }
    };
    if spec.q_bar.rows() != c.rows() || spec.r_bar.rows() != dmat.cols() {
        return Err(dim_err(
            "IQC triple vs system",
            format!("Q̄ {} / R̄ {}", c.rows(), dmat.cols()),
            format!("Q̄ {} / R̄ {}", spec.q_bar.rows(), spec.r_bar.rows()),
        ));
    }
    let sd = spec.s_bar.matmul(&dmat);
    let r_cal = (&(&spec.r_bar + &sd) + &(&sd.transpose() + &dmat.t_matmul(&spec.q_bar.matmul(&dmat)))).symmetrize();
    let r_eigmin = min_eigenvalue(&r_cal);
    if r_cal.rows() > 0 && r_eigmin <= T::zero() {
        return Ok(LmiResidual {
            matrix: Matrix::zeros(0, 0),
            eigmin: T::neg_infinity(),
            r_eigmin,
        });
    }

    let a_cal = sys.e.matmul(&sys.a);
    let b_cal = sys.e.matmul(&b);
    let mut h = Matrix::zeros(2 * n, 2 * n);
    h.set_block(0, 0, &(&(&sys.e + &sys.e.transpose()) - &sys.p));
    h.set_block(0, n, &a_cal.transpose());
    h.set_block(n, 0, &a_cal);
    h.set_block(n, n, &sys.p);

    // 𝒞 = (DᵀQ̄ + S̄) C
    let c_cal = (&dmat.t_matmul(&spec.q_bar) + &spec.s_bar).matmul(&c);
    let k = Matrix::vstack(&[&c_cal.transpose(), &b_cal]);
    let mut resid = h;
    if r_cal.rows() > 0 {
        let lu = factor_checked(&r_cal, "ℛ")?;
        let krk = k.matmul(&lu.solve(&k.transpose()));
        resid = &resid - &krk;
    }
    let ct = Matrix::vstack(&[&c.transpose(), &Matrix::zeros(n, c.rows())]);
    resid = &resid + &ct.matmul(&spec.q_bar).matmul_t(&ct);
    let resid = resid.symmetrize();
    let eigmin = min_eigenvalue(&resid);
    Ok(LmiResidual {
        matrix: resid,
        eigmin,
        r_eigmin,
    })
}

/// `X̄ᵀX̄ + diag(exp δ)` with `X̄` of shape `ν × 2n`.
///
/// A rank term with `ν > 2n` is accepted with a warning since it no longer
/// reduces the parameter count.
pub fn low_rank_h_term<T: Scalar>(xbar: &Matrix<T>, delta: &[T]) -> Result<Matrix<T>> {
    let mut g = Graph::new();
    let gram = GramVars::LowRank {
        xbar: g.leaf(xbar.clone()),
        delta: g.leaf(Matrix::row_vector(delta)),
    };
    let out = gram_on_graph(&mut g, &gram, delta.len())?;
    Ok(g.value(out).clone())
}

/// Cayley map to a `rows × cols` matrix with orthonormal columns (`rows ≥ cols`)
/// or orthonormal rows (`rows < cols`).
///
/// For `rows ≥ cols`, `xf` is `cols × cols`, `yf` is `(rows − cols) × cols` and
///
/// ```text
/// Z = X − Xᵀ + YᵀY,   D = [(I + Z)⁻¹(I − Z); −2Y(I + Z)⁻¹]
/// ```
///
/// For `rows < cols` the same map is applied with the roles swapped and the
/// result transposed.
pub fn cayley<T: Scalar>(xf: &Matrix<T>, yf: &Matrix<T>, rows: usize, cols: usize) -> Result<Matrix<T>> {
    let mut g = Graph::new();
    let x = g.leaf(xf.clone());
    let y = g.leaf(yf.clone());
    let d = cayley_on_graph(&mut g, x, y, rows, cols)?;
    Ok(g.value(d).clone())
}

pub(crate) fn cayley_on_graph<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, rows: usize, cols: usize) -> Result<Var> {
    let ((xr, xc), (yr, yc)) = cayley_param_shapes(rows, cols);
    if g.shape(x) != (xr, xc) || g.shape(y) != (yr, yc) {
        return Err(dim_err(
            "Cayley parameters",
            format!("X {:?}, Y {:?}", (xr, xc), (yr, yc)),
            format!("X {:?}, Y {:?}", g.shape(x), g.shape(y)),
        ));
    }
    if rows == 0 || cols == 0 {
        return Ok(g.leaf(Matrix::zeros(rows, cols)));
    }
    let c = xc;
    let xt = g.transpose(x);
    let skew = g.sub(x, xt);
    let yt = g.transpose(y);
    let gram = g.matmul(yt, y);
    let z = g.add(skew, gram);
    let eye = g.leaf(Matrix::identity(c));
    let m = g.add(eye, z);
    let nm = g.sub(eye, z);
    let inv = g.solve(m, eye, "Cayley (I + Z)")?;
    let top = g.matmul(inv, nm);
    let yinv = g.matmul(y, inv);
    let bottom = g.scale(yinv, T::lit(-2.0));
    let stacked = g.vstack(&[top, bottom]);
    Ok(if rows >= cols { stacked } else { g.transpose(stacked) })
}

/// Graph handles for a [`GramFactor`].
#[derive(Debug, Clone, Copy)]
pub(crate) enum GramVars {
    Full(Var),
    LowRank { xbar: Var, delta: Var },
}

pub(crate) fn gram_on_graph<T: Scalar>(g: &mut Graph<T>, gram: &GramVars, dim: usize) -> Result<Var> {
    match *gram {
        GramVars::Full(x) => {
            if g.shape(x) != (dim, dim) {
                return Err(dim_err("X", format!("{dim}x{dim}"), format!("{:?}", g.shape(x))));
            }
            let xt = g.transpose(x);
            Ok(g.matmul(xt, x))
        }
        GramVars::LowRank { xbar, delta } => {
            let (nu, cols) = g.shape(xbar);
            if cols != dim || g.shape(delta) != (1, dim) {
                return Err(dim_err(
                    "low-rank factor",
                    format!("X̄ ν×{dim}, δ of length {dim}"),
                    format!("X̄ {:?}, δ {:?}", g.shape(xbar), g.shape(delta)),
                ));
            }
            if nu == 0 {
                return Err(Error::Parameter("low-rank factor needs ν ≥ 1".into()));
            }
            if nu > dim {
                log::warn!("low-rank factor has ν = {nu} > 2n = {dim}; the term is not low rank");
            }
            let xt = g.transpose(xbar);
            let gram = g.matmul(xt, xbar);
            let pos = g.exp(delta);
            let diag = g.diag_embed(pos);
            Ok(g.add(gram, diag))
        }
    }
}

impl<T: Scalar> GramFactor<T> {
    fn to_vars(&self, g: &mut Graph<T>) -> GramVars {
        match self {
            GramFactor::Full(x) => GramVars::Full(g.leaf(x.clone())),
            GramFactor::LowRank { xbar, delta } => GramVars::LowRank {
                xbar: g.leaf(xbar.clone()),
                delta: g.leaf(Matrix::row_vector(delta)),
            },
        }
    }
}

/// Graph handles of the realized LTI block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LtiVars {
    pub a: Var,
    pub b1: Var,
    pub b2: Var,
    pub c1: Var,
    pub c2: Var,
    pub d12: Var,
    pub d21: Var,
    pub d22: Var,
    pub bx: Var,
    pub bv: Var,
    pub by: Var,
    pub e: Var,
    pub p: Var,
}

impl LtiVars {
    pub(crate) fn extract<T: Scalar>(&self, g: &Graph<T>) -> ExplicitLti<T> {
        ExplicitLti {
            a: g.value(self.a).clone(),
            b1: g.value(self.b1).clone(),
            b2: g.value(self.b2).clone(),
            c1: g.value(self.c1).clone(),
            c2: g.value(self.c2).clone(),
            d12: g.value(self.d12).clone(),
            d21: g.value(self.d21).clone(),
            d22: g.value(self.d22).clone(),
            bx: g.value(self.bx).as_slice().to_vec(),
            bv: g.value(self.bv).as_slice().to_vec(),
            by: g.value(self.by).as_slice().to_vec(),
            e: g.value(self.e).clone(),
            p: g.value(self.p).clone(),
        }
    }
}

/// Graph handles of contracting free parameters (biases are `1 × k` rows).
#[derive(Debug, Clone, Copy)]
pub(crate) struct ContractionVars {
    pub x: GramVars,
    pub y: Var,
    pub bcal1: Var,
    pub c1: Var,
    pub b2: Var,
    pub d12: Var,
    pub d21: Var,
    pub d22: Var,
    pub c2: Var,
    pub bx: Var,
    pub bv: Var,
    pub by: Var,
}

/// Graph handles of Lipschitz free parameters.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LipschitzVars {
    pub x: GramVars,
    pub y: Var,
    pub bcal1: Var,
    pub c1: Var,
    pub bcal2: Var,
    pub c2: Var,
    pub x12: Var,
    pub y12: Var,
    pub x21: Var,
    pub y21: Var,
    pub bx: Var,
    pub bv: Var,
    pub by: Var,
}

fn expect_shape<T: Scalar>(g: &Graph<T>, v: Var, name: &str, shape: (usize, usize)) -> Result<()> {
    if g.shape(v) != shape {
        return Err(dim_err(name, format!("{shape:?}"), format!("{:?}", g.shape(v))));
    }
    Ok(())
}

/// `E = ½(H11 + H22 + Y − Yᵀ)`, `[A B] = E⁻¹[H21 𝓑]`, `𝒫 = H22`.
fn certificate_from_h<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    y: Var,
    bcal: &[Var],
    n: usize,
) -> Result<(Var, Var, Var, Vec<Var>)> {
    let h11 = g.block(h, 0, 0, n, n);
    let h21 = g.block(h, n, 0, n, n);
    let h22 = g.block(h, n, n, n, n);
    let yt = g.transpose(y);
    let skew = g.sub(y, yt);
    let hsum = g.add(h11, h22);
    let e2 = g.add(hsum, skew);
    let e = g.scale(e2, T::lit(0.5));
    let mut rhs = vec![h21];
    rhs.extend_from_slice(bcal);
    let stacked = g.hstack(&rhs);
    let solved = g.solve(e, stacked, "E")?;
    let a = g.block(solved, 0, 0, n, n);
    let mut outs = Vec::with_capacity(bcal.len());
    let mut c0 = n;
    for &b in bcal {
        let cols = g.shape(b).1;
        outs.push(g.block(solved, 0, c0, n, cols));
        c0 += cols;
    }
    Ok((e, a, h22, outs))
}

pub(crate) fn contracting_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    v: &ContractionVars,
    d: LtiDims,
    eps: T,
) -> Result<LtiVars> {
    if !(eps > T::zero()) || !eps.is_finite() {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let n = d.n;
    for (name, var, shape) in [
        ("Y", v.y, (n, n)),
        ("𝓑1", v.bcal1, (n, d.l)),
        ("C1", v.c1, (d.q, n)),
        ("B2", v.b2, (n, d.m)),
        ("D12", v.d12, (d.q, d.m)),
        ("D21", v.d21, (d.p, d.l)),
        ("D22", v.d22, (d.p, d.m)),
        ("C2", v.c2, (d.p, n)),
        ("b_x", v.bx, (1, n)),
        ("b_v", v.bv, (1, d.q)),
        ("b_y", v.by, (1, d.p)),
    ] {
        expect_shape(g, var, name, shape)?;
    }
    let xx = gram_on_graph(g, &v.x, 2 * n)?;
    let c1t = g.transpose(v.c1);
    let ctc = g.matmul(c1t, v.c1);
    let b1t = g.transpose(v.bcal1);
    let bbt = g.matmul(v.bcal1, b1t);
    let bd = g.block_diag(&[ctc, bbt]);
    let eps_i = g.leaf(Matrix::identity(2 * n).scale(eps));
    let h0 = g.add(xx, eps_i);
    let h = g.add(h0, bd);
    let (e, a, p, bs) = certificate_from_h(g, h, v.y, &[v.bcal1], n)?;
    Ok(LtiVars {
        a,
        b1: bs[0],
        b2: v.b2,
        c1: v.c1,
        c2: v.c2,
        d12: v.d12,
        d21: v.d21,
        d22: v.d22,
        bx: v.bx,
        bv: v.bv,
        by: v.by,
        e,
        p,
    })
}

pub(crate) fn lipschitz_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    v: &LipschitzVars,
    d: LtiDims,
    gamma: T,
    eps: T,
    eps_r: T,
) -> Result<LtiVars> {
    if !(gamma > T::zero()) || !gamma.is_finite() {
        return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
    }
    if !(eps > T::zero()) || !eps.is_finite() {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    if !(eps_r > T::zero() && eps_r < T::one()) {
        return Err(Error::Parameter(format!("eps_R must lie in (0, 1), got {eps_r}")));
    }
    let n = d.n;
    for (name, var, shape) in [
        ("Y", v.y, (n, n)),
        ("𝓑1", v.bcal1, (n, d.l)),
        ("C1", v.c1, (d.q, n)),
        ("𝓑2", v.bcal2, (n, d.m)),
        ("C2", v.c2, (d.p, n)),
        ("b_x", v.bx, (1, n)),
        ("b_v", v.bv, (1, d.q)),
        ("b_y", v.by, (1, d.p)),
    ] {
        expect_shape(g, var, name, shape)?;
    }
    let inv_gamma = T::one() / gamma;
    let scale = ((T::one() - eps_r) * gamma).sqrt();
    let dcal12 = cayley_on_graph(g, v.x12, v.y12, d.q, d.m)?;
    let dcal21 = cayley_on_graph(g, v.x21, v.y21, d.p, d.l)?;
    let d12 = g.scale(dcal12, scale);
    let d21 = g.scale(dcal21, scale);

    // ℛ = diag(I − D₂₁ᵀD₂₁/γ, γI − D₁₂ᵀD₁₂)
    let d21t = g.transpose(d21);
    let d21g = g.matmul(d21t, d21);
    let d21s = g.scale(d21g, inv_gamma);
    let eye_l = g.leaf(Matrix::identity(d.l));
    let r11 = g.sub(eye_l, d21s);
    let d12t = g.transpose(d12);
    let d12g = g.matmul(d12t, d12);
    let geye_m = g.leaf(Matrix::identity(d.m).scale(gamma));
    let r22 = g.sub(geye_m, d12g);

    // Γ = [−C₂ᵀD₂₁/γ  −C₁ᵀD₁₂; 𝓑₁  𝓑₂], split by column block
    let c2t = g.transpose(v.c2);
    let c2d21 = g.matmul(c2t, d21);
    let top1 = g.scale(c2d21, -inv_gamma);
    let gamma1 = g.vstack(&[top1, v.bcal1]);
    let c1t = g.transpose(v.c1);
    let c1d12 = g.matmul(c1t, d12);
    let top2 = g.scale(c1d12, -T::one());
    let gamma2 = g.vstack(&[top2, v.bcal2]);

    let xx = gram_on_graph(g, &v.x, 2 * n)?;
    let eps_i = g.leaf(Matrix::identity(2 * n).scale(eps));
    let mut h = g.add(xx, eps_i);
    for (gm, r) in [(gamma1, r11), (gamma2, r22)] {
        if g.shape(r).0 == 0 {
            continue;
        }
        let gt = g.transpose(gm);
        let rinv_gt = g.solve(r, gt, "ℛ")?;
        let term = g.matmul(gm, rinv_gt);
        h = g.add(h, term);
    }
    // −CᵀQ̄C = C₁ᵀC₁ + C₂ᵀC₂/γ
    let c1c1 = g.matmul(c1t, v.c1);
    let c2c2 = g.matmul(c2t, v.c2);
    let c2s = g.scale(c2c2, inv_gamma);
    let cc = g.add(c1c1, c2s);
    let zero_n = g.leaf(Matrix::zeros(n, n));
    let bd = g.block_diag(&[cc, zero_n]);
    h = g.add(h, bd);

    let (e, a, p, bs) = certificate_from_h(g, h, v.y, &[v.bcal1, v.bcal2], n)?;
    let d22 = g.leaf(Matrix::zeros(d.p, d.m));
    Ok(LtiVars {
        a,
        b1: bs[0],
        b2: bs[1],
        c1: v.c1,
        c2: v.c2,
        d12,
        d21,
        d22,
        bx: v.bx,
        bv: v.bv,
        by: v.by,
        e,
        p,
    })
}

impl<T: Scalar> ContractionFreeParams<T> {
    pub fn dims(&self) -> Result<LtiDims> {
        let n = self.y.rows();
        let d = LtiDims::new(n, self.b2.cols(), self.c2.rows(), self.c1.rows(), self.bcal1.cols());
        Ok(d)
    }

    pub(crate) fn to_vars(&self, g: &mut Graph<T>) -> ContractionVars {
        ContractionVars {
            x: self.x.to_vars(g),
            y: g.leaf(self.y.clone()),
            bcal1: g.leaf(self.bcal1.clone()),
            c1: g.leaf(self.c1.clone()),
            b2: g.leaf(self.b2.clone()),
            d12: g.leaf(self.d12.clone()),
            d21: g.leaf(self.d21.clone()),
            d22: g.leaf(self.d22.clone()),
            c2: g.leaf(self.c2.clone()),
            bx: g.leaf(Matrix::row_vector(&self.bx)),
            bv: g.leaf(Matrix::row_vector(&self.bv)),
            by: g.leaf(Matrix::row_vector(&self.by)),
        }
    }

    /// All free matrices zero with the given dimensions.
    pub fn zeros(d: LtiDims, eps: T) -> Self {
        Self {
            x: GramFactor::Full(Matrix::zeros(2 * d.n, 2 * d.n)),
            y: Matrix::zeros(d.n, d.n),
            bcal1: Matrix::zeros(d.n, d.l),
            c1: Matrix::zeros(d.q, d.n),
            b2: Matrix::zeros(d.n, d.m),
            d12: Matrix::zeros(d.q, d.m),
            d21: Matrix::zeros(d.p, d.l),
            d22: Matrix::zeros(d.p, d.m),
            c2: Matrix::zeros(d.p, d.n),
            bx: vec![T::zero(); d.n],
            bv: vec![T::zero(); d.q],
            by: vec![T::zero(); d.p],
            eps,
        }
    }

    /// Initialization draw: Gaussian entries with standard deviation
    /// `1/√fan-in` and `X` near the identity.
    pub fn random<R: Rng + ?Sized>(d: LtiDims, eps: T, rng: &mut R) -> Self {
        let mut p = Self::zeros(d, eps);
        p.x = GramFactor::Full(near_identity(2 * d.n, rng));
        p.y = gaussian(d.n, d.n, rng);
        p.bcal1 = gaussian(d.n, d.l, rng);
        p.c1 = gaussian(d.q, d.n, rng);
        p.b2 = gaussian(d.n, d.m, rng);
        p.d12 = gaussian(d.q, d.m, rng);
        p.d21 = gaussian(d.p, d.l, rng);
        p.d22 = gaussian(d.p, d.m, rng);
        p.c2 = gaussian(d.p, d.n, rng);
        p
    }
}

impl<T: Scalar> LipschitzFreeParams<T> {
    pub fn dims(&self) -> LtiDims {
        LtiDims::new(
            self.y.rows(),
            self.bcal2.cols(),
            self.c2.rows(),
            self.c1.rows(),
            self.bcal1.cols(),
        )
    }

    pub(crate) fn to_vars(&self, g: &mut Graph<T>) -> LipschitzVars {
        LipschitzVars {
            x: self.x.to_vars(g),
            y: g.leaf(self.y.clone()),
            bcal1: g.leaf(self.bcal1.clone()),
            c1: g.leaf(self.c1.clone()),
            bcal2: g.leaf(self.bcal2.clone()),
            c2: g.leaf(self.c2.clone()),
            x12: g.leaf(self.cayley12.x.clone()),
            y12: g.leaf(self.cayley12.y.clone()),
            x21: g.leaf(self.cayley21.x.clone()),
            y21: g.leaf(self.cayley21.y.clone()),
            bx: g.leaf(Matrix::row_vector(&self.bx)),
            bv: g.leaf(Matrix::row_vector(&self.bv)),
            by: g.leaf(Matrix::row_vector(&self.by)),
        }
    }

    pub fn zeros(d: LtiDims, gamma: T, eps: T, eps_r: T) -> Self {
        let (x12, y12) = cayley_param_shapes(d.q, d.m);
        let (x21, y21) = cayley_param_shapes(d.p, d.l);
        Self {
            x: GramFactor::Full(Matrix::zeros(2 * d.n, 2 * d.n)),
            y: Matrix::zeros(d.n, d.n),
            bcal1: Matrix::zeros(d.n, d.l),
            c1: Matrix::zeros(d.q, d.n),
            bcal2: Matrix::zeros(d.n, d.m),
            c2: Matrix::zeros(d.p, d.n),
            cayley12: CayleyParams {
                x: Matrix::zeros(x12.0, x12.1),
                y: Matrix::zeros(y12.0, y12.1),
            },
            cayley21: CayleyParams {
                x: Matrix::zeros(x21.0, x21.1),
                y: Matrix::zeros(y21.0, y21.1),
            },
            gamma,
            eps,
            eps_r,
            bx: vec![T::zero(); d.n],
            bv: vec![T::zero(); d.q],
            by: vec![T::zero(); d.p],
        }
    }

    pub fn random<R: Rng + ?Sized>(d: LtiDims, gamma: T, eps: T, eps_r: T, rng: &mut R) -> Self {
        let mut p = Self::zeros(d, gamma, eps, eps_r);
        p.x = GramFactor::Full(near_identity(2 * d.n, rng));
        p.y = gaussian(d.n, d.n, rng);
        p.bcal1 = gaussian(d.n, d.l, rng);
        p.c1 = gaussian(d.q, d.n, rng);
        p.bcal2 = gaussian(d.n, d.m, rng);
        p.c2 = gaussian(d.p, d.n, rng);
        let (s12, t12) = (p.cayley12.x.shape(), p.cayley12.y.shape());
        p.cayley12 = CayleyParams {
            x: gaussian(s12.0, s12.1, rng),
            y: gaussian(t12.0, t12.1, rng),
        };
        let (s21, t21) = (p.cayley21.x.shape(), p.cayley21.y.shape());
        p.cayley21 = CayleyParams {
            x: gaussian(s21.0, s21.1, rng),
            y: gaussian(t21.0, t21.1, rng),
        };
        p
    }
}

/// Gaussian matrix with standard deviation `1/√cols`.
pub(crate) fn gaussian<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    let sd = 1.0 / (cols.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(sd * z)
    })
}

/// `I + 0.1 G/√dim` with standard Gaussian `G`.
pub(crate) fn near_identity<T: Scalar, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Matrix<T> {
    let sd = 0.1 / (dim.max(1) as f64).sqrt();
    Matrix::from_fn(dim, dim, |i, j| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(if i == j { 1.0 } else { 0.0 } + sd * z)
    })
}

/// Contracting parameterization: `H = XᵀX + εI + diag(C₁ᵀC₁, 𝓑₁𝓑₁ᵀ)`.
pub fn construct_contracting<T: Scalar>(params: &ContractionFreeParams<T>) -> Result<ExplicitLti<T>> {
    let d = params.dims()?;
    let mut g = Graph::new();
    let vars = params.to_vars(&mut g);
    let out = contracting_on_graph(&mut g, &vars, d, params.eps)?;
    Ok(out.extract(&g))
}

/// γ-Lipschitz parameterization with `D₂₂ = 0`:
///
/// ```text
/// D₁₂ = √((1−ε_R)γ) 𝒟₁₂,  D₂₁ = √((1−ε_R)γ) 𝒟₂₁   (𝒟 from the Cayley map)
/// H = XᵀX + εI + Γℛ⁻¹Γᵀ + diag(C₁ᵀC₁ + C₂ᵀC₂/γ, 0)
/// ```
pub fn construct_lipschitz<T: Scalar>(params: &LipschitzFreeParams<T>) -> Result<ExplicitLti<T>> {
    let d = params.dims();
    let mut g = Graph::new();
    let vars = params.to_vars(&mut g);
    let out = lipschitz_on_graph(&mut g, &vars, d, params.gamma, params.eps, params.eps_r)?;
    Ok(out.extract(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn contracting_hand_case() {
        // n = 1, X = I₂, everything else zero: H = 1.01 I, E = 1.01, A = 0
        let d = LtiDims::new(1, 1, 1, 1, 1);
        let mut p = ContractionFreeParams::<f64>::zeros(d, 0.01);
        p.x = GramFactor::Full(Matrix::identity(2));
        let sys = construct_contracting(&p).unwrap();
        assert!((sys.e[(0, 0)] - 1.01).abs() < 1e-15);
        assert_eq!(sys.a[(0, 0)], 0.0);
        assert_eq!(sys.b1[(0, 0)], 0.0);
        assert!((sys.p[(0, 0)] - 1.01).abs() < 1e-15);
    }

    #[test]
    fn contracting_zero_case() {
        let d = LtiDims::new(1, 1, 1, 2, 3);
        let p = ContractionFreeParams::<f64>::zeros(d, 0.5);
        let sys = construct_contracting(&p).unwrap();
        assert_eq!(sys.e[(0, 0)], 0.5);
        assert_eq!(sys.a[(0, 0)], 0.0);
        assert_eq!(sys.p[(0, 0)], 0.5);
    }

    #[test]
    fn unconstrained_fields_copied_through() {
        let d = LtiDims::new(2, 2, 3, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ContractionFreeParams::<f64>::random(d, 1e-4, &mut rng);
        let sys = construct_contracting(&p).unwrap();
        assert_eq!(sys.b2, p.b2);
        assert_eq!(sys.d12, p.d12);
        assert_eq!(sys.d21, p.d21);
        assert_eq!(sys.d22, p.d22);
        assert_eq!(sys.c2, p.c2);
        assert_eq!(sys.c1, p.c1);
        assert_eq!(sys.validate().unwrap(), d);
    }

    #[test]
    fn nonpositive_eps_is_rejected() {
        let d = LtiDims::new(1, 1, 1, 1, 1);
        let p = ContractionFreeParams::<f64>::zeros(d, 0.0);
        assert!(matches!(construct_contracting(&p), Err(Error::Parameter(_))));
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let d = LtiDims::new(2, 1, 1, 3, 3);
        let mut p = ContractionFreeParams::<f64>::zeros(d, 0.1);
        p.c1 = Matrix::zeros(3, 1);
        assert!(matches!(construct_contracting(&p), Err(Error::Dimension(_))));
    }

    #[test]
    fn eps_r_out_of_range_is_rejected() {
        let d = LtiDims::new(1, 1, 1, 1, 1);
        for bad in [0.0, 1.0, -0.5, 2.0] {
            let p = LipschitzFreeParams::<f64>::zeros(d, 1.0, 0.01, bad);
            assert!(matches!(construct_lipschitz(&p), Err(Error::Parameter(_))));
        }
        let p = LipschitzFreeParams::<f64>::zeros(d, -1.0, 0.01, 0.1);
        assert!(matches!(construct_lipschitz(&p), Err(Error::Parameter(_))));
    }

    #[test]
    fn cayley_hand_cases() {
        let d = cayley(&Matrix::<f64>::zeros(2, 2), &Matrix::zeros(1, 2), 3, 2).unwrap();
        assert_eq!(d, Matrix::vstack(&[&Matrix::identity(2), &Matrix::zeros(1, 2)]));

        let d = cayley(&Matrix::<f64>::filled(1, 1, 7.3), &Matrix::zeros(0, 1), 1, 1).unwrap();
        assert_eq!(d, Matrix::filled(1, 1, 1.0));

        let d = cayley(&Matrix::<f64>::zeros(1, 1), &Matrix::filled(1, 1, 1.0), 2, 1).unwrap();
        assert_eq!(d, Matrix::from_f64_rows(&[&[0.0], &[-1.0]]));
    }

    #[test]
    fn cayley_wide_output_has_orthonormal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = gaussian::<f64, _>(2, 2, &mut rng);
        let y = gaussian::<f64, _>(3, 2, &mut rng);
        let d = cayley(&x, &y, 2, 5).unwrap();
        assert_eq!(d.shape(), (2, 5));
        let ddt = d.matmul_t(&d);
        assert!((&ddt - &Matrix::identity(2)).max_abs() < 1e-12);
    }

    #[test]
    fn cayley_rejects_bad_shapes() {
        assert!(cayley(&Matrix::<f64>::zeros(2, 2), &Matrix::zeros(2, 2), 3, 2).is_err());
    }

    #[test]
    fn low_rank_hand_cases() {
        let h = low_rank_h_term(&Matrix::<f64>::zeros(1, 4), &[0.0; 4]).unwrap();
        assert_eq!(h, Matrix::identity(4));
        let mut e1 = Matrix::<f64>::zeros(1, 3);
        e1[(0, 0)] = 1.0;
        let h = low_rank_h_term(&e1, &[0.0; 3]).unwrap();
        let mut want = Matrix::identity(3);
        want[(0, 0)] = 2.0;
        assert_eq!(h, want);
        // over-ranked factor only warns
        assert!(low_rank_h_term(&Matrix::<f64>::zeros(5, 2), &[0.0; 2]).is_ok());
        assert!(low_rank_h_term(&Matrix::<f64>::zeros(0, 2), &[0.0; 2]).is_err());
    }

    #[test]
    fn lipschitz_hand_case() {
        let d = LtiDims::new(1, 1, 1, 1, 1);
        let p = LipschitzFreeParams::<f64>::zeros(d, 1.0, 0.01, 0.01);
        let sys = construct_lipschitz(&p).unwrap();
        let s = 0.99f64.sqrt();
        assert!((sys.d12[(0, 0)] - s).abs() < 1e-15);
        assert!((sys.d21[(0, 0)] - s).abs() < 1e-15);
        assert!((sys.e[(0, 0)] - 0.01).abs() < 1e-15);
        assert_eq!(sys.a[(0, 0)], 0.0);
        assert_eq!(sys.d22[(0, 0)], 0.0);
    }

    #[test]
    fn lmi_spec_validation() {
        let bad = LmiSpec::<f64>::new(
            LmiKind::Contraction,
            Matrix::identity(2),
            Matrix::zeros(2, 2),
            Matrix::identity(2),
        );
        assert!(bad.is_err());
        assert!(LmiSpec::<f64>::lipschitz(0.0, LtiDims::new(1, 1, 1, 1, 1)).is_err());
        let ok = LmiSpec::<f64>::lipschitz(2.0, LtiDims::new(1, 2, 3, 4, 5)).unwrap();
        assert_eq!(ok.q_bar.shape(), (7, 7));
        assert_eq!(ok.r_bar.shape(), (7, 7));
    }

    #[test]
    fn residual_detects_broken_certificate() {
        let d = LtiDims::new(3, 1, 1, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ContractionFreeParams::<f64>::random(d, 1e-3, &mut rng);
        let mut sys = construct_contracting(&p).unwrap();
        let spec = LmiSpec::contraction(d.q, d.l);
        assert!(lmi_residual(&sys, &spec).unwrap().eigmin >= 1e-3 - 1e-9);
        sys.a = sys.a.scale(1e3);
        assert!(lmi_residual(&sys, &spec).unwrap().eigmin < 0.0);
    }

    #[test]
    fn singular_r_is_reported_not_raised() {
        let d = LtiDims::new(1, 1, 1, 1, 1);
        let mut sys = ExplicitLti::<f64>::zeros(d);
        sys.d12 = Matrix::filled(1, 1, 5.0);
        let spec = LmiSpec::lipschitz(1.0, d).unwrap();
        let r = lmi_residual(&sys, &spec).unwrap();
        assert!(r.r_eigmin < 0.0);
        assert!(!r.certified());
    }
}
