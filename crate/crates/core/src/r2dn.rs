//! Robust recurrent deep network: an LTI block in feedback with a
//! 1-Lipschitz feedforward network, without any equilibrium layer.
//!
//! ```text
//! b_w = C₁x + D₁₂u + b_v,   w = φ_g(b_w)
//! x⁺  = Ax + B₁w + B₂u + b_x
//! y   = C₂x + D₂₁w + D₂₂u + b_y
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::linalg::Matrix;
use crate::lipschitz_net::{forward_on_graph, net_on_graph, LayerVars, LipschitzNet, Nonlinearity, PhiConfig};
use crate::lti_param::{
    self, cayley_param_shapes, contracting_on_graph, lipschitz_on_graph, lmi_residual, ExplicitLti, GramVars,
    LipschitzVars, LmiKind, LmiResidual, LmiSpec, LtiDims, LtiVars,
};
use crate::model::StateSpaceModel;
use crate::params::{DirectParams, Leaves, ParamLayout};
use crate::scalar::Scalar;

fn default_eps() -> f64 {
    lti_param::DEFAULT_EPS
}

fn default_eps_r() -> f64 {
    lti_param::DEFAULT_EPS_R
}

/// Shape and robustness mode of an R2DN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct R2dnConfig {
    /// State dimension.
    pub n: usize,
    /// Input dimension.
    pub m: usize,
    /// Output dimension.
    pub p: usize,
    /// Input dimension of `φ_g`.
    pub q: usize,
    /// Output dimension of `φ_g`.
    pub l: usize,
    #[serde(default)]
    pub mode: LmiKind,
    #[serde(default)]
    pub phi: PhiConfig,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_eps_r")]
    pub eps_r: f64,
    /// Rank `ν` of the optional low-rank-plus-diagonal replacement of `XᵀX`.
    #[serde(default)]
    pub low_rank: Option<usize>,
}

impl R2dnConfig {
    pub fn new(n: usize, m: usize, p: usize, q: usize, l: usize, mode: LmiKind) -> Self {
        Self {
            n,
            m,
            p,
            q,
            l,
            mode,
            phi: PhiConfig::default(),
            eps: default_eps(),
            eps_r: default_eps_r(),
            low_rank: None,
        }
    }

    pub fn with_phi(mut self, depth: usize, width: usize) -> Self {
        self.phi.depth = depth;
        self.phi.width = width;
        self
    }

    pub fn lti_dims(&self) -> LtiDims {
        LtiDims::new(self.n, self.m, self.p, self.q, self.l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.q == 0 || self.l == 0 {
            return Err(Error::Parameter("R2DN needs n, q, l ≥ 1".into()));
        }
        if self.phi.depth > 0 && self.phi.width == 0 {
            return Err(Error::Parameter("phi width must be ≥ 1".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Parameter(format!("eps must be positive, got {}", self.eps)));
        }
        if let LmiKind::Lipschitz { gamma } = self.mode {
            if !(gamma > 0.0 && gamma.is_finite()) {
                return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
            }
            if !(self.eps_r > 0.0 && self.eps_r < 1.0) {
                return Err(Error::Parameter(format!(
                    "eps_r must lie in (0, 1), got {}",
                    self.eps_r
                )));
            }
        }
        if self.low_rank == Some(0) {
            return Err(Error::Parameter("low-rank factor needs ν ≥ 1".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        let (n, m, p, q, l) = (self.n, self.m, self.p, self.q, self.l);
        let mut lay = ParamLayout::default();
        match self.low_rank {
            Some(nu) => {
                lay.push("lti.xbar", nu, 2 * n);
                lay.push("lti.delta", 1, 2 * n);
            }
            None => lay.push("lti.x", 2 * n, 2 * n),
        }
        lay.push("lti.y", n, n);
        lay.push("lti.bcal1", n, l);
        lay.push("lti.c1", q, n);
        match self.mode {
            LmiKind::Contraction => {
                lay.push("lti.b2", n, m);
                lay.push("lti.d12", q, m);
                lay.push("lti.d21", p, l);
                lay.push("lti.d22", p, m);
                lay.push("lti.c2", p, n);
            }
            LmiKind::Lipschitz { .. } => {
                lay.push("lti.bcal2", n, m);
                lay.push("lti.c2", p, n);
                let (x12, y12) = cayley_param_shapes(q, m);
                let (x21, y21) = cayley_param_shapes(p, l);
                lay.push("lti.x12", x12.0, x12.1);
                lay.push("lti.y12", y12.0, y12.1);
                lay.push("lti.x21", x21.0, x21.1);
                lay.push("lti.y21", y21.0, y21.1);
            }
        }
        lay.push("lti.bx", 1, n);
        lay.push("lti.bv", 1, q);
        lay.push("lti.by", 1, p);
        self.phi.push_layout(&mut lay, q, l);
        lay
    }

    pub fn param_count(&self) -> usize {
        self.layout().len()
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> DirectParams<T> {
        DirectParams::init(self.layout(), rng)
    }

    /// The robust-LTI condition certified by this configuration.
    pub fn lmi_spec<T: Scalar>(&self) -> Result<LmiSpec<T>> {
        LmiSpec::for_dims(self.mode, self.lti_dims())
    }
}

/// Realized R2DN, generic over the nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitR2dn<T, F = LipschitzNet<T>> {
    pub lti: ExplicitLti<T>,
    pub phi: F,
}

/// Internal signals of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSignals<T> {
    pub v: Matrix<T>,
    pub w: Matrix<T>,
    pub x_next: Matrix<T>,
    pub y: Matrix<T>,
}

impl<T: Scalar, F: Nonlinearity<T>> ExplicitR2dn<T, F> {
    pub fn new(lti: ExplicitLti<T>, phi: F) -> Result<Self> {
        let d = lti.validate()?;
        if phi.in_dim() != d.q || phi.out_dim() != d.l {
            return Err(dim_err(
                "phi",
                format!("{} -> {}", d.q, d.l),
                format!("{} -> {}", phi.in_dim(), phi.out_dim()),
            ));
        }
        Ok(Self { lti, phi })
    }

    /// One batched step that also returns `v = b_w` and `w = φ_g(v)`.
    pub fn step_with_signals(&self, x: &Matrix<T>, u: &Matrix<T>) -> Result<StepSignals<T>> {
        self.check(x, u)?;
        let v = self.lti.feedback_input(x, u);
        let w = self.phi.forward(&v);
        let (x_next, y) = self.lti.advance(x, &w, u);
        Ok(StepSignals { v, w, x_next, y })
    }

    fn check(&self, x: &Matrix<T>, u: &Matrix<T>) -> Result<()> {
        let d = self.lti.dims();
        if x.cols() != d.n || u.cols() != d.m || u.rows() != x.rows() {
            return Err(dim_err(
                "step batch",
                format!("x ·x{}, u ·x{}", d.n, d.m),
                format!("x {:?}, u {:?}", x.shape(), u.shape()),
            ));
        }
        Ok(())
    }

    /// `K = √(σ̄/σ̲)` of the certificate `𝒫`; a diagnostic for the overshoot constant.
    pub fn overshoot_constant(&self) -> T {
        self.lti.overshoot_constant()
    }

    pub fn lmi_residual(&self, kind: LmiKind) -> Result<LmiResidual<T>> {
        lmi_residual(&self.lti, &LmiSpec::for_dims(kind, self.lti.dims())?)
    }
}

impl<T: Scalar, F: Nonlinearity<T>> StateSpaceModel<T> for ExplicitR2dn<T, F> {
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
        let v = self.lti.feedback_input(x, u);
        let w = self.phi.forward(&v);
        self.lti.advance(x, &w, u)
    }

    fn lti(&self) -> &ExplicitLti<T> {
        &self.lti
    }
}

pub(crate) struct R2dnVars {
    pub lti: LtiVars,
    pub phi: Vec<LayerVars>,
}

pub(crate) fn gram_vars(leaves: &Leaves) -> Result<GramVars> {
    match (leaves.find("lti.x"), leaves.find("lti.xbar"), leaves.find("lti.delta")) {
        (Some(x), _, _) => Ok(GramVars::Full(x)),
        (None, Some(xbar), Some(delta)) => Ok(GramVars::LowRank { xbar, delta }),
        _ => Err(Error::Parameter("missing tensor lti.x".into())),
    }
}

pub(crate) fn realize_on_graph<T: Scalar>(g: &mut Graph<T>, leaves: &Leaves, cfg: &R2dnConfig) -> Result<R2dnVars> {
    cfg.validate()?;
    let d = cfg.lti_dims();
    let lti = match cfg.mode {
        LmiKind::Contraction => {
            let v = crate::ren::contraction_vars(leaves)?;
            contracting_on_graph(g, &v, d, T::lit(cfg.eps))?
        }
        LmiKind::Lipschitz { gamma } => {
            let v = LipschitzVars {
                x: gram_vars(leaves)?,
                y: leaves.get("lti.y")?,
                bcal1: leaves.get("lti.bcal1")?,
                c1: leaves.get("lti.c1")?,
                bcal2: leaves.get("lti.bcal2")?,
                c2: leaves.get("lti.c2")?,
                x12: leaves.get("lti.x12")?,
                y12: leaves.get("lti.y12")?,
                x21: leaves.get("lti.x21")?,
                y21: leaves.get("lti.y21")?,
                bx: leaves.get("lti.bx")?,
                bv: leaves.get("lti.bv")?,
                by: leaves.get("lti.by")?,
            };
            lipschitz_on_graph(g, &v, d, T::lit(gamma), T::lit(cfg.eps), T::lit(cfg.eps_r))?
        }
    };
    let phi = net_on_graph(g, leaves, &cfg.phi, cfg.q, cfg.l)?;
    Ok(R2dnVars { lti, phi })
}

/// Transposed LTI blocks, computed once per graph so that batched steps are
/// plain right-multiplications.
pub(crate) struct LtiStepVars {
    at: Var,
    b1t: Var,
    b2t: Var,
    c1t: Var,
    c2t: Var,
    d12t: Var,
    d21t: Var,
    d22t: Var,
    bx: Var,
    bv: Var,
    by: Var,
}

impl LtiStepVars {
    pub(crate) fn new<T: Scalar>(g: &mut Graph<T>, v: &LtiVars) -> Self {
        Self {
            at: g.transpose(v.a),
            b1t: g.transpose(v.b1),
            b2t: g.transpose(v.b2),
            c1t: g.transpose(v.c1),
            c2t: g.transpose(v.c2),
            d12t: g.transpose(v.d12),
            d21t: g.transpose(v.d21),
            d22t: g.transpose(v.d22),
            bx: v.bx,
            bv: v.bv,
            by: v.by,
        }
    }
}

pub(crate) fn feedback_on_graph<T: Scalar>(g: &mut Graph<T>, s: &LtiStepVars, x: Var, u: Var) -> Var {
    let mut v = g.matmul(x, s.c1t);
    if g.shape(u).1 > 0 {
        let du = g.matmul(u, s.d12t);
        v = g.add(v, du);
    }
    g.add_row(v, s.bv)
}

pub(crate) fn advance_on_graph<T: Scalar>(g: &mut Graph<T>, s: &LtiStepVars, x: Var, w: Var, u: Var) -> (Var, Var) {
    let ax = g.matmul(x, s.at);
    let bw = g.matmul(w, s.b1t);
    let mut xn = g.add(ax, bw);
    let cx = g.matmul(x, s.c2t);
    let dw = g.matmul(w, s.d21t);
    let mut y = g.add(cx, dw);
    if g.shape(u).1 > 0 {
        let bu = g.matmul(u, s.b2t);
        xn = g.add(xn, bu);
        let du = g.matmul(u, s.d22t);
        y = g.add(y, du);
    }
    (g.add_row(xn, s.bx), g.add_row(y, s.by))
}

pub(crate) fn step_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    s: &LtiStepVars,
    phi: &[LayerVars],
    x: Var,
    u: Var,
) -> (Var, Var) {
    let v = feedback_on_graph(g, s, x, u);
    let w = forward_on_graph(g, phi, v);
    advance_on_graph(g, s, x, w, u)
}

/// Maps direct parameters to an explicit R2DN.
pub fn realize<T: Scalar>(params: &DirectParams<T>, cfg: &R2dnConfig) -> Result<ExplicitR2dn<T>> {
    params.expect_layout(&cfg.layout())?;
    let mut g = Graph::new();
    let leaves = Leaves::new(&mut g, params);
    let v = realize_on_graph(&mut g, &leaves, cfg)?;
    Ok(ExplicitR2dn {
        lti: v.lti.extract(&g),
        phi: LipschitzNet::new(v.phi.iter().map(|l| l.extract(&g)).collect())?,
    })
}

/// Single-sample step.
pub fn step<T: Scalar, F: Nonlinearity<T>>(model: &ExplicitR2dn<T, F>, x: &[T], u: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    model.step(x, u)
}

/// Simulation from `x0` over `u_seq` (`T × m`); see [`StateSpaceModel::simulate`].
pub fn simulate<T: Scalar, F: Nonlinearity<T>>(
    model: &ExplicitR2dn<T, F>,
    x0: &[T],
    u_seq: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    model.simulate(x0, u_seq)
}
