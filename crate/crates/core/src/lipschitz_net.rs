//! 1-Lipschitz feedforward network `φ_g` built from sandwich layers.
//!
//! Each layer, with `[Aᵀ; Bᵀ]` of orthonormal columns from the Cayley map and
//! positive channel scalings `Ψ = exp(log ψ)`, is
//!
//! ```text
//! h ↦ √2 Aᵀ Ψ σ(√2 Ψ⁻¹ B h + b)
//! ```
//!
//! Inputs are batches of row vectors, so the code below works with the
//! transposed form `h Bᵀ` and `s Ψ A`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Result};
use crate::linalg::Matrix;
use crate::lti_param::cayley_on_graph;
use crate::params::{DirectParams, Leaves, ParamLayout};
use crate::scalar::Scalar;

fn default_depth() -> usize {
    6
}

fn default_width() -> usize {
    32
}

/// Shape of `φ_g`: `depth` activated layers of `width` channels followed by
/// one linear (identity-activation) layer to the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiConfig {
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for PhiConfig {
    fn default() -> Self {
        Self {
            depth: default_depth(),
            width: default_width(),
            activation: Activation::Relu,
        }
    }
}

impl PhiConfig {
    /// `(d_in, d_out, activation)` for every layer.
    pub fn layer_dims(&self, q: usize, l: usize) -> Vec<(usize, usize, Activation)> {
        let mut dims = Vec::with_capacity(self.depth + 1);
        let mut d_in = q;
        for _ in 0..self.depth {
            dims.push((d_in, self.width, self.activation));
            d_in = self.width;
        }
        dims.push((d_in, l, Activation::Identity));
        dims
    }

    pub fn push_layout(&self, layout: &mut ParamLayout, q: usize, l: usize) {
        for (k, (d_in, d_out, _)) in self.layer_dims(q, l).into_iter().enumerate() {
            layout.push(format!("phi.{k}.x"), d_out, d_out);
            layout.push(format!("phi.{k}.y"), d_in, d_out);
            layout.push(format!("phi.{k}.log_psi"), 1, d_out);
            layout.push(format!("phi.{k}.b"), 1, d_out);
        }
    }

    pub fn layout(&self, q: usize, l: usize) -> ParamLayout {
        let mut layout = ParamLayout::default();
        self.push_layout(&mut layout, q, l);
        layout
    }
}

/// Number of free parameters of a sandwich layer.
pub fn layer_param_count(d_in: usize, d_out: usize) -> usize {
    d_out * d_out + d_in * d_out + 2 * d_out
}

/// Realized sandwich layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichLayer<T> {
    /// `Bᵀ`, `d_in × d_out`.
    pub qbot: Matrix<T>,
    /// `A`, `d_out × d_out`.
    pub qtop_t: Matrix<T>,
    pub psi: Vec<T>,
    pub inv_psi: Vec<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> SandwichLayer<T> {
    pub fn in_dim(&self) -> usize {
        self.qbot.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.qbot.cols()
    }

    /// The stacked weight `[Aᵀ; Bᵀ]`.
    pub fn stacked_weight(&self) -> Matrix<T> {
        Matrix::vstack(&[&self.qtop_t.transpose(), &self.qbot])
    }

    /// Layer from free parameters `X` (`d_out × d_out`), `Y` (`d_in × d_out`),
    /// `log ψ` and `b`.
    pub fn from_free(x: &Matrix<T>, y: &Matrix<T>, log_psi: &[T], b: &[T], activation: Activation) -> Result<Self> {
        let mut g = Graph::new();
        let vars = FreeLayerVars {
            x: g.leaf(x.clone()),
            y: g.leaf(y.clone()),
            log_psi: g.leaf(Matrix::row_vector(log_psi)),
            b: g.leaf(Matrix::row_vector(b)),
        };
        let lv = layer_on_graph(&mut g, &vars, activation)?;
        Ok(lv.extract(&g))
    }

    pub fn forward(&self, h: &Matrix<T>) -> Matrix<T> {
        let sqrt2 = T::SQRT_2();
        let z = h
            .matmul(&self.qbot)
            .scale(sqrt2)
            .mul_row(&self.inv_psi)
            .add_row(&self.bias);
        let s = if self.activation == Activation::Identity {
            z
        } else {
            z.map(|v| self.activation.apply(v))
        };
        s.mul_row(&self.psi).matmul(&self.qtop_t).scale(sqrt2)
    }
}

/// `φ_g`, a composition of sandwich layers.
///
/// Evaluation uses precomputed stages `a ↦ σ(a W + b)` in which the
/// `Ψ Aᵀ` half of each layer is folded into the `B Ψ⁻¹` half of the next.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzNet<T> {
    layers: Vec<SandwichLayer<T>>,
    stages: Vec<Stage<T>>,
}

#[derive(Debug, Clone, PartialEq)]
struct Stage<T> {
    w: Matrix<T>,
    bias: Option<Vec<T>>,
    activation: Activation,
}

fn fuse_stages<T: Scalar>(layers: &[SandwichLayer<T>]) -> Vec<Stage<T>> {
    let sqrt2 = T::SQRT_2();
    // Pending linear map applied to the current activations.
    let mut carry = Matrix::identity(layers[0].in_dim());
    let mut stages: Vec<Stage<T>> = Vec::with_capacity(layers.len() + 1);
    for layer in layers {
        let w = carry.matmul(&layer.qbot).scale(sqrt2).mul_row(&layer.inv_psi);
        let bias = layer.bias.clone();
        // out = √2 · (σ(z) ⊙ ψ) Aᵀ
        let out = Matrix::from_diag(&layer.psi).matmul(&layer.qtop_t).scale(sqrt2);
        if layer.activation == Activation::Identity {
            // σ(z) = a W + b, so the bias is carried forward through `out`.
            let shift = Matrix::row_vector(&bias).matmul(&out);
            stages.push(Stage {
                w: w.matmul(&out),
                bias: Some(shift.into_vec()),
                activation: Activation::Identity,
            });
            carry = Matrix::identity(layer.out_dim());
        } else {
            stages.push(Stage {
                w,
                bias: Some(bias),
                activation: layer.activation,
            });
            carry = out;
        }
    }
    if carry != Matrix::identity(carry.rows()) {
        stages.push(Stage {
            w: carry,
            bias: None,
            activation: Activation::Identity,
        });
    }
    stages
}

/// Anything usable as the static nonlinearity of an R2DN.
pub trait Nonlinearity<T: Scalar>: Sync {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    /// Maps a `batch × in_dim` matrix to `batch × out_dim`.
    fn forward(&self, v: &Matrix<T>) -> Matrix<T>;
}

impl<T: Scalar> LipschitzNet<T> {
    pub fn new(layers: Vec<SandwichLayer<T>>) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(dim_err("layer chain", w[0].out_dim(), w[1].in_dim()));
            }
        }
        if layers.is_empty() {
            return Err(crate::error::Error::Parameter(
                "a network needs at least one layer".into(),
            ));
        }
        let stages = fuse_stages(&layers);
        Ok(Self { layers, stages })
    }

    pub fn layers(&self) -> &[SandwichLayer<T>] {
        &self.layers
    }

    /// Layer-by-layer evaluation without fusing; agrees with
    /// [`Nonlinearity::forward`] up to rounding.
    pub fn forward_layered(&self, v: &Matrix<T>) -> Matrix<T> {
        let mut h = self.layers[0].forward(v);
        for layer in &self.layers[1..] {
            h = layer.forward(&h);
        }
        h
    }

    /// Realizes `φ_g` from the `phi.*` tensors of `params`.
    pub fn from_params(params: &DirectParams<T>, cfg: &PhiConfig, q: usize, l: usize) -> Result<Self> {
        let mut g = Graph::new();
        let leaves = Leaves::new(&mut g, params);
        let vars = net_on_graph(&mut g, &leaves, cfg, q, l)?;
        Self::new(vars.iter().map(|v| v.extract(&g)).collect())
    }

    /// Network with default initialization of its own parameters.
    pub fn random<R: Rng + ?Sized>(cfg: &PhiConfig, q: usize, l: usize, rng: &mut R) -> Result<Self> {
        let params = DirectParams::init(cfg.layout(q, l), rng);
        Self::from_params(&params, cfg, q, l)
    }
}

impl<T: Scalar> Nonlinearity<T> for LipschitzNet<T> {
    fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    fn forward(&self, v: &Matrix<T>) -> Matrix<T> {
        let mut h = v.clone();
        for st in &self.stages {
            h = h.matmul(&st.w);
            if let Some(b) = &st.bias {
                h = h.add_row(b);
            }
            if st.activation != Activation::Identity {
                h = h.map(|a| st.activation.apply(a));
            }
        }
        h
    }
}

/// `φ_g(v)` for a batch of rows.
pub fn net_forward<T: Scalar>(net: &LipschitzNet<T>, v: &Matrix<T>) -> Result<Matrix<T>> {
    if v.cols() != net.in_dim() {
        return Err(dim_err("network input", net.in_dim(), v.cols()));
    }
    Ok(net.forward(v))
}

pub(crate) struct FreeLayerVars {
    pub x: Var,
    pub y: Var,
    pub log_psi: Var,
    pub b: Var,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerVars {
    pub qbot: Var,
    pub qtop_t: Var,
    pub psi: Var,
    pub inv_psi: Var,
    pub b: Var,
    pub act: Activation,
}

impl LayerVars {
    pub(crate) fn extract<T: Scalar>(&self, g: &Graph<T>) -> SandwichLayer<T> {
        SandwichLayer {
            qbot: g.value(self.qbot).clone(),
            qtop_t: g.value(self.qtop_t).clone(),
            psi: g.value(self.psi).as_slice().to_vec(),
            inv_psi: g.value(self.inv_psi).as_slice().to_vec(),
            bias: g.value(self.b).as_slice().to_vec(),
            activation: self.act,
        }
    }
}

pub(crate) fn layer_on_graph<T: Scalar>(g: &mut Graph<T>, v: &FreeLayerVars, act: Activation) -> Result<LayerVars> {
    let (d_in, d_out) = g.shape(v.y);
    if g.shape(v.log_psi) != (1, d_out) || g.shape(v.b) != (1, d_out) {
        return Err(dim_err(
            "layer scaling/bias",
            format!("1x{d_out}"),
            format!("{:?} / {:?}", g.shape(v.log_psi), g.shape(v.b)),
        ));
    }
    let q = cayley_on_graph(g, v.x, v.y, d_out + d_in, d_out)?;
    let qtop = g.block(q, 0, 0, d_out, d_out);
    let qbot = g.block(q, d_out, 0, d_in, d_out);
    let qtop_t = g.transpose(qtop);
    let psi = g.exp(v.log_psi);
    let neg = g.scale(v.log_psi, -T::one());
    let inv_psi = g.exp(neg);
    Ok(LayerVars {
        qbot,
        qtop_t,
        psi,
        inv_psi,
        b: v.b,
        act,
    })
}

pub(crate) fn net_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    leaves: &Leaves,
    cfg: &PhiConfig,
    q: usize,
    l: usize,
) -> Result<Vec<LayerVars>> {
    let mut out = Vec::new();
    for (k, (d_in, d_out, act)) in cfg.layer_dims(q, l).into_iter().enumerate() {
        let v = FreeLayerVars {
            x: leaves.get(&format!("phi.{k}.x"))?,
            y: leaves.get(&format!("phi.{k}.y"))?,
            log_psi: leaves.get(&format!("phi.{k}.log_psi"))?,
            b: leaves.get(&format!("phi.{k}.b"))?,
        };
        if g.shape(v.y) != (d_in, d_out) {
            return Err(dim_err(
                format!("phi.{k}.y"),
                format!("{d_in}x{d_out}"),
                format!("{:?}", g.shape(v.y)),
            ));
        }
        out.push(layer_on_graph(g, &v, act)?);
    }
    Ok(out)
}

pub(crate) fn forward_on_graph<T: Scalar>(g: &mut Graph<T>, layers: &[LayerVars], input: Var) -> Var {
    let sqrt2 = T::SQRT_2();
    let mut h = input;
    for lv in layers {
        let a = g.matmul(h, lv.qbot);
        let a = g.scale(a, sqrt2);
        let a = g.mul_row(a, lv.inv_psi);
        let z = g.add_row(a, lv.b);
        let s = g.activation(z, lv.act);
        let s = g.mul_row(s, lv.psi);
        let o = g.matmul(s, lv.qtop_t);
        h = g.scale(o, sqrt2);
    }
    h
}

/// Lower bound on the Lipschitz constant of `f` from random input pairs
/// refined by coordinate-perturbation ascent on the gain.
///
/// Pairs with zero input gap are skipped.
pub fn empirical_lipschitz_lb_fn<T: Scalar>(
    f: impl Fn(&Matrix<T>) -> Matrix<T>,
    dim: usize,
    trials: usize,
    ascent_steps: usize,
    seed: u64,
) -> T {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials = trials.max(1);
    let mut a = Matrix::zeros(trials, dim);
    let mut b = Matrix::zeros(trials, dim);
    for t in 0..trials {
        let scale = 10f64.powf(rng.random_range(-1.0..1.0));
        let gap = 10f64.powf(rng.random_range(-3.0..1.0));
        for j in 0..dim {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            a[(t, j)] = T::lit(scale * z1);
            b[(t, j)] = T::lit(scale * z1 + gap * z2);
        }
    }
    let gain = |fa: &[T], fb: &[T], va: &[T], vb: &[T]| -> Option<T> {
        let din: T = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum();
        if din == T::zero() {
            return None;
        }
        let dout: T = fa.iter().zip(fb).map(|(&x, &y)| (x - y) * (x - y)).sum();
        Some((dout / din).sqrt())
    };
    let fa = f(&a);
    let fb = f(&b);
    let mut scored: Vec<(T, usize)> = (0..trials)
        .filter_map(|t| gain(fa.row(t), fb.row(t), a.row(t), b.row(t)).map(|g| (g, t)))
        .collect();
    scored.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut best = scored.first().map(|s| s.0).unwrap_or_else(T::zero);
    if ascent_steps == 0 || dim == 0 {
        return best;
    }
    let top: Vec<usize> = scored.iter().take(8).map(|s| s.1).collect();
    for t in top {
        let mut va = a.row(t).to_vec();
        let mut vb = b.row(t).to_vec();
        let mut cur = gain(fa.row(t), fb.row(t), &va, &vb).unwrap_or_else(T::zero);
        let gap: T = va.iter().zip(&vb).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt();
        let mut step = gap.max(T::lit(1e-6));
        let coords: Vec<usize> = (0..2 * dim).collect();
        for _ in 0..ascent_steps {
            let mut improved = false;
            let mut order = coords.clone();
            order.shuffle(&mut rng);
            for &c in order.iter().take(4) {
                for sign in [T::one(), -T::one()] {
                    let (mut ta, mut tb) = (va.clone(), vb.clone());
                    if c < dim {
                        ta[c] += sign * step;
                    } else {
                        tb[c - dim] += sign * step;
                    }
                    let out = f(&Matrix::from_vec(2, dim, [ta.clone(), tb.clone()].concat()).expect("shape"));
                    if let Some(gn) = gain(out.row(0), out.row(1), &ta, &tb) {
                        if gn > cur {
                            cur = gn;
                            va = ta;
                            vb = tb;
                            improved = true;
                            break;
                        }
                    }
                }
                if improved {
                    break;
                }
            }
            if !improved {
                step = step * T::lit(0.5);
            }
        }
        best = best.max(cur);
    }
    best
}

/// [`empirical_lipschitz_lb_fn`] applied to a network.
pub fn empirical_lipschitz_lb<T: Scalar>(net: &LipschitzNet<T>, trials: usize, ascent_steps: usize, seed: u64) -> T {
    empirical_lipschitz_lb_fn(|v| net.forward(v), net.in_dim(), trials, ascent_steps, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn fused_forward_matches_layered() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (depth, width) in [(1, 4), (3, 7), (6, 16)] {
            let cfg = PhiConfig {
                depth,
                width,
                ..PhiConfig::default()
            };
            let mut params = DirectParams::<f64>::init(cfg.layout(5, 3), &mut rng);
            for v in params.as_mut_slice() {
                *v += 0.1;
            }
            let net = LipschitzNet::from_params(&params, &cfg, 5, 3).unwrap();
            let v = Matrix::from_fn(9, 5, |i, j| ((i * 5 + j) as f64).sin() * 3.0);
            let a = net.forward(&v);
            let b = net.forward_layered(&v);
            assert!((&a - &b).max_abs() <= 1e-12 * (1.0 + b.max_abs()), "depth {depth}");
        }
    }

    #[test]
    fn identity_weight_layer_hand_evaluation() {
        // X = 0, Y = 0 gives [Aᵀ; Bᵀ] = [I; 0], so B = 0 and the output is zero.
        let layer = SandwichLayer::<f64>::from_free(
            &Matrix::zeros(2, 2),
            &Matrix::zeros(2, 2),
            &[0.0, 0.0],
            &[0.0, 0.0],
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(layer.qtop_t, Matrix::identity(2));
        assert_eq!(layer.qbot, Matrix::zeros(2, 2));
        let out = layer.forward(&Matrix::from_f64_rows(&[&[1.0, -1.0]]));
        assert_eq!(out, Matrix::zeros(1, 2));

        // Y = I₂, X = 0: Z = I, A = (2I)⁻¹·0 = 0 and Bᵀ = −2·I·(2I)⁻¹ = −I.
        let layer = SandwichLayer::<f64>::from_free(
            &Matrix::zeros(2, 2),
            &Matrix::identity(2),
            &[0.0, 0.0],
            &[0.0, 0.0],
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(layer.qbot, Matrix::identity(2).scale(-1.0));
        assert_eq!(layer.qtop_t, Matrix::zeros(2, 2));
    }

    #[test]
    fn half_rotation_layer_hand_evaluation() {
        // 1-d layer with X = 0, Y = t gives A = (1−t²)/(1+t²), B = −2t/(1+t²).
        // t = 1 − √2 yields A = B = 1/√2, so out = √2·(1/√2)·relu(√2·(1/√2)·h) = relu(h).
        let t = 1.0 - 2f64.sqrt();
        let layer = SandwichLayer::<f64>::from_free(
            &Matrix::zeros(1, 1),
            &Matrix::filled(1, 1, t),
            &[0.0],
            &[0.0],
            Activation::Relu,
        )
        .unwrap();
        let out = layer.forward(&Matrix::from_f64_rows(&[&[2.0], &[-3.0]]));
        assert!((out[(0, 0)] - 2.0).abs() < 1e-14);
        assert_eq!(out[(1, 0)], 0.0);
    }

    #[test]
    fn origin_is_fixed_without_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = LipschitzNet::<f64>::random(&PhiConfig::default(), 16, 16, &mut rng).unwrap();
        let out = net_forward(&net, &Matrix::zeros(3, 16)).unwrap();
        assert_eq!(out, Matrix::zeros(3, 16));
        assert!(net_forward(&net, &Matrix::zeros(1, 5)).is_err());
    }

    #[test]
    fn linear_and_identity_gains() {
        let half = empirical_lipschitz_lb_fn(|v: &Matrix<f64>| v.scale(0.5), 3, 200, 10, 1);
        assert!((half - 0.5).abs() < 1e-3);
        let id = empirical_lipschitz_lb_fn(|v: &Matrix<f64>| v.clone(), 4, 200, 10, 1);
        assert!((id - 1.0).abs() < 1e-6);
        let zero = empirical_lipschitz_lb_fn(|v: &Matrix<f64>| Matrix::zeros(v.rows(), 2), 4, 50, 5, 1);
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn param_count_formula() {
        let cfg = PhiConfig {
            depth: 3,
            width: 10,
            activation: Activation::Relu,
        };
        let want: usize = cfg
            .layer_dims(4, 5)
            .iter()
            .map(|&(i, o, _)| layer_param_count(i, o))
            .sum();
        assert_eq!(cfg.layout(4, 5).len(), want);
    }
}
