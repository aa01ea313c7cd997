//! Losses and their exact gradients with respect to the direct parameters.
//!
//! Gradients flow through the full composition `θ ↦ realize ↦ step`, so the
//! constrained construction is differentiated along with the dynamics.

use crate::arch::ModelConfig;
use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::linalg::Matrix;
use crate::params::{DirectParams, Leaves};
use crate::scalar::Scalar;

/// One-step regression batch: fit `f_θ(x, u) ≈ target`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch<T> {
    /// `batch × n`
    pub x: Matrix<T>,
    /// `batch × m`
    pub u: Matrix<T>,
    /// `batch × n`
    pub target: Matrix<T>,
}

/// Sequence regression batch: fit outputs `y_t` from `x0` under `u_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch<T> {
    /// `batch × n`
    pub x0: Matrix<T>,
    /// `u[t]` is `batch × m`
    pub u: Vec<Matrix<T>>,
    /// `y[t]` is `batch × p`
    pub y: Vec<Matrix<T>>,
}

fn mse_on_graph<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &Matrix<T>) -> Var {
    let t = g.leaf(target.clone());
    let diff = g.sub(pred, t);
    let ss = g.sum_squares(diff);
    let count = target.rows() * target.cols();
    g.scale(ss, T::one() / T::lit(count.max(1) as f64))
}

fn step_loss_graph<T: Scalar>(
    params: &DirectParams<T>,
    cfg: &ModelConfig,
    batch: &StepBatch<T>,
) -> Result<(Graph<T>, Leaves, Var)> {
    params.expect_layout(&cfg.layout())?;
    let (n, m) = (cfg.state_dim(), cfg.input_dim());
    let b = batch.x.rows();
    if batch.x.cols() != n || batch.u.shape() != (b, m) || batch.target.shape() != (b, n) {
        return Err(dim_err(
            "step batch",
            format!("x {b}x{n}, u {b}x{m}, target {b}x{n}"),
            format!(
                "x {:?}, u {:?}, target {:?}",
                batch.x.shape(),
                batch.u.shape(),
                batch.target.shape()
            ),
        ));
    }
    let mut g = Graph::new();
    let leaves = Leaves::new(&mut g, params);
    let model = cfg.build_on_graph(&mut g, &leaves)?;
    let x = g.leaf(batch.x.clone());
    let u = g.leaf(batch.u.clone());
    let (xn, _) = model.step(&mut g, x, u);
    let loss = mse_on_graph(&mut g, xn, &batch.target);
    Ok((g, leaves, loss))
}

fn finish<T: Scalar>(g: Graph<T>, leaves: Leaves, loss: Var, params: &DirectParams<T>) -> Result<(T, Vec<T>)> {
    let value = g.value(loss)[(0, 0)];
    if !value.is_finite() {
        return Err(non_finite(value, params));
    }
    let grads = g.backward(loss);
    Ok((value, leaves.flatten(&grads)))
}

fn non_finite<T: Scalar>(value: T, params: &DirectParams<T>) -> Error {
    let norms: Vec<String> = params
        .tensor_norms()
        .into_iter()
        .map(|(name, norm)| format!("{name}={norm:.3e}"))
        .collect();
    Error::NonFinite(format!("loss = {value}; parameter norms: {}", norms.join(", ")))
}

/// Mean squared error of the state update `f_θ(x, u)` against `target`.
pub fn step_loss<T: Scalar>(params: &DirectParams<T>, cfg: &ModelConfig, batch: &StepBatch<T>) -> Result<T> {
    let (g, _, loss) = step_loss_graph(params, cfg, batch)?;
    let v = g.value(loss)[(0, 0)];
    if !v.is_finite() {
        return Err(non_finite(v, params));
    }
    Ok(v)
}

/// [`step_loss`] and its gradient with respect to `θ`.
pub fn loss_grad<T: Scalar>(params: &DirectParams<T>, cfg: &ModelConfig, batch: &StepBatch<T>) -> Result<(T, Vec<T>)> {
    let (g, leaves, loss) = step_loss_graph(params, cfg, batch)?;
    finish(g, leaves, loss, params)
}

fn sequence_loss_graph<T: Scalar>(
    params: &DirectParams<T>,
    cfg: &ModelConfig,
    batch: &SequenceBatch<T>,
) -> Result<(Graph<T>, Leaves, Var)> {
    params.expect_layout(&cfg.layout())?;
    let (n, m, p) = (cfg.state_dim(), cfg.input_dim(), cfg.output_dim());
    let b = batch.x0.rows();
    if batch.x0.cols() != n || batch.u.len() != batch.y.len() || batch.u.is_empty() {
        return Err(dim_err(
            "sequence batch",
            format!("x0 {b}x{n} and equally long nonempty u, y"),
            format!(
                "x0 {:?}, {} inputs, {} outputs",
                batch.x0.shape(),
                batch.u.len(),
                batch.y.len()
            ),
        ));
    }
    for (u, y) in batch.u.iter().zip(&batch.y) {
        if u.shape() != (b, m) || y.shape() != (b, p) {
            return Err(dim_err(
                "sequence sample",
                format!("u {b}x{m}, y {b}x{p}"),
                format!("u {:?}, y {:?}", u.shape(), y.shape()),
            ));
        }
    }
    let mut g = Graph::new();
    let leaves = Leaves::new(&mut g, params);
    let model = cfg.build_on_graph(&mut g, &leaves)?;
    let mut x = g.leaf(batch.x0.clone());
    let mut total: Option<Var> = None;
    for (u, y) in batch.u.iter().zip(&batch.y) {
        let uv = g.leaf(u.clone());
        let (xn, yv) = model.step(&mut g, x, uv);
        let l = mse_on_graph(&mut g, yv, y);
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
        x = xn;
    }
    let total = total.expect("nonempty sequence");
    let loss = g.scale(total, T::one() / T::lit(batch.u.len() as f64));
    Ok((g, leaves, loss))
}

/// Mean over time of the output mean squared error.
pub fn sequence_loss<T: Scalar>(params: &DirectParams<T>, cfg: &ModelConfig, batch: &SequenceBatch<T>) -> Result<T> {
    let (g, _, loss) = sequence_loss_graph(params, cfg, batch)?;
    Ok(g.value(loss)[(0, 0)])
}

/// [`sequence_loss`] and its gradient with respect to `θ`.
pub fn sequence_loss_grad<T: Scalar>(
    params: &DirectParams<T>,
    cfg: &ModelConfig,
    batch: &SequenceBatch<T>,
) -> Result<(T, Vec<T>)> {
    let (g, leaves, loss) = sequence_loss_graph(params, cfg, batch)?;
    finish(g, leaves, loss, params)
}
