//! Common simulation interface for realized recurrent models.

use rayon::prelude::*;

use crate::error::{dim_err, Result};
use crate::linalg::Matrix;
use crate::lti_param::ExplicitLti;
use crate::scalar::Scalar;

/// Simulated trajectories of a batch, time-major.
///
/// `states[t]` is `batch × n` for `t = 0..=T`, `outputs[t]` is `batch × p` for `t < T`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTrajectory<T> {
    pub states: Vec<Matrix<T>>,
    pub outputs: Vec<Matrix<T>>,
}

/// A discrete-time state-space model `x⁺ = f(x, u)`, `y = h(x, u)`.
pub trait StateSpaceModel<T: Scalar>: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// One step for every row of `x` (`batch × n`) and `u` (`batch × m`).
    /// Shapes are assumed valid.
    fn step_unchecked(&self, x: &Matrix<T>, u: &Matrix<T>) -> (Matrix<T>, Matrix<T>);

    /// The LTI block of the model.
    fn lti(&self) -> &ExplicitLti<T>;

    fn step_batch(&self, x: &Matrix<T>, u: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        if x.cols() != self.state_dim() {
            return Err(dim_err("state", self.state_dim(), x.cols()));
        }
        if u.cols() != self.input_dim() || u.rows() != x.rows() {
            return Err(dim_err(
                "input batch",
                format!("{}x{}", x.rows(), self.input_dim()),
                format!("{}x{}", u.rows(), u.cols()),
            ));
        }
        Ok(self.step_unchecked(x, u))
    }

    fn step(&self, x: &[T], u: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let (xn, y) = self.step_batch(&Matrix::row_vector(x), &Matrix::row_vector(u))?;
        Ok((xn.into_vec(), y.into_vec()))
    }

    /// Simulates from `x0` over `u_seq` (`T × m`), returning `x_seq` (`(T+1) × n`)
    /// and `y_seq` (`T × p`).
    fn simulate(&self, x0: &[T], u_seq: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        if x0.len() != self.state_dim() {
            return Err(dim_err("x0", self.state_dim(), x0.len()));
        }
        if u_seq.cols() != self.input_dim() {
            return Err(dim_err("input sequence width", self.input_dim(), u_seq.cols()));
        }
        let steps = u_seq.rows();
        let mut xs = Matrix::zeros(steps + 1, self.state_dim());
        let mut ys = Matrix::zeros(steps, self.output_dim());
        xs.row_mut(0).copy_from_slice(x0);
        let mut x = Matrix::row_vector(x0);
        for t in 0..steps {
            let (xn, y) = self.step_unchecked(&x, &Matrix::row_vector(u_seq.row(t)));
            ys.row_mut(t).copy_from_slice(y.as_slice());
            xs.row_mut(t + 1).copy_from_slice(xn.as_slice());
            x = xn;
        }
        Ok((xs, ys))
    }

    /// Simulates a batch: `x0` is `batch × n`, `u_seq[t]` is `batch × m`.
    fn simulate_batch(&self, x0: &Matrix<T>, u_seq: &[Matrix<T>]) -> Result<BatchTrajectory<T>> {
        if x0.cols() != self.state_dim() {
            return Err(dim_err("x0", self.state_dim(), x0.cols()));
        }
        for u in u_seq {
            if u.shape() != (x0.rows(), self.input_dim()) {
                return Err(dim_err(
                    "input batch",
                    format!("{}x{}", x0.rows(), self.input_dim()),
                    format!("{:?}", u.shape()),
                ));
            }
        }
        let mut states = Vec::with_capacity(u_seq.len() + 1);
        let mut outputs = Vec::with_capacity(u_seq.len());
        states.push(x0.clone());
        for u in u_seq {
            let (xn, y) = self.step_unchecked(states.last().expect("nonempty"), u);
            outputs.push(y);
            states.push(xn);
        }
        Ok(BatchTrajectory { states, outputs })
    }
}

/// [`StateSpaceModel::simulate_batch`] with the batch split into `chunks`
/// contiguous row blocks simulated in parallel.
///
/// Rows never interact, so the result is bitwise identical to the serial one.
pub fn simulate_batch_parallel<T: Scalar, M: StateSpaceModel<T> + ?Sized>(
    model: &M,
    x0: &Matrix<T>,
    u_seq: &[Matrix<T>],
    chunks: usize,
) -> Result<BatchTrajectory<T>> {
    let rows = x0.rows();
    let chunks = chunks.clamp(1, rows.max(1));
    if chunks == 1 {
        return model.simulate_batch(x0, u_seq);
    }
    let per = rows.div_ceil(chunks);
    let ranges: Vec<(usize, usize)> = (0..rows).step_by(per).map(|r0| (r0, (r0 + per).min(rows))).collect();
    let parts: Vec<BatchTrajectory<T>> = ranges
        .par_iter()
        .map(|&(r0, r1)| {
            let x = x0.block(r0, 0, r1 - r0, x0.cols());
            let us: Vec<Matrix<T>> = u_seq.iter().map(|u| u.block(r0, 0, r1 - r0, u.cols())).collect();
            model.simulate_batch(&x, &us)
        })
        .collect::<Result<_>>()?;
    let join = |get: &dyn Fn(&BatchTrajectory<T>) -> &Vec<Matrix<T>>| -> Vec<Matrix<T>> {
        let len = get(&parts[0]).len();
        (0..len)
            .map(|t| {
                let blocks: Vec<&Matrix<T>> = parts.iter().map(|p| &get(p)[t]).collect();
                Matrix::vstack(&blocks)
            })
            .collect()
    };
    Ok(BatchTrajectory {
        states: join(&|p| &p.states),
        outputs: join(&|p| &p.outputs),
    })
}
