//! Supervised fitting of the state update `f_θ(x, u)` to a scalar test
//! function, used to compare how expressive each architecture is per unit of
//! compute.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{AnyModel, ModelConfig};
use crate::error::{Error, Result};
use crate::grad::{loss_grad, StepBatch};
use crate::linalg::Matrix;
use crate::lti_param::LmiKind;
use crate::model::StateSpaceModel;
use crate::params::DirectParams;
use crate::scalar::Scalar;
use crate::verify::trial_rng;

/// Default loss above which training is stopped as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Range of the sampled state.
pub const X_RANGE: f64 = 30.0;
/// Range of the sampled input.
pub const U_RANGE: f64 = 1.0;

/// Optimizer and data schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    /// Minibatches per epoch.
    pub batches_per_epoch: usize,
    /// Samples per minibatch.
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplies the learning rate every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub test_size: usize,
    /// Epoch interval of test NRMSE snapshots; the last epoch is always evaluated.
    pub eval_every: usize,
    /// Epoch interval of certificate spot checks (contracting and Lipschitz R2DNs only).
    pub lmi_check_every: usize,
    /// Minibatch loss above which training stops as diverged.
    pub divergence_loss: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainSchedule {
    /// 300 epochs of 32 × 256 samples, decaying the rate tenfold every 100 epochs.
    pub fn desk() -> Self {
        Self {
            epochs: 300,
            batches_per_epoch: 32,
            batch_size: 256,
            lr: 1e-3,
            decay_factor: 0.1,
            decay_every: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            test_size: 2048,
            eval_every: 10,
            lmi_check_every: 50,
            divergence_loss: DIVERGENCE_LOSS,
        }
    }

    /// 1500 epochs of 128 × 512 samples, decaying every 500 epochs.
    pub fn full_scale() -> Self {
        Self {
            epochs: 1500,
            batches_per_epoch: 128,
            batch_size: 512,
            decay_every: 500,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batches_per_epoch > 0 && self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if self.decay_every == 0 || !(self.decay_factor > 0.0) {
            return Err(Error::Parameter(
                "decay_every ≥ 1 and decay_factor > 0 are required".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Parameter(
                "moment coefficients must lie in [0, 1) and adam_eps > 0".into(),
            ));
        }
        if self.test_size == 0 {
            return Err(Error::Parameter("test_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
    pub nrmse: Option<f64>,
}

/// One record per completed epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub records: Vec<EpochRecord>,
}

impl LossHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV with columns `epoch,loss,lr,wall_ms,nrmse`; missing snapshots are empty cells.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "loss", "lr", "wall_ms", "nrmse"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.loss.to_string(),
                r.lr.to_string(),
                r.wall_ms.to_string(),
                r.nrmse.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// `0.05x + 0.2 sin x + u + 0.05 cos 2x̄ + 0.05 sin 3x̄ + 0.075 sin 4x̄ · atan(0.1 x̄²)`, `x̄ = x + u`.
pub fn target_f(x: f64, u: f64) -> f64 {
    let xb = x + u;
    0.05 * x
        + 0.2 * x.sin()
        + u
        + 0.05 * (2.0 * xb).cos()
        + 0.05 * (3.0 * xb).sin()
        + 0.075 * (4.0 * xb).sin() * (0.1 * xb * xb).atan()
}

/// `100 · ‖truth − pred‖ / ‖truth‖`.
pub fn nrmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(crate::error::dim_err("nrmse", truth.len(), pred.len()));
    }
    let tn = truth.iter().map(|t| t * t).sum::<f64>().sqrt();
    if !(tn > 0.0) {
        return Err(Error::UndefinedMetric("truth has zero norm".into()));
    }
    let en = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum::<f64>().sqrt();
    Ok(100.0 * en / tn)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step<T: Scalar>(&mut self, theta: &mut [T], grad: &[T], lr: f64) {
        assert_eq!(theta.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i].to_f64_lossy();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let upd = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            theta[i] -= T::lit(upd);
        }
    }
}

/// `size` uniform samples of `(x, u, f(x, u))`.
pub fn sample_batch<T: Scalar, R: Rng + ?Sized>(size: usize, rng: &mut R) -> StepBatch<T> {
    let mut x = Matrix::zeros(size, 1);
    let mut u = Matrix::zeros(size, 1);
    let mut target = Matrix::zeros(size, 1);
    for i in 0..size {
        let xi = rng.random_range(-X_RANGE..=X_RANGE);
        let ui = rng.random_range(-U_RANGE..=U_RANGE);
        x[(i, 0)] = T::lit(xi);
        u[(i, 0)] = T::lit(ui);
        target[(i, 0)] = T::lit(target_f(xi, ui));
    }
    StepBatch { x, u, target }
}

/// Test NRMSE of the state update of `model` on `batch`.
pub fn evaluate<T: Scalar>(model: &AnyModel<T>, batch: &StepBatch<T>) -> Result<f64> {
    let (xn, _) = model.step_batch(&batch.x, &batch.u)?;
    let pred: Vec<f64> = xn.as_slice().iter().map(|v| v.to_f64_lossy()).collect();
    let truth: Vec<f64> = batch.target.as_slice().iter().map(|v| v.to_f64_lossy()).collect();
    nrmse(&pred, &truth)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum StopReason {
    Completed,
    /// Loss exceeded the schedule's divergence threshold or became non-finite.
    Diverged {
        epoch: usize,
        loss: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmiCheck {
    pub epoch: usize,
    pub eigmin: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub params: DirectParams<T>,
    pub history: LossHistory,
    pub initial_nrmse: f64,
    pub final_nrmse: f64,
    /// `1 / NRMSE`.
    pub expressivity: f64,
    pub lmi_checks: Vec<LmiCheck>,
    pub stop: StopReason,
}

fn lmi_eigmin<T: Scalar>(model: &AnyModel<T>, kind: LmiKind) -> Result<Option<f64>> {
    match model {
        AnyModel::R2dn(m) => Ok(Some(m.lmi_residual(kind)?.eigmin.to_f64_lossy())),
        AnyModel::Ren(_) => Ok(None),
    }
}

/// Fits `f_θ(x, u) ≈ target_f(x, u)` with Adam, drawing fresh minibatches
/// every epoch from streams derived from `schedule.seed`.
///
/// Parameters are initialized from the same seed, so a `(cfg, schedule)`
/// pair fully determines the run.
pub fn fit_expressivity<T: Scalar>(cfg: &ModelConfig, schedule: &TrainSchedule) -> Result<FitResult<T>> {
    cfg.validate()?;
    schedule.validate()?;
    if cfg.state_dim() != 1 || cfg.input_dim() != 1 {
        return Err(Error::Parameter(format!(
            "expressivity fit needs n = m = 1, got n = {}, m = {}",
            cfg.state_dim(),
            cfg.input_dim()
        )));
    }
    let kind = match cfg {
        ModelConfig::R2dn(c) => c.mode,
        ModelConfig::Ren(_) => LmiKind::Contraction,
    };
    let mut params: DirectParams<T> = cfg.init_params(&mut trial_rng(schedule.seed, 0));
    let test: StepBatch<T> = sample_batch(schedule.test_size, &mut trial_rng(schedule.seed, u64::MAX));

    let model = cfg.realize(&params)?;
    let initial_nrmse = evaluate(&model, &test)?;
    let mut last_nrmse = initial_nrmse;
    let mut lmi_checks = Vec::new();
    if let Some(e) = lmi_eigmin(&model, kind)? {
        lmi_checks.push(LmiCheck { epoch: 0, eigmin: e });
    }

    let mut adam = Adam::new(params.len(), schedule.beta1, schedule.beta2, schedule.adam_eps);
    let mut history = LossHistory::default();
    let mut stop = StopReason::Completed;
    'epochs: for epoch in 0..schedule.epochs {
        let start = Instant::now();
        let lr = schedule.lr_at(epoch);
        let mut rng = trial_rng(schedule.seed, 1 + epoch as u64);
        let mut total = 0.0;
        for _ in 0..schedule.batches_per_epoch {
            let batch: StepBatch<T> = sample_batch(schedule.batch_size, &mut rng);
            let (loss, grad) = match loss_grad(&params, cfg, &batch) {
                Ok(v) => v,
                Err(Error::NonFinite(msg)) => {
                    log::warn!("epoch {epoch}: {msg}");
                    stop = StopReason::Diverged { epoch, loss: f64::NAN };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let loss = loss.to_f64_lossy();
            if !(loss <= schedule.divergence_loss) {
                stop = StopReason::Diverged { epoch, loss };
                break 'epochs;
            }
            total += loss;
            adam.step(params.as_mut_slice(), &grad, lr);
        }
        let last = epoch + 1 == schedule.epochs;
        let check_lmi = (epoch + 1) % schedule.lmi_check_every.max(1) == 0 || last;
        let eval = schedule.eval_every > 0 && (epoch + 1) % schedule.eval_every == 0 || last;
        let mut nrmse_snap = None;
        if eval || check_lmi {
            let model = cfg.realize(&params)?;
            if eval {
                last_nrmse = evaluate(&model, &test)?;
                nrmse_snap = Some(last_nrmse);
            }
            if check_lmi {
                if let Some(e) = lmi_eigmin(&model, kind)? {
                    if e < 0.0 {
                        log::warn!("epoch {epoch}: certificate eigmin {e:.3e}");
                    }
                    lmi_checks.push(LmiCheck {
                        epoch: epoch + 1,
                        eigmin: e,
                    });
                }
            }
        }
        let record = EpochRecord {
            epoch,
            loss: total / schedule.batches_per_epoch.max(1) as f64,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            nrmse: nrmse_snap,
        };
        log::debug!("epoch {epoch}: loss {:.4e}, nrmse {:?}", record.loss, record.nrmse);
        history.records.push(record);
    }
    if matches!(stop, StopReason::Diverged { .. }) {
        last_nrmse = evaluate(&cfg.realize(&params)?, &test).unwrap_or(f64::INFINITY);
    }
    Ok(FitResult {
        params,
        history,
        initial_nrmse,
        final_nrmse: last_nrmse,
        expressivity: 1.0 / last_nrmse,
        lmi_checks,
        stop,
    })
}
