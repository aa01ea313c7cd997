//! Empirical checks of contraction, incremental gain and the dissipation
//! certificate.
//!
//! Every trial draws from its own ChaCha stream derived from `(seed, trial)`,
//! so reports do not depend on how trials are scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::linalg::{factor_checked, Matrix};
use crate::lipschitz_net::Nonlinearity;
use crate::lti_param::{LmiKind, LmiSpec};
use crate::model::StateSpaceModel;
use crate::r2dn::ExplicitR2dn;
use crate::scalar::Scalar;

/// Gap samples at or below this value are treated as numerically zero.
pub const GAP_FLOOR: f64 = 1e-12;
/// Required terminal contraction of the state gap relative to the initial gap.
pub const TERMINAL_RATIO: f64 = 1e-6;

/// RNG for trial `trial` of a run seeded with `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn gaussian_matrix<R: Rng + ?Sized, T: Scalar>(rows: usize, cols: usize, sd: f64, rng: &mut R) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(sd * z)
    })
}

fn row_diff_norm<T: Scalar>(m: &Matrix<T>) -> f64 {
    m.row(0)
        .iter()
        .zip(m.row(1))
        .map(|(&a, &b)| (a - b).to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    /// `exp` of the largest fitted log-gap slope.
    pub alpha_hat: f64,
    /// `max_t ‖Δx_t‖ / (α̂ᵗ ‖Δx_0‖)` over all pairs.
    pub k_hat: f64,
    /// 95% confidence interval of the worst slope.
    pub slope_ci: (f64, f64),
    /// Largest `‖Δx_T‖ / ‖Δx_0‖` over pairs.
    pub worst_terminal_ratio: f64,
    /// Every pair fell to the numerical floor within one step.
    pub degenerate: bool,
    pub pairs: usize,
    pub pass: bool,
}

struct Fit {
    slope: f64,
    half_width: f64,
}

fn fit_log_gap(gaps: &[f64]) -> Option<Fit> {
    let len = gaps.iter().take_while(|&&g| g > GAP_FLOOR).count();
    if len < 2 {
        return None;
    }
    let ys: Vec<f64> = gaps[..len].iter().map(|g| g.ln()).collect();
    let nf = len as f64;
    let tm = (nf - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = (0..len).map(|t| (t as f64 - tm).powi(2)).sum();
    let sxy: f64 = ys.iter().enumerate().map(|(t, y)| (t as f64 - tm) * (y - ym)).sum();
    let slope = sxy / sxx;
    if len < 3 {
        return Some(Fit { slope, half_width: 0.0 });
    }
    let sse: f64 = ys
        .iter()
        .enumerate()
        .map(|(t, y)| (y - ym - slope * (t as f64 - tm)).powi(2))
        .sum();
    let dof = nf - 2.0;
    let se = (sse / dof / sxx).sqrt();
    let tq = StudentsT::new(0.0, 1.0, dof)
        .map(|d| d.inverse_cdf(0.975))
        .unwrap_or(f64::INFINITY);
    Some(Fit {
        slope,
        half_width: tq * se,
    })
}

/// Estimates the contraction rate from trajectory pairs with different
/// initial states under shared random inputs.
pub fn estimate_contraction<T: Scalar, M: StateSpaceModel<T> + ?Sized>(
    model: &M,
    trials: usize,
    horizon: usize,
    seed: u64,
) -> Result<ContractionReport> {
    if trials == 0 || horizon < 10 {
        return Err(Error::Parameter(format!(
            "contraction estimate needs trials ≥ 1 and T ≥ 10, got {trials} and {horizon}"
        )));
    }
    let (n, m) = (model.state_dim(), model.input_dim());
    let mut all_gaps = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = trial_rng(seed, trial as u64);
        let x0: Matrix<T> = gaussian_matrix(2, n, 1.0, &mut rng);
        let u_seq: Vec<Matrix<T>> = (0..horizon)
            .map(|_| {
                let u: Matrix<T> = gaussian_matrix(1, m, 1.0, &mut rng);
                Matrix::vstack(&[&u, &u])
            })
            .collect();
        let traj = model.simulate_batch(&x0, &u_seq)?;
        let gaps: Vec<f64> = traj.states.iter().map(row_diff_norm).collect();
        all_gaps.push(gaps);
    }

    let mut worst: Option<Fit> = None;
    let mut worst_terminal: f64 = 0.0;
    let mut terminal_ok = true;
    for gaps in &all_gaps {
        let g0 = gaps[0];
        let gt = *gaps.last().expect("nonempty");
        if g0 > 0.0 {
            worst_terminal = worst_terminal.max(gt / g0);
        }
        terminal_ok &= gt <= TERMINAL_RATIO * g0 || gt <= GAP_FLOOR;
        if let Some(f) = fit_log_gap(gaps) {
            if worst
                .as_ref()
                .is_none_or(|w| f.slope + f.half_width > w.slope + w.half_width)
            {
                worst = Some(f);
            }
        }
    }

    let Some(fit) = worst else {
        return Ok(ContractionReport {
            alpha_hat: 0.0,
            k_hat: 1.0,
            slope_ci: (f64::NEG_INFINITY, f64::NEG_INFINITY),
            worst_terminal_ratio: worst_terminal,
            degenerate: true,
            pairs: trials,
            pass: true,
        });
    };
    let alpha_hat = fit.slope.exp();
    let mut k_hat: f64 = 0.0;
    for gaps in &all_gaps {
        let g0 = gaps[0];
        if g0 <= GAP_FLOOR {
            continue;
        }
        for (t, &g) in gaps.iter().enumerate() {
            if g <= GAP_FLOOR {
                break;
            }
            k_hat = k_hat.max(g / (alpha_hat.powi(t as i32) * g0));
        }
    }
    let slope_ci = (fit.slope - fit.half_width, fit.slope + fit.half_width);
    Ok(ContractionReport {
        alpha_hat,
        k_hat,
        slope_ci,
        worst_terminal_ratio: worst_terminal,
        degenerate: false,
        pairs: trials,
        pass: slope_ci.1 < 0.0 && terminal_ok,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainReport {
    /// Largest observed `‖Δy‖_T / ‖Δu‖_T`, a lower bound on the incremental gain.
    pub gamma_hat: f64,
    pub trials: usize,
    /// Trial index whose (refined) pair attained `gamma_hat`.
    pub worst_trial: u64,
    /// Pairs evaluated, including ascent candidates.
    pub evaluations: usize,
}

fn seq_norm_sq<T: Scalar>(seq: &[Matrix<T>], row_a: usize, row_b: usize) -> f64 {
    seq.iter()
        .map(|m| {
            m.row(row_a)
                .iter()
                .zip(m.row(row_b))
                .map(|(&a, &b)| (a - b).to_f64_lossy().powi(2))
                .sum::<f64>()
        })
        .sum()
}

/// Gains of pairs `(2k, 2k+1)` of a batch simulated from shared initial states.
fn pair_gains<T: Scalar, M: StateSpaceModel<T> + ?Sized>(
    model: &M,
    x0: &Matrix<T>,
    u: &[Matrix<T>],
) -> Result<Vec<Option<f64>>> {
    let traj = model.simulate_batch(x0, u)?;
    Ok((0..x0.rows() / 2)
        .map(|k| {
            let du = seq_norm_sq(u, 2 * k, 2 * k + 1);
            if du == 0.0 {
                return None;
            }
            Some((seq_norm_sq(&traj.outputs, 2 * k, 2 * k + 1) / du).sqrt())
        })
        .collect())
}

/// Lower bound on the incremental ℓ₂ gain from random input pairs with a
/// shared initial state, refined by coordinate-perturbation ascent on the
/// best pairs.
pub fn estimate_gain<T: Scalar, M: StateSpaceModel<T> + ?Sized>(
    model: &M,
    trials: usize,
    horizon: usize,
    ascent_steps: usize,
    seed: u64,
) -> Result<GainReport> {
    let (n, m) = (model.state_dim(), model.input_dim());
    if m == 0 {
        return Err(Error::Parameter("gain estimate needs at least one input".into()));
    }
    if trials == 0 || horizon == 0 {
        return Err(Error::Parameter("gain estimate needs trials ≥ 1 and T ≥ 1".into()));
    }
    const CHUNK: usize = 512;
    let mut scored: Vec<(f64, u64)> = Vec::with_capacity(trials);
    let mut evaluations = 0;
    for start in (0..trials).step_by(CHUNK) {
        let end = (start + CHUNK).min(trials);
        let (x0, u) = draw_pairs::<T>(start, end, n, m, horizon, seed);
        for (k, g) in pair_gains(model, &x0, &u)?.into_iter().enumerate() {
            evaluations += 1;
            if let Some(g) = g {
                scored.push((g, (start + k) as u64));
            }
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = scored.first().copied().unwrap_or((0.0, 0));
    if ascent_steps > 0 {
        for &(g0, trial) in scored.iter().take(4) {
            let (x0, mut u) = draw_pairs::<T>(trial as usize, trial as usize + 1, n, m, horizon, seed);
            let mut cur = g0;
            let du0 = seq_norm_sq(&u, 0, 1).sqrt();
            let mut step = du0 / ((horizon * m) as f64).sqrt();
            let mut rng = trial_rng(seed ^ 0x9e37_79b9_7f4a_7c15, trial);
            for _ in 0..ascent_steps {
                let t = rng.random_range(0..horizon);
                let j = rng.random_range(0..m);
                let row = rng.random_range(0..2);
                let mut improved = false;
                for sign in [1.0, -1.0] {
                    let mut cand = u.clone();
                    cand[t][(row, j)] += T::lit(sign * step);
                    evaluations += 1;
                    if let Some(g) = pair_gains(model, &x0, &cand)?[0] {
                        if g > cur {
                            cur = g;
                            u = cand;
                            improved = true;
                            break;
                        }
                    }
                }
                if !improved {
                    step *= 0.7;
                }
            }
            if cur > best.0 {
                best = (cur, trial);
            }
        }
    }
    Ok(GainReport {
        gamma_hat: best.0,
        trials,
        worst_trial: best.1,
        evaluations,
    })
}

/// Input pairs for trials `start..end`, rows `2k` and `2k+1` share an initial state.
fn draw_pairs<T: Scalar>(
    start: usize,
    end: usize,
    n: usize,
    m: usize,
    horizon: usize,
    seed: u64,
) -> (Matrix<T>, Vec<Matrix<T>>) {
    let rows = 2 * (end - start);
    let mut x0 = Matrix::zeros(rows, n);
    let mut u = vec![Matrix::zeros(rows, m); horizon];
    for (k, trial) in (start..end).enumerate() {
        let mut rng = trial_rng(seed, trial as u64);
        let xs = rng.random_range(0.0..2.0);
        let us = 10f64.powf(rng.random_range(-1.0..1.0));
        let gap = us * 10f64.powf(rng.random_range(-3.0..0.0));
        for j in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            x0[(2 * k, j)] = T::lit(xs * z);
            x0[(2 * k + 1, j)] = T::lit(xs * z);
        }
        for ut in u.iter_mut() {
            for j in 0..m {
                let a: f64 = StandardNormal.sample(&mut rng);
                let d: f64 = StandardNormal.sample(&mut rng);
                ut[(2 * k, j)] = T::lit(us * a);
                ut[(2 * k + 1, j)] = T::lit(us * a + gap * d);
            }
        }
    }
    (x0, u)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DissipationReport {
    /// Largest `(V(Δx⁺) − V(Δx) − supply) / (1 + ‖Δx‖²)`; positive means violated.
    pub max_violation: f64,
    pub pairs: usize,
    pub steps: usize,
}

/// Checks `V(Δx_{t+1}) − V(Δx_t) ≤ supply_t` with `V = Δxᵀ Eᵀ 𝒫⁻¹ E Δx` along
/// random trajectory pairs.
///
/// For the contraction IQC the pair shares its inputs and the supply is
/// `|Δw|² − |Δv|²`; for the Lipschitz IQC the inputs differ and the supply is
/// `|Δw|² − |Δv|² + γ|Δu|² − |Δy|²/γ`.
pub fn check_dissipation<T: Scalar, F: Nonlinearity<T>>(
    model: &ExplicitR2dn<T, F>,
    spec: &LmiSpec<T>,
    trials: usize,
    horizon: usize,
    seed: u64,
) -> Result<DissipationReport> {
    let lti = &model.lti;
    let d = lti.validate()?;
    let p_lu = factor_checked(&lti.p, "P")?;
    // W = Eᵀ P⁻¹ E
    let w_mat = lti.e.transpose().matmul(&p_lu.solve(&lti.e));
    let storage = |dx: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..dx.len() {
            for j in 0..dx.len() {
                s += dx[i] * w_mat[(i, j)].to_f64_lossy() * dx[j];
            }
        }
        s
    };
    let gamma = match spec.kind {
        LmiKind::Contraction => None,
        LmiKind::Lipschitz { gamma } => Some(gamma),
    };
    let diff = |m: &Matrix<T>| -> Vec<f64> {
        m.row(0)
            .iter()
            .zip(m.row(1))
            .map(|(&a, &b)| (a - b).to_f64_lossy())
            .collect()
    };
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let mut worst = f64::NEG_INFINITY;
    for trial in 0..trials {
        let mut rng = trial_rng(seed, trial as u64);
        let mut x: Matrix<T> = gaussian_matrix(2, d.n, 1.0, &mut rng);
        for _ in 0..horizon {
            let mut u: Matrix<T> = gaussian_matrix(2, d.m, 1.0, &mut rng);
            if gamma.is_none() {
                let shared = u.row(0).to_vec();
                u.row_mut(1).copy_from_slice(&shared);
            }
            let s = model.step_with_signals(&x, &u)?;
            let dx = diff(&x);
            let dxn = diff(&s.x_next);
            let mut supply = sq(&diff(&s.w)) - sq(&diff(&s.v));
            if let Some(g) = gamma {
                supply += g * sq(&diff(&u)) - sq(&diff(&s.y)) / g;
            }
            let viol = (storage(&dxn) - storage(&dx) - supply) / (1.0 + sq(&dx));
            worst = worst.max(viol);
            x = s.x_next;
        }
    }
    Ok(DissipationReport {
        max_violation: if trials == 0 || horizon == 0 { 0.0 } else { worst },
        pairs: trials,
        steps: horizon,
    })
}
