//! Wall-clock timing of forward simulation and sequence-loss gradients across
//! model sizes.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::arch::{AnyModel, ModelConfig};
use crate::error::{Error, Result};
use crate::grad::{sequence_loss_grad, SequenceBatch};
use crate::linalg::Matrix;
use crate::lti_param::LmiKind;
use crate::model::{simulate_batch_parallel, StateSpaceModel};
use crate::params::DirectParams;
use crate::r2dn::R2dnConfig;
use crate::ren::RenConfig;
use crate::verify::trial_rng;

pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_REPS: usize = 100;
/// Largest timer resolution tolerated, as a fraction of the mean call time.
pub const RESOLUTION_FRACTION: f64 = 0.01;
const MAX_REP_GROWTH: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Forward,
    Gradient,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Forward => "forward",
            Self::Gradient => "gradient",
        }
    }
}

/// Timing statistics for one `(arch, size, phase)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub arch: String,
    /// `q` for a REN, `n_h` for an R2DN.
    pub size: usize,
    pub phase: Phase,
    pub reps: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub p50_ms: f64,
    pub param_count: usize,
    /// `1 / NRMSE` when joined from a fit.
    pub expressivity: Option<f64>,
    /// Post-warmup per-call times.
    #[serde(skip)]
    pub samples_ms: Vec<f64>,
    /// Requested repetitions before any increase for timer resolution.
    pub requested_reps: usize,
}

impl BenchRecord {
    pub fn reps_adjusted(&self) -> bool {
        self.reps != self.requested_reps
    }
}

/// Smallest nonzero difference between consecutive clock readings.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn stats(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let p50 = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    (mean, var.sqrt(), p50)
}

/// Times `call` per invocation after `warmup` discarded calls.
///
/// If the clock resolution exceeds 1% of the mean, repetitions are increased
/// tenfold (at most a hundredfold) so the mean averages over quantization.
pub fn time_calls(mut call: impl FnMut() -> Result<()>, warmup: usize, reps: usize) -> Result<(Vec<f64>, usize)> {
    if reps == 0 {
        return Err(Error::Parameter("reps must be at least 1".into()));
    }
    for _ in 0..warmup {
        call()?;
    }
    let resolution_ms = timer_resolution().as_secs_f64() * 1e3;
    let mut target = reps;
    let mut samples = Vec::with_capacity(reps);
    loop {
        while samples.len() < target {
            let t = Instant::now();
            call()?;
            samples.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let (mean, _, _) = stats(&samples);
        if resolution_ms <= RESOLUTION_FRACTION * mean || target >= reps * MAX_REP_GROWTH {
            break;
        }
        target *= 10;
        log::info!("timer resolution {resolution_ms:.2e} ms exceeds 1% of mean {mean:.2e} ms; reps -> {target}");
    }
    Ok((samples, target))
}

/// Model plus deterministic workload for one benchmark cell.
pub struct Workload {
    pub cfg: ModelConfig,
    pub params: DirectParams<f64>,
    pub model: AnyModel<f64>,
    pub batch: SequenceBatch<f64>,
}

impl Workload {
    pub fn new(cfg: ModelConfig, batch: usize, seq_len: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = cfg.init_params(&mut trial_rng(seed, 0));
        let model = cfg.realize(&params)?;
        let mut rng = trial_rng(seed, 1);
        let mut gauss = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
        let x0 = gauss(batch, cfg.state_dim());
        let u = (0..seq_len).map(|_| gauss(batch, cfg.input_dim())).collect();
        let y = (0..seq_len).map(|_| gauss(batch, cfg.output_dim())).collect();
        Ok(Self {
            cfg,
            params,
            model,
            batch: SequenceBatch { x0, u, y },
        })
    }

    /// One forward simulation, or one sequence-loss gradient.
    pub fn run(&self, phase: Phase, threads: usize) -> Result<()> {
        match phase {
            Phase::Forward => {
                let traj = if threads > 1 {
                    simulate_batch_parallel(&self.model, &self.batch.x0, &self.batch.u, threads)?
                } else {
                    self.model.simulate_batch(&self.batch.x0, &self.batch.u)?
                };
                std::hint::black_box(traj);
            }
            Phase::Gradient => {
                std::hint::black_box(sequence_loss_grad(&self.params, &self.cfg, &self.batch)?);
            }
        }
        Ok(())
    }
}

/// Times `phase` on `cfg` for a `batch × seq_len` input sequence.
pub fn time_phase(cfg: &ModelConfig, size: usize, phase: Phase, opts: &TimingOptions) -> Result<BenchRecord> {
    let work = Workload::new(cfg.clone(), opts.batch, opts.seq_len, opts.seed)?;
    let threads = opts.threads.max(1);
    let (samples, reps) = time_calls(|| work.run(phase, threads), opts.warmup, opts.reps)?;
    let (mean_ms, std_ms, p50_ms) = stats(&samples);
    Ok(BenchRecord {
        arch: cfg.tag().to_string(),
        size,
        phase,
        reps,
        mean_ms,
        std_ms,
        p50_ms,
        param_count: cfg.param_count(),
        expressivity: None,
        samples_ms: samples,
        requested_reps: opts.reps,
    })
}

fn default_batch() -> usize {
    64
}
fn default_seq_len() -> usize {
    128
}
fn default_reps() -> usize {
    DEFAULT_REPS
}
fn default_warmup() -> usize {
    DEFAULT_WARMUP
}
fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingOptions {
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default)]
    pub seed: u64,
    /// Row chunks simulated in parallel during forward timing; 1 is single-threaded.
    #[serde(default = "default_threads")]
    pub threads: usize,
}

impl Default for TimingOptions {
    fn default() -> Self {
        Self {
            batch: default_batch(),
            seq_len: default_seq_len(),
            reps: default_reps(),
            warmup: default_warmup(),
            seed: 0,
            threads: default_threads(),
        }
    }
}

/// Expressivity value to attach to matching records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpressivityEntry {
    pub arch: String,
    pub size: usize,
    /// Median 1/NRMSE over `seeds` training runs.
    pub value: f64,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
}

fn default_seeds() -> usize {
    3
}

fn default_ren_sizes() -> Vec<usize> {
    vec![20, 60, 100, 140]
}
fn default_r2dn_widths() -> Vec<usize> {
    vec![8, 32, 64, 96]
}
fn default_phases() -> Vec<Phase> {
    vec![Phase::Forward, Phase::Gradient]
}
fn one() -> usize {
    1
}
fn sixteen() -> usize {
    16
}
fn six() -> usize {
    6
}

/// Sizes and shapes swept by [`scaling_sweep`].
///
/// RENs vary the neuron count `q`; R2DNs fix `q = l` and depth and vary the
/// width `n_h`. Every model has `n` states and `m`/`p` scalar channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchGrid {
    #[serde(default = "default_ren_sizes")]
    pub ren_sizes: Vec<usize>,
    #[serde(default = "default_r2dn_widths")]
    pub r2dn_widths: Vec<usize>,
    #[serde(default = "default_phases")]
    pub phases: Vec<Phase>,
    #[serde(default = "one")]
    pub n: usize,
    #[serde(default = "one")]
    pub m: usize,
    #[serde(default = "one")]
    pub p: usize,
    #[serde(default = "sixteen")]
    pub r2dn_q: usize,
    #[serde(default = "six")]
    pub r2dn_depth: usize,
    #[serde(default)]
    pub timing: TimingOptions,
    #[serde(default)]
    pub expressivity: Vec<ExpressivityEntry>,
}

impl Default for BenchGrid {
    fn default() -> Self {
        Self {
            ren_sizes: default_ren_sizes(),
            r2dn_widths: default_r2dn_widths(),
            phases: default_phases(),
            n: 1,
            m: 1,
            p: 1,
            r2dn_q: 16,
            r2dn_depth: 6,
            timing: TimingOptions::default(),
            expressivity: Vec::new(),
        }
    }
}

impl BenchGrid {
    pub fn ren_config(&self, q: usize) -> ModelConfig {
        RenConfig::new(self.n, self.m, self.p, q).into()
    }

    pub fn r2dn_config(&self, width: usize) -> ModelConfig {
        R2dnConfig::new(self.n, self.m, self.p, self.r2dn_q, self.r2dn_q, LmiKind::Contraction)
            .with_phi(self.r2dn_depth, width)
            .into()
    }

    /// `(size, config)` cells in sweep order, RENs first.
    pub fn cells(&self) -> Vec<(usize, ModelConfig)> {
        let ren = self.ren_sizes.iter().map(|&q| (q, self.ren_config(q)));
        let r2dn = self.r2dn_widths.iter().map(|&w| (w, self.r2dn_config(w)));
        ren.chain(r2dn).collect()
    }
}

/// A cell that could not be timed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellFailure {
    pub arch: String,
    pub size: usize,
    pub phase: Phase,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SweepOutcome {
    pub records: Vec<BenchRecord>,
    pub failures: Vec<CellFailure>,
}

/// Runs [`time_phase`] over every cell and phase of `grid`; failing cells
/// are collected and the sweep continues.
pub fn scaling_sweep(grid: &BenchGrid) -> Result<SweepOutcome> {
    let cells = grid.cells();
    if cells.is_empty() || grid.phases.is_empty() {
        return Err(Error::Parameter("benchmark grid is empty".into()));
    }
    let mut out = SweepOutcome::default();
    for (size, cfg) in &cells {
        for &phase in &grid.phases {
            match time_phase(cfg, *size, phase, &grid.timing) {
                Ok(mut rec) => {
                    rec.expressivity = grid
                        .expressivity
                        .iter()
                        .find(|e| e.arch == rec.arch && e.size == rec.size)
                        .map(|e| e.value);
                    log::info!("{} {} {}: {:.3} ms", rec.arch, size, phase.as_str(), rec.mean_ms);
                    out.records.push(rec);
                }
                Err(e) => {
                    log::warn!("{} {} {}: {e}", cfg.tag(), size, phase.as_str());
                    out.failures.push(CellFailure {
                        arch: cfg.tag().to_string(),
                        size: *size,
                        phase,
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(out)
}

pub const CSV_HEADER: [&str; 9] = [
    "arch",
    "size",
    "phase",
    "reps",
    "mean_ms",
    "std_ms",
    "p50_ms",
    "param_count",
    "expressivity",
];

/// Writes records with the columns of [`CSV_HEADER`].
pub fn write_csv<W: Write>(records: &[BenchRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.arch.clone(),
            r.size.to_string(),
            r.phase.as_str().to_string(),
            r.reps.to_string(),
            r.mean_ms.to_string(),
            r.std_ms.to_string(),
            r.p50_ms.to_string(),
            r.param_count.to_string(),
            r.expressivity.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(records: &[BenchRecord], path: impl AsRef<Path>) -> Result<()> {
    write_csv(records, std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_known_samples() {
        let (m, s, p) = stats(&[1.0, 2.0, 3.0, 10.0]);
        assert_eq!(m, 4.0);
        assert_eq!(p, 2.5);
        assert!((s - 4.0824829046386).abs() < 1e-12);
    }

    #[test]
    fn zero_reps_rejected() {
        assert!(time_calls(|| Ok(()), 0, 0).is_err());
    }

    #[test]
    fn failing_cell_is_recorded() {
        let grid = BenchGrid {
            ren_sizes: vec![0],
            r2dn_widths: vec![],
            phases: vec![Phase::Forward],
            timing: TimingOptions {
                reps: 1,
                warmup: 0,
                ..TimingOptions::default()
            },
            ..BenchGrid::default()
        };
        let out = scaling_sweep(&grid).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.failures.len(), 1);
    }
}
