use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use r2dn_core::bench::{save_csv, scaling_sweep};
use r2dn_core::lti_param::{lmi_residual, LmiSpec};
use r2dn_core::train::fit_expressivity;
use r2dn_core::verify::{check_dissipation, estimate_contraction, estimate_gain};
use r2dn_core::{AnyModel, Checkpoint, DirectParams, LmiKind, Matrix, ModelConfig, StateSpaceModel};
use serde_json::{json, Value};

mod config;

#[derive(Parser)]
#[command(name = "r2dn", version, about = "Contracting and Lipschitz recurrent deep networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Empirically check contraction, gain and the dissipation certificate.
    Verify(Common),
    /// Fit the expressivity test function.
    Train(Common),
    /// Time forward passes and gradients across model sizes.
    Bench(Common),
    /// Write the realized explicit model as JSON.
    Export(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Verify(c) => verify(&c),
        Command::Train(c) => train(&c),
        Command::Bench(c) => bench(&c),
        Command::Export(c) => export(&c),
    }
}

fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, v: &Value) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_model(
    cfg_path: &Path,
    model: Option<ModelConfig>,
    checkpoint: Option<PathBuf>,
    seed: u64,
) -> anyhow::Result<(ModelConfig, DirectParams<f64>)> {
    match (model, checkpoint) {
        (Some(m), None) => {
            m.validate()?;
            let params = m.init_params(&mut r2dn_core::verify::trial_rng(seed, 0));
            Ok((m, params))
        }
        (None, Some(p)) => {
            let ck = Checkpoint::load(config::relative_to(cfg_path, &p))?;
            Ok((ck.config, ck.params))
        }
        _ => bail!("give exactly one of `model` or `checkpoint`"),
    }
}

fn verify(c: &Common) -> anyhow::Result<()> {
    let file: config::VerifyConfig = config::read(&c.config)?;
    let seed = c.seed.unwrap_or(0);
    let (cfg, params) = load_model(&c.config, file.model, file.checkpoint, seed)?;
    let model = cfg.realize(&params)?;
    let s = &file.verify;
    prepare_out(&c.out)?;

    let mut report = json!({ "arch": cfg.tag(), "param_count": cfg.param_count(), "seed": seed });
    let kind = match &cfg {
        ModelConfig::R2dn(r) => Some(r.mode),
        ModelConfig::Ren(_) => None,
    };
    if let Some(kind) = kind {
        let res = lmi_residual(model.lti(), &LmiSpec::for_dims(kind, model.lti().dims())?)?;
        report["lmi"] = json!({ "eigmin": res.eigmin, "r_eigmin": res.r_eigmin, "certified": res.certified() });
    }
    let contraction = estimate_contraction(&model, s.contraction_trials, s.contraction_horizon, seed)?;
    report["contraction"] = serde_json::to_value(&contraction)?;
    if let Some(LmiKind::Lipschitz { gamma }) = kind {
        let gain = estimate_gain(&model, s.gain_trials, s.gain_horizon, s.ascent_steps, seed)?;
        report["gain"] =
            json!({ "gamma": gamma, "report": gain, "within_bound": gain.gamma_hat <= gamma * (1.0 + 1e-4) });
    }
    if let (AnyModel::R2dn(m), Some(kind)) = (&model, kind) {
        let spec = LmiSpec::for_dims(kind, m.lti.dims())?;
        let diss = check_dissipation(m, &spec, s.dissipation_trials, s.dissipation_horizon, seed)?;
        report["dissipation"] = serde_json::to_value(&diss)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    write_json(&c.out.join("verify.json"), &report)
}

fn train(c: &Common) -> anyhow::Result<()> {
    let mut file: config::TrainConfig = config::read(&c.config)?;
    if let Some(seed) = c.seed {
        file.schedule.seed = seed;
    }
    prepare_out(&c.out)?;
    let fit = fit_expressivity::<f64>(&file.model, &file.schedule)?;
    fit.history.save_csv(c.out.join("history.csv"))?;
    let mut ck = Checkpoint::new(file.model.clone(), &fit.params)?;
    ck.metadata
        .insert("schedule".into(), serde_json::to_value(&file.schedule)?);
    ck.metadata.insert("final_nrmse".into(), json!(fit.final_nrmse));
    ck.save(c.out.join("checkpoint.json"))?;
    let summary = json!({
        "arch": file.model.tag(),
        "param_count": file.model.param_count(),
        "seed": file.schedule.seed,
        "epochs_completed": fit.history.len(),
        "initial_nrmse": fit.initial_nrmse,
        "final_nrmse": fit.final_nrmse,
        "expressivity": fit.expressivity,
        "lmi_checks": fit.lmi_checks,
        "stop": fit.stop,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    write_json(&c.out.join("summary.json"), &summary)
}

fn bench(c: &Common) -> anyhow::Result<()> {
    let mut grid: config::BenchConfig = config::read(&c.config)?;
    if let Some(seed) = c.seed {
        grid.timing.seed = seed;
    }
    if grid.timing.threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(grid.timing.threads)
            .build_global()?;
    }
    prepare_out(&c.out)?;
    let outcome = scaling_sweep(&grid)?;
    let csv_path = c.out.join("bench.csv");
    save_csv(&outcome.records, &csv_path)?;
    log::info!("wrote {} ({} records)", csv_path.display(), outcome.records.len());
    let meta = json!({
        "threads": grid.timing.threads,
        "batch": grid.timing.batch,
        "seq_len": grid.timing.seq_len,
        "warmup": grid.timing.warmup,
        "seed": grid.timing.seed,
        "reps_adjusted": outcome.records.iter().filter(|r| r.reps_adjusted()).map(|r| json!({"arch": r.arch, "size": r.size, "phase": r.phase, "reps": r.reps})).collect::<Vec<_>>(),
        "failures": outcome.failures,
        "expressivity": grid.expressivity,
    });
    write_json(&c.out.join("bench_meta.json"), &meta)?;
    if !outcome.failures.is_empty() {
        log::warn!("{} cells failed; see bench_meta.json", outcome.failures.len());
    }
    Ok(())
}

fn mat(m: &Matrix<f64>) -> Value {
    json!((0..m.rows()).map(|i| m.row(i).to_vec()).collect::<Vec<_>>())
}

fn export(c: &Common) -> anyhow::Result<()> {
    let file: config::ExportConfig = config::read(&c.config)?;
    let (cfg, params) = load_model(&c.config, file.model, file.checkpoint, c.seed.unwrap_or(0))?;
    let model = cfg.realize(&params)?;
    let l = model.lti();
    let mut out = json!({
        "arch": cfg.tag(),
        "config": cfg,
        "lti": {
            "A": mat(&l.a), "B1": mat(&l.b1), "B2": mat(&l.b2),
            "C1": mat(&l.c1), "C2": mat(&l.c2),
            "D12": mat(&l.d12), "D21": mat(&l.d21), "D22": mat(&l.d22),
            "bx": l.bx, "bv": l.bv, "by": l.by,
            "E": mat(&l.e), "P": mat(&l.p),
        },
    });
    match &model {
        AnyModel::R2dn(m) => {
            out["phi"] = json!(m
                .phi
                .layers()
                .iter()
                .map(|s| json!({
                    "A_t": mat(&s.qtop_t),
                    "B_t": mat(&s.qbot),
                    "psi": s.psi,
                    "bias": s.bias,
                    "activation": s.activation,
                }))
                .collect::<Vec<_>>());
        }
        AnyModel::Ren(m) => {
            out["D11"] = mat(&m.d11);
            out["activation"] = json!(m.activation);
        }
    }
    prepare_out(&c.out)?;
    write_json(&c.out.join("model.json"), &out)
}
