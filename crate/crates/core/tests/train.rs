use r2dn_core::train::{fit_expressivity, nrmse, target_f, StopReason, TrainSchedule};
use r2dn_core::verify::estimate_contraction;
use r2dn_core::{Error, LmiKind, ModelConfig, R2dnConfig, RenConfig};

fn reference_f(x: f64, u: f64) -> f64 {
    // Term-by-term evaluation kept separate from the library implementation.
    let xb = x + u;
    let terms = [
        0.05 * x,
        0.2 * x.sin(),
        u,
        0.05 * (2.0 * xb).cos(),
        0.05 * (3.0 * xb).sin(),
        0.075 * (4.0 * xb).sin() * (0.1 * xb.powi(2)).atan(),
    ];
    terms.iter().sum()
}

#[test]
fn target_function_values() {
    assert!((target_f(0.0, 0.0) - 0.05).abs() < 1e-15);
    assert!((target_f(0.0, 1.0) - 0.98059).abs() < 5e-6, "{}", target_f(0.0, 1.0));
    assert!(
        (target_f(1.0, -1.0) - (-0.73171)).abs() < 5e-6,
        "{}",
        target_f(1.0, -1.0)
    );
    assert!((target_f(1.0, -1.0) - (0.05 + 0.2 * 1f64.sin() - 1.0 + 0.05)).abs() < 1e-15);
    for (x, u) in [(-30.0, 1.0), (12.5, -0.3), (29.9, 0.99)] {
        assert!((target_f(x, u) - reference_f(x, u)).abs() < 1e-14);
    }
}

#[test]
fn target_minus_input_depends_on_x_and_xbar_only() {
    // f(x, u) − u is g(x, x + u); shifting u while holding x̄ fixed needs x to shift too.
    for (x, u) in [(0.3, 0.2), (-4.0, 0.9), (7.0, -1.0)] {
        let xb = x + u;
        let g = |x: f64| target_f(x, xb - x) - (xb - x);
        assert!((g(x) - (target_f(x, u) - u)).abs() < 1e-15);
    }
}

#[test]
fn nrmse_examples() {
    let t = [1.0, -2.0, 0.5, 3.0];
    assert_eq!(nrmse(&t, &t).unwrap(), 0.0);
    assert!((nrmse(&[0.0; 4], &t).unwrap() - 100.0).abs() < 1e-12);
    let scaled: Vec<f64> = t.iter().map(|v| 1.1 * v).collect();
    assert!((nrmse(&scaled, &t).unwrap() - 10.0).abs() < 1e-12);
    assert!(matches!(
        nrmse(&[1.0, 2.0], &[0.0, 0.0]),
        Err(Error::UndefinedMetric(_))
    ));
    assert!(nrmse(&[1.0], &t).is_err());
}

fn small_r2dn() -> ModelConfig {
    R2dnConfig::new(1, 1, 1, 4, 4, LmiKind::Contraction)
        .with_phi(2, 8)
        .into()
}

fn short(epochs: usize) -> TrainSchedule {
    TrainSchedule {
        epochs,
        batches_per_epoch: 8,
        batch_size: 64,
        test_size: 256,
        lr: 5e-3,
        decay_every: 1000,
        eval_every: 5,
        lmi_check_every: 5,
        seed: 3,
        ..TrainSchedule::desk()
    }
}

#[test]
fn no_steps_leave_the_model_untouched() {
    let s = TrainSchedule {
        batches_per_epoch: 0,
        ..short(2)
    };
    let fit = fit_expressivity::<f64>(&small_r2dn(), &s).unwrap();
    assert_eq!(fit.final_nrmse, fit.initial_nrmse);
    assert_eq!(fit.history.len(), 2);
}

#[test]
fn training_reduces_error_and_stays_certified() {
    let cfg = small_r2dn();
    let fit = fit_expressivity::<f64>(&cfg, &short(20)).unwrap();
    assert_eq!(fit.stop, StopReason::Completed);
    assert_eq!(fit.history.len(), 20);
    assert!(
        fit.final_nrmse < fit.initial_nrmse,
        "{} -> {}",
        fit.initial_nrmse,
        fit.final_nrmse
    );
    assert!((fit.expressivity - 1.0 / fit.final_nrmse).abs() < 1e-15);
    assert!(fit.lmi_checks.len() >= 4);
    assert!(fit.lmi_checks.iter().all(|c| c.eigmin >= 0.0));
    let first = fit.history.records[0].loss;
    let last = fit.history.records.last().unwrap().loss;
    assert!(last < first);

    let model = cfg.realize(&fit.params).unwrap();
    let rep = estimate_contraction(&model, 5, 300, 1).unwrap();
    assert!(rep.pass, "{rep:?}");
}

#[test]
fn training_is_reproducible() {
    let a = fit_expressivity::<f64>(&small_r2dn(), &short(3)).unwrap();
    let b = fit_expressivity::<f64>(&small_r2dn(), &short(3)).unwrap();
    assert_eq!(a.params, b.params);
    let c = fit_expressivity::<f64>(&small_r2dn(), &TrainSchedule { seed: 4, ..short(3) }).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn ren_trains_too() {
    let cfg: ModelConfig = RenConfig::new(1, 1, 1, 8).into();
    let fit = fit_expressivity::<f64>(&cfg, &short(10)).unwrap();
    assert!(fit.final_nrmse < fit.initial_nrmse);
    assert!(fit.lmi_checks.is_empty());
}

#[test]
fn divergence_stops_early() {
    let s = TrainSchedule {
        divergence_loss: 1e-6,
        ..short(10)
    };
    let fit = fit_expressivity::<f64>(&small_r2dn(), &s).unwrap();
    assert!(matches!(fit.stop, StopReason::Diverged { epoch: 0, .. }));
    assert!(fit.history.is_empty());
}

#[test]
fn invalid_inputs_are_rejected() {
    let bad = R2dnConfig::new(2, 1, 1, 4, 4, LmiKind::Contraction)
        .with_phi(1, 4)
        .into();
    assert!(fit_expressivity::<f64>(&bad, &short(1)).is_err());
    assert!(fit_expressivity::<f64>(&small_r2dn(), &TrainSchedule { epochs: 0, ..short(1) }).is_err());
    assert!(fit_expressivity::<f64>(&small_r2dn(), &TrainSchedule { lr: -1.0, ..short(1) }).is_err());
}

#[test]
fn history_csv_has_one_row_per_epoch() {
    let fit = fit_expressivity::<f64>(&small_r2dn(), &short(6)).unwrap();
    let mut buf = Vec::new();
    fit.history.write_csv(&mut buf).unwrap();
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    assert_eq!(rdr.headers().unwrap(), vec!["epoch", "loss", "lr", "wall_ms", "nrmse"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(
        &rows[4][4].parse::<f64>().unwrap(),
        &fit.history.records[4].nrmse.unwrap()
    );
    assert_eq!(&rows[5][4].parse::<f64>().unwrap(), &fit.final_nrmse);
    assert!(rows[0][4].is_empty());
}

#[test]
fn schedule_parses_from_toml_with_defaults() {
    let s: TrainSchedule = toml::from_str("epochs = 1500\ndecay_every = 500\n").unwrap();
    assert_eq!(s.epochs, 1500);
    assert_eq!(s.lr, 1e-3);
    assert_eq!(s.beta2, 0.999);
    assert!(toml::from_str::<TrainSchedule>("epoch = 3").is_err());
    let full = TrainSchedule::full_scale();
    full.validate().unwrap();
    assert_eq!((full.epochs, full.batches_per_epoch, full.batch_size), (1500, 128, 512));
}
