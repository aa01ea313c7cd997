use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn r2dn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_r2dn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

const TRAIN: &str = r#"
[model]
arch = "r2dn"
n = 1
m = 1
p = 1
q = 4
l = 4
phi = { depth = 2, width = 4 }

[schedule]
epochs = 3
batches_per_epoch = 2
batch_size = 16
test_size = 64
"#;

#[test]
fn train_then_export_and_verify_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "train.toml", TRAIN);
    let run = dir.path().join("run");
    ok(&r2dn(&[
        "train",
        "-c",
        cfg.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        run.to_str().unwrap(),
    ]));

    let summary = json(&run.join("summary.json"));
    assert_eq!(summary["seed"], 7);
    assert_eq!(summary["epochs_completed"], 3);
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,loss,lr,wall_ms,nrmse\n"));
    assert_eq!(history.lines().count(), 4);
    assert!(run.join("checkpoint.bin").exists());

    let export_cfg = write(dir.path(), "export.toml", "checkpoint = \"run/checkpoint.json\"\n");
    let exported = dir.path().join("exp");
    ok(&r2dn(&[
        "export",
        "-c",
        export_cfg.to_str().unwrap(),
        "--out",
        exported.to_str().unwrap(),
    ]));
    let model = json(&exported.join("model.json"));
    assert_eq!(model["arch"], "r2dn");
    assert_eq!(model["lti"]["A"].as_array().unwrap().len(), 1);
    assert_eq!(model["phi"].as_array().unwrap().len(), 3);

    let verify_cfg = write(
        dir.path(),
        "verify.toml",
        "checkpoint = \"run/checkpoint.json\"\n[verify]\ncontraction_trials = 3\ncontraction_horizon = 100\ndissipation_trials = 5\n",
    );
    let checked = dir.path().join("ver");
    ok(&r2dn(&[
        "verify",
        "-c",
        verify_cfg.to_str().unwrap(),
        "--out",
        checked.to_str().unwrap(),
    ]));
    let report = json(&checked.join("verify.json"));
    assert_eq!(report["lmi"]["certified"], true);
    assert_eq!(report["contraction"]["pass"], true);
    assert!(report["dissipation"]["max_violation"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn verify_lipschitz_model_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "v.toml",
        r#"
[model]
arch = "r2dn"
n = 2
m = 1
p = 1
q = 4
l = 4
mode = { kind = "lipschitz", gamma = 2.0 }
phi = { depth = 2, width = 6 }

[verify]
contraction_trials = 3
contraction_horizon = 100
gain_trials = 100
gain_horizon = 16
ascent_steps = 5
dissipation_trials = 5
"#,
    );
    let out = dir.path().join("o");
    ok(&r2dn(&[
        "verify",
        "-c",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]));
    let report = json(&out.join("verify.json"));
    assert_eq!(report["gain"]["within_bound"], true);
    assert_eq!(report["seed"], 3);
}

#[test]
fn bench_writes_the_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "b.toml",
        "ren_sizes = [8]\nr2dn_widths = [4]\nphases = [\"forward\", \"gradient\"]\n[timing]\nbatch = 4\nseq_len = 8\nreps = 3\nwarmup = 1\n",
    );
    let out = dir.path().join("b");
    ok(&r2dn(&[
        "bench",
        "-c",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    let csv = std::fs::read_to_string(out.join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "arch,size,phase,reps,mean_ms,std_ms,p50_ms,param_count,expressivity"
    );
    assert_eq!(lines.count(), 4);
    assert!(json(&out.join("bench_meta.json"))["failures"]
        .as_array()
        .unwrap()
        .is_empty());
}

#[test]
fn bad_configs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let both = write(dir.path(), "both.toml", &format!("checkpoint = \"x.json\"\n{TRAIN}"));
    let res = r2dn(&["export", "-c", both.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!res.status.success());
    let typo = write(
        dir.path(),
        "typo.toml",
        "[model]\narch = \"ren\"\nn = 1\nm = 1\np = 1\nq = 4\nwidth = 3\n",
    );
    let res = r2dn(&["export", "-c", typo.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!res.status.success());
    let res = r2dn(&[
        "train",
        "-c",
        dir.path().join("missing.toml").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("missing.toml"));
}

#[test]
fn shipped_configs_parse() {
    use r2dn_core::bench::BenchGrid;
    use r2dn_core::{ModelConfig, TrainSchedule};
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let text = std::fs::read_to_string(&path).unwrap();
        let table: toml::Table = toml::from_str(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        if name.starts_with("bench") {
            toml::from_str::<BenchGrid>(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        if let Some(model) = table.get("model") {
            let cfg: ModelConfig = model.clone().try_into().unwrap_or_else(|e| panic!("{name}: {e}"));
            cfg.validate().unwrap();
        }
        if let Some(schedule) = table.get("schedule") {
            let s: TrainSchedule = schedule.clone().try_into().unwrap_or_else(|e| panic!("{name}: {e}"));
            s.validate().unwrap();
        }
        seen += 1;
    }
    assert!(seen >= 4);
}
