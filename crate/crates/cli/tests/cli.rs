//! End-to-end checks through the real binary: run-directory layout, config
//! overrides and provenance, the full pretrain -> finetune -> eval -> analyze
//! chain on a tiny model, and checkpoint inspection at the reference shape.

use std::path::Path;
use std::process::Command;

use infinilab_core::checkpoint;
use infinilab_core::data::PasskeySample;
use infinilab_core::eval;
use infinilab_core::model::{DecoderWeights, ModelConfig};
use infinilab_core::telemetry;
use infinilab_core::train::RunConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_infinilab"))
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("binary spawns");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn run_err(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("binary spawns");
    assert!(!out.status.success(), "command {args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// One-layer 16-wide model; a 4-step run finishes in well under a second.
fn tiny_model_overrides() -> Vec<String> {
    [
        "model.layers=1",
        "model.d_model=16",
        "model.d_ff=32",
        "model.heads=2",
        "model.kv_heads=2",
        "model.max_context=256",
        "model.attention.d_model=16",
        "model.attention.heads=2",
        "model.attention.d_key=8",
        "model.attention.d_value=8",
        "model.attention.segment_length=8",
        "run.batch_size=1",
        "run.sequence_length=16",
        "run.telemetry_every=1",
        "run.alpha_every=2",
        "run.checkpoint_every=2",
        "data.docs=64",
    ]
    .iter()
    .flat_map(|o| ["--override".to_string(), o.to_string()])
    .collect()
}

fn tiny_train(dir: &Path, steps: u64, extra: &[&str]) {
    let mut args: Vec<String> = vec![
        "train".into(),
        "--run-dir".into(),
        dir.to_str().unwrap().into(),
    ];
    args.extend(tiny_model_overrides());
    args.push("--override".into());
    args.push(format!("run.steps={steps}"));
    args.push("--override".into());
    args.push(format!("schedule.warmup_steps={}", steps.min(2)));
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run_ok(&refs);
}

fn flatten_keys(prefix: &str, value: &serde_json::Value, out: &mut Vec<String>) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_keys(&key, child, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

#[test]
fn help_lists_every_config_field() {
    let help = run_ok(&["--help"]);
    let json = serde_json::to_value(RunConfig::desk_pretrain()).unwrap();
    let mut keys = Vec::new();
    flatten_keys("", &json, &mut keys);
    assert!(keys.len() > 30, "config flattening looks broken: {keys:?}");
    for key in keys {
        assert!(help.contains(&key), "--help does not document `{key}`");
    }
}

#[test]
fn train_writes_the_run_directory_contract() {
    let dir = tempfile::tempdir().unwrap();
    tiny_train(dir.path(), 4, &["--deterministic"]);

    let resolved = std::fs::read_to_string(dir.path().join("config.resolved")).unwrap();
    let cfg: RunConfig = toml::from_str(&resolved).unwrap();
    assert_eq!(cfg.model.d_model, 16, "overrides reach the echoed config");
    assert_eq!(cfg.run.steps, 4);

    let rows = telemetry::read_telemetry(&dir.path().join("telemetry.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    let snaps = telemetry::read_alpha_log(&dir.path().join("alpha.csv")).unwrap();
    assert_eq!(snaps.iter().map(|s| s.step).collect::<Vec<_>>(), vec![2, 4]);

    for name in ["step_2.ckpt", "step_4.ckpt", "latest.ckpt"] {
        assert!(dir.path().join("checkpoints").join(name).exists(), "missing {name}");
    }
    assert!(dir.path().join("results").is_dir());
}

#[test]
fn identical_invocations_produce_identical_telemetry() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    tiny_train(a.path(), 4, &[]);
    tiny_train(b.path(), 4, &[]);
    let ta = std::fs::read(a.path().join("telemetry.csv")).unwrap();
    let tb = std::fs::read(b.path().join("telemetry.csv")).unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn seed_flag_wins_over_override() {
    let dir = tempfile::tempdir().unwrap();
    tiny_train(dir.path(), 0, &["--override", "run.seed=7", "--seed", "9"]);
    let resolved = std::fs::read_to_string(dir.path().join("config.resolved")).unwrap();
    let cfg: RunConfig = toml::from_str(&resolved).unwrap();
    assert_eq!(cfg.run.seed, 9);
}

#[test]
fn unknown_override_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let stderr = run_err(&[
        "train",
        "--run-dir",
        dir.path().to_str().unwrap(),
        "--override",
        "model.depth=3",
    ]);
    assert!(stderr.contains("unknown config field `model.depth`"), "stderr: {stderr}");
}

#[test]
fn wrong_task_config_is_rejected_with_the_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let stderr = run_err(&[
        "finetune",
        "--config",
        "desk_pretrain",
        "--from",
        "nowhere.ckpt",
        "--run-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(stderr.contains("run.task"), "stderr: {stderr}");
}

#[test]
fn finetune_from_a_pretrained_checkpoint_restarts_the_clock() {
    let pre = tempfile::tempdir().unwrap();
    tiny_train(pre.path(), 2, &[]);
    let ckpt = pre.path().join("checkpoints/latest.ckpt");

    let ft = tempfile::tempdir().unwrap();
    let mut args: Vec<String> = vec![
        "finetune".into(),
        "--from".into(),
        ckpt.to_str().unwrap().into(),
        "--run-dir".into(),
        ft.path().to_str().unwrap().into(),
    ];
    args.extend(tiny_model_overrides());
    for o in ["run.steps=2", "schedule.warmup_steps=1", "run.finetune_contexts=[48,64]"] {
        args.push("--override".into());
        args.push(o.into());
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run_ok(&refs);

    let summary = checkpoint::inspect(&ft.path().join("checkpoints/latest.ckpt")).unwrap();
    assert_eq!(summary.meta["task"], "finetune");
    assert_eq!(summary.meta["step"], 2, "fine-tune counts steps from zero");
}

#[test]
fn eval_on_a_random_checkpoint_scores_zero_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    tiny_train(dir.path(), 0, &[]);

    let rd = dir.path().to_str().unwrap();
    let stdout = run_ok(&[
        "eval-passkey", "--run-dir", rd, "--grid", "64", "--samples-per-cell", "2",
    ]);
    assert!(stdout.contains("mean accuracy"), "stdout: {stdout}");

    let csv = std::fs::read_to_string(dir.path().join("results/passkey_grid.csv")).unwrap();
    let cells = eval::parse_grid_csv(&csv).unwrap();
    assert_eq!(cells.len(), 5, "one row per depth");
    assert!(cells.iter().all(|c| c.accuracy == 0.0 && c.n == 2 && c.context_length == 64));

    // Re-running against the same checkpoint is byte-identical.
    let second = dir.path().join("results/again.csv");
    run_ok(&[
        "eval-passkey", "--run-dir", rd, "--grid", "64", "--samples-per-cell", "2",
        "--out", second.to_str().unwrap(),
    ]);
    assert_eq!(csv, std::fs::read_to_string(second).unwrap());
}

#[test]
fn analyze_balance_exports_gate_reports() {
    let dir = tempfile::tempdir().unwrap();
    tiny_train(dir.path(), 4, &[]);
    let stdout =
        run_ok(&["analyze-balance", "--run-dir", dir.path().to_str().unwrap()]);
    assert!(stdout.contains("mean alpha"), "stdout: {stdout}");

    let balance = dir.path().join("results/balance");
    let heatmap =
        telemetry::parse_heatmap(&std::fs::read_to_string(balance.join("heatmap.csv")).unwrap())
            .unwrap();
    assert_eq!(heatmap.len(), 1, "one row per layer");
    assert_eq!(heatmap[0].len(), 2, "one column per head");
    assert!(heatmap[0].iter().all(|a| (0.0..=1.0).contains(a)));

    let hist = std::fs::read_to_string(balance.join("histogram.csv")).unwrap();
    let counts: usize = hist
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(hist.lines().count(), 21, "header plus 20 default bins");
    assert_eq!(counts, 2, "histogram covers every head");

    let pref = std::fs::read_to_string(balance.join("preference.csv")).unwrap();
    assert_eq!(pref.lines().count(), 2, "header plus one layer");

    // alpha.csv exists (snapshots at steps 2 and 4), so the trajectory does.
    let traj = std::fs::read_to_string(balance.join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 3);
}

#[test]
fn generate_data_materializes_corpus_and_grid() {
    let dir = tempfile::tempdir().unwrap();
    let mut args: Vec<String> = vec![
        "generate-data".into(),
        "--run-dir".into(),
        dir.path().to_str().unwrap().into(),
        "--grid".into(),
        "64".into(),
        "--samples-per-cell".into(),
        "2".into(),
    ];
    args.extend(tiny_model_overrides());
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run_ok(&refs);

    let corpus = std::fs::read_to_string(dir.path().join("data/corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 64, "one line per document");

    let samples: Vec<PasskeySample> =
        infinilab_core::data::read_jsonl(&dir.path().join("data/passkey.jsonl")).unwrap();
    assert_eq!(samples.len(), 10, "1 length x 5 depths x 2 samples");
    assert!(samples.iter().all(|s| s.context_length == 64));
}

#[test]
fn inspect_reports_the_reference_config_shape() {
    // The real ~300M-parameter shape: the file runs over a gigabyte, and
    // inspection must stay header-only cheap.
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::reference_300m();
    let weights = DecoderWeights::<f32>::init(&cfg, 0).unwrap();
    let path = dir.path().join("reference.ckpt");
    checkpoint::save_model(&path, &cfg, &weights, &serde_json::json!({"step": 0})).unwrap();
    drop(weights);

    let stdout = run_ok(&["inspect-checkpoint", path.to_str().unwrap()]);
    assert!(stdout.contains("layers: 12"), "stdout: {stdout}");
    assert!(stdout.contains("d_model: 1024"), "stdout: {stdout}");
    assert!(
        stdout.contains(&format!("parameters: {}", cfg.count_parameters())),
        "stdout: {stdout}"
    );
}

#[test]
fn missing_checkpoint_is_an_execution_error() {
    let stderr = run_err(&["inspect-checkpoint", "/no/such/file.ckpt"]);
    assert!(stderr.starts_with("error:"), "stderr: {stderr}");
}
