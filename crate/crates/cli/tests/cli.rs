//! End-to-end checks of the command-line surface: exit codes, artifact
//! files, and run determinism.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_modality-graft"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

/// metrics.csv minus the wall-clock column (the only timing-dependent
/// field).
fn deterministic_csv(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap_or_default())
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn params_prints_ledger_with_paper_note() {
    let out = run(&[
        "params", "--task", "cifar10", "--mode", "lora", "--preset", "small",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("635,146"), "{text}");
    assert!(text.contains("paper reports 0.64M"), "{text}");

    let frozen = stdout(&run(&[
        "params", "--task", "cifar10", "--mode", "frozen", "--preset", "small",
    ]));
    assert!(frozen.contains("adapters  trainable:            0"), "{frozen}");
}

#[test]
fn params_scratch_tiny_equals_total() {
    let out = stdout(&run(&[
        "params", "--task", "motif-tokens", "--mode", "scratch", "--preset", "tiny",
    ]));
    // scratch: trainable == total parameters
    let grab = |tag: &str| -> String {
        out.lines()
            .find(|l| l.contains(tag))
            .unwrap_or_else(|| panic!("missing {tag} in {out}"))
            .rsplit(' ')
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(grab("total trainable"), grab("total parameters"));
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    let args = |out: &Path| {
        vec![
            "train".to_string(),
            "--task".into(), "motif-tokens".into(),
            "--mode".into(), "scratch".into(),
            "--preset".into(), "tiny".into(),
            "--steps".into(), "40".into(),
            "--batch".into(), "8".into(),
            "--lr".into(), "3e-3".into(),
            "--eval-every".into(), "20".into(),
            "--seed".into(), "5".into(),
            "--out".into(), out.display().to_string(),
        ]
    };
    let r1 = bin().args(args(&out1)).output().unwrap();
    assert!(r1.status.success(), "{}", stderr(&r1));
    for file in ["manifest.json", "metrics.csv", "summary.json", "loss.svg", "checkpoint_final.bin"] {
        assert!(out1.join(file).exists(), "missing {file}");
    }
    let metrics = std::fs::read_to_string(out1.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,loss,metric,wall_ms\n"));
    assert!(metrics.lines().count() > 1, "csv must be non-empty");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out1.join("summary.json")).unwrap())
            .unwrap();
    assert!(summary["final_metric"].as_f64().is_some());
    assert_eq!(summary["metric_kind"], "accuracy");

    // manifest is written before training and echoes the resolved config
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out1.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["max_steps"], 40);
    assert_eq!(manifest["config"]["seed"], 5);
    assert!(manifest["inputs"]["train_data"].as_str().is_some());

    // identical invocation: identical metrics modulo the wall column
    let r2 = bin().args(args(&out2)).output().unwrap();
    assert!(r2.status.success());
    assert_eq!(
        deterministic_csv(&out1.join("metrics.csv")),
        deterministic_csv(&out2.join("metrics.csv"))
    );
    // summaries embed the deterministic digest; they must agree
    let s1: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out1.join("summary.json")).unwrap())
            .unwrap();
    let s2: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out2.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(s1["metrics_digest"], s2["metrics_digest"]);
}

#[test]
fn lora_without_weights_exits_4() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "train",
        "--task", "motif-tokens",
        "--mode", "lora",
        "--preset", "tiny",
        "--steps", "5",
        "--out", dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn config_file_flags_precedence() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{"task":"motif-tokens","mode":"scratch","preset":"tiny","max_steps":30,"batch_size":8,"learning_rate":0.003,"eval_every":0,"seed":9}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    // flag overrides the file's max_steps
    let out = run(&[
        "train",
        "--config", config.to_str().unwrap(),
        "--steps", "10",
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["max_steps"], 10);
    assert_eq!(manifest["config"]["seed"], 9);
}

#[test]
fn import_round_trip_and_error_codes() {
    let dir = TempDir::new().unwrap();
    // produce a tiny synthetic backbone archive via a scratch training run
    let run_dir = dir.path().join("pretrain");
    let r = run(&[
        "train",
        "--task", "motif-tokens",
        "--mode", "scratch",
        "--preset", "tiny",
        "--steps", "5",
        "--batch", "4",
        "--eval-every", "0",
        "--out", run_dir.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let ckpt = run_dir.join("checkpoint_final.bin");

    // import extracts + validates the backbone and reports its size
    let weights = dir.path().join("tiny.weights");
    let out = run(&[
        "import",
        "--weights", ckpt.to_str().unwrap(),
        "--preset", "tiny",
        "--out", weights.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    // tiny backbone: closed-form 2x16x128 + layers + final norm
    assert!(stdout(&out).contains("backbone parameters"));
    assert!(weights.exists());

    // the imported archive trains in lora mode
    let lora_dir = dir.path().join("lora");
    let r = run(&[
        "train",
        "--task", "motif-tokens",
        "--mode", "lora",
        "--preset", "tiny",
        "--weights", weights.to_str().unwrap(),
        "--steps", "5",
        "--batch", "4",
        "--eval-every", "0",
        "--out", lora_dir.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));

    // missing file → 2
    let out = run(&[
        "import",
        "--weights", dir.path().join("nope.bin").to_str().unwrap(),
        "--preset", "tiny",
        "--out", dir.path().join("y").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // wrong preset shapes → 3, naming the first mismatched tensor
    let out = run(&[
        "import",
        "--weights", weights.to_str().unwrap(),
        "--preset", "tiny-2x",
        "--out", dir.path().join("z").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("wpe.weight"), "{}", stderr(&out));
}

#[test]
fn eval_reads_back_checkpoints_and_missing_is_2() {
    let dir = TempDir::new().unwrap();
    let run_dir = dir.path().join("run");
    let r = run(&[
        "train",
        "--task", "quadrant-images",
        "--mode", "scratch",
        "--preset", "tiny",
        "--steps", "10",
        "--batch", "8",
        "--eval-every", "0",
        "--seed", "3",
        "--out", run_dir.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let out = run(&[
        "eval",
        "--checkpoint", run_dir.join("checkpoint_final.bin").to_str().unwrap(),
        "--split", "test",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let value: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(value["task"], "quadrant-images");
    assert!(value["metric"].as_f64().unwrap() >= 0.0);

    let out = run(&["eval", "--checkpoint", "/nonexistent/ckpt.bin"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_fixtures_are_deterministic_and_loadable() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let r = run(&[
            "synth",
            "--kind", "motif-tokens",
            "--n", "12",
            "--seed", "7",
            "--out", out.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "{}", stderr(&r));
    }
    assert_eq!(
        std::fs::read(a.join("tokens.txt")).unwrap(),
        std::fs::read(b.join("tokens.txt")).unwrap()
    );

    // the env var supplies the default seed
    let c = dir.path().join("c");
    let r = bin()
        .env("MODALITY_GRAFT_SEED", "7")
        .args(["synth", "--kind", "motif-tokens", "--n", "12", "--out", c.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(r.status.success());
    assert_eq!(
        std::fs::read(a.join("tokens.txt")).unwrap(),
        std::fs::read(c.join("tokens.txt")).unwrap()
    );

    // wave fixtures come with a sidecar
    let w = dir.path().join("w");
    let r = run(&[
        "synth", "--kind", "tone-waves", "--n", "4", "--seed", "1",
        "--out", w.to_str().unwrap(),
    ]);
    assert!(r.status.success());
    assert!(w.join("labels.csv").exists());
    assert!(w.join("wave_0000.wav").exists());

    let q = dir.path().join("q");
    let r = run(&[
        "synth", "--kind", "quadrant-images", "--n", "4", "--seed", "1",
        "--out", q.to_str().unwrap(),
    ]);
    assert!(r.status.success());
    let bytes = std::fs::read(q.join("quadrant_batch.bin")).unwrap();
    assert_eq!(bytes.len(), 4 * 3073, "cifar-format records");
}

#[test]
fn sweep_emits_schema_and_matches_single_runs() {
    let dir = TempDir::new().unwrap();
    let sweep_dir = dir.path().join("sweep");
    let out = run(&[
        "sweep",
        "--task", "motif-tokens",
        "--presets", "tiny,tiny-2x",
        "--mode", "scratch",
        "--steps", "30",
        "--batch", "8",
        "--lr", "3e-3",
        "--eval-every", "10",
        "--seed", "6",
        "--synth-n", "64",
        "--workers", "2",
        "--out", sweep_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "preset,total_params,trainable_params,final_metric,steps_to_threshold"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("tiny,"));
    assert!(rows[1].starts_with("tiny-2x,"));

    // the tiny row reproduces a single run with the same seed bit-exactly
    let single = dir.path().join("single");
    let r = run(&[
        "train",
        "--task", "motif-tokens",
        "--mode", "scratch",
        "--preset", "tiny",
        "--steps", "30",
        "--batch", "8",
        "--lr", "3e-3",
        "--eval-every", "10",
        "--seed", "6",
        "--synth-n", "64",
        "--out", single.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(single.join("summary.json")).unwrap())
            .unwrap();
    let sweep_metric: f64 = rows[0].split(',').nth(3).unwrap().parse().unwrap();
    let single_metric = summary["final_metric"].as_f64().unwrap();
    assert!(
        (sweep_metric - single_metric).abs() < 1e-9,
        "sweep {sweep_metric} vs single {single_metric}"
    );
}

#[test]
fn diverging_run_exits_5() {
    let dir = TempDir::new().unwrap();
    // an absurd learning rate sends the logits to infinity within a few
    // steps; the run must abort with the numeric-failure code
    let out = run(&[
        "train",
        "--task", "motif-tokens",
        "--mode", "scratch",
        "--preset", "tiny",
        "--steps", "30",
        "--batch", "4",
        "--lr", "1e12",
        "--eval-every", "0",
        "--out", dir.path().join("boom").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(5), "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"), "{}", stderr(&out));
}

#[test]
fn gradcheck_exits_zero_within_tolerance() {
    let out = run(&["gradcheck", "--modality", "image", "--mode", "scratch", "--seed", "0"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("all groups within 1e-3"), "{}", stdout(&out));
}

#[test]
fn resume_continues_from_checkpoint() {
    let dir = TempDir::new().unwrap();
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let resumed = dir.path().join("resumed");

    let base = |out: &Path, steps: &str, extra: &[&str]| {
        let mut args = vec![
            "train".to_string(),
            "--task".into(), "motif-tokens".into(),
            "--mode".into(), "scratch".into(),
            "--preset".into(), "tiny".into(),
            "--steps".into(), steps.into(),
            "--batch".into(), "8".into(),
            "--lr".into(), "3e-3".into(),
            "--eval-every".into(), "0".into(),
            "--seed".into(), "12".into(),
            "--synth-n".into(), "48".into(),
            "--out".into(), out.display().to_string(),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        args
    };
    let r = bin().args(base(&full, "40", &[])).output().unwrap();
    assert!(r.status.success(), "{}", stderr(&r));
    let r = bin().args(base(&part, "20", &[])).output().unwrap();
    assert!(r.status.success(), "{}", stderr(&r));
    let ckpt = part.join("checkpoint_final.bin").display().to_string();
    let r = bin()
        .args(base(&resumed, "40", &["--resume", &ckpt]))
        .output()
        .unwrap();
    assert!(r.status.success(), "{}", stderr(&r));

    // the resumed tail equals the tail of the uninterrupted run
    let full_csv = deterministic_csv(&full.join("metrics.csv"));
    let resumed_csv = deterministic_csv(&resumed.join("metrics.csv"));
    let full_tail: Vec<&str> = full_csv.lines().skip(21).collect();
    let resumed_tail: Vec<&str> = resumed_csv.lines().skip(1).collect();
    assert_eq!(full_tail, resumed_tail);
}
