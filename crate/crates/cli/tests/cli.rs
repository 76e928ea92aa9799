//! End-to-end runs of the `drivewm` binary on miniature settings.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set=data.n=48",
    "--set=model.d_model=16",
    "--set=model.layers=1",
    "--set=model.heads=2",
    "--set=expert.d_model=8",
    "--set=sequence.history=1",
    "--set=sequence.interval_s=0",
    "--set=train.stage2_history=1",
    "--set=train.steps=3",
    "--set=train.batch=2",
    "--set=train.warmup=1",
    "--set=eval.max_records=4",
    "--set=sweep.eval_frames=32",
];

fn drivewm(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drivewm"))
        .arg("--out")
        .arg(out)
        .args(TINY)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn gen_data_is_deterministic_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    ok(drivewm(&a, &["--seed", "9", "gen-data"]));
    let first = std::fs::read(a.join("dataset.dw0d")).unwrap();
    assert_eq!(&first[..4], b"DW0D");
    assert_eq!(code(&drivewm(&a, &["--seed", "9", "gen-data"])), 1);
    ok(drivewm(&a, &["--seed", "9", "--force", "gen-data"]));
    assert_eq!(std::fs::read(a.join("dataset.dw0d")).unwrap(), first);
    ok(drivewm(
        &a,
        &["validate-data", a.join("dataset.dw0d").to_str().unwrap()],
    ));
}

#[test]
fn corrupt_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.dw0d");
    std::fs::write(&bad, b"DW0Dnot a dataset").unwrap();
    let o = drivewm(&dir.path().join("o"), &["validate-data", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn misuse_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&drivewm(&out, &["--set=model.nonexistent=1", "gen-data"])), 1);
    assert_eq!(code(&drivewm(&out, &["--set=model.layers=many", "gen-data"])), 1);
    assert_eq!(code(&drivewm(&out, &["no-such-command"])), 1);
    assert_eq!(code(&drivewm(&out, &["eval"])), 1);
}

#[test]
fn train_eval_generate_latency_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s1 = dir.path().join("s1");
    ok(drivewm(&s1, &["train"]));
    let loss = std::fs::read_to_string(s1.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);
    assert!(std::fs::read_to_string(s1.join("config.txt"))
        .unwrap()
        .contains("model.d_model=16\n"));
    let ckpt = s1.join("checkpoint.dw0c");

    let ev = dir.path().join("ev");
    let o = ok(drivewm(&ev, &["eval", ckpt.to_str().unwrap()]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("AGG"));
    let report = std::fs::read_to_string(ev.join("report.csv")).unwrap();
    assert!(report.starts_with("scenario_id,ade_m,nc,dac,ttc,comfort,ep,pdms\n"));
    assert_eq!(report.lines().count(), 1 + 4 + 1);
    assert!(report.lines().last().unwrap().starts_with("AGG,"));

    // Re-evaluating the same checkpoint reproduces the report byte for byte.
    let ev2 = dir.path().join("ev2");
    ok(drivewm(&ev2, &["eval", ckpt.to_str().unwrap()]));
    assert_eq!(std::fs::read(ev2.join("report.csv")).unwrap(), report.as_bytes());

    let s2 = dir.path().join("s2");
    let stage1 = format!("--set=train.stage1_checkpoint={}", ckpt.display());
    ok(drivewm(&s2, &["--set=train.stage=2", &stage1, "train"]));
    let ev3 = dir.path().join("ev3");
    ok(drivewm(&ev3, &["eval", s2.join("checkpoint.dw0c").to_str().unwrap()]));

    let gen = dir.path().join("gen");
    ok(drivewm(
        &gen,
        &["--set=generate.record=3", "generate", ckpt.to_str().unwrap()],
    ));
    assert!(gen.join("generated.dw0i").exists() && gen.join("reference.dw0i").exists());

    let lat = dir.path().join("lat");
    ok(drivewm(
        &lat,
        &[
            "--set=latency.repeats=2",
            "--set=latency.warmup=0",
            "latency",
            ckpt.to_str().unwrap(),
        ],
    ));
    let csv = std::fs::read_to_string(lat.join("latency.csv")).unwrap();
    assert!(csv.starts_with("mode,tokens,median_ms,ratio_to_backbone_ar\n"));
    for mode in ["backbone-ar,", "expert-ar,", "expert-query,", "expert-flow,"] {
        assert!(csv.contains(mode), "{mode} missing");
    }
}

#[test]
fn continuous_front_end_trains_and_generates() {
    let dir = tempfile::tempdir().unwrap();
    let s1 = dir.path().join("s1");
    ok(drivewm(&s1, &["--set=sequence.frontend=continuous", "train"]));
    let ckpt = s1.join("checkpoint.dw0c");
    let gen = dir.path().join("gen");
    ok(drivewm(
        &gen,
        &[
            "--set=sequence.frontend=continuous",
            "--set=generate.record=3",
            "generate",
            ckpt.to_str().unwrap(),
        ],
    ));
    assert_eq!(
        std::fs::metadata(gen.join("generated.dw0i")).unwrap().len(),
        std::fs::metadata(gen.join("reference.dw0i")).unwrap().len()
    );
}
