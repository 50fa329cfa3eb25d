//! End-to-end tests of the binary: the full command chain on a tiny corpus,
//! plus the exit-code contract for each failure family.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_asdkit"))
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        r#"
seed = 5

[data]
clip_seconds = 0.3
train_source = 4
train_target = 2
test_normal = 2
test_anomaly = 2

[[data.machines]]
name = "fan"
fundamental_hz = 200.0
n_harmonics = 4
am_rate_hz = 5.0
speeds = ["low", "high"]
source_noise = 0.02
target_noise = 0.06

[[data.machines]]
name = "pump"
fundamental_hz = 330.0
n_harmonics = 3
am_rate_hz = 8.0
speeds = ["low", "high"]
source_noise = 0.02
target_noise = 0.06

[model]
n_layers = 2
d_model = 16
n_heads = 2
patch_frames = 14
patch_bins = 32

[lora]
layers = "1-2"
rank = 2

[optim]
epochs = 2
batch_size = 4
peak_lr = 1e-3

[paths]
data_dir = "{data}"
out_dir = "{out}"
"#,
        data = dir.join("data").display(),
        out = dir.join("out").display(),
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn run_ok(mut cmd: Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

#[test]
fn full_chain_and_failure_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out_dir = dir.path().join("out");

    let gen = run_ok({
        let mut c = bin();
        c.arg("gen-data").arg("--config").arg(&config);
        c
    });
    assert!(stdout(&gen).contains("wrote 28 clips"));
    assert!(dir.path().join("data/manifest.jsonl").is_file());

    let train = run_ok({
        let mut c = bin();
        c.arg("train").arg("--config").arg(&config);
        c
    });
    let train_out = stdout(&train);
    assert!(
        train_out.lines().next().unwrap().starts_with("trainable parameters: "),
        "parameter count must lead the output: {train_out}"
    );
    let checkpoint = out_dir.join("checkpoint.bin");
    assert!(checkpoint.is_file());
    assert!(out_dir.join("config.resolved.toml").is_file());

    for split in ["train", "test"] {
        run_ok({
            let mut c = bin();
            c.arg("embed")
                .arg("--config")
                .arg(&config)
                .arg("--checkpoint")
                .arg(&checkpoint)
                .arg("--split")
                .arg(split);
            c
        });
    }
    let train_store = out_dir.join("embeddings_train.jsonl");
    let test_store = out_dir.join("embeddings_test.jsonl");

    run_ok({
        let mut c = bin();
        c.arg("score")
            .arg("--config")
            .arg(&config)
            .arg("--train-store")
            .arg(&train_store)
            .arg("--test-store")
            .arg(&test_store);
        c
    });
    let scores = out_dir.join("scores.csv");
    assert!(scores.is_file());

    let eval = run_ok({
        let mut c = bin();
        c.arg("eval").arg("--config").arg(&config).arg("--scores").arg(&scores);
        c
    });
    let eval_out = stdout(&eval);
    assert!(eval_out.contains("official score:"), "{eval_out}");
    assert!(eval_out.contains("fan") && eval_out.contains("pump"));
    assert!(out_dir.join("eval.csv").is_file());
    assert!(out_dir.join("eval.jsonl").is_file());

    // Merging adapters succeeds once, then refuses with the config exit code.
    let merged = out_dir.join("merged.bin");
    run_ok({
        let mut c = bin();
        c.arg("merge-lora").arg("--checkpoint").arg(&checkpoint).arg("--out").arg(&merged);
        c
    });
    let twice = bin()
        .arg("merge-lora")
        .arg("--checkpoint")
        .arg(&merged)
        .arg("--out")
        .arg(out_dir.join("m2.bin"))
        .output()
        .unwrap();
    assert_eq!(twice.status.code(), Some(2));

    // A train store with no target-domain rows: exit 6 plus a hint, and the
    // single-detector fallback succeeds.
    let text = std::fs::read_to_string(&train_store).unwrap();
    let source_only: String =
        text.lines().filter(|l| !l.contains("\"target\"")).map(|l| format!("{l}\n")).collect();
    let crippled = out_dir.join("source_only.jsonl");
    std::fs::write(&crippled, source_only).unwrap();
    let missing = bin()
        .arg("score")
        .arg("--config")
        .arg(&config)
        .arg("--train-store")
        .arg(&crippled)
        .arg("--test-store")
        .arg(&test_store)
        .arg("--out")
        .arg(out_dir.join("s2.csv"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--single-detector"));
    run_ok({
        let mut c = bin();
        c.arg("score")
            .arg("--config")
            .arg(&config)
            .arg("--train-store")
            .arg(&crippled)
            .arg("--test-store")
            .arg(&test_store)
            .arg("--out")
            .arg(out_dir.join("s2.csv"))
            .arg("--single-detector");
        c
    });

    // Evaluating a score CSV whose manifest has no test labels: exit 7.
    let manifest_path = dir.path().join("data/manifest.jsonl");
    let stripped: String = std::fs::read_to_string(&manifest_path)
        .unwrap()
        .lines()
        .map(|l| {
            if l.contains("\"test\"") {
                format!("{}\n", l.replace("\"anomaly\"", "\"unknown\"").replace("\"normal\"", "\"unknown\""))
            } else {
                format!("{l}\n")
            }
        })
        .collect();
    let unlabeled = dir.path().join("data/unlabeled.jsonl");
    std::fs::write(&unlabeled, stripped).unwrap();
    let eval_missing = bin()
        .arg("eval")
        .arg("--config")
        .arg(&config)
        .arg("--scores")
        .arg(&scores)
        .arg("--data")
        .arg(&unlabeled)
        .output()
        .unwrap();
    assert_eq!(eval_missing.status.code(), Some(7));
}

#[test]
fn config_and_io_failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown config key: exit 2.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "stride = 3\n").unwrap();
    let out = bin().arg("gen-data").arg("--config").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    // Missing manifest: exit 3.
    let config = write_tiny_config(dir.path());
    let out = bin()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--data")
        .arg(dir.path().join("nowhere.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn checkpoint_architecture_mismatch_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    run_ok({
        let mut c = bin();
        c.arg("gen-data").arg("--config").arg(&config);
        c
    });
    run_ok({
        let mut c = bin();
        c.arg("train").arg("--config").arg(&config);
        c
    });

    // Same checkpoint, different encoder width in the config.
    let text = std::fs::read_to_string(&config).unwrap().replace("d_model = 16", "d_model = 32");
    let wide = dir.path().join("wide.toml");
    std::fs::write(&wide, text).unwrap();
    let out = bin()
        .arg("embed")
        .arg("--config")
        .arg(&wide)
        .arg("--checkpoint")
        .arg(dir.path().join("out/checkpoint.bin"))
        .arg("--split")
        .arg("test")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5));
}
