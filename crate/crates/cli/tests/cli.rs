//! The `tagforge` binary end to end on a small synthetic corpus.

use std::path::Path;
use std::process::Command;

fn tagforge(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_tagforge"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "tagforge {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn pipeline_from_dump_to_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_posts.xml");
    let summary = tagforge(
        d,
        &[
            "preprocess",
            "--dump",
            golden.to_str().unwrap(),
            "--out",
            "golden.jsonl",
        ],
    );
    let summary: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(summary["kept"], 20);
    assert_eq!(summary["skipped"], 3);
    let limited = tagforge(
        d,
        &[
            "preprocess",
            "--dump",
            golden.to_str().unwrap(),
            "--out",
            "few.jsonl",
            "--limit",
            "4",
        ],
    );
    assert!(limited.contains("\"kept\":4"));

    tagforge(d, &["synth", "--posts", "400", "--out", "all.jsonl"]);
    let split = tagforge(
        d,
        &[
            "split",
            "--data",
            "all.jsonl",
            "--test-size",
            "80",
            "--train-out",
            "train.jsonl",
            "--test-out",
            "test.jsonl",
        ],
    );
    assert_eq!(split.trim(), "train 320 test 80");
    tagforge(
        d,
        &[
            "build-vocab",
            "--data",
            "all.jsonl",
            "--theta",
            "5",
            "--out",
            "vocab.tsv",
        ],
    );
    let vocab = std::fs::read_to_string(d.join("vocab.tsv")).unwrap();
    assert!(vocab.starts_with("theta=5 L=30\n"));

    let common = [
        "--data",
        "train.jsonl",
        "--vocab",
        "vocab.tsv",
        "--backbone",
        "stub",
        "--batch-size",
        "32",
        "--lr",
        "1e-2",
    ];
    let mut train_args = vec!["train", "--out", "ckpt", "--log", "log.jsonl", "--epochs", "2"];
    train_args.extend(common);
    let digest = tagforge(d, &train_args);
    assert_eq!(digest.trim().len(), 64);
    assert_eq!(
        std::fs::read_to_string(d.join("log.jsonl")).unwrap().lines().count(),
        20
    );

    let table = tagforge(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "ckpt",
            "--test",
            "test.jsonl",
            "--out",
            "report.json",
        ],
    );
    assert!(table.contains("precision"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_cases"], 80);
    assert_eq!(report["model_digest"], digest.trim());

    std::fs::write(d.join("body.html"), "<p>dkw0</p><pre><code>ckw0</code></pre>").unwrap();
    let predicted = tagforge(
        d,
        &[
            "predict",
            "--checkpoint",
            "ckpt",
            "--title",
            "tkw0",
            "--body-file",
            "body.html",
            "-k",
            "3",
        ],
    );
    assert_eq!(predicted.lines().count(), 3);
    let too_many = Command::new(env!("CARGO_BIN_EXE_tagforge"))
        .current_dir(d)
        .args(["predict", "--checkpoint", "ckpt", "--title", "tkw0", "-k", "9"])
        .output()
        .unwrap();
    assert!(!too_many.status.success());

    let mut ablate_args = vec![
        "ablate",
        "--test",
        "test.jsonl",
        "--variants",
        "all,nocode",
        "--work-dir",
        "variants",
        "--out",
        "ablation.json",
    ];
    ablate_args.extend(common);
    tagforge(d, &ablate_args);
    let ablation: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(ablation["baseline"], "all");
    assert!(d.join("variants/nocode/MANIFEST").exists());
}
