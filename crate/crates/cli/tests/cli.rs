use std::path::Path;
use std::process::{Command, Output};

fn clvc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clvc"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_run_on_the_toy_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&clvc(d, &["config", "--toy", "--out", "toy.json"]));
    // Shrink the schedules so the test stays quick.
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("toy.json")).unwrap()).unwrap();
    cfg["acoustic"]["hidden_per_direction"] = 16.into();
    for k in ["am_steps", "se_steps", "cm_steps", "voc_steps"] {
        cfg["training"][k] = 3.into();
    }
    cfg["griffin_lim_iters"] = 4.into();
    std::fs::write(d.join("toy.json"), cfg.to_string()).unwrap();

    ok(&clvc(d, &["--config", "toy.json", "toy-corpus", "corpus", "--speakers", "2", "--utterances", "2"]));
    let common = ["--config", "toy.json", "--manifest", "corpus/manifest.jsonl", "--seed", "3"];
    let run = |extra: &[&str]| clvc(d, &[&common[..], extra].concat());
    for stage in ["train-am", "train-se", "train-cm", "train-voc", "enroll"] {
        ok(&run(&[stage]));
    }
    for f in ["am.ckpt", "se.ckpt", "cm.ckpt", "voc.ckpt", "speakers.json", "am.ckpt.metrics.tsv"] {
        assert!(d.join("checkpoints").join(f).exists(), "{f} missing");
    }

    let manifest = std::fs::read_to_string(d.join("corpus/manifest.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let source = d.join("corpus").join(first["audio_path"].as_str().unwrap());
    let source = source.to_str().unwrap();
    let stdout = ok(&run(&["--vocoder", "flow", "--out", "out.wav", "convert", source, "spk1"]));
    assert!(stdout.contains("out.wav"));
    assert!(d.join("out.wav").exists() && d.join("out.wav.json").exists());

    let report: serde_json::Value = serde_json::from_str(&ok(&run(&["evaluate"]))).unwrap();
    assert_eq!(report["window_violations"], 0);

    let bad = run(&["convert", source, "nobody"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error:"));
}

#[test]
fn missing_manifest_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = clvc(tmp.path(), &["train-am"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--manifest"));
}
