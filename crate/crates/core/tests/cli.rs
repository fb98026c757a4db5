use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn promptsteer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptsteer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn summary(dir: &Path, command: &str) -> Value {
    let text = std::fs::read_to_string(dir.join(format!("summary-{command}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = promptsteer(&["eval-gain"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
}

#[test]
fn synthetic_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = promptsteer(&["synth-data", "--count", "12", "--seed", "1", "--output-dir", s(d)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (sa, sb) = (summary(&a, "synth-data"), summary(&b, "synth-data"));
    assert_eq!(sa["status"], "ok");
    assert_eq!(sa["result"]["manifest_digest"], sb["result"]["manifest_digest"]);
    let lines = std::fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 12);
    for k in 0..12 {
        let name = format!("img_{k:04}.png");
        assert_eq!(std::fs::read(a.join(&name)).ok(), std::fs::read(b.join(&name)).ok(), "{name}");
    }
}

#[test]
fn train_evaluate_and_render_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(promptsteer(&["synth-data", "--count", "16", "--output-dir", s(&data)]).status.success());
    let manifest = data.join("manifest.jsonl");
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "output_dir = \"run1\"\n[data]\nmanifest = \"data/manifest.jsonl\"\n[train]\nepochs = 2\nbatch_size = 8\n[eval]\ntrials = 8\n",
    )
    .unwrap();

    let run1 = dir.path().join("run1");
    let run2 = dir.path().join("run2");
    let out = promptsteer(&["train", "--config", s(&config)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = promptsteer(&["train", "--config", s(&config), "--output-dir", s(&run2)]);
    assert!(out.status.success());
    let (t1, t2) = (summary(&run1, "train"), summary(&run2, "train"));
    assert_eq!(t1["result"]["checkpoint_digest"], t2["result"]["checkpoint_digest"]);
    assert_eq!(t1["result"]["epoch_means"], t2["result"]["epoch_means"]);
    assert_eq!(std::fs::read(run1.join("loss.csv")).unwrap(), std::fs::read(run2.join("loss.csv")).unwrap());
    for f in ["prompt.safetensors", "prompt.png", "config.toml", "epochs.csv", "checkpoints/epoch_002.safetensors"] {
        assert!(run1.join(f).is_file(), "{f}");
    }

    let ck = run1.join("prompt.safetensors");
    let eval_dir = dir.path().join("eval");
    let common = ["--manifest", s(&manifest), "--output-dir", s(&eval_dir)];
    let runs: [(&str, Vec<&str>, &str); 4] = [
        ("eval-gain", vec!["--checkpoint", s(&ck), "--trials", "8"], "gain.csv"),
        ("eval-hits", vec!["--checkpoint", s(&ck), "--trials", "8"], "hits.csv"),
        ("baseline", vec!["--kind", "random_loc:blur", "--trials", "8"], "baseline.csv"),
        ("render", vec!["--checkpoint", s(&ck), "--loc", "20,40"], "render/attention.png"),
    ];
    for (cmd, extra, file) in runs {
        let mut args = vec![cmd];
        args.extend(common);
        args.extend(extra);
        let out = promptsteer(&args);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(summary(&eval_dir, cmd)["status"], "ok");
        assert!(eval_dir.join(file).is_file(), "{file}");
    }
    let gain = std::fs::read_to_string(eval_dir.join("gain.csv")).unwrap();
    assert!(gain.lines().next().unwrap().contains("metric"));
    assert!(gain.contains("gain_mean"));
}

#[test]
fn runtime_errors_exit_one_with_an_error_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = promptsteer(&["train", "--output-dir", s(&out_dir), "--patch-size", "15"]);
    assert_eq!(out.status.code(), Some(1));
    let sum = summary(&out_dir, "train");
    assert_eq!(sum["status"], "error");
    assert!(sum["error"].as_str().unwrap().contains("even"), "{sum}");

    let out = promptsteer(&["eval-hits", "--output-dir", s(&out_dir), "--checkpoint", s(&dir.path().join("none"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(summary(&out_dir, "eval-hits")["status"], "error");
}
