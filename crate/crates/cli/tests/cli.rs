use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn copyctc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_copyctc"))
        .args(args)
        .env_remove("COPYCTC_THREADS")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = copyctc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&[
        "synth",
        "--out-dir",
        s(dir),
        "--train",
        "60",
        "--dev",
        "20",
        "--test",
        "0",
        "--vocab-size",
        "12",
        "--min-len",
        "3",
        "--max-len",
        "5",
    ]);
}

const TINY: [&str; 12] = [
    "--hidden", "8", "--layers", "1", "--heads", "2", "--ffn-hidden", "16", "--epochs", "2", "--batch-size", "16",
];

#[test]
fn help_and_usage_errors() {
    assert!(copyctc(&["--help"]).status.success());
    assert!(copyctc(&["train", "--help"]).status.success());
    assert_eq!(copyctc(&[]).status.code(), Some(1));
    assert_eq!(copyctc(&["synth", "--bogus"]).status.code(), Some(1));
    assert_eq!(copyctc(&["synth", "--out-dir", "/tmp/x", "--drop-rate", "2"]).status.code(), Some(1));
    assert_eq!(copyctc(&["synth", "--out-dir", "/tmp/x", "--grammar", "free"]).status.code(), Some(1));
}

#[test]
fn synth_writes_corpus_and_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    synth(&out);
    for f in ["vocab.txt", "train.jsonl", "train.jsonl.config.json", "dev.jsonl", "dev.jsonl.config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(!out.join("test.jsonl").exists());
    assert_eq!(fs::read_to_string(out.join("train.jsonl")).unwrap().lines().count(), 60);
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("dev.jsonl.config.json")).unwrap()).unwrap();
    assert_eq!(side["hash"].as_str().unwrap().len(), 16);

    let missing = dir.path().join("nope");
    let out = copyctc(&["synth", "--out-dir", s(&missing), "--no-create", "--train", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!missing.exists());
}

#[test]
fn train_decode_eval_bench_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let run = dir.path().join("run");
    let mut args = vec!["train", "--data-dir", s(&data), "--out-dir", s(&run)];
    args.extend(TINY);
    let stdout = ok(&args);
    assert!(stdout.contains("epoch   1"));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,nll,dev_em"));
    assert_eq!(log.lines().count(), 3);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 16);

    let ckpt = run.join("best.ckpt");
    let dev = data.join("dev.jsonl");
    let hyp = dir.path().join("hyp.jsonl");
    ok(&["decode", "--checkpoint", s(&ckpt), "--input", s(&dev), "--output", s(&hyp)]);
    assert_eq!(fs::read_to_string(&hyp).unwrap().lines().count(), 20);
    assert!(dir.path().join("hyp.jsonl.meta.json").exists());

    let report = dir.path().join("report.json");
    let table = ok(&["eval", "--data", s(&dev), "--hyp", s(&hyp), "--output", s(&report)]);
    assert!(table.contains("F0.5"));
    let via_model = ok(&["eval", "--data", s(&dev), "--checkpoint", s(&ckpt)]);
    // Same hypotheses, same scores; only the throughput line differs.
    let strip = |t: &str| t.lines().filter(|l| !l.contains("/s")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&table), strip(&via_model));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["report"]["sentences"], 20);

    let bench_out = dir.path().join("bench.json");
    ok(&["bench", "--checkpoint", s(&ckpt), "--input", s(&dev), "--output", s(&bench_out)]);
    let bench: serde_json::Value = serde_json::from_str(&fs::read_to_string(&bench_out).unwrap()).unwrap();
    assert_eq!(bench["entries"].as_array().unwrap().len(), 2);

    let vocab = fs::read_to_string(data.join("vocab.txt")).unwrap();
    let words: Vec<&str> = vocab.lines().take(2).collect();
    let source = words.join(" ");
    let tsv = ok(&["lattice", "--checkpoint", s(&ckpt), "--source", &source, "--target", words[1]]);
    assert!(tsv.lines().count() > 1);
    assert!(tsv.contains('\t'));
    let bad = copyctc(&["lattice", "--checkpoint", s(&ckpt), "--source", "zzz", "--target", words[1]]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    fs::write(data.join("dev.jsonl"), "{\"source\": [\"baba\"], \"target\": [\"qqqq\"]}\n").unwrap();
    let mut args = vec!["train", "--data-dir", s(&data), "--out-dir", s(dir.path())];
    args.extend(TINY);
    let out = copyctc(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    let hyp = dir.path().join("short.jsonl");
    fs::write(&hyp, "").unwrap();
    let out = copyctc(&["eval", "--data", s(&data.join("train.jsonl")), "--hyp", s(&hyp)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let run = dir.path().join("run");
    let mut args = vec!["train", "--data-dir", s(&data), "--out-dir", s(&run), "--lr", "1e300"];
    args.extend(TINY);
    let out = copyctc(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("divergence.json").exists());
}

#[test]
fn seeded_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let mut outputs = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "2")] {
        let run = dir.path().join(name);
        let mut args = vec!["--threads", threads, "train", "--data-dir", s(&data), "--out-dir", s(&run)];
        args.extend(TINY);
        ok(&args);
        outputs.push((fs::read(run.join("best.ckpt")).unwrap(), fs::read(run.join("train_log.csv")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn ablate_writes_table_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let out = dir.path().join("abl");
    let mut args = vec![
        "ablate",
        "--data-dir",
        s(&data),
        "--out-dir",
        s(&out),
        "--variants",
        "copy-aware",
        "--ratios",
        "2,4",
        "--glat",
        "on",
    ];
    args.extend(TINY);
    let table = ok(&args);
    assert!(table.contains("copy-aware-T2") && table.contains("copy-aware-T4"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
    assert_eq!(fs::read_to_string(out.join("curves.csv")).unwrap().lines().count(), 3);
    assert!(out.join("copy-aware-T4").join("best.ckpt").exists());
}
