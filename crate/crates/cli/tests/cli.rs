use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mkpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mkpn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mkpn(args);
    assert!(
        out.status.success(),
        "mkpn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "burst_len = 2\nkernel_sizes = 1,3\nwidths = 4,8\npatch = 32\n\
                    corpus_count = 2\ncorpus_size = 64\ndtype = f64\nbatch_size = 1\n\
                    checkpoint_every = 2\nlog_every = 1\n";

/// PSNR column of an eval CSV.
fn psnr_column(csv: &str) -> Vec<f64> {
    csv.lines().skip(1).map(|l| l.rsplit(',').nth(3).unwrap().parse().unwrap()).collect()
}

#[test]
fn synth_writes_requested_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g2");
    ok(&["synth", "--out", s(&out), "--gain", "2", "--count", "3", "--patch", "48", "--burst", "4", "--seed", "9"]);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l == "gain=2"), "{manifest}");
    assert_eq!(manifest.lines().filter(|l| l.starts_with("sample ")).count(), 3);
    let samples = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "mkpn"))
        .count();
    assert_eq!(samples, 3);
    let resolved = fs::read_to_string(out.join("resolved_config.txt")).unwrap();
    for line in ["count = 3", "gain = 2", "patch = 48", "burst_len = 4", "seed = 9"] {
        assert!(resolved.lines().any(|l| l == line), "missing `{line}`");
    }

    // Same seed, same bytes.
    let again = dir.path().join("again");
    ok(&["synth", "--out", s(&again), "--gain", "2", "--count", "3", "--patch", "48", "--burst", "4", "--seed", "9"]);
    assert_eq!(
        fs::read(out.join("manifest.txt")).unwrap(),
        fs::read(again.join("manifest.txt")).unwrap()
    );
    assert_eq!(
        fs::read(out.join("sample_0002.mkpn")).unwrap(),
        fs::read(again.join("sample_0002.mkpn")).unwrap()
    );
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mkpn(&["synth", "--bogus"]).status.code(), Some(2));
    assert_eq!(mkpn(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mkpn(&["synth", "--out", "x", "--gain", "3"]).status.code(), Some(2));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "colour = blue\n").unwrap();
    let out = mkpn(&["synth", "--out", s(&dir.path().join("o")), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    let cfg = dir.path().join("steps.cfg");
    fs::write(&cfg, "steps = 0\n").unwrap();
    assert_eq!(mkpn(&["train", "--out", s(&dir.path().join("t")), "--config", s(&cfg)]).status.code(), Some(2));
    assert_eq!(mkpn(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.mkpn");
    let out = mkpn(&["eval", "--ckpt", s(&missing), "--testset", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_resume_eval_denoise() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let sets = root.join("sets");
    ok(&["synth", "--config", s(&cfg), "--out", s(&sets.join("gain1")), "--gain", "1", "--count", "2"]);
    ok(&["synth", "--config", s(&cfg), "--out", s(&sets.join("gain8")), "--gain", "8", "--count", "2"]);

    let full = root.join("full");
    ok(&["train", "--config", s(&cfg), "--out", s(&full), "--steps", "4", "--testset", s(&sets)]);
    let log = fs::read_to_string(full.join("loss.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,total_loss,basic_loss,anneal_weight"));
    assert_eq!(log.lines().count(), 5);
    assert!(full.join("ckpt_00000002.mkpn").exists());
    assert!(full.join("model.mkpn").exists());
    assert!(fs::read_to_string(full.join("resolved_config.txt")).unwrap().contains("steps = 4"));

    // Resuming from the step-2 checkpoint lands on the same weights.
    let part = root.join("part");
    ok(&["train", "--config", s(&cfg), "--out", s(&part), "--steps", "4", "--ckpt", s(&full.join("ckpt_00000002.mkpn"))]);
    assert_eq!(
        fs::read(full.join("model.mkpn")).unwrap(),
        fs::read(part.join("model.mkpn")).unwrap()
    );

    let model = full.join("model.mkpn");
    let naive = root.join("naive");
    let fused = root.join("fused");
    let table = ok(&["eval", "--ckpt", s(&model), "--testset", s(&sets), "--mode", "naive", "--out", s(&naive)]);
    ok(&["eval", "--ckpt", s(&model), "--testset", s(&sets), "--mode", "fused", "--out", s(&fused)]);
    assert!(table.contains("MKPN-{1,3}"), "{table}");
    assert!(table.contains("manifest sha256"));
    let a = psnr_column(&fs::read_to_string(naive.join("eval.csv")).unwrap());
    let b = psnr_column(&fs::read_to_string(fused.join("eval.csv")).unwrap());
    assert_eq!(a.len(), 4);
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
    assert!(naive.join("eval_summary.txt").exists());

    let pics = root.join("pics");
    ok(&["denoise", "--ckpt", s(&model), "--testset", s(&sets.join("gain8")), "--out", s(&pics), "--count", "1"]);
    for suffix in ["noisy", "output", "truth", "panel"] {
        let p = pics.join(format!("gain8_0000_{suffix}.png"));
        assert!(p.exists(), "{}", p.display());
    }
    ok(&["denoise", "--ckpt", s(&model), "--testset", s(&sets.join("gain1").join("sample_0001.mkpn")), "--out", s(&pics)]);
    assert!(pics.join("sample_0001_panel.png").exists());

    // A model for another burst length is refused.
    let other = root.join("other.cfg");
    fs::write(&other, TINY.replace("burst_len = 2", "burst_len = 3")).unwrap();
    let wrong = root.join("wrong");
    ok(&["train", "--config", s(&other), "--out", s(&wrong), "--steps", "1"]);
    let out = mkpn(&["eval", "--ckpt", s(&wrong.join("model.mkpn")), "--testset", s(&sets)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_reports_convolution_counts() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["bench", "--extent", "32", "--burst", "3", "--reps", "1", "--kernels-set", "1,3,5", "--kernels-set", "7", "--out", s(dir.path())]);
    assert!(text.contains("{1,3,5}"));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
