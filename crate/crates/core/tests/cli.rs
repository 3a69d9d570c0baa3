use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dgsa::rollout::parse_csv;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dgsa"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn text_tiny() -> String {
    configs().join("text-tiny.cfg").display().to_string()
}

fn vision_tiny() -> String {
    configs().join("vision-tiny.cfg").display().to_string()
}

fn train(cfg: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--config", cfg, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    args.push("train");
    run(&args)
}

#[test]
fn missing_config_file_names_the_path() {
    let o = run(&["--config", "/definitely/not/here.cfg", "train"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("/definitely/not/here.cfg"), "{}", stderr(&o));
}

#[test]
fn usage_and_config_errors_exit_1() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--set", "nokeyvalue", "synth"]).status.code(), Some(1));
    let o = run(&["--set", "model.detph=3", "gradcheck"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.detph"));
    assert_eq!(run(&["--set", "model.gate_layers=2", "gradcheck"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn tiny_train_writes_artifacts_and_seed_changes_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let start = std::time::Instant::now();
    let o = train(&text_tiny(), &a, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed().as_secs() < 60);
    assert!(a.join("metrics.csv").is_file() && a.join("model.ckpt").is_file());
    let log = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(log.starts_with("step,epoch,lr,loss,acc\n"));
    // 512 samples / batch 32 × 3 epochs.
    assert_eq!(log.lines().count(), 1 + 48);

    let o = train(&text_tiny(), &b, &["--seed", "1"]);
    assert!(o.status.success());
    assert_ne!(log, std::fs::read_to_string(b.join("metrics.csv")).unwrap());
}

#[test]
fn eval_reproduces_final_train_accuracy_and_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(&text_tiny(), dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o)
        .lines()
        .find(|l| l.starts_with("final train "))
        .unwrap()
        .trim_start_matches("final ")
        .to_string();
    let ckpt = dir.path().join("model.ckpt");
    let e = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--split", "train"]);
    assert!(e.status.success(), "{}", stderr(&e));
    assert_eq!(stdout(&e).lines().next().unwrap(), line);

    let s = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--sweep", "0,0.25,0.5,0.75"]);
    assert!(s.status.success(), "{}", stderr(&s));
    let out = stdout(&s);
    let header = out.lines().position(|l| l == "level,accuracy,loss,oracle").unwrap();
    let rows: Vec<&str> = out.lines().skip(header + 1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("0.0,") && rows[3].starts_with("0.75,"));

    let d = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--sweep"]);
    assert!(d.status.success(), "{}", stderr(&d));
    let levels: Vec<String> = stdout(&d)
        .lines()
        .skip_while(|l| *l != "level,accuracy,loss,oracle")
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    assert_eq!(levels, ["0.0", "0.1", "0.3", "0.5"]);
}

#[test]
fn eval_refuses_a_mismatched_config_with_hashes() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(&text_tiny(), dir.path(), &["--set", "train.epochs=1"]).status.success());
    let ckpt = dir.path().join("model.ckpt");
    let o = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--set", "model.heads=2"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("mismatch") && err.contains("model.heads: 4 (checkpoint) vs 2 (config)"), "{err}");
    assert!(err.matches(|c: char| c.is_ascii_hexdigit()).count() >= 128);

    // Non-model keys may change freely.
    let o = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--set", "train.lr=0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let bad = dir.path().join("junk.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    assert_eq!(run(&["eval", "--checkpoint", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_fails_on_corruption_and_at_zero_tolerance() {
    for cfg in [text_tiny(), vision_tiny()] {
        for variant in ["dgsa", "diff", "vanilla"] {
            let set = format!("model.variant={variant}");
            let o = run(&["--config", &cfg, "--set", &set, "gradcheck"]);
            assert_eq!(o.status.code(), Some(0), "{variant}: {}{}", stdout(&o), stderr(&o));
            assert!(stdout(&o).contains("gradcheck passed"));
        }
    }
    let o = run(&["--config", &text_tiny(), "gradcheck"]);
    for group in ["embedding", "position", "attention", "gate", "group_norm", "norm", "ffn", "head"] {
        assert!(stdout(&o).lines().any(|l| l.starts_with(group)), "{group} missing");
    }
    let o = run(&["--config", &text_tiny(), "gradcheck", "--corrupt-op", "softmax_rows"]);
    assert_eq!(o.status.code(), Some(3), "{}", stdout(&o));
    let o = run(&["--config", &vision_tiny(), "gradcheck", "--corrupt-op", "sigmoid"]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(&["--config", &text_tiny(), "gradcheck", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(3));
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn rollout_file_contract_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m");
    assert!(train(&text_tiny(), &model, &["--set", "train.epochs=1"]).status.success());
    let ckpt = model.join("model.ckpt");
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    for r in [&r1, &r2] {
        let o = run(&["rollout", "--checkpoint", ckpt.to_str().unwrap(), "--sample", "5", "--out", r.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let files = listing(&r1);
    assert_eq!(files, listing(&r2));
    let csvs: Vec<&String> = files.iter().map(|(n, _)| n).filter(|n| n.ends_with(".csv")).collect();
    // depth 2: two signed layer maps plus the rollout.
    assert_eq!(csvs, ["layer_1.csv", "layer_2.csv", "rollout.csv"]);
    for n in ["layer_1_pos.pgm", "layer_1_neg.pgm", "layer_2_pos.pgm", "layer_2_neg.pgm", "rollout.pgm"] {
        assert!(files.iter().any(|(f, _)| f == n), "{n}");
    }
    let o = run(&["rollout", "--checkpoint", ckpt.to_str().unwrap(), "--sample", "100000", "--out", r1.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn vanilla_rollout_maps_are_nonnegative_and_vision_exports_grid() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m");
    let o = train(&vision_tiny(), &model, &["--set", "model.variant=vanilla", "--set", "train.epochs=1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = dir.path().join("r");
    let ckpt = model.join("model.ckpt");
    assert!(run(&["rollout", "--checkpoint", ckpt.to_str().unwrap(), "--out", r.to_str().unwrap()]).status.success());
    for l in 1..=2 {
        let m = parse_csv(&std::fs::read_to_string(r.join(format!("layer_{l}.csv"))).unwrap()).unwrap();
        assert!(m.data().iter().all(|v| *v >= 0.0));
        let neg = std::fs::read(r.join(format!("layer_{l}_neg.pgm"))).unwrap();
        let header = b"P5\n17 17\n255\n";
        assert_eq!(&neg[..header.len()], header);
        assert!(neg[header.len()..].iter().all(|b| *b == 0));
    }
    let grid = parse_csv(&std::fs::read_to_string(r.join("rollout_cls.csv")).unwrap()).unwrap();
    assert_eq!(grid.shape(), &[4, 4]);
}

#[test]
fn synth_reports_oracle_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["--config", &text_tiny(), "--set", "data.spurious_rate=0", "--out", d.to_str().unwrap(), "synth"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("test oracle accuracy=1.0\n"), "{}", stdout(&o));
    }
    assert_eq!(listing(&a), listing(&b));
    let o = run(&["--config", &vision_tiny(), "--set", "data.sigma=-0.1", "--out", a.to_str().unwrap(), "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("config error"));
}

#[test]
fn synth_output_loads_back_through_file_loaders() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s");
    let o = run(&["--config", &vision_tiny(), "--out", s.to_str().unwrap(), "synth"]);
    assert!(o.status.success());
    let p = |n: &str| format!("{}", s.join(n).display());
    let sets = [
        "data.kind=idx_images".to_string(),
        format!("data.train_images={}", p("train-images.idx")),
        format!("data.train_labels={}", p("train-labels.idx")),
        format!("data.test_images={}", p("test-images.idx")),
        format!("data.test_labels={}", p("test-labels.idx")),
        "train.epochs=1".to_string(),
    ];
    let mut args = vec!["--config".to_string(), vision_tiny()];
    for kv in &sets {
        args.push("--set".into());
        args.push(kv.clone());
    }
    args.extend(["--out".into(), p("m"), "train".into()]);
    let o = bin().args(&args).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));

    let t = dir.path().join("t");
    assert!(run(&["--config", &text_tiny(), "--out", t.to_str().unwrap(), "synth"]).status.success());
    let tr = format!("data.train_path={}", t.join("train.tsv").display());
    let te = format!("data.test_path={}", t.join("test.tsv").display());
    let o = run(&[
        "--config", &text_tiny(), "--set", "data.kind=csv_text", "--set", &tr, "--set", &te,
        "--set", "data.min_token_freq=1", "--set", "train.epochs=1", "--out", t.join("m").to_str().unwrap(), "train",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = run(&["--config", &text_tiny(), "--set", "data.kind=csv_text", "--set", "data.train_path=/nope.tsv", "--set", &te, "train"]);
    assert_eq!(o.status.code(), Some(2));
}
