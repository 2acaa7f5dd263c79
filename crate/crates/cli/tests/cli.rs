use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
[run]
pretrain_epochs = 1
finetune_epochs = 2
pretrain_batch = 64
finetune_batch = 64
[model]
dim = 8
ff_width = 16
[schedule]
T = 50
[synthetic]
num_fields = 3
vocab_size = 6
clusters = 3
num_samples = 1200
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dgenctr"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.cfg");
    fs::write(&p, SMALL).unwrap();
    p
}

fn generate(dir: &Path, cfg: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let o = run(&["generate-data", "--config", s(cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn generate_data_is_byte_identical_and_manifested() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let a = generate(tmp.path(), &cfg, "a");
    let b = generate(tmp.path(), &cfg, "b");
    for name in ["train.csv", "validation.csv", "test.csv", "bayes_scores.csv", "config.txt", "manifest.txt"] {
        let x = fs::read(a.join(name)).unwrap();
        assert!(!x.is_empty(), "{name} empty");
        assert_eq!(x, fs::read(b.join(name)).unwrap(), "{name} differs");
    }
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    for line in manifest.lines() {
        let (hash, name) = line.split_once("  ").unwrap();
        assert_eq!(hash.len(), 64);
        assert!(a.join(name).exists());
    }
    let rows: usize = ["train.csv", "validation.csv", "test.csv"]
        .iter()
        .map(|n| fs::read_to_string(a.join(n)).unwrap().lines().count() - 1)
        .sum();
    assert_eq!(rows, 1200);
}

#[test]
fn pretrain_then_finetune() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = generate(tmp.path(), &cfg, "data");
    let pre = tmp.path().join("pre");
    let o = run(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&pre)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = pre.join("pretrained.ckpt");
    assert!(ckpt.exists());
    assert!(pre.join("pretrain-epoch1.ckpt").exists());
    assert_eq!(fs::read_to_string(pre.join("pretrain_losses.csv")).unwrap().lines().count(), 2);

    let ft = tmp.path().join("ft");
    let o = run(&[
        "finetune", "--config", s(&cfg), "--data", s(&data), "--init", s(&ckpt), "--transfer", "full", "--out", s(&ft),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["finetuned.ckpt", "finetune_epochs.csv", "report.csv", "manifest.txt"] {
        assert!(ft.join(f).exists(), "{f} missing");
    }
    let report = fs::read_to_string(ft.join("report.csv")).unwrap();
    assert!(report.lines().any(|l| l.contains(",test,auc,")));

    // partial transfer modes load too
    let o = run(&[
        "finetune", "--config", s(&cfg), "--data", s(&data), "--init", s(&ckpt), "--transfer", "embeddings-only",
        "--out", s(&tmp.path().join("emb")),
    ]);
    assert_eq!(code(&o), 0);
}

#[test]
fn usage_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = generate(tmp.path(), &cfg, "data");
    let out = tmp.path().join("x");
    // partial transfer without a checkpoint
    let o = run(&["finetune", "--config", s(&cfg), "--data", s(&data), "--transfer", "embeddings-only", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    // a checkpoint with transfer none
    let o = run(&["finetune", "--data", s(&data), "--init", "x.ckpt", "--transfer", "none", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&run(&["finetune", "--data", s(&data), "--transfer", "sideways", "--out", s(&out)])), 1);
    assert_eq!(code(&run(&["verify", "--suite", "nonsense"])), 1);
    assert_eq!(code(&run(&["bogus-command"])), 1);
    assert_eq!(code(&run(&["pretrain", "--data"])), 1);
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "[run]\nepochz = 3\n").unwrap();
    let o = run(&["generate-data", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("run.epochz"));
    fs::write(&bad, "[schedule]\nlambda_min = 0.9\nlambda_max = 0.2\n").unwrap();
    let o = run(&["pretrain", "--config", s(&bad), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn data_and_checkpoint_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("x");
    let o = run(&["pretrain", "--config", s(&cfg), "--data", s(&tmp.path().join("missing")), "--out", s(&out)]);
    assert_eq!(code(&o), 2);

    let data = generate(tmp.path(), &cfg, "data");
    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = run(&["finetune", "--config", s(&cfg), "--data", s(&data), "--init", s(&junk), "--out", s(&out)]);
    assert_eq!(code(&o), 2);

    let broken = tmp.path().join("broken");
    fs::create_dir_all(&broken).unwrap();
    for f in ["train.csv", "validation.csv", "test.csv"] {
        fs::copy(data.join(f), broken.join(f)).unwrap();
    }
    let mut text = fs::read_to_string(broken.join("train.csv")).unwrap();
    text.push_str("1,2\n");
    fs::write(broken.join("train.csv"), text).unwrap();
    let o = run(&["pretrain", "--config", s(&cfg), "--data", s(&broken), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_passes_and_tamper_fails() {
    let o = run(&["verify", "--suite", "kernel"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("kernel"));
    let o = run(&["verify", "--suite", "gradcheck"]);
    assert_eq!(code(&o), 0);
    let o = run(&["verify", "--suite", "gradcheck", "--tamper"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn help_lists_config_keys() {
    for sub in ["generate-data", "pretrain", "finetune", "experiment"] {
        let o = run(&[sub, "--help"]);
        assert_eq!(code(&o), 0);
        let text = String::from_utf8_lossy(&o.stdout);
        for key in ["run.seed", "schedule.T", "model.dim", "synthetic.num_samples"] {
            assert!(text.contains(key), "{sub} --help lacks {key}");
        }
    }
}

#[test]
fn experiment_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("exp");
    let o = run(&["experiment", "--suite", "transfer", "--config", s(&cfg), "--seeds", "1,2", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    for id in ["full", "embeddings-only", "scoring-network-only"] {
        assert!(summary.contains(id));
    }
    assert!(out.join("significance.csv").exists());
    assert!(out.join("report.csv").exists());
    assert_eq!(code(&run(&["experiment", "--suite", "nope", "--out", s(&out)])), 1);
    assert_eq!(code(&run(&["experiment", "--suite", "transfer", "--seeds", "1,x", "--out", s(&out)])), 1);
}
