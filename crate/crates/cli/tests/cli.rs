use std::path::Path;
use std::process::{Command, Output};

fn edtc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edtc"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(out: &Path, count: usize, seed: u64, start_id: u64) -> Output {
    edtc(&[
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
        "--start-id",
        &start_id.to_string(),
        "--t",
        "4",
        "--d",
        "16",
        "--latent-dim",
        "6",
        "--symbols",
        "6",
        "--vocab",
        "16",
    ])
}

/// Tiny data plus a one-epoch config; returns the config path.
fn setup(dir: &Path, extra: &str) -> std::path::PathBuf {
    let (train, val) = (dir.join("train.bin"), dir.join("val.bin"));
    assert_eq!(code(&gen(&train, 8, 1, 0)), 0);
    assert_eq!(code(&gen(&val, 4, 1, 1000)), 0);
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# tiny run\ntrain_data = {}\nval_data = {}\nrun_dir = {}\n\
             dim = 16\ntime = 4\nnum_heads = 2\nfuser_layers = 1\ntranslator_m = 1\n\
             translator_n = 1\ndecoder_layers = 1\nbatch_size = 4\nmax_epochs = 1\n\
             evals_per_epoch = 1\nlr = 1e-3\n{extra}",
            train.display(),
            val.display(),
            dir.join("run").display()
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    for (name, seed) in [("a.bin", 5), ("b.bin", 5), ("c.bin", 6)] {
        let o = gen(&p(name), 6, seed, 0);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |n: &str| std::fs::read(p(n)).unwrap();
    assert_eq!(read("a.bin"), read("b.bin"));
    assert_ne!(read("a.bin"), read("c.bin"));
    assert_eq!(&read("a.bin")[..8], b"EDTCDATA");
}

#[test]
fn bad_generator_arguments_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(&dir.path().join("x.bin"), 0, 1, 0)), 2);
    let o = edtc(&["gen-data", "--out", dir.path().join("y.bin").to_str().unwrap(), "--count", "4", "--vocab", "4"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "no_such_key = 1\n");
    assert_eq!(code(&edtc(&["train", "--config", cfg.to_str().unwrap()])), 2);

    let cfg = setup(dir.path(), "lr = -1\n");
    assert_eq!(code(&edtc(&["train", "--config", cfg.to_str().unwrap()])), 2);

    let missing = dir.path().join("missing.cfg");
    assert_eq!(code(&edtc(&["train", "--config", missing.to_str().unwrap()])), 2);

    let cfg = setup(dir.path(), "");
    let o = edtc(&["train", "--config", cfg.to_str().unwrap(), "--ablation", "everything"]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&edtc(&["gradcheck", "--module", "nonsense"])), 2);
}

#[test]
fn diverging_training_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "ablation_mode = full_twin\n").to_str().unwrap().to_owned();
    let text = std::fs::read_to_string(&cfg).unwrap().replace("lr = 1e-3", "lr = 1e38");
    std::fs::write(&cfg, text).unwrap();
    let o = edtc(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_eval_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let o = edtc(&["train", "--config", cfg.to_str().unwrap(), "--ablation", "fuser_translator"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["mode"], "fuser_translator");
    let ckpt = summary["best_checkpoint"].as_str().unwrap().to_owned();
    let run = dir.path().join("run");
    for f in ["config.txt", "metrics.jsonl", "report.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let val = dir.path().join("val.bin");
    let o = edtc(&["eval", "--ckpt", &ckpt, "--data", val.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let rep: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rep["num_samples"], 4);
    assert_eq!(rep["bleu"].as_array().unwrap().len(), 4);

    let o = edtc(&["infer", "--ckpt", &ckpt, "--sample", "2", "--beams", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("sample    1002"), "{out}");
    assert!(out.contains("reference"));

    let o = edtc(&["infer", "--ckpt", &ckpt, "--sample", "99", "--beams", "2"]);
    assert_ne!(code(&o), 0);
}

#[test]
fn gradcheck_single_module() {
    let o = edtc(&["gradcheck", "--module", "layer_norm"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn ablate_prints_all_modes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let o = edtc(&["ablate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    for m in ["baseline", "fuser", "fuser_translator", "full_twin"] {
        assert!(table.lines().any(|l| l.starts_with(m)), "{m} missing from\n{table}");
    }
    assert!(dir.path().join("run").join("ablation.txt").exists());
}
