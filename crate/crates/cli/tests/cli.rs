use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn natlas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_natlas")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn plant(dir: &Path) {
    let out = natlas(&["--out-dir", p(dir), "plant", "--docs", "3", "--doc-len", "60"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exit_codes_separate_validation_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    plant(dir.path());
    let model = dir.path().join("model.ckpt");
    let corpus = dir.path().join("corpus");

    let bad_k = natlas(&["--out-dir", p(dir.path()), "identify", "--model", p(&model), "--corpus", p(&corpus), "--k", "0"]);
    assert_eq!(bad_k.status.code(), Some(2));
    assert_eq!(natlas(&["no-such-command"]).status.code(), Some(2));
    let missing = natlas(&["--out-dir", p(dir.path()), "identify", "--model", p(&dir.path().join("nope.ckpt")), "--corpus", p(&corpus)]);
    assert_eq!(missing.status.code(), Some(3));

    fs::write(dir.path().join("garbage.ckpt"), b"not a checkpoint").unwrap();
    let corrupt = natlas(&["--out-dir", p(dir.path()), "identify", "--model", p(&dir.path().join("garbage.ckpt")), "--corpus", p(&corpus)]);
    assert_eq!(corrupt.status.code(), Some(2));
}

#[test]
fn config_file_fills_missing_flags() {
    let dir = tempfile::tempdir().unwrap();
    plant(dir.path());
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# identify settings\nmodel = {}\ncorpus = {}\nk = 3.125\nfilter_pct = 95\n",
            p(&dir.path().join("model.ckpt")),
            p(&dir.path().join("corpus"))
        ),
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let ok = natlas(&["--config", p(&cfg), "--out-dir", p(&out_dir), "identify"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(stdout.lines().filter(|l| l.ends_with(": 8 neurons")).count(), 4, "{stdout}");

    // A flag on the command line wins over the file.
    let explicit = natlas(&["--config", p(&cfg), "--out-dir", p(&out_dir), "identify", "--k", "1"]);
    assert!(explicit.status.success());
    assert!(!String::from_utf8_lossy(&explicit.stdout).contains(": 8 neurons"));

    fs::write(&cfg, "bogus_key = 1\n").unwrap();
    assert_eq!(natlas(&["--config", p(&cfg), "identify"]).status.code(), Some(2));
}

#[test]
fn steer_generate_writes_plan_and_generation() {
    let dir = tempfile::tempdir().unwrap();
    plant(dir.path());
    let model = dir.path().join("model.ckpt");
    let id = dir.path().join("id");
    let out = natlas(&["--out-dir", p(&id), "identify", "--model", p(&model), "--corpus", p(&dir.path().join("corpus")), "--k", "3.125"]);
    assert!(out.status.success());
    let gen = dir.path().join("gen");
    let out = natlas(&[
        "--out-dir", p(&gen), "steer-generate", "--model", p(&model), "--sets", p(&id.join("neuron_sets.json")),
        "--stats", p(&id.join("stats.bin")), "--activate", "a2", "--deactivate", "a0", "--prompt", "Q: 13Vae? A:",
        "--max-tokens", "16",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let plan = fs::read_to_string(gen.join("plan.json")).unwrap();
    assert!(plan.contains("deactivate:a0(multiply 0) + activate:a2(add b)"));
    let g: serde_json::Value = serde_json::from_slice(&fs::read(gen.join("generation.json")).unwrap()).unwrap();
    assert_eq!(g["schema_version"], 1);

    // Activation needs stats; asking without them is a usage error.
    let out = natlas(&["--out-dir", p(&gen), "steer-generate", "--model", p(&model), "--sets", p(&id.join("neuron_sets.json")), "--activate", "a2", "--prompt", "Q: x? A:"]);
    assert_eq!(out.status.code(), Some(2));
}
