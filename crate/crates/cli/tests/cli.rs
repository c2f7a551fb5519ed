//! End-to-end runs of the `bplm` binary on tiny configs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY_MODEL: &str = r#"
[model]
layers = 1
embed_dim = 16
ffn_dim = 32
heads = 2
kv_heads = 1
vocab_size = 48
max_seq_len = 32
rope_theta = 10000.0
rmsnorm_eps = 1e-5
init_std = 0.4472135954999579

[data]
batch_rows = 2
min_len = 8
max_len = 16
"#;

fn bplm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bplm")).args(args).env("RUST_LOG", "warn").env_remove("BPLM_OUT_DIR").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bplm(args);
    assert!(out.status.success(), "bplm {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("{extra}\n{TINY_MODEL}")).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn biphasic_preset_switches_objective_at_quarter() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bi.toml", "preset = \"biphasic-25-75\"\n[train]\ntotal_steps = 12");
    let out = tmp.path().join("bi");
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&out)]);
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 12);
    let objectives: Vec<&str> = rows.iter().map(|r| r[2].as_str()).collect();
    assert_eq!(objectives[..3], ["clm"; 3]);
    assert!(objectives[3..].iter().all(|o| *o == "mlm"));
    assert!(out.join("config.expanded.toml").exists());
    assert!(out.join("checkpoint.bplm").exists());
}

#[test]
fn reruns_are_identical_and_expanded_config_reproduces() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "clm.toml", "preset = \"pfs-clm\"\n[train]\ntotal_steps = 6");
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&b)]);
    ok(&["pretrain", "--config", s(&a.join("config.expanded.toml")), "--out", s(&c)]);
    let metrics = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(metrics, fs::read(c.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.bplm")).unwrap(), fs::read(c.join("checkpoint.bplm")).unwrap());
    assert_eq!(fs::read(a.join("config.expanded.toml")).unwrap(), fs::read(c.join("config.expanded.toml")).unwrap());
}

#[test]
fn resume_from_cadence_checkpoint_matches_full_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "mlm.toml",
        "preset = \"pfs-mlm-40\"\n[train]\ntotal_steps = 8\ncheckpoint_every = 4",
    );
    let (full, resumed) = (tmp.path().join("full"), tmp.path().join("resumed"));
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&full)]);
    let mid = full.join("checkpoints/step-00000004.bplm");
    assert!(mid.exists());
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&resumed), "--resume", s(&mid)]);
    assert_eq!(fs::read(full.join("checkpoint.bplm")).unwrap(), fs::read(resumed.join("checkpoint.bplm")).unwrap());
}

#[test]
fn nonstudy_mask_ratio_needs_flag() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "m70.toml", "[train]\nobjective = \"mlm\"\nmask_ratio = 0.7\ntotal_steps = 2");
    let out = tmp.path().join("m70");
    let res = bplm(&["pretrain", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("allow-nonstudy"));
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&out), "--allow-nonstudy"]);
}

#[test]
fn unknown_keys_and_presets_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let bad_key = write_config(tmp.path(), "k.toml", "[train]\ntotal_stepz = 3");
    assert!(!bplm(&["pretrain", "--config", s(&bad_key), "--out", s(&tmp.path().join("k"))]).status.success());
    let bad_preset = write_config(tmp.path(), "p.toml", "preset = \"nope\"");
    let res = bplm(&["pretrain", "--config", s(&bad_preset), "--out", s(&tmp.path().join("p"))]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("unknown preset"));
}

#[test]
fn cpt_requires_decayed_base_and_extends_history() {
    let tmp = TempDir::new().unwrap();
    let undecayed = write_config(
        tmp.path(),
        "nd.toml",
        "preset = \"pfs-clm\"\n[train]\ntotal_steps = 4\ndecay_steps = 0\nwarmup_steps = 1",
    );
    let decayed = write_config(tmp.path(), "d.toml", "preset = \"pfs-clm\"\n[train]\ntotal_steps = 4\ndecay_steps = 1");
    let cpt = write_config(tmp.path(), "cpt.toml", "[cpt]\nsteps = 3");
    let (nd, d) = (tmp.path().join("nd"), tmp.path().join("d"));
    ok(&["pretrain", "--config", s(&undecayed), "--out", s(&nd)]);
    ok(&["pretrain", "--config", s(&decayed), "--out", s(&d)]);

    let out = tmp.path().join("cpt-nd");
    let res = bplm(&["cpt", "--config", s(&cpt), "--base", s(&nd.join("checkpoint.bplm")), "--out", s(&out)]);
    assert!(!res.status.success());
    ok(&["cpt", "--config", s(&cpt), "--base", s(&nd.join("checkpoint.bplm")), "--out", s(&out), "--force"]);

    let out = tmp.path().join("cpt-d");
    let stdout = ok(&["cpt", "--config", s(&cpt), "--base", s(&d.join("checkpoint.bplm")), "--out", s(&out)]);
    assert!(stdout.contains("clm:4 -> mlm:3"), "{stdout}");
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[2] == "mlm"));
}

#[test]
fn finetune_writes_study_grid_reports() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "ft.toml", "preset = \"pfs-clm\"\n[train]\ntotal_steps = 2");
    let pre = tmp.path().join("pre");
    ok(&["pretrain", "--config", s(&cfg), "--out", s(&pre)]);
    let data = tmp.path().join("sc-data");
    ok(&["gen-tasks", "--task", "sc", "--size", "30", "--out", s(&data)]);
    for f in ["train.jsonl", "validation.jsonl", "test.jsonl"] {
        assert!(data.join(f).exists());
    }

    let ckpt = pre.join("checkpoint.bplm");
    let out = tmp.path().join("ft");
    ok(&["finetune", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--data", s(&data), "--task", "sc", "--out", s(&out), "--jobs", "2"]);
    let runs = csv_rows(&out.join("runs.csv"));
    assert_eq!(runs.len(), 30);
    assert!(runs.iter().all(|r| r[4] == "test"));
    assert_eq!(csv_rows(&out.join("validation.csv")).len(), 30);
    let agg = csv_rows(&out.join("aggregate.csv"));
    assert_eq!(agg.len(), 1);
    assert_eq!(agg[0][3], "5");
    assert!(!agg[0][7].is_empty());

    // Reports do not depend on how many cells run in parallel.
    let serial = tmp.path().join("ft-serial");
    ok(&["finetune", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--data", s(&data), "--task", "sc", "--out", s(&serial)]);
    assert_eq!(fs::read(out.join("runs.csv")).unwrap(), fs::read(serial.join("runs.csv")).unwrap());

    let one = tmp.path().join("ft-one");
    let base = ["finetune", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--data", s(&data), "--task", "sc", "--out", s(&one), "--seeds", "1"];
    assert!(!bplm(&base).status.success());
    let mut args = base.to_vec();
    args.push("--allow-nonstudy");
    ok(&args);
    let agg = csv_rows(&one.join("aggregate.csv"));
    assert_eq!(agg[0][7], "");
    assert!(!agg[0][8].is_empty());

    let report = ok(&["report", s(tmp.path())]);
    // Header plus one row each for the parallel, serial and single-seed runs.
    assert_eq!(report.lines().count(), 4);
}

#[test]
fn out_dir_defaults_to_env_root_and_config_name() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "named.toml", "preset = \"pfs-clm\"\n[train]\ntotal_steps = 2");
    let root = tmp.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_bplm"))
        .args(["pretrain", "--config", s(&cfg)])
        .env("BPLM_OUT_DIR", &root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("named/metrics.csv").exists());
}

#[test]
fn missing_files_fail_with_message() {
    let res = bplm(&["pretrain", "--config", "/nonexistent/config.toml"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).starts_with("error:"));
}
