use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn unirope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unirope")).args(args).env_remove("UNIROPE_SEED").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn metadata_line(text: &str) -> Value {
    let line = text.lines().find(|l| l.starts_with("# ")).expect("metadata header");
    serde_json::from_str(&line[2..]).expect("header is json")
}

/// A tiny model so that CLI runs stay fast.
fn write_small_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg.json");
    let text = format!(
        r#"{{"model": {{"d_model": 16, "n_modules": 1, "n_heads": 2, "d_state": 4, "chunk_len": 4, "max_position": 64}},
            "data": {{"seq_len": 16, "copy_alphabet": 4, "val_instances": 4}},
            "train": {{"batch_size": 2{extra}}}}}"#
    );
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn train_small(dir: &Path, name: &str, steps: usize, extra: &[&str]) -> (Output, std::path::PathBuf) {
    let cfg = write_small_config(dir, "");
    let out = dir.join(name);
    let steps = steps.to_string();
    let mut args = vec!["train", "--config", &cfg, "--steps", &steps, "--out", out.to_str().unwrap(), "--log-every", "0"];
    args.extend_from_slice(extra);
    (unirope(&args), out)
}

#[test]
fn verify_filter_runs_only_matching_properties() {
    let o = unirope(&["verify", "--filter", "ssd"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.split_whitespace().nth(1).unwrap().contains("ssd")), "{text}");
    assert_eq!(metadata_line(&text)["command"], "verify");
}

#[test]
fn verify_detects_injected_rotation_fault() {
    let o = unirope(&["verify", "--filter", "rope.shift_invariance", "--inject-sign-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL rope.shift_invariance"));
}

#[test]
fn verify_json_lists_instances_and_worst_error() {
    let o = unirope(&["verify", "--filter", "rope.norm", "--json"]);
    assert!(o.status.success());
    let doc: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let props = doc["properties"].as_array().unwrap();
    assert_eq!(props.len(), 1);
    assert!(props[0]["instances"].as_u64().unwrap() >= 100);
    assert!(props[0]["worst_error"].as_f64().unwrap() < 1e-12);
}

#[test]
fn unknown_filter_is_a_usage_error() {
    assert_eq!(unirope(&["verify", "--filter", "no-such-property"]).status.code(), Some(2));
}

#[test]
fn bad_flags_and_configs_exit_two() {
    assert_eq!(unirope(&["train"]).status.code(), Some(2));
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"model": {"d_modle": 3}}"#).unwrap();
    let o = unirope(&["train", "--config", bad.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("config"));
    let o = unirope(&["train", "--task", "jigsaw", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_steps_writes_init_checkpoint_and_empty_metrics() {
    let dir = TempDir::new().unwrap();
    let (o, out) = train_small(dir.path(), "r", 0, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("metrics.jsonl")).unwrap(), "");
    assert!(out.join("final.ckpt").exists());
    let meta: Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "train");
    assert_eq!(meta["fp_mode"], "fp64");
    assert_eq!(meta["config"]["model"]["d_model"], 16);
    assert!(meta["build_id"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));
}

#[test]
fn same_seed_gives_identical_metrics_and_echoed_config_reproduces() {
    let dir = TempDir::new().unwrap();
    let (a, out_a) = train_small(dir.path(), "a", 6, &["--seed", "5"]);
    let (b, out_b) = train_small(dir.path(), "b", 6, &["--seed", "5"]);
    assert!(a.status.success() && b.status.success());
    let log_a = fs::read(out_a.join("metrics.jsonl")).unwrap();
    assert_eq!(log_a, fs::read(out_b.join("metrics.jsonl")).unwrap());
    assert_eq!(String::from_utf8_lossy(&log_a).lines().count(), 6);

    // rerun from the echoed config alone
    let meta: Value = serde_json::from_str(&fs::read_to_string(out_a.join("run.json")).unwrap()).unwrap();
    let echoed = dir.path().join("echo.json");
    fs::write(&echoed, meta["config"].to_string()).unwrap();
    let out_c = dir.path().join("c");
    let c = unirope(&["train", "--config", echoed.to_str().unwrap(), "--out", out_c.to_str().unwrap(), "--log-every", "0"]);
    assert!(c.status.success(), "{}", stderr(&c));
    assert_eq!(log_a, fs::read(out_c.join("metrics.jsonl")).unwrap());
}

#[test]
fn seed_precedence_flag_then_file_then_env() {
    let dir = TempDir::new().unwrap();
    let run = |cfg: &str, flag: Option<&str>, env: Option<&str>| -> u64 {
        let out = dir.path().join("seed-run");
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_unirope"));
        cmd.args(["train", "--config", cfg, "--steps", "0", "--out", out.to_str().unwrap(), "--log-every", "0"]);
        cmd.env_remove("UNIROPE_SEED");
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        if let Some(e) = env {
            cmd.env("UNIROPE_SEED", e);
        }
        assert!(cmd.output().unwrap().status.success());
        let meta: Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
        meta["seed"].as_u64().unwrap()
    };
    let plain = write_small_config(dir.path(), "");
    assert_eq!(run(&plain, None, None), 1);
    assert_eq!(run(&plain, None, Some("9")), 9);
    assert_eq!(run(&plain, Some("4"), Some("9")), 4);
    let seeded = dir.path().join("seeded.json");
    fs::copy(write_small_config(dir.path(), r#", "seed": 7"#), &seeded).unwrap();
    assert_eq!(run(seeded.to_str().unwrap(), None, Some("9")), 7);
}

#[test]
fn periodic_checkpoints_are_written() {
    let dir = TempDir::new().unwrap();
    let (o, out) = train_small(dir.path(), "r", 4, &["--checkpoint-every", "2"]);
    assert!(o.status.success());
    assert!(out.join("checkpoint-000002.ckpt").exists());
    assert!(out.join("final.ckpt").exists());
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["validation_loss"].as_f64().unwrap().is_finite());
}

#[test]
fn generate_echoes_prompt_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (o, out) = train_small(dir.path(), "r", 2, &[]);
    assert!(o.status.success());
    let ckpt = out.join("final.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let echo = unirope(&["generate", "--checkpoint", ckpt, "--prompt", "ab|", "--n", "0"]);
    assert!(echo.status.success(), "{}", stderr(&echo));
    assert_eq!(stdout(&echo), "ab|\n");
    assert_eq!(metadata_line(&stderr(&echo))["command"], "generate");

    let g1 = unirope(&["generate", "--checkpoint", ckpt, "--prompt", "ab|", "--n", "6", "--temperature", "0"]);
    let g2 = unirope(&["generate", "--checkpoint", ckpt, "--prompt", "ab|", "--n", "6", "--temperature", "0"]);
    assert!(g1.status.success());
    assert_eq!(g1.stdout, g2.stdout);
    assert!(stdout(&g1).starts_with("ab|"));
}

#[test]
fn generate_trace_shows_constant_ss_and_linear_sa_cache() {
    let dir = TempDir::new().unwrap();
    let (_, out) = train_small(dir.path(), "r", 0, &[]);
    let o = unirope(&["generate", "--checkpoint", out.join("final.ckpt").to_str().unwrap(), "--prompt", "x", "--n", "8", "--trace"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<Value> =
        stderr(&o).lines().filter(|l| l.starts_with('{')).map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 8);
    let ss: Vec<u64> = rows.iter().map(|r| r["ss_bytes"].as_u64().unwrap()).collect();
    let sa: Vec<u64> = rows.iter().map(|r| r["sa_bytes"].as_u64().unwrap()).collect();
    assert!(ss.iter().all(|&b| b == ss[0] && b > 0));
    let step = sa[1] - sa[0];
    assert!(step > 0);
    assert!(sa.windows(2).all(|w| w[1] - w[0] == step));
}

#[test]
fn generate_rejects_mismatched_config_and_bad_checkpoint() {
    let dir = TempDir::new().unwrap();
    let (_, out) = train_small(dir.path(), "r", 0, &[]);
    let ckpt = out.join("final.ckpt");
    let other = dir.path().join("other.json");
    fs::write(&other, r#"{"model": {"d_model": 32}}"#).unwrap();
    let o = unirope(&["generate", "--checkpoint", ckpt.to_str().unwrap(), "--prompt", "a", "--config", other.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = unirope(&["generate", "--checkpoint", junk.to_str().unwrap(), "--prompt", "a"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint"));
}

#[test]
fn bench_single_length_has_rows_but_no_slopes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("b");
    let o = unirope(&["bench", "--lengths", "32", "--json", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let records = doc["records"].as_array().unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r["T"] == 32 && r["iters"].as_u64().unwrap() >= 5));
    assert!(doc["slopes"].as_array().unwrap().is_empty());
    assert_eq!(doc["metadata"]["workers"], 1);

    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    let body: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body[0], "mode,T,batch,median_secs,tokens_per_sec,fp_mode,backward,iters,workers");
    assert_eq!(body.len(), 5);
}

#[test]
fn bench_fp32_and_slopes() {
    let o = unirope(&["bench", "--lengths", "32,64", "--modes", "ssd-chunked", "--fp32"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(metadata_line(&text)["fp_mode"], "fp32");
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("ssd-chunked")).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|l| l.contains(",fp32,false,")));
    assert!(stderr(&o).contains("slope ssd-chunked"));

    // gradients are timed in fp64 and the rows say so
    let o = unirope(&["bench", "--lengths", "32", "--modes", "ssd-chunked", "--fp32", "--backward"]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().any(|l| l.starts_with("ssd-chunked,32,1,") && l.contains(",fp64,true,")));
}

#[test]
fn bench_rejects_unordered_lengths_and_oversize_runs() {
    assert_eq!(unirope(&["bench", "--lengths", "64,32"]).status.code(), Some(2));
    let o = unirope(&["bench", "--lengths", "100000000", "--modes", "attention-full"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("GiB"));
}
