//! End-to-end tests of the command-line interface and its exit codes.

use std::path::Path;
use std::process::Command;

const SMALL_CONFIG: &str = r#"
seed = 11
out_dir = "unused"
diagnostic_samples = 4
sweep_grid = [0.5]

[model]
enc_layers = 3
dec_layers = 3
d_model = 16
n_heads = 2
d_ffn = 32
vocab_size = 12
d_in = 4
max_src_len = 8
max_tgt_len = 6
conv_kernel = 3
seed = 7

[task]
seed = 5
n_train = 16
n_test = 8
t_min = 2
t_max = 3
vocab_size = 12
d_in = 4
frames_per_token = 2
sigma_clean = 0.3
sigma_other = 0.9

[train]
steps = 5
lr = 0.5
batch = 4
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prune-lab"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, SMALL_CONFIG).unwrap();
    path
}

fn run(args: &[&str]) -> std::process::Output {
    bin().args(args).output().unwrap()
}

fn run_ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_produces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    run_ok(&["--config", cfg, "--out", out_s, "--jobs", "1", "train"]);
    assert!(out.join("model.ckpt").exists());
    assert!(out.join("train.csv").exists());
    assert!(out.join("train.csv.meta.json").exists());

    run_ok(&["--config", cfg, "--out", out_s, "diagnose"]);
    let sens = std::fs::read_to_string(out.join("sensitivity.csv")).unwrap();
    assert!(sens.starts_with("module,split,"));
    // header plus encoder/decoder rows for each of the clean and other splits
    assert_eq!(sens.lines().count(), 5, "sensitivity rows:\n{sens}");

    run_ok(&["--config", cfg, "--out", out_s, "sweep", "--scope", "components"]);
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    // header + baseline + 9 component kinds at one grid point
    assert_eq!(sweep.lines().count(), 11, "sweep rows:\n{sweep}");
    assert!(out.join("sweep.json").exists());

    run_ok(&["--config", cfg, "--out", out_s, "compress", "--recipe"]);
    assert!(out.join("model_pruned.ckpt").exists());
    assert!(out.join("plan.toml").exists());
    let cost = std::fs::read_to_string(out.join("cost.csv")).unwrap();
    assert!(cost.starts_with("wer_pct,cer_pct,total_params,sparsity_pct,flops,sparse_size_bytes"));
    let rows: Vec<&str> = cost.lines().collect();
    assert_eq!(rows.len(), 3, "header plus baseline and pruned rows:\n{cost}");
    assert!(rows[1].split(',').nth(3) == Some("0.00"), "baseline sparsity is zero:\n{cost}");

    // the pruned checkpoint reloads and reproduces the reported WER exactly
    let pruned = prune_lab::model::Model::load_checkpoint(&out.join("model_pruned.ckpt")).unwrap();
    let task = prune_lab::task::generate(&prune_lab::task::TaskSpec {
        seed: 5,
        n_train: 16,
        n_test: 8,
        t_min: 2,
        t_max: 3,
        vocab_size: 12,
        d_in: 4,
        frames_per_token: 2,
        sigma_clean: 0.3,
        sigma_other: 0.9,
    })
    .unwrap();
    let rates =
        prune_lab::sensitivity::evaluate_split(&pruned, &task.test_other.items, 5).unwrap();
    assert_eq!(
        rows[2].split(',').next().unwrap(),
        format!("{:.2}", rates.wer_pct()),
        "reloaded pruned checkpoint reproduces the reported WER"
    );

    run_ok(&["--config", cfg, "--out", out_s, "report"]);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert!(report["artifacts"].as_array().unwrap().len() >= 4);
}

#[test]
fn greedy_compress_needs_sweep_then_respects_target() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    run_ok(&["--config", cfg, "--out", out_s, "train"]);
    // no sweep.json yet -> plan error
    let r = run(&["--config", cfg, "--out", out_s, "compress", "--target", "0.1"]);
    assert_eq!(r.status.code(), Some(5));
    run_ok(&["--config", cfg, "--out", out_s, "sweep", "--scope", "side"]);
    run_ok(&[
        "--config", cfg, "--out", out_s, "compress", "--target", "0.1", "--epsilon", "1000",
    ]);
    assert!(out.join("plan.toml").exists());
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seed = \"not a number\"").unwrap();
    let r = run(&["--config", path.to_str().unwrap(), "train"]);
    assert_eq!(r.status.code(), Some(2));
    // structurally valid TOML, semantically invalid model
    std::fs::write(&path, "[model]\nn_heads = 5\n").unwrap();
    let r = run(&["--config", path.to_str().unwrap(), "train"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn checkpoint_config_mismatch_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    run_ok(&["--config", cfg, "--out", out_s, "train"]);
    // same checkpoint, different model config
    let other = dir.path().join("other.toml");
    std::fs::write(&other, SMALL_CONFIG.replace("d_ffn = 32", "d_ffn = 48")).unwrap();
    let r = run(&["--config", other.to_str().unwrap(), "--out", out_s, "diagnose"]);
    assert_eq!(r.status.code(), Some(4));
    // missing checkpoint is also a checkpoint error
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let r = run(&["--config", cfg, "--out", empty.to_str().unwrap(), "diagnose"]);
    assert_eq!(r.status.code(), Some(4));
}

#[test]
fn report_hash_mismatch_exits_6() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    run_ok(&["--config", cfg, "--out", out_s, "train"]);
    run_ok(&["--config", cfg, "--out", out_s, "report"]);
    // tamper with the recorded config hash of one artifact
    let meta_path = out.join("train.csv.meta.json");
    let mut meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&meta_path).unwrap()).unwrap();
    meta["config_hash"] = serde_json::Value::String("0".repeat(64));
    std::fs::write(&meta_path, serde_json::to_vec(&meta).unwrap()).unwrap();
    // add a second artifact under the true hash so the directory is mixed
    let r = run(&["--config", cfg, "--out", out_s, "diagnose"]);
    assert!(r.status.success());
    let r = run(&["--config", cfg, "--out", out_s, "report"]);
    assert_eq!(r.status.code(), Some(6));
}
