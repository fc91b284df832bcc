#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

/// About 320k parameters; 64×64 images become 4 visual tokens.
pub fn smoke_model() -> Value {
    json!({
        "vocab_size": 260, "d_model": 64, "n_layers_enc": 2, "n_layers_dec": 2, "n_heads": 4, "n_kv_heads": 2,
        "head_dim": 16, "mlp_hidden": 128, "patch_size": 16, "merge_factor": 2, "max_image_side": 64,
        "mtp_enabled": true, "mtp_weight": 0.1
    })
}

pub fn exms(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exms")).args(args).output().expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn write_json(path: &Path, v: &Value) -> PathBuf {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_path_buf()
}

/// Runs `gen-data` for a default counting dataset of `n` records into
/// `dir/name` and returns the JSONL path.
pub fn gen_data(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let cfg = write_json(&dir.join(format!("{name}.json")), &json!({"counting": {"n": n, "seed": seed}}));
    let out = dir.join(name);
    let o = exms(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "gen-data failed: {}", stderr(&o));
    out.join("dataset.jsonl")
}

/// A training config; `extra_data` and `extra_train` are merged into the
/// `data` and `train` sections.
pub fn train_config(
    seed: u64,
    objective: &str,
    train: &Path,
    out_dir: &Path,
    steps: usize,
    extra_data: Value,
    extra_train: Value,
) -> Value {
    let mut data = json!({"train": train});
    let mut tr = json!({"steps": steps, "batch_size": 4, "learning_rate": 0.003, "out_dir": out_dir});
    for (target, extra) in [(&mut data, extra_data), (&mut tr, extra_train)] {
        if let Value::Object(m) = extra {
            target.as_object_mut().unwrap().extend(m);
        }
    }
    json!({"seed": seed, "objective": objective, "model": smoke_model(), "data": data, "train": tr})
}

pub fn train(dir: &Path, name: &str, cfg: &Value) -> Output {
    let path = write_json(&dir.join(format!("{name}.json")), cfg);
    exms(&["train", "--config", path.to_str().unwrap()])
}

pub fn metrics(out_dir: &Path) -> Vec<Value> {
    std::fs::read_to_string(out_dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
