#![allow(dead_code)]

use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use swp_core::slimnet::{linear_ratio_grid, SupernetSpec};

pub fn tiny_spec() -> SupernetSpec {
    SupernetSpec::six_layer([1, 8, 8], [4, 4, 6], 3, linear_ratio_grid(0.25, 4))
}

pub fn train_section(epochs: usize) -> Value {
    json!({
        "epochs": epochs,
        "batch_size": 16,
        "lr": 0.02,
        "lr_decay": 1.0,
        "decay_epochs": 1,
        "momentum": 0.9,
        "weight_decay": 0.0003,
        "random_subnets": 1,
        "tinynet": true,
        "distill_weight": 1.0,
        "clip_norm": 2.0
    })
}

pub fn ea_section() -> Value {
    json!({
        "population": 16,
        "top_k": 4,
        "mutation_prob": 0.2,
        "iterations": 3,
        "mutations": 8,
        "crossovers": 8
    })
}

/// A small complete config as JSON.
pub fn tiny_config(out: &Path) -> Value {
    json!({
        "seed": 7,
        "spec": { "inline": serde_json::to_value(tiny_spec()).unwrap() },
        "dataset": {
            "source": { "synth": {
                "n": 96, "size": 8, "classes": 3, "noise": 0.1,
                "distractor": 0.0, "jitter": 0, "pattern": "blobs", "prototypes": 1
            } },
            "val_per_class": 8
        },
        "train": train_section(2),
        "retrain": train_section(3),
        "search": { "stage": ea_section(), "manager": ea_section(), "parallel": false, "feature_examples": 32 },
        "budget": null,
        "cost_table": null,
        "out": out
    })
}

pub fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(value).unwrap()).unwrap();
    p
}

pub fn swp(args: &[&str]) -> i32 {
    let mut full = vec!["swp"];
    full.extend_from_slice(args);
    swp::cli::run(full)
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
