#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn s5(args: &[&str]) -> Output {
    s5_env(args, &[])
}

pub fn s5_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_s5"));
    cmd.args(args).env_remove("S5_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("s5 binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Run and require success, echoing stderr on failure.
pub fn ok(args: &[&str]) -> Output {
    let out = s5(args);
    assert!(
        out.status.success(),
        "s5 {} failed with {:?}\n{}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Small corpus and model so each command finishes in well under a second.
pub fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "model": {
            "image_size": 16, "patch_size": 4, "embed_dim": 8, "ffn_hidden": 16,
            "depth": 1, "heads": 2, "num_classes": 4
        },
        "corpus": {
            "labeled": 6, "val": 2, "unlabeled_clean": 8, "unlabeled_ood": 2, "styles": 2,
            "scene": { "image_size": 16 }
        },
        "curation": { "clusters": 2 },
        "pretrain": { "steps": 4, "batch_labeled": 2, "batch_unlabeled": 2, "warmup": 1, "eval_every": 2 },
        "finetune": { "train": { "steps": 4, "batch_labeled": 2, "warmup": 1, "eval_every": 0 } }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

/// Every regular file below `root`, keyed by relative path.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// The six pipeline commands: gen-synth, pretrain (supervised, then
/// semi-supervised on the curated pool), infer, curate, finetune and eval.
pub fn pipeline(dir: &Path, config: &Path, seed: u64, workers: usize, budget: usize) {
    let seed = seed.to_string();
    let workers = workers.to_string();
    let common = ["--seed", seed.as_str(), "--workers", workers.as_str(), "--config", p(config)];
    let run = |args: &[&str]| {
        let mut all = args.to_vec();
        all.extend_from_slice(&common);
        ok(&all);
    };
    let corpus = dir.join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    let labeled = corpus.join("labeled.jsonl");
    let clean = corpus.join("unlabeled.jsonl");
    let ood = corpus.join("ood.jsonl");
    run(&["gen-synth", "--out", p(&corpus)]);
    let init = dir.join("init.s5ck");
    run(&["pretrain", "--labeled", p(&labeled), "--out", p(&init)]);
    let (inf_l, inf_u) = (dir.join("infer_labeled"), dir.join("infer_pool"));
    run(&["infer", "--ckpt", p(&init), "--manifest", p(&labeled), "--out", p(&inf_l)]);
    let pool = corpus.join("pool.jsonl");
    let mut text = std::fs::read_to_string(&clean).unwrap();
    text.push_str(&std::fs::read_to_string(&ood).unwrap());
    std::fs::write(&pool, text).unwrap();
    run(&["infer", "--ckpt", p(&init), "--manifest", p(&pool), "--out", p(&inf_u)]);
    let curated = dir.join("curated.jsonl");
    let budget = budget.to_string();
    run(&[
        "curate",
        "--labeled",
        p(&labeled),
        "--unlabeled",
        p(&pool),
        "--labeled-infer",
        p(&inf_l),
        "--unlabeled-infer",
        p(&inf_u),
        "--out",
        p(&curated),
        "--report",
        p(&dir.join("curation_report.json")),
        "--budget",
        &budget,
    ]);
    let s4 = dir.join("s4.s5ck");
    run(&["pretrain", "--labeled", p(&labeled), "--unlabeled", p(&curated), "--init", p(&init), "--out", p(&s4)]);
    let ft = dir.join("finetuned");
    run(&[
        "finetune",
        "--init",
        p(&s4),
        "--datasets",
        p(&corpus.join("datasets.json")),
        "--regime",
        "moe-mdf",
        "--out",
        p(&ft),
    ]);
    run(&[
        "eval",
        "--model",
        p(&ft),
        "--datasets",
        p(&corpus.join("datasets.json")),
        "--out",
        p(&dir.join("eval.json")),
    ]);
}
