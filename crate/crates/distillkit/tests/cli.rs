//! End-to-end CLI tests over temporary directories.

use std::fs;
use std::path::Path;

use distillkit::cli::run;
use distillkit::checkpoint::{load_checkpoint, save_checkpoint};
use distillkit_core::encoder::{EncoderConfig, ModelState, Variant};

fn args(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn tiny_student_json(vocab_size: usize) -> serde_json::Value {
    serde_json::json!({
        "num_layers": 1,
        "hidden_dim": 16,
        "embed_dim": 16,
        "num_heads": 2,
        "ffn_expansion": 2,
        "vocab_size": vocab_size,
        "max_position": 64,
        "variant": "standard",
    })
}

#[test]
fn synth_build_vocab_pretrain_finetune_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    // synth
    let code = run(&args(&[
        "synth",
        "--preset",
        "biomedical",
        "--sentences",
        "120",
        "--holdout",
        "0.2",
        "--seed",
        "5",
        "--out-dir",
        data.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    assert!(data.join("corpus.txt").exists());
    assert!(data.join("corpus.conll").exists());
    assert!(data.join("heldout.txt").exists());
    assert!(data.join("manifest.json").exists());

    // build-vocab
    let vocab_path = root.join("vocab.txt");
    let code = run(&args(&[
        "build-vocab",
        "--corpus",
        data.join("corpus.txt").to_str().unwrap(),
        "--size",
        "192",
        "--out",
        vocab_path.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let vocab_lines = fs::read_to_string(&vocab_path).unwrap().lines().count();
    assert!(vocab_lines <= 192 && vocab_lines > 60);

    // pretrain a tiny model for a handful of steps
    let out_pre = root.join("pretrain");
    let config = serde_json::json!({
        "run": {
            "mode": "pretrain_mlm",
            "steps": 8,
            "epochs": 0,
            "batch_size": 2,
            "learning_rate": 1e-3,
            "warmup_fraction": 0.1,
            "seed": 3,
            "eval_every": 4,
            "max_len": 16,
            "dropout": 0.1,
            "grad_clip": 1.0,
            "weight_decay": 0.01,
            "mask_policy": {"select_rate": 0.15, "mask_prob": 0.8, "random_prob": 0.2, "keep_prob": 0.0}
        },
        "vocab": vocab_path.to_str().unwrap(),
        "student": tiny_student_json(vocab_lines),
        "corpus": data.join("corpus.txt").to_str().unwrap(),
        "heldout": data.join("heldout.txt").to_str().unwrap(),
        "output_dir": out_pre.to_str().unwrap(),
    });
    let cfg_path = root.join("pretrain.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let code = run(&args(&["pretrain", "--config", cfg_path.to_str().unwrap()]));
    assert_eq!(code, 0);
    assert!(out_pre.join("final.ckpt").exists());
    assert!(out_pre.join("final.ckpt.bin").exists());
    assert!(out_pre.join("train_report.csv").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_pre.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "pretrain");
    assert!(manifest["artifacts"].as_array().unwrap().len() >= 3);
    let csv = fs::read_to_string(out_pre.join("train_report.csv")).unwrap();
    assert!(csv.starts_with("step,loss,accuracy,ms_per_step"));

    // finetune on the synthetic NER annotations
    let out_ft = root.join("finetune");
    let config = serde_json::json!({
        "run": {
            "mode": "finetune_token",
            "steps": 0,
            "epochs": 1,
            "batch_size": 4,
            "learning_rate": 5e-4,
            "warmup_fraction": 0.1,
            "seed": 3,
            "eval_every": 10,
            "max_len": 16,
            "dropout": 0.0,
            "grad_clip": 1.0,
            "weight_decay": 0.01,
            "mask_policy": {"select_rate": 0.15, "mask_prob": 0.8, "random_prob": 0.2, "keep_prob": 0.0}
        },
        "vocab": vocab_path.to_str().unwrap(),
        "init_checkpoint": out_pre.join("final.ckpt").to_str().unwrap(),
        "dataset": data.join("corpus.conll").to_str().unwrap(),
        "output_dir": out_ft.to_str().unwrap(),
    });
    let cfg_path = root.join("finetune.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let code = run(&args(&["finetune", "--config", cfg_path.to_str().unwrap()]));
    assert_eq!(code, 0);
    let tuned = load_checkpoint(&out_ft.join("final.ckpt")).unwrap();
    assert!(tuned.task_labels.is_some());

    // eval the fine-tuned checkpoint on the held-out annotations
    let out_eval = root.join("eval");
    let code = run(&args(&[
        "eval",
        "--task",
        "ner",
        "--checkpoint",
        out_ft.join("final.ckpt").to_str().unwrap(),
        "--data",
        data.join("heldout.conll").to_str().unwrap(),
        "--vocab",
        vocab_path.to_str().unwrap(),
        "--max-len",
        "16",
        "--out-dir",
        out_eval.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_eval.join("ner.json")).unwrap()).unwrap();
    for key in ["precision", "recall", "f1"] {
        let v = metrics[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    // inspect
    let code = run(&args(&[
        "inspect",
        "--checkpoint",
        out_ft.join("final.ckpt").to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
}

#[test]
fn distill_subcommand_with_override_runs_requested_suite() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    assert_eq!(
        run(&args(&[
            "synth",
            "--preset",
            "general",
            "--sentences",
            "80",
            "--holdout",
            "0.0",
            "--seed",
            "9",
            "--out-dir",
            data.to_str().unwrap(),
        ])),
        0
    );
    let vocab_path = root.join("vocab.txt");
    assert_eq!(
        run(&args(&[
            "build-vocab",
            "--corpus",
            data.join("corpus.txt").to_str().unwrap(),
            "--size",
            "160",
            "--out",
            vocab_path.to_str().unwrap(),
        ])),
        0
    );
    let vocab_lines = fs::read_to_string(&vocab_path).unwrap().lines().count();

    // teacher checkpoint written directly
    let teacher_cfg = EncoderConfig {
        num_layers: 2,
        hidden_dim: 16,
        embed_dim: 16,
        num_heads: 2,
        ffn_expansion: 2,
        vocab_size: vocab_lines,
        max_position: 64,
        variant: Variant::Standard,
        bottleneck_dim: 0,
        num_ffn_blocks: 1,
        conv_kernel: 3,
    };
    let teacher = ModelState::init(&teacher_cfg, 8).unwrap();
    let teacher_path = root.join("teacher.ckpt");
    save_checkpoint(&teacher_path, &teacher).unwrap();

    let out = root.join("distill");
    let config = serde_json::json!({
        "run": {
            "mode": "distill",
            "steps": 6,
            "epochs": 0,
            "batch_size": 2,
            "learning_rate": 1e-3,
            "warmup_fraction": 0.1,
            "seed": 4,
            "eval_every": 3,
            "max_len": 16,
            "dropout": 0.1,
            "grad_clip": 1.0,
            "weight_decay": 0.01,
            "mask_policy": {"select_rate": 0.15, "mask_prob": 0.8, "random_prob": 0.2, "keep_prob": 0.0}
        },
        "vocab": vocab_path.to_str().unwrap(),
        "student": tiny_student_json(vocab_lines),
        "teacher_checkpoint": teacher_path.to_str().unwrap(),
        "plan": { "suite": "distil_triple" },
        "corpus": data.join("corpus.txt").to_str().unwrap(),
        "output_dir": out.to_str().unwrap(),
    });
    let cfg_path = root.join("distill.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    // override the suite from the command line
    let code = run(&args(&[
        "distill",
        "--config",
        cfg_path.to_str().unwrap(),
        "--set",
        "plan.suite=tiny_layerwise",
        "--set",
        "run.steps=4",
    ]));
    assert_eq!(code, 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["resolved_config"]["plan"]["suite"], "tiny_layerwise");
    assert_eq!(manifest["resolved_config"]["run"]["steps"], 4);
    assert!(out.join("final.ckpt").exists());
}

#[test]
fn qa_eval_scores_ranked_answers() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("qa.tsv");
    fs::write(&pred, "x\tx|a|b\ny\ta|y\nz\ta|b\n").unwrap();
    let out = dir.path().join("out");
    let code = run(&args(&[
        "eval",
        "--task",
        "qa",
        "--pred",
        pred.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("qa.json")).unwrap()).unwrap();
    assert!((metrics["strict_acc"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!((metrics["lenient_acc"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!((metrics["mrr"].as_f64().unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn missing_config_file_is_a_usage_error_naming_the_path() {
    let code = run(&args(&["distill", "--config", "/nonexistent/run.json"]));
    assert_eq!(code, 1);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(run(&args(&["frobnicate"])), 1);
}

#[test]
fn thread_cap_env_is_validated() {
    // Serialize around the env var: this test owns it briefly.
    std::env::set_var("DISTILLKIT_THREADS", "0");
    let code = run(&args(&["inspect", "--checkpoint", "/nonexistent.ckpt"]));
    std::env::remove_var("DISTILLKIT_THREADS");
    assert_eq!(code, 1);
}

#[test]
fn bench_rejects_low_reps_and_runs_small() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    assert_eq!(
        run(&args(&["bench", "--reps", "2", "--out-dir", out.to_str().unwrap()])),
        1,
        "reps below the minimum must be rejected"
    );
    assert!(!Path::new(&out).join("bench.csv").exists());
}
