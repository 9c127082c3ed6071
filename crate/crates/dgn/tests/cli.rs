//! End-to-end pipeline tests through the compiled binary: exit codes,
//! output artifacts, and bit-level reproducibility of every stage.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dgn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgn"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn dgn")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn synth_writes_n_lines_and_is_seed_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dgn(
        &["synth", "--out", "a.jsonl", "--n", "100", "--seed", "5"],
        dir.path(),
    );
    assert_code(&out, 0);
    let a = fs::read_to_string(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a.lines().count(), 100);
    assert!(dir.path().join("a.jsonl.manifest.json").is_file());
    assert!(dir.path().join("run-config.txt").is_file());

    let out = dgn(
        &["synth", "--out", "b.jsonl", "--n", "100", "--seed", "5"],
        dir.path(),
    );
    assert_code(&out, 0);
    let b = fs::read_to_string(dir.path().join("b.jsonl")).unwrap();
    assert_eq!(a, b, "same seed must produce identical files");
}

#[test]
fn label_is_reproducible_and_k1_gives_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_code(
        &dgn(
            &["synth", "--out", "c.jsonl", "--n", "60", "--seed", "1"],
            dir.path(),
        ),
        0,
    );
    assert_code(
        &dgn(
            &["label", "--corpus", "c.jsonl", "--k", "3", "--seed", "2", "--out", "l1.jsonl"],
            dir.path(),
        ),
        0,
    );
    assert_code(
        &dgn(
            &["label", "--corpus", "c.jsonl", "--k", "3", "--seed", "2", "--out", "l2.jsonl"],
            dir.path(),
        ),
        0,
    );
    let l1 = fs::read_to_string(dir.path().join("l1.jsonl")).unwrap();
    let l2 = fs::read_to_string(dir.path().join("l2.jsonl")).unwrap();
    assert_eq!(l1, l2);
    assert!(dir.path().join("l1.jsonl.centroids.json").is_file());

    assert_code(
        &dgn(
            &["label", "--corpus", "c.jsonl", "--k", "1", "--out", "k1.jsonl"],
            dir.path(),
        ),
        0,
    );
    for line in fs::read_to_string(dir.path().join("k1.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for l in v["labels"].as_array().unwrap() {
            assert_eq!(l.as_u64(), Some(0));
        }
    }
}

#[test]
fn missing_files_exit_2_and_bad_data_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_code(&dgn(&["label", "--corpus", "nope.jsonl"], dir.path()), 2);
    assert_code(
        &dgn(
            &["train", "--corpus", "nope.jsonl", "--out", "o"],
            dir.path(),
        ),
        2,
    );
    assert_code(
        &dgn(
            &["eval", "--ckpt", "nope.ckpt", "--corpus", "nope.jsonl"],
            dir.path(),
        ),
        2,
    );

    // oversized k on a tiny corpus -> invalid data
    assert_code(
        &dgn(
            &["synth", "--out", "tiny.jsonl", "--n", "2", "--seed", "0"],
            dir.path(),
        ),
        0,
    );
    assert_code(
        &dgn(
            &["label", "--corpus", "tiny.jsonl", "--k", "999"],
            dir.path(),
        ),
        3,
    );

    // invalid config override -> exit 3
    assert_code(
        &dgn(
            &[
                "train",
                "--corpus",
                "tiny.jsonl",
                "--out",
                "o",
                "--set",
                "model.hidden=30",
                "--set",
                "model.n_head=4",
            ],
            dir.path(),
        ),
        3,
    );
}

#[test]
fn bad_thread_env_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dgn"))
        .args(["synth", "--out", "x.jsonl", "--n", "1"])
        .env("DGN_THREADS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_generate_eval_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    assert_code(
        &dgn(
            &["synth", "--out", "p.jsonl", "--n", "24", "--seed", "9"],
            dir.path(),
        ),
        0,
    );
    assert_code(&dgn(&["label", "--corpus", "p.jsonl"], dir.path()), 0);

    let small = [
        "--set",
        "model.hidden=16",
        "--set",
        "model.n_head=2",
        "--set",
        "model.n_struct_layers=1",
        "--set",
        "model.n_shared=1",
        "--set",
        "train.epochs=2",
    ];
    for run in ["r1", "r2"] {
        let mut args = vec!["train", "--corpus", "p.jsonl", "--out", run];
        args.extend_from_slice(&small);
        assert_code(&dgn(&args, dir.path()), 0);
    }
    let c1 = fs::read(dir.path().join("r1/model.ckpt")).unwrap();
    let c2 = fs::read(dir.path().join("r2/model.ckpt")).unwrap();
    assert_eq!(c1, c2, "training must be bit-reproducible");
    let m1 = fs::read_to_string(dir.path().join("r1/metrics.jsonl")).unwrap();
    let m2 = fs::read_to_string(dir.path().join("r2/metrics.jsonl")).unwrap();
    assert_eq!(m1, m2);
    assert!(dir.path().join("r1/run-config.txt").is_file());

    for out in ["g1.jsonl", "g2.jsonl"] {
        assert_code(
            &dgn(
                &[
                    "generate",
                    "--ckpt",
                    "r1/model.ckpt",
                    "--input",
                    "p.jsonl",
                    "--out",
                    out,
                ],
                dir.path(),
            ),
            0,
        );
    }
    let g1 = fs::read_to_string(dir.path().join("g1.jsonl")).unwrap();
    let g2 = fs::read_to_string(dir.path().join("g2.jsonl")).unwrap();
    assert_eq!(g1, g2, "generation must be deterministic given a checkpoint");
    let first: serde_json::Value = serde_json::from_str(g1.lines().next().unwrap()).unwrap();
    assert!(first["id"].is_string());
    assert!(first["structure"].is_array());
    assert!(first["text"].is_string());

    assert_code(
        &dgn(
            &[
                "eval",
                "--ckpt",
                "r1/model.ckpt",
                "--corpus",
                "p.jsonl",
                "--out",
                "report.json",
            ],
            dir.path(),
        ),
        0,
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let ppl = report["perplexity"].as_f64().unwrap();
    assert!(ppl.is_finite() && ppl > 1.0);
    let bleu = report["bleu"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&bleu));
    let rouge = report["rouge_l"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rouge));
}

#[test]
fn eval_of_untrained_model_is_near_uniform() {
    let dir = tempfile::tempdir().unwrap();
    assert_code(
        &dgn(
            &["synth", "--out", "u.jsonl", "--n", "16", "--seed", "3"],
            dir.path(),
        ),
        0,
    );
    assert_code(&dgn(&["label", "--corpus", "u.jsonl"], dir.path()), 0);
    assert_code(
        &dgn(
            &[
                "train",
                "--corpus",
                "u.jsonl",
                "--out",
                "u0",
                "--set",
                "model.hidden=16",
                "--set",
                "model.n_head=2",
                "--set",
                "model.n_struct_layers=1",
                "--set",
                "model.n_shared=1",
                "--set",
                "train.epochs=0",
            ],
            dir.path(),
        ),
        0,
    );
    assert_code(
        &dgn(
            &[
                "eval",
                "--ckpt",
                "u0/model.ckpt",
                "--corpus",
                "u.jsonl",
                "--out",
                "u0/report.json",
            ],
            dir.path(),
        ),
        0,
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("u0/report.json")).unwrap())
            .unwrap();
    let ppl = report["perplexity"].as_f64().unwrap();
    // corpus vocab: reserved tokens + ingredients + verbs + template words
    let vocab_size = {
        let text = fs::read_to_string(dir.path().join("u.jsonl")).unwrap();
        let mut set = std::collections::HashSet::new();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for s in v["steps"].as_array().unwrap() {
                for t in s.as_str().unwrap().split_whitespace() {
                    set.insert(t.to_lowercase());
                }
            }
            for t in v["ingredients"].as_array().unwrap() {
                set.insert(t.as_str().unwrap().to_lowercase());
            }
        }
        set.len() + 5
    } as f64;
    assert!(
        ppl > vocab_size / 2.0 && ppl < vocab_size * 2.0,
        "untrained ppl {ppl} should be within x2 of |V| ~ {vocab_size}"
    );
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dgn(&["gradcheck", "--hidden", "8", "--coords", "2"], dir.path());
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("max relative error"));
}
