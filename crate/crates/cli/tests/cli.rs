use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn lore(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lore"));
    cmd.args(args).env_remove("LORE_OUT");
    if let Some(dir) = env_out {
        cmd.env("LORE_OUT", dir);
    }
    cmd.output().expect("spawning lore")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_seed_7_passes_and_records_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = lore(&["gradcheck", "--seed", "7", "--out", s(dir.path())], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep = read_json(&dir.path().join("gradcheck.json"));
    assert!(rep["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert_eq!(rep["seed"], 7);
    assert!(rep["ops"].as_object().unwrap().len() > 20);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = lore(&["edit", "--no-such-flag"], None);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&lore(&["frobnicate"], None)), 1);
    assert_eq!(code(&lore(&["--help"], None)), 0);
}

#[test]
fn edit_defaults_show_in_the_resolved_config() {
    let o = lore(&["edit", "--dump-config", "-"], None);
    assert_eq!(code(&o), 0);
    let cfg: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(cfg["optim"]["lr"], 0.01);
    assert_eq!(cfg["optim"]["iterations"], 10);
    assert_eq!(cfg["schedule"]["steps"], 15);
    assert_eq!(cfg["schedule"]["guidance"], 2.0);
    assert_eq!(cfg["injection"], true);
}

#[test]
fn dumped_config_round_trips_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let args = ["edit", "--lr", "0.1", "--iters", "3", "--renoise", "--seed", "9", "--no-injection"];
    assert_eq!(code(&lore(&[&args[..], &["--dump-config", s(&a)]].concat(), None)), 0);
    assert_eq!(code(&lore(&["edit", "--config", s(&a), "--dump-config", s(&b)], None)), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let cfg = read_json(&a);
    assert_eq!(cfg["optim"]["lr"], 0.1);
    assert_eq!(cfg["optim"]["renoise"], true);
    assert_eq!(cfg["injection"], false);
    assert_eq!(cfg["bench"]["seed"], 9);

    let o = lore(&["edit", "--config", s(&a), "--seed", "4", "--dump-config", "-"], None);
    let over: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(over["seed"], 4);
    assert_eq!(over["optim"]["iterations"], 3);

    // A config belongs to one subcommand.
    assert_eq!(code(&lore(&["bench", "--config", s(&a)], None)), 1);
    std::fs::write(&b, "{\"subcommand\": \"edit\"}").unwrap();
    assert_eq!(code(&lore(&["edit", "--config", s(&b)], None)), 1);
}

#[test]
fn lore_out_sets_the_output_directory_unless_out_is_given() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&lore(&["gradcheck"], Some(env_dir.path()))), 0);
    assert!(env_dir.path().join("gradcheck.json").exists());
    assert!(env_dir.path().join("config.json").exists());
    assert_eq!(code(&lore(&["gradcheck", "--out", s(flag_dir.path())], Some(env_dir.path()))), 0);
    assert!(flag_dir.path().join("gradcheck.json").exists());
}

#[test]
fn failed_check_exits_2_and_missing_files_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("c.json");
    let o = lore(&["gradcheck", "--dump-config", "-"], None);
    let mut cfg: Value = serde_json::from_slice(&o.stdout).unwrap();
    cfg["gradcheck"]["threshold"] = 1e-30.into();
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let o = lore(&["gradcheck", "--config", s(&cfg_path), "--out", s(dir.path())], None);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("\"phase\":\"error\""));

    let o = lore(&["sample", "--model", "/nonexistent/model.lore", "--prompt", "black", "--out", s(dir.path())], None);
    assert_eq!(code(&o), 3);
}

/// Trains a throwaway model, then drives every model-based subcommand.
#[test]
fn end_to_end_on_a_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let train_out = root.join("train");
    let o = lore(
        &["train", "--train-steps", "3", "--batch", "2", "--gate-samples", "0", "--out", s(&train_out)],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let model: PathBuf = train_out.join("model.lore");
    assert!(model.exists());
    assert_eq!(read_json(&train_out.join("train_report.json"))["seed"], 0);

    let data = root.join("data");
    let o = lore(
        &["dataset-gen", "--suite", "pie-like", "--tasks", "2", "--seed", "3", "--out", s(&data)],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let line = std::fs::read_to_string(data.join("tasks.jsonl")).unwrap();
    let task: Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    let src = task["src_prompt"].as_str().unwrap().to_string();
    let tgt = task["tgt_prompt"].as_str().unwrap().to_string();
    let word = src
        .split_whitespace()
        .zip(tgt.split_whitespace())
        .find(|(a, b)| a != b)
        .map(|(_, b)| b.to_string())
        .unwrap();
    let image = data.join(task["image"].as_str().unwrap());
    let mask = data.join(task["mask"].as_str().unwrap());

    let edit = |out: &Path| {
        lore(
            &[
                "edit", "--model", s(&model), "--image", s(&image), "--mask", s(&mask), "--src-prompt", &src,
                "--tgt-prompt", &tgt, "--target-word", &word, "--iters", "2", "--steps", "3", "--seed", "5",
                "--out", s(out),
            ],
            None,
        )
    };
    let (e1, e2) = (root.join("e1"), root.join("e2"));
    for out in [&e1, &e2] {
        let o = edit(out);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["edited.ppm", "edit.json", "latent.lort"] {
        assert_eq!(std::fs::read(e1.join(f)).unwrap(), std::fs::read(e2.join(f)).unwrap(), "{f}");
    }
    let rep = read_json(&e1.join("edit.json"));
    assert_eq!(rep["seed"], 5);
    assert_eq!(rep["loss_trace"].as_array().unwrap().len(), 2);

    let tend = root.join("tend");
    let o = lore(
        &[
            "tendency", "--model", s(&model), "--image", s(&image), "--mask", s(&mask), "--src-prompt", &src,
            "--tgt-prompt", &tgt, "--target-word", &word, "--iters", "1", "--steps", "2", "--out", s(&tend),
        ],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let t = read_json(&tend.join("tendency.json"));
    for k in ["source_pre", "target_pre", "source_post", "target_post"] {
        let v = t[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
    assert_eq!(t["target_word"], word.as_str());
    let table = std::fs::read_to_string(tend.join("tendency.txt")).unwrap();
    assert!(table.contains("inverted") && table.contains("optimized"));
    for f in ["heat_inverted_source", "heat_inverted_target", "heat_optimized_source", "heat_optimized_target"] {
        assert!(tend.join(format!("{f}.ppm")).exists(), "{f}");
    }

    let inv = root.join("inv");
    let o = lore(
        &["invert", "--model", s(&model), "--image", s(&image), "--prompt", &src, "--steps", "2", "--out", s(&inv)],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(inv.join("latent.lort").exists() && inv.join("reconstruction.ppm").exists());

    let smp = root.join("smp");
    let o = lore(
        &["sample", "--model", s(&model), "--prompt", &src, "--count", "2", "--steps", "2", "--out", s(&smp)],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(smp.join("sample_001.ppm").exists());

    // A word missing from the target prompt is a usage error.
    let o = lore(
        &[
            "edit", "--model", s(&model), "--image", s(&image), "--mask", s(&mask), "--src-prompt", &src,
            "--tgt-prompt", &tgt, "--target-word", "bottom-right-nope", "--out", s(&e1),
        ],
        None,
    );
    assert_eq!(code(&o), 1);
    // A truncated image is an unreadable artifact.
    std::fs::write(root.join("bad.ppm"), b"P6\n2 2\n255\nxx").unwrap();
    let o = lore(
        &["invert", "--model", s(&model), "--image", s(&root.join("bad.ppm")), "--prompt", &src, "--out", s(&inv)],
        None,
    );
    assert_eq!(code(&o), 3);
}
