//! End-to-end tests of the `takd` binary: exit codes, error messages
//! that name the fix, artifact layout, and byte-level determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn takd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_takd"))
}

fn run(args: &[&str]) -> Output {
    takd().args(args).output().expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A configuration small enough that a full pipeline stage takes seconds.
fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "seed = 5\n\
         \n\
         [data]\n\
         train_scenes = 2\n\
         eval_scenes = 2\n\
         \n\
         [schedule]\n\
         teacher_epochs = 2\n\
         ta_epochs = 1\n\
         student_epochs = 2\n\
         batch_size = 2\n",
    )
    .unwrap();
    path
}

#[test]
fn synth_twice_writes_byte_identical_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let (out_a, out_b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&out_a, &out_b] {
        let r = run(&[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "synth failed: {}", stderr_of(&r));
    }
    for name in ["train.takd", "eval.takd"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical synth runs");
        assert!(!a.is_empty());
    }
    // The resolved config is echoed alongside the datasets.
    assert!(out_a.join("config.toml").exists());
}

#[test]
fn different_seeds_give_different_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let (out_a, out_b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, seed) in [(&out_a, "5"), (&out_b, "6")] {
        let r = run(&[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "synth failed: {}", stderr_of(&r));
    }
    let a = std::fs::read(out_a.join("train.takd")).unwrap();
    let b = std::fs::read(out_b.join("train.takd")).unwrap();
    assert_ne!(a, b, "different seeds must synthesize different data");
}

#[test]
fn missing_dataset_exits_1_and_names_synth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let r = run(&[
        "train-teacher",
        "--config",
        cfg.to_str().unwrap(),
        "--data-dir",
        dir.path().join("nowhere").to_str().unwrap(),
        "--run-dir",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(1));
    let err = stderr_of(&r);
    assert!(err.contains("synth"), "message must name the fix: {err}");
}

#[test]
fn student_without_teacher_exits_1_and_names_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    let r = run(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "synth failed: {}", stderr_of(&r));
    let r = run(&[
        "train-student",
        "--config",
        cfg.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--run-dir",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(1));
    let err = stderr_of(&r);
    assert!(
        err.contains("teacher") && err.contains("run the teacher stage first"),
        "message must name the missing stage: {err}"
    );
}

#[test]
fn unknown_subcommand_exits_1() {
    let r = run(&["frobnicate"]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn invalid_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "definitely_not_a_key = 3\n").unwrap();
    let r = run(&["synth", "--config", path.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    // Out-of-range values are also rejected up front, with the field named.
    std::fs::write(&path, "[distill]\nkeep_quantile = 2.0\n").unwrap();
    let r = run(&["synth", "--config", path.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert!(stderr_of(&r).contains("keep_quantile"));
}

#[test]
fn full_pipeline_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    let base: Vec<String> = vec![
        "--config".into(),
        cfg.to_str().unwrap().into(),
        "--data-dir".into(),
        data.to_str().unwrap().into(),
        "--run-dir".into(),
        run_dir.to_str().unwrap().into(),
    ];
    let go = |cmd: &[&str]| {
        let mut args: Vec<String> = cmd.iter().map(|s| s.to_string()).collect();
        args.extend(base.iter().cloned());
        let r = takd().args(&args).output().expect("binary runs");
        assert!(
            r.status.success(),
            "{cmd:?} failed: {}",
            stderr_of(&r)
        );
        r
    };
    go(&["synth"]);
    go(&["train-teacher"]);
    go(&["train-ta"]);
    go(&["train-student", "--mode", "IMD+CMRD"]);
    let eval_out = go(&["eval", "--mode", "IMD+CMRD"]);
    go(&["export-heatmaps", "--scene", "1"]);

    for name in [
        "config.toml",
        "teacher.takd",
        "ta.takd",
        "student_imd_cmrd.takd",
        "teacher_metrics.tsv",
        "ta_metrics.tsv",
        "student_imd_cmrd_metrics.tsv",
        "eval_imd_cmrd.txt",
    ] {
        assert!(run_dir.join(name).exists(), "{name} missing");
    }
    let report = std::fs::read_to_string(run_dir.join("eval_imd_cmrd.txt")).unwrap();
    assert!(report.starts_with("takd-eval-report v1\n"));
    let stdout = String::from_utf8_lossy(&eval_out.stdout);
    assert!(stdout.contains("ap_3d = "), "eval must print the report: {stdout}");
    // Heatmaps for both the eval command's scene 0 and the explicit scene 1.
    let heat = run_dir.join("heatmaps");
    for stem in ["scene0_imd_cmrd", "scene1_imd_cmrd"] {
        for grid in ["f_t", "f_ta", "f_s1", "f_s2_star", "f_res", "f_s"] {
            let p = heat.join(format!("{stem}_{grid}.pgm"));
            assert!(p.exists(), "{} missing", p.display());
            let bytes = std::fs::read(&p).unwrap();
            assert!(bytes.starts_with(b"P5\n"), "{} is not a P5 PGM", p.display());
        }
    }
    // Metrics logs carry the documented 7 tab-separated columns.
    let log = std::fs::read_to_string(run_dir.join("teacher_metrics.tsv")).unwrap();
    assert!(log.lines().all(|l| l.split('\t').count() == 7));
}

#[test]
fn convergence_command_reports_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    let base: Vec<String> = vec![
        "--config".into(),
        cfg.to_str().unwrap().into(),
        "--data-dir".into(),
        data.to_str().unwrap().into(),
        "--run-dir".into(),
        run_dir.to_str().unwrap().into(),
    ];
    let go = |cmd: &[&str]| {
        let mut args: Vec<String> = cmd.iter().map(|s| s.to_string()).collect();
        args.extend(base.iter().cloned());
        let r = takd().args(&args).output().expect("binary runs");
        assert!(r.status.success(), "{cmd:?} failed: {}", stderr_of(&r));
        r
    };
    go(&["synth"]);
    go(&["train-teacher"]);
    go(&["train-ta"]);
    go(&["compare-convergence"]);
    let text = std::fs::read_to_string(run_dir.join("convergence.txt")).unwrap();
    assert!(text.starts_with("takd-convergence v1\n"));
    assert!(text.contains("imd_steps_to_half = "));
    assert!(text.contains("cmd_steps_to_half = "));
}

#[test]
fn ablate_subset_writes_reports_in_table_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    let base: Vec<String> = vec![
        "--config".into(),
        cfg.to_str().unwrap().into(),
        "--data-dir".into(),
        data.to_str().unwrap().into(),
        "--run-dir".into(),
        run_dir.to_str().unwrap().into(),
    ];
    let go = |cmd: &[&str]| {
        let mut args: Vec<String> = cmd.iter().map(|s| s.to_string()).collect();
        args.extend(base.iter().cloned());
        let r = takd().args(&args).output().expect("binary runs");
        assert!(r.status.success(), "{cmd:?} failed: {}", stderr_of(&r));
        r
    };
    go(&["synth"]);
    // Modes given out of order still land in settings order in the table.
    let out = go(&["ablate", "--modes", "IMD,baseline"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let table = std::fs::read_to_string(run_dir.join("ablation_summary.txt")).unwrap();
    assert!(stdout.contains(&table));
    let baseline_pos = table.find("baseline").unwrap();
    let imd_pos = table.find("\n3").map(|_| table.find(" IMD ").unwrap()).unwrap();
    assert!(baseline_pos < imd_pos, "table must order settings 1..5:\n{table}");
    assert!(run_dir.join("eval_baseline.txt").exists());
    assert!(run_dir.join("eval_imd.txt").exists());
    assert!(!run_dir.join("eval_cmd.txt").exists());
}
