//! `takd` — command-line driver for the distillation pipeline.
//!
//! Subcommands: `synth`, `train-teacher`, `train-ta`, `train-student`,
//! `eval`, `ablate`, `compare-convergence`, `export-heatmaps`.
//!
//! Every command resolves one [`RunConfig`] (defaults, then `--config`,
//! then flag overrides), validates it before doing any work, and echoes
//! the resolved config into the directory it writes. Exit codes: 0 on
//! success, 1 on validation errors (bad config, bad flags, missing
//! dependency artifacts), 2 on runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use takd_core::config::RunConfig;
use takd_core::container::Container;
use takd_core::error::Error;
use takd_core::heatmap::export_scene_heatmaps;
use takd_core::models::Geometry;
use takd_core::synthdata::{build_dataset, Dataset};
use takd_core::train::{
    convergence_compare, evaluate, load_student, load_ta, load_teacher, run_ablation,
    train_student, train_ta, train_teacher, Stage, TrainMode, TrainOutcome,
};
use takd_core::Result;

#[derive(Parser)]
#[command(
    name = "takd",
    version,
    about = "Teaching-assistant knowledge distillation for monocular 3D detection"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,

    /// Run-configuration TOML file; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Dataset directory override.
    #[arg(long, global = true, value_name = "DIR")]
    data_dir: Option<PathBuf>,

    /// Run (output) directory override.
    #[arg(long, global = true, value_name = "DIR")]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the training and evaluation datasets.
    Synth {
        /// Directory for the dataset files (overrides the config data dir).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train the LiDAR teacher on ground truth.
    TrainTeacher,
    /// Train the camera + true-depth teaching assistant on ground truth.
    TrainTa,
    /// Train a student under one ablation mode (default: the config's mode).
    TrainStudent {
        /// One of: baseline, CMD, IMD, IMD+CMD, IMD+CMRD.
        #[arg(long, value_name = "MODE")]
        mode: Option<String>,
    },
    /// Evaluate a trained student and export its BEV heatmaps.
    Eval {
        /// Which trained student to evaluate (default: the config's mode).
        #[arg(long, value_name = "MODE")]
        mode: Option<String>,
    },
    /// Train and evaluate students across ablation modes, with a summary
    /// table ordered as settings 1–5.
    Ablate {
        /// Comma-separated subset of modes (default: all five).
        #[arg(long, value_name = "MODES")]
        modes: Option<String>,
    },
    /// Train IMD and CMD students from identical seeds and report each
    /// mode's steps until its distillation loss halves.
    CompareConvergence,
    /// Export the six BEV heatmaps for one evaluation scene.
    ExportHeatmaps {
        /// Evaluation-scene index.
        #[arg(long, default_value_t = 0, value_name = "K")]
        scene: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage/validation error.
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_class(&e))
        }
    }
}

/// 1 for validation failures the user fixes before any work happens,
/// 2 for failures during the work itself.
fn exit_class(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidSpec(_) | Error::MissingCheckpoint { .. } => 1,
        _ => 2,
    }
}

/// The resolved configuration plus the directories every command uses.
struct Ctx {
    rc: RunConfig,
    geo: Geometry,
}

impl Ctx {
    fn resolve(cli: &Cli) -> Result<Self> {
        let mut rc = match &cli.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            rc.seed = seed;
        }
        if let Some(dir) = &cli.data_dir {
            rc.paths.data_dir = dir.display().to_string();
        }
        if let Some(dir) = &cli.run_dir {
            rc.paths.run_dir = dir.display().to_string();
        }
        rc.validate()?;
        let geo = rc.geometry()?;
        Ok(Self { rc, geo })
    }

    fn data_dir(&self) -> PathBuf {
        PathBuf::from(&self.rc.paths.data_dir)
    }

    fn run_dir(&self) -> PathBuf {
        PathBuf::from(&self.rc.paths.run_dir)
    }

    fn train_data_path(&self) -> PathBuf {
        self.data_dir().join("train.takd")
    }

    fn eval_data_path(&self) -> PathBuf {
        self.data_dir().join("eval.takd")
    }

    fn checkpoint(&self, stage: Stage, mode: Option<TrainMode>) -> PathBuf {
        let name = match (stage, mode) {
            (Stage::Student, Some(m)) => format!("student_{}.takd", m.slug()),
            (stage, _) => format!("{}.takd", stage.name()),
        };
        self.run_dir().join(name)
    }

    /// Writes the resolved configuration next to a command's outputs so
    /// every artifact directory is self-describing.
    fn echo_config(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.rc.canonical_toml())?;
        Ok(())
    }

    fn load_dataset(&self, path: &Path) -> Result<Dataset> {
        if !path.exists() {
            return Err(Error::Config(format!(
                "missing dataset {}: run the synth stage first",
                path.display()
            )));
        }
        Dataset::from_container(&Container::read_from(path)?)
    }

    fn student_mode(&self, flag: &Option<String>) -> Result<TrainMode> {
        match flag {
            Some(text) => TrainMode::parse(text),
            None => TrainMode::parse(&self.rc.schedule.mode),
        }
    }
}

fn write_metrics(outcome: &TrainOutcome, path: &Path) -> Result<()> {
    outcome.write_metrics_log(path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::resolve(&cli)?;
    match &cli.cmd {
        Cmd::Synth { out } => synth(&ctx, out.as_deref()),
        Cmd::TrainTeacher => cmd_train_teacher(&ctx),
        Cmd::TrainTa => cmd_train_ta(&ctx),
        Cmd::TrainStudent { mode } => cmd_train_student(&ctx, ctx.student_mode(mode)?),
        Cmd::Eval { mode } => cmd_eval(&ctx, ctx.student_mode(mode)?),
        Cmd::Ablate { modes } => cmd_ablate(&ctx, modes.as_deref()),
        Cmd::CompareConvergence => cmd_compare_convergence(&ctx),
        Cmd::ExportHeatmaps { scene } => cmd_export_heatmaps(&ctx, *scene),
    }
}

fn synth(ctx: &Ctx, out: Option<&Path>) -> Result<()> {
    let dir = out.map_or_else(|| ctx.data_dir(), Path::to_path_buf);
    ctx.echo_config(&dir)?;
    let spec = ctx.rc.synth_spec(&ctx.geo.calib);
    let n_train = ctx.rc.data.train_scenes;
    let n_eval = ctx.rc.data.eval_scenes;
    // The evaluation split starts its per-scene seeds after the training
    // split, so the two never share randomness.
    let train = build_dataset(&spec, n_train, ctx.rc.seed, 0)?;
    let eval_set = build_dataset(&spec, n_eval, ctx.rc.seed, n_train as u64)?;
    for (name, ds) in [("train.takd", &train), ("eval.takd", &eval_set)] {
        let path = dir.join(name);
        ds.to_container().write_to(&path)?;
        println!("wrote {} ({} scenes)", path.display(), ds.samples.len());
    }
    Ok(())
}

fn cmd_train_teacher(ctx: &Ctx) -> Result<()> {
    let data = ctx.load_dataset(&ctx.train_data_path())?;
    let run_dir = ctx.run_dir();
    ctx.echo_config(&run_dir)?;
    let (model, outcome) = train_teacher(&ctx.rc, &data, &ctx.geo)?;
    let ckpt = ctx.checkpoint(Stage::Teacher, None);
    model.params.save_checkpoint(&ckpt, ctx.rc.digest())?;
    println!("wrote {}", ckpt.display());
    write_metrics(&outcome, &run_dir.join("teacher_metrics.tsv"))?;
    let last = outcome.curve.last().expect("at least one step");
    println!("teacher trained: {} steps, final loss {:.6}", outcome.curve.len(), last.l_total);
    Ok(())
}

fn cmd_train_ta(ctx: &Ctx) -> Result<()> {
    let data = ctx.load_dataset(&ctx.train_data_path())?;
    let run_dir = ctx.run_dir();
    ctx.echo_config(&run_dir)?;
    let (model, outcome) = train_ta(&ctx.rc, &data, &ctx.geo)?;
    let ckpt = ctx.checkpoint(Stage::Ta, None);
    model.params.save_checkpoint(&ckpt, ctx.rc.digest())?;
    println!("wrote {}", ckpt.display());
    write_metrics(&outcome, &run_dir.join("ta_metrics.tsv"))?;
    let last = outcome.curve.last().expect("at least one step");
    println!("assistant trained: {} steps, final loss {:.6}", outcome.curve.len(), last.l_total);
    Ok(())
}

fn cmd_train_student(ctx: &Ctx, mode: TrainMode) -> Result<()> {
    let data = ctx.load_dataset(&ctx.train_data_path())?;
    let teacher = load_teacher(&ctx.rc, &ctx.geo, &ctx.checkpoint(Stage::Teacher, None))?;
    let ta = load_ta(&ctx.rc, &ctx.geo, &ctx.checkpoint(Stage::Ta, None))?;
    let run_dir = ctx.run_dir();
    ctx.echo_config(&run_dir)?;
    let (model, outcome) = train_student(&ctx.rc, &data, &ctx.geo, &teacher, &ta, mode)?;
    let ckpt = ctx.checkpoint(Stage::Student, Some(mode));
    model.params.save_checkpoint(&ckpt, ctx.rc.digest())?;
    println!("wrote {}", ckpt.display());
    write_metrics(&outcome, &run_dir.join(format!("student_{}_metrics.tsv", mode.slug())))?;
    let last = outcome.curve.last().expect("at least one step");
    println!(
        "student [{mode}] trained: {} steps, final loss {:.6}",
        outcome.curve.len(),
        last.l_total
    );
    Ok(())
}

/// Pulls the per-step total-loss column out of a student metrics log, if
/// one exists, so the eval report can carry the training curve.
fn curve_from_metrics(path: &Path) -> Vec<f64> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .filter_map(|line| line.split('\t').nth(6)?.parse().ok())
        .collect()
}

fn cmd_eval(ctx: &Ctx, mode: TrainMode) -> Result<()> {
    let data = ctx.load_dataset(&ctx.eval_data_path())?;
    let teacher = load_teacher(&ctx.rc, &ctx.geo, &ctx.checkpoint(Stage::Teacher, None))?;
    let ta = load_ta(&ctx.rc, &ctx.geo, &ctx.checkpoint(Stage::Ta, None))?;
    let student = load_student(&ctx.rc, &ctx.geo, &ctx.checkpoint(Stage::Student, Some(mode)))?;
    let run_dir = ctx.run_dir();
    ctx.echo_config(&run_dir)?;
    let mut report = evaluate(&teacher, &ta, &student, &data, &ctx.geo, &ctx.rc.eval)?;
    report.curve_l_total =
        curve_from_metrics(&run_dir.join(format!("student_{}_metrics.tsv", mode.slug())));
    let report_path = run_dir.join(format!("eval_{}.txt", mode.slug()));
    std::fs::write(&report_path, report.render())?;
    println!("wrote {}", report_path.display());
    let heat_dir = run_dir.join("heatmaps");
    let paths = export_scene_heatmaps(
        &teacher,
        &ta,
        &student,
        &data.samples[0],
        &ctx.geo,
        &ctx.rc.mask_config(),
        &heat_dir,
        &format!("scene0_{}", mode.slug()),
    )?;
    println!("wrote {} heatmaps under {}", paths.len(), heat_dir.display());
    print!("{}", report.render());
    Ok(())
}

fn parse_modes(text: &str) -> Result<Vec<TrainMode>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(TrainMode::parse)
        .collect()
}

fn cmd_ablate(ctx: &Ctx, modes: Option<&str>) -> Result<()> {
    let modes = match modes {
        Some(text) => parse_modes(text)?,
        None => TrainMode::ALL.to_vec(),
    };
    let train_data = ctx.load_dataset(&ctx.train_data_path())?;
    let eval_data = ctx.load_dataset(&ctx.eval_data_path())?;
    let run_dir = ctx.run_dir();
    ctx.echo_config(&run_dir)?;
    let run = run_ablation(&ctx.rc, &train_data, &eval_data, &ctx.geo, &modes)?;

    let digest = ctx.rc.digest();
    let teacher_ckpt = ctx.checkpoint(Stage::Teacher, None);
    run.teacher.params.save_checkpoint(&teacher_ckpt, digest)?;
    write_metrics(&run.teacher_outcome, &run_dir.join("teacher_metrics.tsv"))?;
    let ta_ckpt = ctx.checkpoint(Stage::Ta, None);
    run.ta.params.save_checkpoint(&ta_ckpt, digest)?;
    write_metrics(&run.ta_outcome, &run_dir.join("ta_metrics.tsv"))?;
    for (mode, student, outcome, report) in &run.students {
        let ckpt = ctx.checkpoint(Stage::Student, Some(*mode));
        student.params.save_checkpoint(&ckpt, digest)?;
        write_metrics(outcome, &run_dir.join(format!("student_{}_metrics.tsv", mode.slug())))?;
        let report_path = run_dir.join(format!("eval_{}.txt", mode.slug()));
        std::fs::write(&report_path, report.render())?;
        println!("wrote {}", report_path.display());
    }
    let table = run.summary_table();
    std::fs::write(run_dir.join("ablation_summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_compare_convergence(ctx: &Ctx) -> Result<()> {
    let data = ctx.load_dataset(&ctx.train_data_path())?;
    let teacher = load_teacher(&ctx.rc, &ctx.geo, &ctx.checkpoint(Stage::Teacher, None))?;
    let ta = load_ta(&ctx.rc, &ctx.geo, &ctx.checkpoint(Stage::Ta, None))?;
    let run_dir = ctx.run_dir();
    ctx.echo_config(&run_dir)?;
    let report = convergence_compare(&ctx.rc, &data, &ctx.geo, &teacher, &ta)?;
    let path = run_dir.join("convergence.txt");
    std::fs::write(&path, report.render())?;
    println!("wrote {}", path.display());
    let show = |s: Option<usize>| s.map_or("never".to_string(), |v| v.to_string());
    println!("IMD steps to half: {}", show(report.imd_steps));
    println!("CMD steps to half: {}", show(report.cmd_steps));
    Ok(())
}

fn cmd_export_heatmaps(ctx: &Ctx, scene: usize) -> Result<()> {
    let data = ctx.load_dataset(&ctx.eval_data_path())?;
    if scene >= data.samples.len() {
        return Err(Error::Config(format!(
            "scene index {scene} out of range; the evaluation set has {} scenes",
            data.samples.len()
        )));
    }
    let mode = ctx.student_mode(&None)?;
    let teacher = load_teacher(&ctx.rc, &ctx.geo, &ctx.checkpoint(Stage::Teacher, None))?;
    let ta = load_ta(&ctx.rc, &ctx.geo, &ctx.checkpoint(Stage::Ta, None))?;
    let student = load_student(&ctx.rc, &ctx.geo, &ctx.checkpoint(Stage::Student, Some(mode)))?;
    let run_dir = ctx.run_dir();
    ctx.echo_config(&run_dir)?;
    let heat_dir = run_dir.join("heatmaps");
    let paths = export_scene_heatmaps(
        &teacher,
        &ta,
        &student,
        &data.samples[scene],
        &ctx.geo,
        &ctx.rc.mask_config(),
        &heat_dir,
        &format!("scene{scene}_{}", mode.slug()),
    )?;
    for p in &paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}
