//! Training and evaluation: gradient descent with momentum under a
//! one-cycle learning-rate schedule, the staged teacher → assistant →
//! student runs with per-mode distillation gating, detection decoding,
//! AP@40 evaluation with feature-gap reporting, and the ablation and
//! convergence sweeps.
//!
//! Determinism contract: every run is a pure function of the run
//! configuration. Weight init, epoch shuffling and scene synthesis all
//! draw from seeds derived from `RunConfig::seed` with fixed tags, the
//! update loop is single-threaded, and evaluation merges per-scene
//! results in scene order, so repeated runs produce bit-identical
//! curves, checkpoints and reports.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{EvalConfig, RunConfig};
use crate::distill::{
    cmd_loss, cmrd_loss, foreground_mask, imd_loss, qfl, residual_features, smooth_l1, LossReport,
    MaskConfig,
};
use crate::error::{Error, Result};
use crate::eval::{ap_40, mse_value, nms, Detection, IouKind};
use crate::geometry::VoxelGridSpec;
use crate::models::{
    decode_box, encode_box, one_hot_depth, DetectionSet, Geometry, ModelParams, StudentModel,
    TAModel, TeacherModel, BOX_ENCODING,
};
use crate::ops;
use crate::synthdata::{derive_seed, Dataset, OrientedBox, Scene};
use crate::tape::{GradTape, GradientMap};
use crate::tensor::Tensor;
use crate::Tensor64;

/// Focal exponent of the quality focal loss.
pub const QFL_BETA: f64 = 2.0;

/// Window of the moving average used by smoothed-loss diagnostics.
pub const SMOOTH_WINDOW: usize = 5;

// ---------------------------------------------------------------------------
// Modes and stage configuration
// ---------------------------------------------------------------------------

/// Which distillation losses carry gradient during student training.
/// The variants are ordered as ablation settings 1–5.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// No distillation; ground-truth detection supervision only.
    Baseline,
    /// Cross-modal: the enhancement branch mimics the full teacher grid.
    Cmd,
    /// Intra-modal: branch 1 mimics the assistant grid.
    Imd,
    /// Intra-modal plus full-teacher cross-modal on the enhancement branch.
    ImdCmd,
    /// Intra-modal plus masked-residual cross-modal (the full method).
    ImdCmrd,
}

impl TrainMode {
    /// All modes in ablation-table order (settings 1–5).
    pub const ALL: [TrainMode; 5] = [
        TrainMode::Baseline,
        TrainMode::Cmd,
        TrainMode::Imd,
        TrainMode::ImdCmd,
        TrainMode::ImdCmrd,
    ];

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "baseline" => Ok(TrainMode::Baseline),
            "CMD" => Ok(TrainMode::Cmd),
            "IMD" => Ok(TrainMode::Imd),
            "IMD+CMD" => Ok(TrainMode::ImdCmd),
            "IMD+CMRD" => Ok(TrainMode::ImdCmrd),
            other => Err(Error::Config(format!(
                "unknown ablation mode {other:?}; expected one of \
                 baseline, CMD, IMD, IMD+CMD, IMD+CMRD"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Cmd => "CMD",
            TrainMode::Imd => "IMD",
            TrainMode::ImdCmd => "IMD+CMD",
            TrainMode::ImdCmrd => "IMD+CMRD",
        }
    }

    /// Lower-case identifier safe for file names.
    pub fn slug(&self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Cmd => "cmd",
            TrainMode::Imd => "imd",
            TrainMode::ImdCmd => "imd_cmd",
            TrainMode::ImdCmrd => "imd_cmrd",
        }
    }

    pub fn uses_imd(&self) -> bool {
        matches!(self, TrainMode::Imd | TrainMode::ImdCmd | TrainMode::ImdCmrd)
    }

    pub fn uses_cmd(&self) -> bool {
        matches!(self, TrainMode::Cmd | TrainMode::ImdCmd)
    }

    pub fn uses_cmrd(&self) -> bool {
        matches!(self, TrainMode::ImdCmrd)
    }

    /// Whether the detection losses target teacher predictions (all
    /// distillation modes) rather than ground truth (the baseline).
    pub fn uses_teacher_logits(&self) -> bool {
        !matches!(self, TrainMode::Baseline)
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The three pipeline stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Teacher,
    Ta,
    Student,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::Ta => "ta",
            Stage::Student => "student",
        }
    }
}

/// Resolved per-stage loop parameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage: Stage,
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub warmup_frac: f64,
    pub div_factor: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_stage(rc: &RunConfig, stage: Stage) -> Result<Self> {
        let s = &rc.schedule;
        let epochs = match stage {
            Stage::Teacher => s.teacher_epochs,
            Stage::Ta => s.ta_epochs,
            Stage::Student => s.student_epochs,
        };
        let cfg = Self {
            stage,
            mode: TrainMode::parse(&s.mode)?,
            epochs,
            batch_size: s.batch_size,
            lr_max: s.lr_max,
            warmup_frac: s.warmup_frac,
            div_factor: s.div_factor,
            momentum: s.momentum,
            seed: rc.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0) {
            return Err(Error::Config(format!(
                "lr_max must be positive, got {}",
                self.lr_max
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::Config(format!(
                "warmup_frac must lie in (0, 1), got {}",
                self.warmup_frac
            )));
        }
        if !(self.div_factor >= 1.0) {
            return Err(Error::Config(format!(
                "div_factor must be at least 1, got {}",
                self.div_factor
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Schedule and optimizer
// ---------------------------------------------------------------------------

/// One-cycle learning rate: linear warm-up from `lr_max / div_factor` to
/// `lr_max` over the first `warmup_frac` of the run, then cosine decay
/// back down to `lr_max / div_factor`.
///
/// The step position is `p = step / (total - 1)`, so step 0 is exactly
/// the start value, `p == warmup_frac` is exactly `lr_max` and the last
/// step is exactly the start value again. A single-step run uses the
/// final (= start) value.
pub fn one_cycle_lr(
    step: usize,
    total_steps: usize,
    lr_max: f64,
    warmup_frac: f64,
    div_factor: f64,
) -> f64 {
    let lr_min = lr_max / div_factor;
    let p = if total_steps > 1 {
        step as f64 / (total_steps - 1) as f64
    } else {
        1.0
    };
    if p <= warmup_frac {
        lr_min + (lr_max - lr_min) * (p / warmup_frac)
    } else {
        let q = (p - warmup_frac) / (1.0 - warmup_frac);
        lr_min + (lr_max - lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * q).cos())
    }
}

/// Gradient descent with classical momentum (`v ← μ·v + g`,
/// `p ← p − lr·v`), no weight decay. Parameters update in registry
/// (lexicographic) order, so steps are deterministic.
pub struct Sgd {
    momentum: f64,
    velocity: std::collections::BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: std::collections::BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &GradientMap<f64>, lr: f64) {
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let current = params.get(&name);
            let shape = current.shape().to_vec();
            let n = current.len();
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let grad = grads.param_grad(&name);
            let mut data = current.to_vec();
            for i in 0..n {
                let g = grad.as_ref().map_or(0.0, |g| g.as_slice()[i]);
                v[i] = self.momentum * v[i] + g;
                data[i] -= lr * v[i];
            }
            params.set(&name, Tensor::from_vec(&shape, data).expect("shape unchanged"));
        }
    }
}

// ---------------------------------------------------------------------------
// Supervision targets
// ---------------------------------------------------------------------------

/// Ground-truth detection targets on the BEV grid: score 1 at every cell
/// whose centre lies inside a box's BEV footprint (these are the cells
/// whose sensor evidence belongs to the box), the box encoded relative to
/// each such cell as its regression target, and the same cells as the
/// regression foreground. Each positive cell proposes the whole box at
/// decode time; suppression merges the proposals.
pub struct GtTargets {
    pub score: Tensor64,
    pub reg: Tensor64,
    pub fg: Vec<bool>,
}

/// Whether a BEV point lies inside (or on) a box footprint, tested in the
/// box frame: rotate the offset by −yaw and compare against half-extents.
fn in_footprint(b: &OrientedBox, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - b.x, py - b.y);
    let (s, c) = b.yaw.sin_cos();
    let along = dx * c + dy * s;
    let across = -dx * s + dy * c;
    along.abs() <= b.l / 2.0 && across.abs() <= b.w / 2.0
}

/// Width of the Gaussian score bump assigned inside a box footprint,
/// as a fraction of the footprint half-diagonal.
pub const GT_SCORE_SIGMA_FRAC: f64 = 0.5;

/// Lowest score target assigned inside a footprint. Keeps every
/// foreground cell comfortably above the 0.5 foreground-selection
/// threshold once the detector fits its targets, while the Gaussian
/// shape on top still ranks cells by closeness to the box centre.
pub const GT_SCORE_FLOOR: f64 = 0.6;

pub fn gt_targets(scene: &Scene, vspec: &VoxelGridSpec) -> GtTargets {
    let (nx, ny) = (vspec.nx, vspec.ny);
    let mut score = vec![0.0f64; nx * ny];
    let mut reg = vec![0.0f64; nx * ny * BOX_ENCODING];
    let mut fg = vec![false; nx * ny];
    // Distance to the owning box's centre, for resolving overlaps toward
    // the nearer box.
    let mut owner_d2 = vec![f64::INFINITY; nx * ny];
    for b in &scene.boxes {
        // Score falls off with distance from the box centre, so the
        // highest-scored cell is the one whose decoded box needs the
        // smallest offset correction; suppression then keeps the most
        // reliable proposal per object.
        let sigma = GT_SCORE_SIGMA_FRAC * (b.l * b.l + b.w * b.w).sqrt() / 2.0;
        for ix in 0..nx {
            for iy in 0..ny {
                let cc = vspec.bev_cell_center(ix, iy);
                if !in_footprint(b, cc[0], cc[1]) {
                    continue;
                }
                let d2 = (cc[0] - b.x).powi(2) + (cc[1] - b.y).powi(2);
                let cell = ix * ny + iy;
                if d2 >= owner_d2[cell] {
                    continue;
                }
                owner_d2[cell] = d2;
                let bump = (-d2 / (2.0 * sigma * sigma)).exp();
                score[cell] = GT_SCORE_FLOOR + (1.0 - GT_SCORE_FLOOR) * bump;
                fg[cell] = true;
                let enc = encode_box(b, cc);
                reg[cell * BOX_ENCODING..(cell + 1) * BOX_ENCODING].copy_from_slice(&enc);
            }
        }
    }
    GtTargets {
        score: Tensor::from_vec(&[nx, ny, 1], score).expect("shape/data agree"),
        reg: Tensor::from_vec(&[nx, ny, BOX_ENCODING], reg).expect("shape/data agree"),
        fg,
    }
}

/// Frozen teacher/assistant context for one scene, computed once before
/// student training. Everything is detached, so no gradient can reach
/// the frozen models by construction.
pub struct FrozenScene {
    pub f_t: Tensor64,
    pub f_ta: Tensor64,
    pub f_res: Tensor64,
    pub score: Tensor64,
    pub reg: Tensor64,
    pub fg: Vec<bool>,
}

pub fn freeze_scenes(
    teacher: &TeacherModel,
    ta: &TAModel,
    data: &Dataset,
    geo: &Geometry,
    mask: &MaskConfig,
    fg_thresh: f64,
) -> Result<Vec<FrozenScene>> {
    data.samples
        .iter()
        .map(|s| {
            let mut tape = GradTape::training();
            let t_out = teacher.forward(&mut tape, &s.cloud, geo)?;
            let ta_out = ta.forward(&mut tape, &s.image, &s.depth, geo)?;
            let f_t = t_out.f_bev.detached();
            let f_ta = ta_out.f_bev.detached();
            for (name, t) in [("teacher", &f_t), ("assistant", &f_ta)] {
                if !t.all_finite() {
                    return Err(Error::Config(format!(
                        "frozen {name} features are non-finite; its checkpoint is unusable"
                    )));
                }
            }
            let f_res = residual_features(&f_t, &f_ta, mask)?;
            let score = t_out.det.score.detached();
            let fg = foreground_mask(&score, fg_thresh);
            Ok(FrozenScene {
                f_t,
                f_ta,
                f_res,
                score,
                reg: t_out.det.reg.detached(),
                fg,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// The generic training loop
// ---------------------------------------------------------------------------

/// Batch-mean scalar loss nodes for one optimizer step. Absent parts are
/// switched off by the mode and contribute exact zeros to the report.
struct StepParts {
    imd: Option<Tensor64>,
    cmrd: Option<Tensor64>,
    cls: Tensor64,
    reg: Tensor64,
    depth: Option<Tensor64>,
    no_foreground: bool,
}

trait StageRunner {
    fn n_scenes(&self) -> usize;
    fn batch_loss(&self, tape: &mut GradTape<f64>, batch: &[usize]) -> Result<StepParts>;
    fn params_mut(&mut self) -> &mut ModelParams;
}

/// Mean of per-scene scalar nodes: left fold of adds, then one scale.
fn fold_mean(tape: &mut GradTape<f64>, terms: Vec<Tensor64>) -> Tensor64 {
    let n = terms.len();
    debug_assert!(n > 0);
    let mut it = terms.into_iter();
    let first = it.next().expect("nonempty batch");
    let sum = it.fold(first, |acc, t| {
        ops::add(tape, &acc, &t).expect("scalar losses share a shape")
    });
    ops::scale(tape, &sum, 1.0 / n as f64)
}

fn weighted(tape: &mut GradTape<f64>, t: Tensor64, w: f64) -> Tensor64 {
    if w == 1.0 {
        t
    } else {
        ops::scale(tape, &t, w)
    }
}

/// Combines step parts into the tape root using the same association the
/// report pins (`(imd + cmrd) + (cls + reg) [+ depth]`), so the root's
/// value equals `LossReport::l_total` bitwise. Adding an absent part
/// would add an exact 0.0, which is the identity on these nonnegative
/// values, so absent parts are simply skipped.
fn combine_parts(tape: &mut GradTape<f64>, p: &StepParts) -> Tensor64 {
    let logit = ops::add(tape, &p.cls, &p.reg).expect("scalar parts");
    let feat = match (&p.imd, &p.cmrd) {
        (Some(a), Some(b)) => Some(ops::add(tape, a, b).expect("scalar parts")),
        (Some(a), None) => Some(a.clone()),
        (None, Some(b)) => Some(b.clone()),
        (None, None) => None,
    };
    let base = match &feat {
        Some(f) => ops::add(tape, f, &logit).expect("scalar parts"),
        None => logit,
    };
    match &p.depth {
        Some(d) => ops::add(tape, &base, d).expect("scalar parts"),
        None => base,
    }
}

/// Per-step records plus run-level diagnostics.
pub struct TrainOutcome {
    pub curve: Vec<LossReport>,
    pub lrs: Vec<f64>,
    /// Batches whose regression loss had no foreground cells (logged as a
    /// warning; the loss contributed an exact zero there).
    pub no_foreground_batches: usize,
}

impl TrainOutcome {
    /// Tab-separated metrics log, one line per step:
    /// `step lr l_imd l_cmrd l_cls l_reg l_total`. Floats print in
    /// shortest round-trip form, so equal runs write identical bytes.
    pub fn metrics_text(&self) -> String {
        let mut out = String::new();
        for (i, (r, lr)) in self.curve.iter().zip(&self.lrs).enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                i, lr, r.l_imd, r.l_cmrd, r.l_cls, r.l_reg, r.l_total
            ));
        }
        out
    }

    pub fn write_metrics_log(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.metrics_text())?;
        Ok(())
    }

    /// The per-step distillation loss (IMD plus the CMRD/CMD slot).
    pub fn distill_curve(&self) -> Vec<f64> {
        self.curve.iter().map(|r| r.l_imd + r.l_cmrd).collect()
    }

    /// First step whose smoothed distillation loss halves, if any.
    pub fn steps_to_half(&self) -> Option<usize> {
        steps_to_half(&self.distill_curve(), SMOOTH_WINDOW)
    }
}

fn run_training<R: StageRunner>(
    runner: &mut R,
    cfg: &TrainConfig,
    order_tag: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = runner.n_scenes();
    if n == 0 {
        return Err(Error::InvalidSpec("training dataset is empty".into()));
    }
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut sgd = Sgd::new(cfg.momentum);
    let mut curve = Vec::with_capacity(total_steps);
    let mut lrs = Vec::with_capacity(total_steps);
    let mut no_fg = 0usize;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, order_tag, epoch as u64));
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let lr = one_cycle_lr(step, total_steps, cfg.lr_max, cfg.warmup_frac, cfg.div_factor);
            let mut tape = GradTape::training();
            let parts = runner.batch_loss(&mut tape, batch)?;
            let root = combine_parts(&mut tape, &parts);
            if !root.item().is_finite() {
                return Err(Error::NanLoss { step });
            }
            let report = LossReport::new(
                parts.imd.as_ref().map_or(0.0, Tensor::item),
                parts.cmrd.as_ref().map_or(0.0, Tensor::item),
                parts.cls.item(),
                parts.reg.item(),
                parts.depth.as_ref().map_or(0.0, Tensor::item),
            )
            .expect("parts are finite when their sum is");
            debug_assert_eq!(report.l_total, root.item());
            let grads = tape.backward(&root)?;
            sgd.step(runner.params_mut(), &grads, lr);
            if parts.no_foreground {
                no_fg += 1;
            }
            curve.push(report);
            lrs.push(lr);
            step += 1;
        }
    }
    if no_fg > 0 {
        eprintln!(
            "warning: {no_fg} of {total_steps} steps had no foreground cells; \
             their regression loss contributed 0"
        );
    }
    Ok(TrainOutcome {
        curve,
        lrs,
        no_foreground_batches: no_fg,
    })
}

// ---------------------------------------------------------------------------
// Stage runners
// ---------------------------------------------------------------------------

struct GtStage<'a, M> {
    model: &'a mut M,
    data: &'a Dataset,
    geo: &'a Geometry,
    targets: &'a [GtTargets],
    w_logit: f64,
}

impl<M> GtStage<'_, M> {
    fn logit_terms(
        &self,
        tape: &mut GradTape<f64>,
        det: &DetectionSet,
        i: usize,
    ) -> Result<(Tensor64, Tensor64, bool)> {
        let t = &self.targets[i];
        let cls = qfl(tape, &det.score, &t.score, QFL_BETA)?;
        let (reg, had_fg) = smooth_l1(tape, &det.reg, &t.reg, &t.fg)?;
        Ok((cls, reg, had_fg))
    }
}

impl StageRunner for GtStage<'_, TeacherModel> {
    fn n_scenes(&self) -> usize {
        self.data.samples.len()
    }

    fn batch_loss(&self, tape: &mut GradTape<f64>, batch: &[usize]) -> Result<StepParts> {
        let mut cls_terms = Vec::with_capacity(batch.len());
        let mut reg_terms = Vec::with_capacity(batch.len());
        let mut no_fg = false;
        for &i in batch {
            let out = self.model.forward(tape, &self.data.samples[i].cloud, self.geo)?;
            let (cls, reg, had_fg) = self.logit_terms(tape, &out.det, i)?;
            cls_terms.push(cls);
            reg_terms.push(reg);
            no_fg |= !had_fg;
        }
        let cls = fold_mean(tape, cls_terms);
        let reg = fold_mean(tape, reg_terms);
        Ok(StepParts {
            imd: None,
            cmrd: None,
            cls: weighted(tape, cls, self.w_logit),
            reg: weighted(tape, reg, self.w_logit),
            depth: None,
            no_foreground: no_fg,
        })
    }

    fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.model.params
    }
}

impl StageRunner for GtStage<'_, TAModel> {
    fn n_scenes(&self) -> usize {
        self.data.samples.len()
    }

    fn batch_loss(&self, tape: &mut GradTape<f64>, batch: &[usize]) -> Result<StepParts> {
        let mut cls_terms = Vec::with_capacity(batch.len());
        let mut reg_terms = Vec::with_capacity(batch.len());
        let mut no_fg = false;
        for &i in batch {
            let s = &self.data.samples[i];
            let out = self.model.forward(tape, &s.image, &s.depth, self.geo)?;
            let (cls, reg, had_fg) = self.logit_terms(tape, &out.det, i)?;
            cls_terms.push(cls);
            reg_terms.push(reg);
            no_fg |= !had_fg;
        }
        let cls = fold_mean(tape, cls_terms);
        let reg = fold_mean(tape, reg_terms);
        Ok(StepParts {
            imd: None,
            cmrd: None,
            cls: weighted(tape, cls, self.w_logit),
            reg: weighted(tape, reg, self.w_logit),
            depth: None,
            no_foreground: no_fg,
        })
    }

    fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.model.params
    }
}

struct StudentStage<'a> {
    model: &'a mut StudentModel,
    data: &'a Dataset,
    geo: &'a Geometry,
    frozen: &'a [FrozenScene],
    gt: &'a [GtTargets],
    depth_targets: Option<Vec<Tensor64>>,
    mode: TrainMode,
    use_gt_logits: bool,
    w_imd: f64,
    w_cmrd: f64,
    w_logit: f64,
}

impl StageRunner for StudentStage<'_> {
    fn n_scenes(&self) -> usize {
        self.data.samples.len()
    }

    fn batch_loss(&self, tape: &mut GradTape<f64>, batch: &[usize]) -> Result<StepParts> {
        let mut imd_terms = Vec::new();
        let mut cmrd_terms = Vec::new();
        let mut cls_terms = Vec::new();
        let mut reg_terms = Vec::new();
        let mut depth_terms = Vec::new();
        let mut no_fg = false;
        for &i in batch {
            let s = &self.data.samples[i];
            let fz = &self.frozen[i];
            let out = self.model.forward(tape, &s.image, self.geo)?;
            if self.mode.uses_imd() {
                imd_terms.push(imd_loss(tape, &out.f_s1, &fz.f_ta)?);
            }
            if self.mode.uses_cmrd() {
                cmrd_terms.push(cmrd_loss(tape, &out.f_s2_star, &fz.f_res)?);
            }
            if self.mode.uses_cmd() {
                // The CMD ablation targets the same enhancement branch the
                // residual loss would, differing only in what it mimics.
                cmrd_terms.push(cmd_loss(tape, &out.f_s2_star, &fz.f_t)?);
            }
            let (score_t, reg_t, fg): (&Tensor64, &Tensor64, &[bool]) = if self.use_gt_logits {
                let g = &self.gt[i];
                (&g.score, &g.reg, &g.fg)
            } else {
                (&fz.score, &fz.reg, &fz.fg)
            };
            cls_terms.push(qfl(tape, &out.det.score, score_t, QFL_BETA)?);
            let (reg, had_fg) = smooth_l1(tape, &out.det.reg, reg_t, fg)?;
            reg_terms.push(reg);
            no_fg |= !had_fg;
            if let Some(dt) = &self.depth_targets {
                depth_terms.push(ops::mse(tape, &out.d_p, &dt[i])?);
            }
        }
        let imd = (!imd_terms.is_empty()).then(|| {
            let m = fold_mean(tape, imd_terms);
            weighted(tape, m, self.w_imd)
        });
        let cmrd = (!cmrd_terms.is_empty()).then(|| {
            let m = fold_mean(tape, cmrd_terms);
            weighted(tape, m, self.w_cmrd)
        });
        let cls = fold_mean(tape, cls_terms);
        let reg = fold_mean(tape, reg_terms);
        let depth = (!depth_terms.is_empty()).then(|| fold_mean(tape, depth_terms));
        Ok(StepParts {
            imd,
            cmrd,
            cls: weighted(tape, cls, self.w_logit),
            reg: weighted(tape, reg, self.w_logit),
            depth,
            no_foreground: no_fg,
        })
    }

    fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.model.params
    }
}

// ---------------------------------------------------------------------------
// Stage entry points
// ---------------------------------------------------------------------------

fn gt_targets_for(data: &Dataset, vspec: &VoxelGridSpec) -> Vec<GtTargets> {
    data.samples
        .iter()
        .map(|s| gt_targets(&s.scene, vspec))
        .collect()
}

/// Trains the LiDAR teacher from scratch on ground truth.
pub fn train_teacher(
    rc: &RunConfig,
    data: &Dataset,
    geo: &Geometry,
) -> Result<(TeacherModel, TrainOutcome)> {
    let cfg = TrainConfig::for_stage(rc, Stage::Teacher)?;
    let mut model = TeacherModel::new(&rc.model, geo, derive_seed(rc.seed, "init/teacher", 0));
    let targets = gt_targets_for(data, &geo.vspec);
    let mut stage = GtStage {
        model: &mut model,
        data,
        geo,
        targets: &targets,
        w_logit: rc.distill.w_logit,
    };
    let outcome = run_training(&mut stage, &cfg, "order/teacher")?;
    Ok((model, outcome))
}

/// Trains the camera assistant (fed ground-truth depth) on ground truth.
pub fn train_ta(rc: &RunConfig, data: &Dataset, geo: &Geometry) -> Result<(TAModel, TrainOutcome)> {
    let cfg = TrainConfig::for_stage(rc, Stage::Ta)?;
    let mut model = TAModel::new(&rc.model, geo, derive_seed(rc.seed, "init/ta", 0));
    let targets = gt_targets_for(data, &geo.vspec);
    let mut stage = GtStage {
        model: &mut model,
        data,
        geo,
        targets: &targets,
        w_logit: rc.distill.w_logit,
    };
    let outcome = run_training(&mut stage, &cfg, "order/ta")?;
    Ok((model, outcome))
}

/// Trains a student against the frozen teacher and assistant under the
/// given ablation mode. The student's initial weights depend only on the
/// seed, not the mode, so modes are compared from identical starts.
pub fn train_student(
    rc: &RunConfig,
    data: &Dataset,
    geo: &Geometry,
    teacher: &TeacherModel,
    ta: &TAModel,
    mode: TrainMode,
) -> Result<(StudentModel, TrainOutcome)> {
    let mut cfg = TrainConfig::for_stage(rc, Stage::Student)?;
    cfg.mode = mode;
    let frozen = freeze_scenes(teacher, ta, data, geo, &rc.mask_config(), rc.distill.fg_thresh)?;
    let gt = gt_targets_for(data, &geo.vspec);
    let use_gt_logits = rc
        .distill
        .gt_detection
        .unwrap_or(!mode.uses_teacher_logits());
    let depth_targets = rc.distill.depth_supervision.then(|| {
        data.samples
            .iter()
            .map(|s| one_hot_depth(&s.depth, &geo.bins, rc.model.depth_smoothing))
            .collect()
    });
    let mut model = StudentModel::new(&rc.model, geo, derive_seed(rc.seed, "init/student", 0));
    let mut stage = StudentStage {
        model: &mut model,
        data,
        geo,
        frozen: &frozen,
        gt: &gt,
        depth_targets,
        mode,
        use_gt_logits,
        w_imd: rc.distill.w_imd,
        w_cmrd: rc.distill.w_cmrd,
        w_logit: rc.distill.w_logit,
    };
    let outcome = run_training(&mut stage, &cfg, "order/student")?;
    Ok((model, outcome))
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing
// ---------------------------------------------------------------------------

/// Errors with the canonical "run the stage first" message when a
/// dependency checkpoint is absent.
pub fn require_checkpoint(path: &Path, stage: Stage) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingCheckpoint {
            stage: stage.name().to_string(),
            path: path.display().to_string(),
        })
    }
}

fn check_digest(found: u64, rc: &RunConfig, path: &Path) -> Result<()> {
    if found == rc.digest() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "checkpoint {} was produced under a different configuration; \
             re-run its stage with the current config",
            path.display()
        )))
    }
}

pub fn load_teacher(rc: &RunConfig, geo: &Geometry, path: &Path) -> Result<TeacherModel> {
    require_checkpoint(path, Stage::Teacher)?;
    let mut m = TeacherModel::new(&rc.model, geo, derive_seed(rc.seed, "init/teacher", 0));
    let digest = m.params.load_checkpoint(path)?;
    check_digest(digest, rc, path)?;
    Ok(m)
}

pub fn load_ta(rc: &RunConfig, geo: &Geometry, path: &Path) -> Result<TAModel> {
    require_checkpoint(path, Stage::Ta)?;
    let mut m = TAModel::new(&rc.model, geo, derive_seed(rc.seed, "init/ta", 0));
    let digest = m.params.load_checkpoint(path)?;
    check_digest(digest, rc, path)?;
    Ok(m)
}

pub fn load_student(rc: &RunConfig, geo: &Geometry, path: &Path) -> Result<StudentModel> {
    require_checkpoint(path, Stage::Student)?;
    let mut m = StudentModel::new(&rc.model, geo, derive_seed(rc.seed, "init/student", 0));
    let digest = m.params.load_checkpoint(path)?;
    check_digest(digest, rc, path)?;
    Ok(m)
}

// ---------------------------------------------------------------------------
// Decoding and evaluation
// ---------------------------------------------------------------------------

/// Thresholds head scores and applies BEV NMS. Cells scan in row-major
/// order; scores at or above the threshold survive to suppression.
pub fn decode_detections(
    det: &DetectionSet,
    vspec: &VoxelGridSpec,
    score_thresh: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    let (nx, ny) = (vspec.nx, vspec.ny);
    let scores = det.score.as_slice();
    let regs = det.reg.as_slice();
    let mut dets = Vec::new();
    for ix in 0..nx {
        for iy in 0..ny {
            let cell = ix * ny + iy;
            let score = scores[cell];
            if score < score_thresh {
                continue;
            }
            let reg = &regs[cell * BOX_ENCODING..(cell + 1) * BOX_ENCODING];
            let bbox = decode_box(reg, vspec.bev_cell_center(ix, iy));
            dets.push(Detection { score, bbox });
        }
    }
    nms(&dets, nms_iou)
}

/// Evaluation summary: detection AP at the configured IoU threshold plus
/// the mean pairwise BEV feature gaps, and (when produced by a training
/// sweep) the training-loss curve of the evaluated student.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_scenes: usize,
    pub iou_thresh: f64,
    pub ap_3d: f64,
    pub ap_bev: f64,
    pub gap_student_ta: f64,
    pub gap_student_teacher: f64,
    pub gap_ta_teacher: f64,
    pub curve_l_total: Vec<f64>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("ap_3d", self.ap_3d),
            ("ap_bev", self.ap_bev),
            ("gap_student_ta", self.gap_student_ta),
            ("gap_student_teacher", self.gap_student_teacher),
            ("gap_ta_teacher", self.gap_ta_teacher),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "eval report field {name} is non-finite ({v})"
                )));
            }
        }
        for (name, v) in [("ap_3d", self.ap_3d), ("ap_bev", self.ap_bev)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidSpec(format!(
                    "eval report field {name} must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Key/value text form. Line 1 is a format tag; every other line is
    /// `key = value`; the loss curve is a comma-separated list.
    pub fn render(&self) -> String {
        let curve: Vec<String> = self.curve_l_total.iter().map(|v| v.to_string()).collect();
        format!(
            "takd-eval-report v1\n\
             n_scenes = {}\n\
             iou_thresh = {}\n\
             ap_3d = {}\n\
             ap_bev = {}\n\
             gap_student_ta = {}\n\
             gap_student_teacher = {}\n\
             gap_ta_teacher = {}\n\
             curve_l_total = {}\n",
            self.n_scenes,
            self.iou_thresh,
            self.ap_3d,
            self.ap_bev,
            self.gap_student_ta,
            self.gap_student_teacher,
            self.gap_ta_teacher,
            curve.join(",")
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("takd-eval-report v1") {
            return Err(Error::Config("not a takd eval report".into()));
        }
        let mut report = EvalReport {
            n_scenes: 0,
            iou_thresh: f64::NAN,
            ap_3d: f64::NAN,
            ap_bev: f64::NAN,
            gap_student_ta: f64::NAN,
            gap_student_teacher: f64::NAN,
            gap_ta_teacher: f64::NAN,
            curve_l_total: Vec::new(),
        };
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Config(format!("malformed report line {line:?}")))?;
            let bad = |e: std::num::ParseFloatError| Error::Config(format!("{key}: {e}"));
            match key {
                "n_scenes" => {
                    report.n_scenes = value
                        .parse()
                        .map_err(|e| Error::Config(format!("n_scenes: {e}")))?
                }
                "iou_thresh" => report.iou_thresh = value.parse().map_err(bad)?,
                "ap_3d" => report.ap_3d = value.parse().map_err(bad)?,
                "ap_bev" => report.ap_bev = value.parse().map_err(bad)?,
                "gap_student_ta" => report.gap_student_ta = value.parse().map_err(bad)?,
                "gap_student_teacher" => {
                    report.gap_student_teacher = value.parse().map_err(bad)?
                }
                "gap_ta_teacher" => report.gap_ta_teacher = value.parse().map_err(bad)?,
                "curve_l_total" => {
                    report.curve_l_total = value
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse().map_err(bad))
                        .collect::<Result<_>>()?
                }
                other => return Err(Error::Config(format!("unknown report key {other:?}"))),
            }
        }
        report.validate()?;
        Ok(report)
    }
}

struct SceneEval {
    preds: Vec<Detection>,
    gap_s_ta: f64,
    gap_s_t: f64,
    gap_ta_t: f64,
}

fn eval_scene(
    teacher: &TeacherModel,
    ta: &TAModel,
    student: &StudentModel,
    data: &Dataset,
    geo: &Geometry,
    ecfg: &EvalConfig,
    i: usize,
) -> Result<SceneEval> {
    let s = &data.samples[i];
    let mut tape = GradTape::training();
    let t_out = teacher.forward(&mut tape, &s.cloud, geo)?;
    let ta_out = ta.forward(&mut tape, &s.image, &s.depth, geo)?;
    let s_out = student.forward(&mut tape, &s.image, geo)?;
    let preds = decode_detections(&s_out.det, &geo.vspec, ecfg.score_thresh, ecfg.nms_iou);
    Ok(SceneEval {
        preds,
        gap_s_ta: mse_value(&s_out.f_s, &ta_out.f_bev),
        gap_s_t: mse_value(&s_out.f_s, &t_out.f_bev),
        gap_ta_t: mse_value(&ta_out.f_bev, &t_out.f_bev),
    })
}

/// Runs all three models over the evaluation set (scenes processed in
/// parallel, merged in scene order) and reports AP plus feature gaps.
pub fn evaluate(
    teacher: &TeacherModel,
    ta: &TAModel,
    student: &StudentModel,
    data: &Dataset,
    geo: &Geometry,
    ecfg: &EvalConfig,
) -> Result<EvalReport> {
    let n = data.samples.len();
    if n == 0 {
        return Err(Error::InvalidSpec("evaluation dataset is empty".into()));
    }
    let workers = std::thread::available_parallelism()
        .map(|v| v.get())
        .unwrap_or(1)
        .min(n);
    let mut evals: Vec<Option<SceneEval>> = Vec::new();
    evals.resize_with(n, || None);
    if workers <= 1 {
        for (i, slot) in evals.iter_mut().enumerate() {
            *slot = Some(eval_scene(teacher, ta, student, data, geo, ecfg, i)?);
        }
    } else {
        let chunks: Vec<Vec<usize>> = (0..workers)
            .map(|w| (0..n).filter(|i| i % workers == w).collect())
            .collect();
        let results = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|&i| (i, eval_scene(teacher, ta, student, data, geo, ecfg, i)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect::<Vec<_>>()
        });
        for (i, r) in results {
            evals[i] = Some(r?);
        }
    }
    let evals: Vec<SceneEval> = evals.into_iter().map(|e| e.expect("all scenes run")).collect();

    let preds: Vec<Vec<Detection>> = evals.iter().map(|e| e.preds.clone()).collect();
    let gts: Vec<Vec<OrientedBox>> = data.samples.iter().map(|s| s.scene.boxes.clone()).collect();
    let no_gt = || Error::InvalidSpec("evaluation set has no ground-truth boxes".into());
    let ap_3d = ap_40(&preds, &gts, ecfg.iou_thresh, IouKind::ThreeD).ok_or_else(no_gt)?;
    let ap_bev = ap_40(&preds, &gts, ecfg.iou_thresh, IouKind::Bev).ok_or_else(no_gt)?;
    let mean = |f: fn(&SceneEval) -> f64| evals.iter().map(f).sum::<f64>() / n as f64;
    let report = EvalReport {
        n_scenes: n,
        iou_thresh: ecfg.iou_thresh,
        ap_3d,
        ap_bev,
        gap_student_ta: mean(|e| e.gap_s_ta),
        gap_student_teacher: mean(|e| e.gap_s_t),
        gap_ta_teacher: mean(|e| e.gap_ta_t),
        curve_l_total: Vec::new(),
    };
    report.validate()?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Convergence diagnostics
// ---------------------------------------------------------------------------

/// Moving average over the trailing `window` entries at each position.
pub fn smoothed_curve(curve: &[f64], window: usize) -> Vec<f64> {
    assert!(window > 0, "window must be positive");
    curve
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let lo = (i + 1).saturating_sub(window);
            let slice = &curve[lo..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// First step whose smoothed value drops below half of the smoothed
/// initial value; `None` if that never happens (including the empty and
/// identically-zero curves).
pub fn steps_to_half(curve: &[f64], window: usize) -> Option<usize> {
    let smoothed = smoothed_curve(curve, window);
    let initial = *smoothed.first()?;
    smoothed.iter().position(|&v| v < 0.5 * initial)
}

/// Outcome of the IMD-versus-CMD convergence comparison.
pub struct ConvergenceReport {
    pub imd_steps: Option<usize>,
    pub cmd_steps: Option<usize>,
    pub imd_curve: Vec<f64>,
    pub cmd_curve: Vec<f64>,
}

impl ConvergenceReport {
    /// Key/value text form; `never` marks a run that never halved.
    pub fn render(&self) -> String {
        let show = |s: &Option<usize>| s.map_or("never".to_string(), |v| v.to_string());
        let join = |c: &[f64]| {
            c.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "takd-convergence v1\n\
             imd_steps_to_half = {}\n\
             cmd_steps_to_half = {}\n\
             imd_curve = {}\n\
             cmd_curve = {}\n",
            show(&self.imd_steps),
            show(&self.cmd_steps),
            join(&self.imd_curve),
            join(&self.cmd_curve)
        )
    }
}

/// Trains one IMD student and one CMD student from identical seeds and
/// reports each mode's steps until its own smoothed distillation loss
/// halves.
pub fn convergence_compare(
    rc: &RunConfig,
    data: &Dataset,
    geo: &Geometry,
    teacher: &TeacherModel,
    ta: &TAModel,
) -> Result<ConvergenceReport> {
    let (_, imd_out) = train_student(rc, data, geo, teacher, ta, TrainMode::Imd)?;
    let (_, cmd_out) = train_student(rc, data, geo, teacher, ta, TrainMode::Cmd)?;
    Ok(ConvergenceReport {
        imd_steps: imd_out.steps_to_half(),
        cmd_steps: cmd_out.steps_to_half(),
        imd_curve: imd_out.distill_curve(),
        cmd_curve: cmd_out.distill_curve(),
    })
}

// ---------------------------------------------------------------------------
// Ablation sweep
// ---------------------------------------------------------------------------

/// Everything one full ablation sweep produces: the shared frozen
/// teacher/assistant pair and one trained student per mode, each with its
/// training curve and evaluation report, in ablation-table order.
pub struct AblationRun {
    pub teacher: TeacherModel,
    pub teacher_outcome: TrainOutcome,
    pub ta: TAModel,
    pub ta_outcome: TrainOutcome,
    pub students: Vec<(TrainMode, StudentModel, TrainOutcome, EvalReport)>,
}

impl AblationRun {
    /// Fixed-width summary, rows ordered as settings 1–5. The setting
    /// number is the mode's canonical position, so subsets keep their
    /// table numbering.
    pub fn summary_table(&self) -> String {
        let mut out = String::from(
            "setting  mode      ap_3d   ap_bev  gap_s_ta    gap_s_t     gap_ta_t\n",
        );
        for (mode, _, _, report) in &self.students {
            let setting = TrainMode::ALL.iter().position(|m| m == mode).expect("known mode") + 1;
            out.push_str(&format!(
                "{:<8} {:<9} {:<7.4} {:<7.4} {:<11.6} {:<11.6} {:<11.6}\n",
                setting,
                mode.name(),
                report.ap_3d,
                report.ap_bev,
                report.gap_student_ta,
                report.gap_student_teacher,
                report.gap_ta_teacher,
            ));
        }
        out
    }
}

/// Trains the teacher and assistant once, then one student per requested
/// mode against the same frozen pair, evaluating each student. Modes run
/// in ablation-table order regardless of the order given.
pub fn run_ablation(
    rc: &RunConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
    geo: &Geometry,
    modes: &[TrainMode],
) -> Result<AblationRun> {
    if modes.is_empty() {
        return Err(Error::Config("ablation needs at least one mode".into()));
    }
    let (teacher, teacher_outcome) = train_teacher(rc, train_data, geo)?;
    let (ta, ta_outcome) = train_ta(rc, train_data, geo)?;
    let ordered: Vec<TrainMode> = TrainMode::ALL
        .into_iter()
        .filter(|m| modes.contains(m))
        .collect();
    let mut students = Vec::with_capacity(ordered.len());
    for mode in ordered {
        let (student, outcome) = train_student(rc, train_data, geo, &teacher, &ta, mode)?;
        let mut report = evaluate(&teacher, &ta, &student, eval_data, geo, &rc.eval)?;
        report.curve_l_total = outcome.curve.iter().map(|r| r.l_total).collect();
        students.push((mode, student, outcome, report));
    }
    Ok(AblationRun {
        teacher,
        teacher_outcome,
        ta,
        ta_outcome,
        students,
    })
}
