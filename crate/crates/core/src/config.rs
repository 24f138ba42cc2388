//! Run configuration: a single TOML document covering every knob in the
//! pipeline, schema-validated before any work starts.
//!
//! Schema (every key optional, defaults shown by [`RunConfig::default`]):
//!
//! ```toml
//! seed = 7                    # master seed; all stage RNGs derive from it
//!
//! [grid]                      # BEV voxel grid (world metres, cell counts)
//! x_min = 2.0
//! x_max = 34.0
//! # ... y_min, y_max, z_min, z_max, nx, ny, nz
//!
//! [camera]                    # pinhole camera at (0, 0, height) looking +x
//! height = 1.6
//! fx = 20.0
//! # ... fy, cx, cy
//!
//! [image]                     # rendered image size
//! h = 24
//! w = 32
//!
//! [bins]                      # categorical depth bins
//! n_bins = 12
//! d_min = 2.0
//! d_max = 34.0
//!
//! [model]                     # channel widths (see models::ModelConfig)
//! [scene]                     # synthetic scene sampling (synthdata)
//! [lidar]                     # LiDAR sweep parameters (synthdata)
//! [render]                    # camera rendering parameters (synthdata)
//!
//! [data]
//! train_scenes = 16
//! eval_scenes = 8
//!
//! [distill]
//! keep_quantile = 0.3         # residual-mask keep fraction q
//! fg_thresh = 0.5             # teacher-foreground score threshold
//! w_imd = 1.0                 # per-loss weights (ablation knobs)
//! w_cmrd = 1.0
//! w_logit = 1.0
//! depth_supervision = false   # auxiliary depth loss (extension, off)
//! # gt_detection = true       # force GT / teacher logit targets; omitted
//! #                           # means: baseline mode uses GT, others use
//! #                           # the teacher's predictions
//!
//! [schedule]
//! teacher_epochs = 20
//! ta_epochs = 10
//! student_epochs = 30
//! batch_size = 2
//! lr_max = 0.02
//! warmup_frac = 0.3           # one-cycle: linear warm-up portion
//! div_factor = 25.0           # one-cycle: lr starts/ends at lr_max/div
//! momentum = 0.9
//! mode = "IMD+CMRD"           # default student ablation mode
//!
//! [eval]
//! score_thresh = 0.2
//! nms_iou = 0.5
//! iou_thresh = 0.5
//!
//! [paths]                     # defaults; overridable on the command line
//! data_dir = "data"
//! run_dir = "run"
//! ```
//!
//! Unknown keys anywhere in the document are rejected. The configuration
//! digest stored in checkpoints covers the canonical serialization of
//! everything *except* `[paths]`: two runs that differ only in where they
//! write must produce byte-identical artifacts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::MaskConfig;
use crate::error::{Error, Result};
use crate::geometry::{CameraCalib, DepthBinSpec, VoxelGridSpec};
use crate::models::{Geometry, ModelConfig};
use crate::synthdata::{LidarConfig, RenderConfig, SceneGenConfig, SynthSpec};
use crate::train::TrainMode;

/// Pinhole intrinsics plus mounting height; the camera sits at
/// `(0, 0, height)` looking along +x with +z up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub height: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            height: 1.6,
            fx: 20.0,
            fy: 20.0,
            cx: 15.5,
            cy: 11.5,
        }
    }
}

/// Rendered image size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageConfig {
    pub h: usize,
    pub w: usize,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self { h: 24, w: 32 }
    }
}

/// Dataset split sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 16,
            eval_scenes: 8,
        }
    }
}

/// Distillation knobs: residual mask, logit-target selection and per-loss
/// weights (all weights default to 1 — the total is an unweighted sum).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub keep_quantile: f64,
    pub fg_thresh: f64,
    pub w_imd: f64,
    pub w_cmrd: f64,
    pub w_logit: f64,
    pub depth_supervision: bool,
    /// `None` selects automatically: ground-truth targets for the
    /// no-distillation baseline, teacher predictions otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_detection: Option<bool>,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            keep_quantile: 0.3,
            fg_thresh: 0.5,
            w_imd: 1.0,
            w_cmrd: 1.0,
            w_logit: 1.0,
            depth_supervision: false,
            gt_detection: None,
        }
    }
}

/// Stage lengths and the one-cycle learning-rate shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub teacher_epochs: usize,
    pub ta_epochs: usize,
    pub student_epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub warmup_frac: f64,
    pub div_factor: f64,
    pub momentum: f64,
    pub mode: String,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            teacher_epochs: 20,
            ta_epochs: 10,
            student_epochs: 30,
            batch_size: 2,
            lr_max: 0.02,
            warmup_frac: 0.3,
            div_factor: 25.0,
            momentum: 0.9,
            mode: "IMD+CMRD".to_string(),
        }
    }
}

/// Detection decoding and matching thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub iou_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.2,
            nms_iou: 0.5,
            iou_thresh: 0.5,
        }
    }
}

/// Default output locations; command-line flags override these. Paths are
/// excluded from the configuration digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: String,
    pub run_dir: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".to_string(),
            run_dir: "run".to_string(),
        }
    }
}

/// The complete run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: VoxelGridSpec,
    pub camera: CameraConfig,
    pub image: ImageConfig,
    pub bins: DepthBinSpec,
    pub model: ModelConfig,
    pub scene: SceneGenConfig,
    pub lidar: LidarConfig,
    pub render: RenderConfig,
    pub data: DataConfig,
    pub distill: DistillSection,
    pub schedule: ScheduleConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            grid: VoxelGridSpec {
                x_min: 2.0,
                x_max: 34.0,
                y_min: -8.0,
                y_max: 8.0,
                z_min: 0.0,
                z_max: 3.2,
                nx: 16,
                ny: 16,
                nz: 4,
            },
            camera: CameraConfig::default(),
            image: ImageConfig::default(),
            bins: DepthBinSpec {
                n_bins: 12,
                d_min: 2.0,
                d_max: 34.0,
            },
            model: ModelConfig::default(),
            scene: SceneGenConfig::default(),
            lidar: LidarConfig::default(),
            render: RenderConfig::default(),
            data: DataConfig::default(),
            distill: DistillSection::default(),
            schedule: ScheduleConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML document. Unknown keys are an error.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, parses and validates a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg = Self::from_toml_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialization: field order is fixed by the struct
    /// declaration, so equal configs always produce identical bytes.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// FNV-1a digest of the canonical serialization with `[paths]` reset
    /// to its default, so output locations never affect artifact bytes.
    pub fn digest(&self) -> u64 {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        fnv1a(c.canonical_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        DepthBinSpec::new(self.bins.n_bins, self.bins.d_min, self.bins.d_max)?;
        self.model.validate()?;
        self.mask_config().validate()?;
        TrainMode::parse(&self.schedule.mode)?;
        let c = &self.camera;
        if !(c.fx > 0.0 && c.fy > 0.0) {
            return Err(Error::Config(format!(
                "camera focal lengths must be positive, got ({}, {})",
                c.fx, c.fy
            )));
        }
        if self.image.h == 0 || self.image.w == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if self.data.train_scenes == 0 || self.data.eval_scenes == 0 {
            return Err(Error::Config("train/eval splits must be non-empty".into()));
        }
        let s = &self.schedule;
        if s.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(s.lr_max > 0.0) {
            return Err(Error::Config(format!("lr_max must be positive, got {}", s.lr_max)));
        }
        if !(s.warmup_frac > 0.0 && s.warmup_frac < 1.0) {
            return Err(Error::Config(format!(
                "warmup_frac must lie in (0, 1), got {}",
                s.warmup_frac
            )));
        }
        if !(s.div_factor >= 1.0) {
            return Err(Error::Config(format!(
                "div_factor must be at least 1, got {}",
                s.div_factor
            )));
        }
        if !(s.momentum >= 0.0 && s.momentum < 1.0) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                s.momentum
            )));
        }
        let d = &self.distill;
        for (name, v) in [
            ("w_imd", d.w_imd),
            ("w_cmrd", d.w_cmrd),
            ("w_logit", d.w_logit),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if !(d.fg_thresh > 0.0 && d.fg_thresh < 1.0) {
            return Err(Error::Config(format!(
                "fg_thresh must lie in (0, 1), got {}",
                d.fg_thresh
            )));
        }
        let ym = self.scene.yaw_max;
        if !(ym > 0.0 && ym <= std::f64::consts::FRAC_PI_2) {
            return Err(Error::Config(format!(
                "scene yaw_max must lie in (0, pi/2] so no two yaws are a half-turn apart, got {ym}"
            )));
        }
        let e = &self.eval;
        for (name, v, lo) in [
            ("score_thresh", e.score_thresh, 0.0),
            ("nms_iou", e.nms_iou, f64::EPSILON),
            ("iou_thresh", e.iou_thresh, f64::EPSILON),
        ] {
            if !(v >= lo && v <= 1.0) {
                return Err(Error::Config(format!(
                    "eval threshold {name} must lie in [0, 1], got {v}"
                )));
            }
        }
        // The camera must actually see the scene volume: reject a grid that
        // ends behind the near depth bin.
        if self.bins.d_max <= self.bins.d_min {
            return Err(Error::Config("depth bins are empty".into()));
        }
        Ok(())
    }

    /// Builds the fixed forward-pass geometry (validates the grid and
    /// precomputes the frustum sampling taps).
    pub fn geometry(&self) -> Result<Geometry> {
        let calib = CameraCalib::looking_forward(
            [0.0, 0.0, self.camera.height],
            self.camera.fx,
            self.camera.fy,
            self.camera.cx,
            self.camera.cy,
        );
        let bins = DepthBinSpec::new(self.bins.n_bins, self.bins.d_min, self.bins.d_max)?;
        Geometry::new(calib, self.grid, bins, self.image.h, self.image.w)
    }

    /// Scene-synthesis bundle borrowing this config's sections.
    pub fn synth_spec<'a>(&'a self, calib: &'a CameraCalib) -> SynthSpec<'a> {
        SynthSpec {
            gen: &self.scene,
            lidar: &self.lidar,
            render: &self.render,
            calib,
            vspec: &self.grid,
            image_h: self.image.h,
            image_w: self.image.w,
        }
    }

    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            keep_quantile: self.distill.keep_quantile,
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
