//! Model assemblies: a LiDAR teacher, a ground-truth-depth assistant and a
//! two-branch camera student, all ending in the same toy detection head
//! over a shared BEV grid.
//!
//! Weights live in a flat name → tensor registry ([`ModelParams`]) owned by
//! each model; layer structs are thin descriptors that bind those weights
//! onto a gradient tape per forward pass. Iteration order over the registry
//! is lexicographic, which keeps optimizer updates and checkpoints
//! deterministic. Every model's final BEV projection passes through a ReLU,
//! so all co-registered grids compared by the feature losses share a
//! nonnegative activation convention.

mod head;
mod layers;
mod sam;
mod student;
mod ta;
mod teacher;

pub use head::{DetectHead, DetectionSet, REG_CHANNELS};
pub use layers::{Conv2dLayer, Conv3dLayer, DeformLayer, SeBlock};
pub use sam::{FfmModule, SamModule};
pub use student::{StudentModel, StudentOutput};
pub use ta::TAModel;
pub use teacher::TeacherModel;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::geometry::{frustum_taps, CameraCalib, DepthBinSpec, VoxelGridSpec};
use crate::ops::FrustumTaps;
use crate::synthdata::{derive_seed, DepthMap, OrientedBox};
use crate::tape::GradTape;
use crate::tensor::Tensor;
use crate::Tensor64;

/// Channel widths and small architectural knobs shared by all models.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Image-backbone width for the assistant and student.
    pub backbone_channels: usize,
    /// Teacher voxel-convolution width.
    pub voxel_channels: usize,
    /// Channels lifted into the camera frustum.
    pub frustum_channels: usize,
    /// Width of every BEV feature grid.
    pub bev_channels: usize,
    /// Detection-head convolution width.
    pub head_channels: usize,
    /// SE-block bottleneck divisor.
    pub se_reduction: usize,
    /// Half-width (in bins) of triangular smoothing applied to the
    /// assistant's ground-truth depth one-hots; 0 keeps them exact.
    pub depth_smoothing: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: 8,
            voxel_channels: 8,
            frustum_channels: 8,
            bev_channels: 8,
            head_channels: 8,
            se_reduction: 2,
            depth_smoothing: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("backbone_channels", self.backbone_channels),
            ("voxel_channels", self.voxel_channels),
            ("frustum_channels", self.frustum_channels),
            ("bev_channels", self.bev_channels),
            ("head_channels", self.head_channels),
            ("se_reduction", self.se_reduction),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.se_reduction > self.bev_channels {
            return Err(Error::Config(format!(
                "model.se_reduction {} exceeds bev_channels {}",
                self.se_reduction, self.bev_channels
            )));
        }
        Ok(())
    }
}

/// All fixed coordinate machinery a forward pass needs, including the
/// precomputed frustum-to-voxel gather taps.
#[derive(Clone)]
pub struct Geometry {
    pub calib: CameraCalib,
    pub vspec: VoxelGridSpec,
    pub bins: DepthBinSpec,
    pub img_h: usize,
    pub img_w: usize,
    pub taps: Arc<FrustumTaps<f64>>,
}

impl Geometry {
    pub fn new(
        calib: CameraCalib,
        vspec: VoxelGridSpec,
        bins: DepthBinSpec,
        img_h: usize,
        img_w: usize,
    ) -> Result<Self> {
        vspec.validate()?;
        if img_h == 0 || img_w == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        let taps = Arc::new(frustum_taps(&calib, &vspec, &bins, img_h, img_w));
        Ok(Self {
            calib,
            vspec,
            bins,
            img_h,
            img_w,
            taps,
        })
    }

    /// BEV grid dimensions (rows = x cells, cols = y cells).
    pub fn bev_dims(&self) -> (usize, usize) {
        (self.vspec.nx, self.vspec.ny)
    }
}

/// Flat, deterministically ordered name → tensor registry.
#[derive(Clone, Default)]
pub struct ModelParams {
    map: BTreeMap<String, Tensor64>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a fresh parameter; duplicate names are a programming bug.
    pub fn insert(&mut self, name: &str, value: Tensor64) {
        let prev = self.map.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    /// Fetches a parameter that must exist.
    pub fn get(&self, name: &str) -> &Tensor64 {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Replaces the value of an existing parameter (shape-checked).
    pub fn set(&mut self, name: &str, value: Tensor64) {
        let slot = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(slot.shape(), value.shape(), "shape change on {name}");
        *slot = value;
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Lexicographic (name, tensor) iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor64)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Binds one parameter onto a tape (idempotent per tape).
    pub fn bind(&self, tape: &mut GradTape<f64>, name: &str) -> Tensor64 {
        tape.bind_param(name, self.get(name))
    }

    /// Total scalar count across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// Serializes every parameter plus the config digest.
    pub fn to_container(&self, config_digest: u64) -> Container {
        let mut c = Container::new();
        c.push_i64("meta/config_digest", &[], vec![config_digest as i64]);
        for (name, t) in self.iter() {
            c.push_f64(&format!("param/{name}"), t.shape(), t.to_vec());
        }
        c
    }

    /// Restores parameter values from a container produced by
    /// [`ModelParams::to_container`] for the same architecture. Every
    /// registered parameter must be present with its exact shape, and the
    /// container must not carry extra parameter records. Returns the
    /// stored config digest.
    pub fn load_container(&mut self, c: &Container) -> Result<u64> {
        let digest = c.i64_scalar("meta/config_digest")? as u64;
        let mut seen = 0usize;
        let names: Vec<String> = self.map.keys().cloned().collect();
        for name in names {
            let rec = format!("param/{name}");
            let (dims, data) = c.f64_record(&rec)?;
            let current = self.map.get(&name).expect("name from own key set");
            if dims != current.shape() {
                return Err(Error::BadContainer(format!(
                    "checkpoint parameter {name} has shape {:?}, expected {:?}",
                    dims,
                    current.shape()
                )));
            }
            self.map
                .insert(name.clone(), Tensor::from_vec(dims, data.to_vec())?);
            seen += 1;
        }
        let stored = c.names().filter(|n| n.starts_with("param/")).count();
        if stored != seen {
            return Err(Error::BadContainer(format!(
                "checkpoint carries {stored} parameters, model expects {seen}"
            )));
        }
        Ok(digest)
    }

    /// Writes a checkpoint file.
    pub fn save_checkpoint(&self, path: &Path, config_digest: u64) -> Result<()> {
        self.to_container(config_digest).write_to(path)
    }

    /// Reads a checkpoint file written by [`ModelParams::save_checkpoint`].
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<u64> {
        let c = Container::read_from(path)?;
        self.load_container(&c)
    }
}

/// He-normal weight tensor: zero-mean normal with σ = sqrt(2 / fan_in),
/// drawn in row-major element order from a stream keyed by the layer name.
pub fn he_normal(shape: &[usize], fan_in: usize, master_seed: u64, name: &str) -> Tensor64 {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, name, 0));
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

/// Sigmoid-space bias that makes a zero-input head emit `prior`
/// foreground probability.
pub fn focal_bias(prior: f64) -> f64 {
    (prior / (1.0 - prior)).ln()
}

/// Number of scalars in the per-cell box encoding:
/// `[Δx, Δy, z, ln w, ln l, ln h, sin θ, cos θ]`.
pub const BOX_ENCODING: usize = 8;

/// Encodes a box relative to a BEV cell center.
pub fn encode_box(b: &OrientedBox, cell_center: [f64; 2]) -> [f64; BOX_ENCODING] {
    [
        b.x - cell_center[0],
        b.y - cell_center[1],
        b.z,
        b.w.ln(),
        b.l.ln(),
        b.h.ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

/// Inverse of [`encode_box`]; sizes come back through `exp`, so they are
/// always positive, and yaw through `atan2`.
pub fn decode_box(reg: &[f64], cell_center: [f64; 2]) -> OrientedBox {
    assert_eq!(reg.len(), BOX_ENCODING, "regression vector length");
    OrientedBox {
        x: cell_center[0] + reg[0],
        y: cell_center[1] + reg[1],
        z: reg[2],
        w: reg[3].exp(),
        l: reg[4].exp(),
        h: reg[5].exp(),
        yaw: reg[6].atan2(reg[7]),
    }
}

/// Per-pixel depth distribution from a ground-truth depth map: an exact
/// one-hot over bins, optionally spread triangularly over ±`smoothing`
/// neighbouring bins. Sky or out-of-range pixels get an all-zero column.
pub fn one_hot_depth(depth: &DepthMap, bins: &DepthBinSpec, smoothing: usize) -> Tensor64 {
    let (h, w, d) = (depth.h, depth.w, bins.n_bins);
    let mut data = vec![0.0f64; h * w * d];
    for r in 0..h {
        for c in 0..w {
            let Some(bin) = bins.depth_to_bin(depth.at(r, c)) else {
                continue;
            };
            let base = (r * w + c) * d;
            if smoothing == 0 {
                data[base + bin] = 1.0;
                continue;
            }
            let s = smoothing as isize;
            let mut weights = Vec::new();
            for off in -s..=s {
                let k = bin as isize + off;
                if k < 0 || k >= d as isize {
                    continue;
                }
                let wgt = (s + 1 - off.abs()) as f64;
                weights.push((k as usize, wgt));
            }
            let total: f64 = weights.iter().map(|(_, wgt)| *wgt).sum();
            for (k, wgt) in weights {
                data[base + k] = wgt / total;
            }
        }
    }
    Tensor::from_vec(&[h, w, d], data).expect("shape/data agree")
}

/// A model forward's BEV grid plus its head outputs.
pub struct BevOutput {
    pub f_bev: Tensor64,
    pub det: DetectionSet,
}

#[cfg(test)]
pub(crate) mod test_fixtures {
    use super::*;

    pub fn toy_vspec() -> VoxelGridSpec {
        VoxelGridSpec {
            x_min: 2.0,
            x_max: 34.0,
            y_min: -8.0,
            y_max: 8.0,
            z_min: 0.0,
            z_max: 3.2,
            nx: 8,
            ny: 8,
            nz: 4,
        }
    }

    pub fn toy_geometry() -> Geometry {
        let calib = CameraCalib::looking_forward([0.0, 0.0, 1.6], 10.0, 10.0, 7.5, 5.5);
        Geometry::new(
            calib,
            toy_vspec(),
            DepthBinSpec::new(6, 2.0, 34.0).unwrap(),
            12,
            16,
        )
        .unwrap()
    }
}
