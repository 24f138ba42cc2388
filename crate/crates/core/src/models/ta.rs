//! Teaching assistant: an image backbone whose features are lifted into
//! the camera frustum with ground-truth depth one-hots, gathered into the
//! voxel grid, collapsed to BEV and projected to the shared feature width.

use crate::error::Result;
use crate::geometry::height_compress;
use crate::ops;
use crate::synthdata::DepthMap;
use crate::tape::GradTape;
use crate::Tensor64;

use super::head::DetectHead;
use super::layers::Conv2dLayer;
use super::{one_hot_depth, BevOutput, Geometry, ModelConfig, ModelParams};

#[derive(Clone)]
pub struct TAModel {
    pub params: ModelParams,
    cfg: ModelConfig,
    backbone: [Conv2dLayer; 3],
    reduce: Conv2dLayer,
    bev: Conv2dLayer,
    head: DetectHead,
}

impl TAModel {
    pub fn new(cfg: &ModelConfig, geo: &Geometry, master_seed: u64) -> Self {
        let mut params = ModelParams::new();
        let c = cfg.backbone_channels;
        let backbone = [(1usize, 3usize), (2, c), (3, c)].map(|(i, cin)| {
            Conv2dLayer::init(&mut params, &format!("ta/backbone{i}"), 3, 1, cin, c, master_seed)
        });
        let reduce = Conv2dLayer::init(&mut params, "ta/reduce", 1, 1, c, cfg.frustum_channels, master_seed);
        let bev = Conv2dLayer::init(
            &mut params,
            "ta/bev",
            1,
            1,
            geo.vspec.nz * cfg.frustum_channels,
            cfg.bev_channels,
            master_seed,
        );
        let head = DetectHead::init(&mut params, "ta/head", cfg.bev_channels, cfg.head_channels, master_seed);
        Self {
            params,
            cfg: *cfg,
            backbone,
            reduce,
            bev,
            head,
        }
    }

    pub fn forward(
        &self,
        tape: &mut GradTape<f64>,
        image: &Tensor64,
        gt_depth: &DepthMap,
        geo: &Geometry,
    ) -> Result<BevOutput> {
        if image.shape() != [geo.img_h, geo.img_w, 3] {
            return Err(crate::error::Error::ShapeMismatch(format!(
                "ta image {:?} vs configured [{},{},3]",
                image.shape(),
                geo.img_h,
                geo.img_w
            )));
        }
        if (gt_depth.h, gt_depth.w) != (geo.img_h, geo.img_w) {
            return Err(crate::error::Error::ShapeMismatch(format!(
                "depth map {}x{} vs image {}x{}",
                gt_depth.h, gt_depth.w, geo.img_h, geo.img_w
            )));
        }
        let mut h = tape.constant(&image.detached());
        for conv in &self.backbone {
            h = conv.forward(&self.params, tape, &h)?;
            h = ops::relu(tape, &h);
        }
        let feat = self.reduce.forward(&self.params, tape, &h)?;
        let feat = ops::relu(tape, &feat);

        let d_g = tape.constant(&one_hot_depth(gt_depth, &geo.bins, self.cfg.depth_smoothing));
        let frustum = ops::frustum_lift(tape, &feat, &d_g)?;
        let vox = ops::frustum_sample(tape, &frustum, &geo.taps)?;
        let flat = height_compress(tape, &vox)?;
        let f = self.bev.forward(&self.params, tape, &flat)?;
        let f_bev = ops::relu(tape, &f);
        let det = self.head.forward(&self.params, tape, &f_bev)?;
        Ok(BevOutput { f_bev, det })
    }
}
