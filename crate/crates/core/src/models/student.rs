//! Camera-only student: shared image backbone and predicted depth
//! distribution feeding two separately projected BEV branches; the second
//! branch is enhanced by SAM, the two are fused by FFM, and the fused
//! grid drives the detection head.

use crate::error::Result;
use crate::geometry::height_compress;
use crate::ops;
use crate::tape::GradTape;
use crate::Tensor64;

use super::head::{DetectHead, DetectionSet};
use super::layers::Conv2dLayer;
use super::sam::{FfmModule, SamModule};
use super::{Geometry, ModelConfig, ModelParams};

#[derive(Clone)]
pub struct StudentModel {
    pub params: ModelParams,
    backbone: [Conv2dLayer; 3],
    depth_head: Conv2dLayer,
    b1_reduce: Conv2dLayer,
    b2_reduce: Conv2dLayer,
    b1_bev: Conv2dLayer,
    b2_bev: Conv2dLayer,
    pub sam: SamModule,
    ffm: FfmModule,
    head: DetectHead,
}

/// Everything a student forward exposes: the depth distribution, all four
/// BEV grids and the head predictions.
pub struct StudentOutput {
    pub d_p: Tensor64,
    pub f_s1: Tensor64,
    pub f_s2: Tensor64,
    pub f_s2_star: Tensor64,
    pub f_s: Tensor64,
    pub det: DetectionSet,
}

impl StudentModel {
    pub fn new(cfg: &ModelConfig, geo: &Geometry, master_seed: u64) -> Self {
        let mut params = ModelParams::new();
        let c = cfg.backbone_channels;
        let cf = cfg.frustum_channels;
        let backbone = [(1usize, 3usize), (2, c), (3, c)].map(|(i, cin)| {
            Conv2dLayer::init(&mut params, &format!("student/backbone{i}"), 3, 1, cin, c, master_seed)
        });
        let depth_head =
            Conv2dLayer::init(&mut params, "student/depth", 3, 1, c, geo.bins.n_bins, master_seed);
        let b1_reduce = Conv2dLayer::init(&mut params, "student/b1_reduce", 1, 1, c, cf, master_seed);
        let b2_reduce = Conv2dLayer::init(&mut params, "student/b2_reduce", 1, 1, c, cf, master_seed);
        let nzc = geo.vspec.nz * cf;
        let b1_bev =
            Conv2dLayer::init(&mut params, "student/b1_bev", 1, 1, nzc, cfg.bev_channels, master_seed);
        let b2_bev =
            Conv2dLayer::init(&mut params, "student/b2_bev", 1, 1, nzc, cfg.bev_channels, master_seed);
        let sam = SamModule::init(
            &mut params,
            "student/sam",
            cfg.bev_channels,
            cfg.se_reduction,
            master_seed,
        );
        let ffm = FfmModule::init(&mut params, "student/ffm", cfg.bev_channels, master_seed);
        let head = DetectHead::init(
            &mut params,
            "student/head",
            cfg.bev_channels,
            cfg.head_channels,
            master_seed,
        );
        Self {
            params,
            backbone,
            depth_head,
            b1_reduce,
            b2_reduce,
            b1_bev,
            b2_bev,
            sam,
            ffm,
            head,
        }
    }

    fn branch(
        &self,
        tape: &mut GradTape<f64>,
        trunk: &Tensor64,
        d_p: &Tensor64,
        reduce: &Conv2dLayer,
        bev: &Conv2dLayer,
        geo: &Geometry,
    ) -> Result<Tensor64> {
        let feat = reduce.forward(&self.params, tape, trunk)?;
        let feat = ops::relu(tape, &feat);
        let frustum = ops::frustum_lift(tape, &feat, d_p)?;
        let vox = ops::frustum_sample(tape, &frustum, &geo.taps)?;
        let flat = height_compress(tape, &vox)?;
        let f = bev.forward(&self.params, tape, &flat)?;
        Ok(ops::relu(tape, &f))
    }

    pub fn forward(
        &self,
        tape: &mut GradTape<f64>,
        image: &Tensor64,
        geo: &Geometry,
    ) -> Result<StudentOutput> {
        if image.shape() != [geo.img_h, geo.img_w, 3] {
            return Err(crate::error::Error::ShapeMismatch(format!(
                "student image {:?} vs configured [{},{},3]",
                image.shape(),
                geo.img_h,
                geo.img_w
            )));
        }
        let mut h = tape.constant(&image.detached());
        for conv in &self.backbone {
            h = conv.forward(&self.params, tape, &h)?;
            h = ops::relu(tape, &h);
        }
        let depth_logits = self.depth_head.forward(&self.params, tape, &h)?;
        let d_p = ops::softmax_axis(tape, &depth_logits, 2)?;

        let f_s1 = self.branch(tape, &h, &d_p, &self.b1_reduce, &self.b1_bev, geo)?;
        let f_s2 = self.branch(tape, &h, &d_p, &self.b2_reduce, &self.b2_bev, geo)?;
        let f_s2_star = self.sam.forward(&self.params, tape, &f_s2)?;
        let f_s = self.ffm.forward(&self.params, tape, &f_s1, &f_s2_star)?;
        let det = self.head.forward(&self.params, tape, &f_s)?;
        Ok(StudentOutput {
            d_p,
            f_s1,
            f_s2,
            f_s2_star,
            f_s,
            det,
        })
    }
}
