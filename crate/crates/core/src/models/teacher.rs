//! LiDAR teacher: voxelized point cloud through two dense 3-d
//! convolutions, height compression, a 1×1 BEV projection and the
//! detection head.

use crate::error::Result;
use crate::geometry::{height_compress, voxelize};
use crate::ops;
use crate::synthdata::PointCloud;
use crate::tape::GradTape;

use super::head::DetectHead;
use super::layers::{Conv2dLayer, Conv3dLayer};
use super::{BevOutput, Geometry, ModelConfig, ModelParams};

#[derive(Clone)]
pub struct TeacherModel {
    pub params: ModelParams,
    conv1: Conv3dLayer,
    conv2: Conv3dLayer,
    bev: Conv2dLayer,
    head: DetectHead,
}

impl TeacherModel {
    pub fn new(cfg: &ModelConfig, geo: &Geometry, master_seed: u64) -> Self {
        let mut params = ModelParams::new();
        let c3 = cfg.voxel_channels;
        let conv1 = Conv3dLayer::init(&mut params, "teacher/conv1", 3, 2, c3, master_seed);
        let conv2 = Conv3dLayer::init(&mut params, "teacher/conv2", 3, c3, c3, master_seed);
        let bev = Conv2dLayer::init(
            &mut params,
            "teacher/bev",
            1,
            1,
            geo.vspec.nz * c3,
            cfg.bev_channels,
            master_seed,
        );
        let head = DetectHead::init(
            &mut params,
            "teacher/head",
            cfg.bev_channels,
            cfg.head_channels,
            master_seed,
        );
        Self {
            params,
            conv1,
            conv2,
            bev,
            head,
        }
    }

    pub fn forward(
        &self,
        tape: &mut GradTape<f64>,
        cloud: &PointCloud,
        geo: &Geometry,
    ) -> Result<BevOutput> {
        let vox = voxelize(cloud, &geo.vspec)?;
        let v = tape.constant(&vox);
        let h = self.conv1.forward(&self.params, tape, &v)?;
        let h = ops::relu(tape, &h);
        let h = self.conv2.forward(&self.params, tape, &h)?;
        let h = ops::relu(tape, &h);
        let flat = height_compress(tape, &h)?;
        let f = self.bev.forward(&self.params, tape, &flat)?;
        let f_bev = ops::relu(tape, &f);
        let det = self.head.forward(&self.params, tape, &f_bev)?;
        Ok(BevOutput { f_bev, det })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::head::SCORE_PRIOR;
    use crate::models::test_fixtures::toy_geometry;
    use crate::synthdata::{gen_scene, lidar_scan, LidarConfig, SceneGenConfig};

    fn toy_cloud(seed: u64, geo: &Geometry) -> PointCloud {
        let scene = gen_scene(&SceneGenConfig::default(), &geo.vspec, seed).unwrap();
        lidar_scan(&scene, &LidarConfig::default(), seed)
    }

    #[test]
    fn empty_cloud_gives_bias_only_response() {
        let geo = toy_geometry();
        let model = TeacherModel::new(&ModelConfig::default(), &geo, 1);
        let mut tape = GradTape::new();
        let out = model
            .forward(&mut tape, &PointCloud { points: vec![] }, &geo)
            .unwrap();
        // Conv biases are zero-initialized, so a zero voxel grid flows
        // through as zeros and only the score prior bias survives.
        assert!(out.f_bev.as_slice().iter().all(|&v| v == 0.0));
        for &s in out.det.score.as_slice() {
            assert!((s - SCORE_PRIOR).abs() < 1e-12);
        }
    }

    #[test]
    fn output_shapes_follow_the_configured_grid() {
        let geo = toy_geometry();
        let cfg = ModelConfig::default();
        let model = TeacherModel::new(&cfg, &geo, 2);
        let mut tape = GradTape::new();
        let out = model.forward(&mut tape, &toy_cloud(5, &geo), &geo).unwrap();
        let (bh, bw) = geo.bev_dims();
        assert_eq!(out.f_bev.shape(), &[bh, bw, cfg.bev_channels]);
        assert_eq!(out.det.score.shape(), &[bh, bw, 1]);
        assert_eq!(out.det.reg.shape(), &[bh, bw, 8]);
        assert!(out.f_bev.all_finite());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let geo = toy_geometry();
        let model = TeacherModel::new(&ModelConfig::default(), &geo, 3);
        let cloud = toy_cloud(9, &geo);
        let mut t1 = GradTape::new();
        let a = model.forward(&mut t1, &cloud, &geo).unwrap();
        let mut t2 = GradTape::new();
        let b = model.forward(&mut t2, &cloud, &geo).unwrap();
        assert_eq!(a.f_bev.as_slice(), b.f_bev.as_slice());
        assert_eq!(a.det.score.as_slice(), b.det.score.as_slice());
        assert_eq!(a.det.reg.as_slice(), b.det.reg.as_slice());
    }

    #[test]
    fn same_seed_builds_identical_weights() {
        let geo = toy_geometry();
        let a = TeacherModel::new(&ModelConfig::default(), &geo, 7);
        let b = TeacherModel::new(&ModelConfig::default(), &geo, 7);
        let c = TeacherModel::new(&ModelConfig::default(), &geo, 8);
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.as_slice(), tb.as_slice());
        }
        let same_weights = a
            .params
            .iter()
            .zip(c.params.iter())
            .all(|((_, ta), (_, tc))| ta.as_slice() == tc.as_slice());
        assert!(!same_weights);
    }
}
