//! Camera and grid geometry for the BEV pipeline.
//!
//! World frame: x forward, y left, z up, ground at z = 0. Camera frame:
//! x right, y down, z forward. A pinhole camera with a rigid extrinsic
//! maps world points to continuous pixel coordinates; uniform depth bins
//! discretise camera depth; a voxel grid discretises world space. The tap
//! builder in [`frustum_taps`] glues these together: it projects every
//! voxel centre into the image/depth-bin frustum and precomputes the
//! trilinear gather weights used by [`crate::ops::frustum_sample`].
//!
//! Everything here runs in `f64` (the pipeline precision).

use crate::error::{Error, Result};
use crate::ops::FrustumTaps;
use crate::synthdata::PointCloud;
use crate::tensor::Tensor;
use crate::Tensor64;

/// Pinhole intrinsics plus a rigid world-to-camera extrinsic
/// (`p_cam = R·p_world + t`).
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CameraCalib {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rot: [[f64; 3]; 3],
    pub t: [f64; 3],
}

/// R·v for a 3×3 row-major matrix.
pub fn mat3_mul_vec(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

impl CameraCalib {
    /// Camera at `pos` looking along world +x with the image upright:
    /// camera right = −y_world, camera down = −z_world.
    pub fn looking_forward(pos: [f64; 3], fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        let rot = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
        let rp = mat3_mul_vec(&rot, pos);
        Self {
            fx,
            fy,
            cx,
            cy,
            rot,
            t: [-rp[0], -rp[1], -rp[2]],
        }
    }

    /// World point to camera frame.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = mat3_mul_vec(&self.rot, p);
        [r[0] + self.t[0], r[1] + self.t[1], r[2] + self.t[2]]
    }
}

/// Projects a world point to continuous pixel coordinates `(u, v)` (column,
/// row) and camera depth. Points at or behind the camera plane yield
/// `None`; points outside the image bounds are still returned.
pub fn project(calib: &CameraCalib, p: [f64; 3]) -> Option<(f64, f64, f64)> {
    let cam = calib.to_camera(p);
    let depth = cam[2];
    if depth <= 0.0 {
        return None;
    }
    Some((
        calib.fx * cam[0] / depth + calib.cx,
        calib.fy * cam[1] / depth + calib.cy,
        depth,
    ))
}

/// Uniform binning of camera depth over the half-open range
/// `[d_min, d_max)`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthBinSpec {
    pub n_bins: usize,
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthBinSpec {
    pub fn new(n_bins: usize, d_min: f64, d_max: f64) -> Result<Self> {
        if n_bins == 0 || !(d_max > d_min) || d_min < 0.0 {
            return Err(Error::InvalidSpec(format!(
                "depth bins need n>0 and 0 <= d_min < d_max, got ({n_bins}, {d_min}, {d_max})"
            )));
        }
        Ok(Self {
            n_bins,
            d_min,
            d_max,
        })
    }

    pub fn width(&self) -> f64 {
        (self.d_max - self.d_min) / self.n_bins as f64
    }

    /// Bin index of a depth, `None` outside `[d_min, d_max)`.
    pub fn depth_to_bin(&self, depth: f64) -> Option<usize> {
        if depth < self.d_min || depth >= self.d_max {
            return None;
        }
        let k = ((depth - self.d_min) / self.width()).floor() as usize;
        // Guard against the ulp where depth/width rounds up to n_bins.
        Some(k.min(self.n_bins - 1))
    }

    /// Depth at the centre of bin `k`.
    pub fn bin_center(&self, k: usize) -> f64 {
        self.d_min + (k as f64 + 0.5) * self.width()
    }

    /// Continuous bin coordinate of a depth, centred so that the middle of
    /// bin `k` maps to `k` exactly. Used for trilinear sampling.
    pub fn bin_coord(&self, depth: f64) -> f64 {
        (depth - self.d_min) / self.width() - 0.5
    }
}

/// Axis-aligned voxelisation of world space, half-open on every axis.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl VoxelGridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::InvalidSpec("voxel grid has a zero extent".into()));
        }
        if !(self.x_max > self.x_min && self.y_max > self.y_min && self.z_max > self.z_min) {
            return Err(Error::InvalidSpec("voxel grid bounds are inverted".into()));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> [f64; 3] {
        [
            (self.x_max - self.x_min) / self.nx as f64,
            (self.y_max - self.y_min) / self.ny as f64,
            (self.z_max - self.z_min) / self.nz as f64,
        ]
    }

    /// Cell indices of a point, `None` outside the half-open extents.
    pub fn point_to_cell(&self, p: [f64; 3]) -> Option<(usize, usize, usize)> {
        let [sx, sy, sz] = self.cell_size();
        if p[0] < self.x_min || p[0] >= self.x_max {
            return None;
        }
        if p[1] < self.y_min || p[1] >= self.y_max {
            return None;
        }
        if p[2] < self.z_min || p[2] >= self.z_max {
            return None;
        }
        let ix = (((p[0] - self.x_min) / sx).floor() as usize).min(self.nx - 1);
        let iy = (((p[1] - self.y_min) / sy).floor() as usize).min(self.ny - 1);
        let iz = (((p[2] - self.z_min) / sz).floor() as usize).min(self.nz - 1);
        Some((ix, iy, iz))
    }

    /// World coordinates of a cell centre.
    pub fn cell_center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        let [sx, sy, sz] = self.cell_size();
        [
            self.x_min + (ix as f64 + 0.5) * sx,
            self.y_min + (iy as f64 + 0.5) * sy,
            self.z_min + (iz as f64 + 0.5) * sz,
        ]
    }

    /// Centre of a BEV cell (x row, y column), at mid-height.
    pub fn bev_cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        let [sx, sy, _] = self.cell_size();
        [
            self.x_min + (ix as f64 + 0.5) * sx,
            self.y_min + (iy as f64 + 0.5) * sy,
        ]
    }
}

/// Bins a point cloud into a `[nx,ny,nz,2]` grid. Channel 0 is the point
/// count normalised by the busiest cell; channel 1 is the mean reflectance.
/// Per-cell reflectances are summed in ascending value order, so any
/// permutation of the input points produces bit-identical output.
pub fn voxelize(cloud: &PointCloud, spec: &VoxelGridSpec) -> Result<Tensor64> {
    spec.validate()?;
    let (nx, ny, nz) = (spec.nx, spec.ny, spec.nz);
    let ncells = nx * ny * nz;

    let mut binned: Vec<(usize, f64)> = Vec::with_capacity(cloud.points.len());
    for p in &cloud.points {
        if let Some((ix, iy, iz)) = spec.point_to_cell([p[0], p[1], p[2]]) {
            binned.push(((ix * ny + iy) * nz + iz, p[3]));
        }
    }
    binned.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut counts = vec![0usize; ncells];
    let mut refl_sum = vec![0.0f64; ncells];
    for (cell, r) in binned {
        counts[cell] += 1;
        refl_sum[cell] += r;
    }
    let max_count = counts.iter().copied().max().unwrap_or(0);

    let mut data = vec![0.0f64; ncells * 2];
    for cell in 0..ncells {
        if counts[cell] > 0 {
            data[cell * 2] = counts[cell] as f64 / max_count as f64;
            data[cell * 2 + 1] = refl_sum[cell] / counts[cell] as f64;
        }
    }
    Tensor::from_vec(&[nx, ny, nz, 2], data)
}

/// Continuous frustum coordinates `(v_row, u_col, bin)` of every voxel
/// centre, in voxel row-major order; `None` for voxels behind the camera.
pub fn voxel_projections(
    calib: &CameraCalib,
    vspec: &VoxelGridSpec,
    bins: &DepthBinSpec,
) -> Vec<Option<(f64, f64, f64)>> {
    let mut out = Vec::with_capacity(vspec.nx * vspec.ny * vspec.nz);
    for ix in 0..vspec.nx {
        for iy in 0..vspec.ny {
            for iz in 0..vspec.nz {
                let c = vspec.cell_center(ix, iy, iz);
                out.push(project(calib, c).map(|(u, v, depth)| (v, u, bins.bin_coord(depth))));
            }
        }
    }
    out
}

/// Builds the trilinear gather table from a `[h, w, n_bins]` frustum into
/// the voxel grid. Corners falling outside the frustum are dropped, so
/// voxels that project outside the image (or behind the camera) come back
/// zero when sampled.
pub fn frustum_taps(
    calib: &CameraCalib,
    vspec: &VoxelGridSpec,
    bins: &DepthBinSpec,
    h: usize,
    w: usize,
) -> FrustumTaps<f64> {
    let d = bins.n_bins;
    let mut taps = Vec::with_capacity(vspec.nx * vspec.ny * vspec.nz);
    for proj in voxel_projections(calib, vspec, bins) {
        let mut vt = Vec::new();
        if let Some((pv, pu, pb)) = proj {
            let (v0, u0, b0) = (pv.floor(), pu.floor(), pb.floor());
            let (dv, du, db) = (pv - v0, pu - u0, pb - b0);
            for (ci, corner_v) in [v0, v0 + 1.0].iter().enumerate() {
                let wv = if ci == 0 { 1.0 - dv } else { dv };
                if *corner_v < 0.0 || *corner_v >= h as f64 {
                    continue;
                }
                for (cj, corner_u) in [u0, u0 + 1.0].iter().enumerate() {
                    let wu = if cj == 0 { 1.0 - du } else { du };
                    if *corner_u < 0.0 || *corner_u >= w as f64 {
                        continue;
                    }
                    for (ck, corner_b) in [b0, b0 + 1.0].iter().enumerate() {
                        let wb = if ck == 0 { 1.0 - db } else { db };
                        if *corner_b < 0.0 || *corner_b >= d as f64 {
                            continue;
                        }
                        let flat = ((*corner_v as usize) * w + *corner_u as usize) * d
                            + *corner_b as usize;
                        vt.push((flat, wv * wu * wb));
                    }
                }
            }
        }
        taps.push(vt);
    }
    FrustumTaps {
        frustum_hwd: [h, w, d],
        voxel_dims: [vspec.nx, vspec.ny, vspec.nz],
        taps,
    }
}

/// Flattens `[nx,ny,nz,C]` voxel features to `[nx,ny,nz·C]` BEV features.
/// Pure reshape: the z stack becomes the channel axis.
pub fn height_compress(
    tape: &mut crate::tape::GradTape<f64>,
    vox: &Tensor64,
) -> Result<Tensor64> {
    if vox.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "height_compress expects [nx,ny,nz,C], got {:?}",
            vox.shape()
        )));
    }
    let s = vox.shape();
    crate::ops::reshape(tape, vox, &[s[0], s[1], s[2] * s[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::synthdata::PointCloud;
    use crate::tape::GradTape;
    use std::sync::Arc;

    fn toy_vspec() -> VoxelGridSpec {
        VoxelGridSpec {
            x_min: 2.0,
            x_max: 34.0,
            y_min: -8.0,
            y_max: 8.0,
            z_min: 0.0,
            z_max: 3.2,
            nx: 16,
            ny: 16,
            nz: 4,
        }
    }

    #[test]
    fn depth_bin_edges() {
        let b = DepthBinSpec::new(120, 2.0, 46.8).unwrap();
        assert_eq!(b.depth_to_bin(2.0), Some(0));
        assert_eq!(b.depth_to_bin(1.999_999), None);
        assert_eq!(b.depth_to_bin(46.8), None);
        assert_eq!(b.depth_to_bin(46.799), Some(119));
        assert_eq!(b.depth_to_bin(24.4), Some(60));
        assert!((b.width() - 0.373_333_333_333_333_3).abs() < 1e-15);
    }

    #[test]
    fn bin_center_roundtrip() {
        let b = DepthBinSpec::new(120, 2.0, 46.8).unwrap();
        for k in 0..b.n_bins {
            assert_eq!(b.depth_to_bin(b.bin_center(k)), Some(k), "bin {k}");
            assert!((b.bin_coord(b.bin_center(k)) - k as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn bad_bin_specs_are_rejected() {
        assert!(DepthBinSpec::new(0, 2.0, 46.8).is_err());
        assert!(DepthBinSpec::new(10, 5.0, 5.0).is_err());
        assert!(DepthBinSpec::new(10, -1.0, 5.0).is_err());
    }

    #[test]
    fn forward_camera_projects_centreline_to_principal_point() {
        let c = CameraCalib::looking_forward([0.0, 0.0, 1.6], 16.0, 16.0, 15.5, 11.5);
        let (u, v, d) = project(&c, [10.0, 0.0, 1.6]).unwrap();
        assert!((u - 15.5).abs() < 1e-12);
        assert!((v - 11.5).abs() < 1e-12);
        assert!((d - 10.0).abs() < 1e-12);
        // A point to the left (+y) lands left of centre (smaller u); the
        // ground lands below the horizon (larger v).
        let (u2, _, _) = project(&c, [10.0, 2.0, 1.6]).unwrap();
        assert!(u2 < 15.5);
        let (_, v3, _) = project(&c, [10.0, 0.0, 0.0]).unwrap();
        assert!(v3 > 11.5);
    }

    #[test]
    fn behind_camera_is_none() {
        let c = CameraCalib::looking_forward([0.0, 0.0, 1.6], 16.0, 16.0, 15.5, 11.5);
        assert!(project(&c, [-1.0, 0.0, 1.6]).is_none());
        assert!(project(&c, [0.0, 3.0, 1.0]).is_none()); // in the camera plane
    }

    fn rot_z(t: f64) -> [[f64; 3]; 3] {
        [
            [t.cos(), -t.sin(), 0.0],
            [t.sin(), t.cos(), 0.0],
            [0.0, 0.0, 1.0],
        ]
    }

    #[test]
    fn extrinsic_equals_pretransformed_identity() {
        // Projecting p through (R,t) must equal projecting R·p + t through
        // the identity extrinsic.
        let rot = rot_z(0.7);
        let t = [0.3, -1.2, 0.5];
        let with_ext = CameraCalib {
            fx: 20.0,
            fy: 18.0,
            cx: 10.0,
            cy: 8.0,
            rot,
            t,
        };
        let ident = CameraCalib {
            fx: 20.0,
            fy: 18.0,
            cx: 10.0,
            cy: 8.0,
            rot: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0, 0.0, 0.0],
        };
        let p = [1.3, 2.1, 7.9];
        let rp = mat3_mul_vec(&rot, p);
        let moved = [rp[0] + t[0], rp[1] + t[1], rp[2] + t[2]];
        let (u1, v1, d1) = project(&with_ext, p).unwrap();
        let (u2, v2, d2) = project(&ident, moved).unwrap();
        assert!((u1 - u2).abs() < 1e-12);
        assert!((v1 - v2).abs() < 1e-12);
        assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn voxelize_matches_brute_force() {
        let spec = toy_vspec();
        let mut pts = Vec::new();
        let mut state = 88172645463325252u64;
        let mut next = || {
            // xorshift64 is plenty for scattering test points
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..1000 {
            pts.push([
                next() * 40.0,
                next() * 20.0 - 10.0,
                next() * 4.0 - 0.5,
                next(),
            ]);
        }
        let cloud = PointCloud { points: pts.clone() };
        let vox = voxelize(&cloud, &spec).unwrap();

        // Brute force: per cell, scan every point; sum reflectances in
        // ascending order (the documented reduction order).
        let mut max_count = 0usize;
        let mut per_cell: Vec<Vec<f64>> = vec![Vec::new(); spec.nx * spec.ny * spec.nz];
        for p in &pts {
            if p[0] < spec.x_min || p[0] >= spec.x_max {
                continue;
            }
            if p[1] < spec.y_min || p[1] >= spec.y_max {
                continue;
            }
            if p[2] < spec.z_min || p[2] >= spec.z_max {
                continue;
            }
            let [sx, sy, sz] = spec.cell_size();
            let ix = ((p[0] - spec.x_min) / sx).floor() as usize;
            let iy = ((p[1] - spec.y_min) / sy).floor() as usize;
            let iz = ((p[2] - spec.z_min) / sz).floor() as usize;
            per_cell[(ix * spec.ny + iy) * spec.nz + iz].push(p[3]);
        }
        for c in &per_cell {
            max_count = max_count.max(c.len());
        }
        for (cell, refl) in per_cell.iter().enumerate() {
            let mut refl = refl.clone();
            refl.sort_by(|a, b| a.total_cmp(b));
            let count = refl.len();
            let expect_c = if count > 0 {
                count as f64 / max_count as f64
            } else {
                0.0
            };
            let expect_r = if count > 0 {
                refl.iter().sum::<f64>() / count as f64
            } else {
                0.0
            };
            assert_eq!(vox.as_slice()[cell * 2], expect_c, "count ch, cell {cell}");
            assert_eq!(vox.as_slice()[cell * 2 + 1], expect_r, "refl ch, cell {cell}");
        }
    }

    #[test]
    fn voxelize_is_permutation_invariant_bitwise() {
        let spec = toy_vspec();
        let pts: Vec<[f64; 4]> = (0..200)
            .map(|i| {
                let t = i as f64 * 0.618;
                [
                    2.0 + (t * 7.3) % 32.0,
                    -8.0 + (t * 3.1) % 16.0,
                    (t * 1.7) % 3.2,
                    (t * 0.9) % 1.0,
                ]
            })
            .collect();
        let fwd = voxelize(&PointCloud { points: pts.clone() }, &spec).unwrap();
        let mut rev_pts = pts.clone();
        rev_pts.reverse();
        let rev = voxelize(&PointCloud { points: rev_pts }, &spec).unwrap();
        assert_eq!(fwd.as_slice(), rev.as_slice());
    }

    #[test]
    fn empty_cloud_voxelizes_to_zeros() {
        let spec = toy_vspec();
        let vox = voxelize(&PointCloud { points: vec![] }, &spec).unwrap();
        assert!(vox.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn height_compress_is_contiguous_reshape() {
        let mut tape = GradTape::new();
        let vox = Tensor::from_vec(&[2, 2, 2, 3], (0..24).map(|v| v as f64).collect()).unwrap();
        let bev = height_compress(&mut tape, &vox).unwrap();
        assert_eq!(bev.shape(), &[2, 2, 6]);
        assert_eq!(bev.as_slice(), vox.as_slice());
        // Cell (1,0): z-stack [12..18) in order (z0 c0,c1,c2, z1 c0,c1,c2).
        assert_eq!(bev.get(&[1, 0, 0]), 12.0);
        assert_eq!(bev.get(&[1, 0, 5]), 17.0);
    }

    #[test]
    fn frustum_sampling_is_exact_on_affine_fields() {
        // A trilinear interpolant reproduces affine functions exactly, so a
        // frustum filled with f(v,u,b) = 2v + 3u + 5b + 1 must sample to
        // the same affine function of the continuous projection coords.
        let vspec = toy_vspec();
        let bins = DepthBinSpec::new(12, 2.0, 46.8).unwrap();
        let calib = CameraCalib::looking_forward([0.0, 0.0, 1.6], 16.0, 16.0, 15.5, 11.5);
        let (h, w) = (24usize, 32usize);
        let taps = Arc::new(frustum_taps(&calib, &vspec, &bins, h, w));

        let mut fr = vec![0.0f64; h * w * bins.n_bins];
        for v in 0..h {
            for u in 0..w {
                for b in 0..bins.n_bins {
                    fr[(v * w + u) * bins.n_bins + b] =
                        2.0 * v as f64 + 3.0 * u as f64 + 5.0 * b as f64 + 1.0;
                }
            }
        }
        let fr = Tensor::from_vec(&[h, w, bins.n_bins, 1], fr).unwrap();
        let mut tape = GradTape::new();
        let out = ops::frustum_sample(&mut tape, &fr, &taps).unwrap();

        let projs = voxel_projections(&calib, &vspec, &bins);
        let mut checked = 0;
        for (vi, proj) in projs.iter().enumerate() {
            let Some((pv, pu, pb)) = proj else { continue };
            // Only interior voxels have full 8-corner support.
            let interior = *pv >= 0.0
                && *pv <= (h - 1) as f64
                && *pu >= 0.0
                && *pu <= (w - 1) as f64
                && *pb >= 0.0
                && *pb <= (bins.n_bins - 1) as f64;
            if !interior {
                continue;
            }
            let expect = 2.0 * pv + 3.0 * pu + 5.0 * pb + 1.0;
            assert!(
                (out.as_slice()[vi] - expect).abs() <= 1e-9,
                "voxel {vi}: got {} want {expect}",
                out.as_slice()[vi]
            );
            checked += 1;
        }
        assert!(checked > 100, "too few interior voxels exercised: {checked}");
    }

    #[test]
    fn out_of_frustum_voxels_sample_to_zero() {
        let vspec = toy_vspec();
        let bins = DepthBinSpec::new(12, 2.0, 46.8).unwrap();
        // Narrow camera: most voxels project outside the 4×4 image.
        let calib = CameraCalib::looking_forward([0.0, 0.0, 1.6], 40.0, 40.0, 1.5, 1.5);
        let taps = Arc::new(frustum_taps(&calib, &vspec, &bins, 4, 4));
        let fr = Tensor::ones(&[4, 4, bins.n_bins, 1]);
        let mut tape = GradTape::new();
        let out = ops::frustum_sample(&mut tape, &fr, &taps).unwrap();
        let projs = voxel_projections(&calib, &vspec, &bins);
        for (vi, proj) in projs.iter().enumerate() {
            let outside = match proj {
                None => true,
                Some((pv, pu, _)) => *pv <= -1.0 || *pv >= 4.0 || *pu <= -1.0 || *pu >= 4.0,
            };
            if outside {
                assert_eq!(out.as_slice()[vi], 0.0, "voxel {vi} should be zero");
            }
        }
    }
}
