//! Deterministic synthetic scenes: oriented boxes on a ground plane, a
//! simulated LiDAR sweep, and a rendered camera view with ground-truth
//! depth.
//!
//! All randomness flows from a master seed through [`derive_seed`], and
//! every sampling loop draws in a fixed order, so a given seed reproduces
//! the same dataset bit for bit on any run.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::geometry::{mat3_mul_vec, CameraCalib, VoxelGridSpec};
use crate::tensor::Tensor;
use crate::Tensor64;

/// Depth-map value for pixels that hit nothing.
pub const DEPTH_SKY: f64 = -1.0;

/// Stable sub-seed for a (master seed, purpose, index) triple, via FNV-1a.
pub fn derive_seed(master: u64, tag: &str, k: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    };
    for b in master.to_le_bytes() {
        eat(b);
    }
    for b in tag.bytes() {
        eat(b);
    }
    for b in k.to_le_bytes() {
        eat(b);
    }
    h
}

/// Upright box: centre `(x, y, z)`, width `w` across the heading, length
/// `l` along it, height `h`, yaw about +z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
}

impl OrientedBox {
    /// BEV footprint corners, counter-clockwise.
    pub fn corners_bev(&self) -> [[f64; 2]; 4] {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[lx, ly]| [self.x + c * lx - s * ly, self.y + s * lx + c * ly])
    }

    /// Vertical extent `(z_low, z_high)`.
    pub fn z_interval(&self) -> (f64, f64) {
        (self.z - self.h / 2.0, self.z + self.h / 2.0)
    }

    pub fn bev_area(&self) -> f64 {
        self.w * self.l
    }

    /// As the 7-tuple `(x, y, z, w, l, h, yaw)`.
    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.w, self.l, self.h, self.yaw]
    }

    pub fn from_array(a: &[f64]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            z: a[2],
            w: a[3],
            l: a[4],
            h: a[5],
            yaw: a[6],
        }
    }
}

/// Ground-truth contents of one scene.
#[derive(Clone, Debug, Default)]
pub struct Scene {
    pub boxes: Vec<OrientedBox>,
}

/// Unordered points `(x, y, z, reflectance)`.
#[derive(Clone, Debug, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 4]>,
}

/// Per-pixel camera depth; [`DEPTH_SKY`] where no surface was hit.
#[derive(Clone, Debug)]
pub struct DepthMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.w + col]
    }
}

/// Box-placement parameters. Boxes spawn with their footprint inside the
/// voxel extents and inside a camera-visibility wedge `|y| ≤ min(y_cap,
/// y_slope·x)`, and are rejected until all pairwise BEV overlaps fall
/// below `max_bev_iou`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGenConfig {
    pub n_boxes_min: usize,
    pub n_boxes_max: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_slope: f64,
    pub y_cap: f64,
    pub w_range: [f64; 2],
    pub l_range: [f64; 2],
    pub h_range: [f64; 2],
    /// Yaw is drawn uniformly from `[-yaw_max, yaw_max)`. A cuboid is
    /// indistinguishable from itself rotated by π, so the (sin, cos) heading
    /// targets are only well posed when no two reachable yaws are π apart;
    /// keep `yaw_max < π/2` (default 75°) to guarantee that margin.
    pub yaw_max: f64,
    pub max_bev_iou: f64,
    pub rejection_budget: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            n_boxes_min: 1,
            n_boxes_max: 4,
            x_min: 6.0,
            x_max: 30.0,
            y_slope: 0.6,
            y_cap: 5.0,
            w_range: [1.6, 2.4],
            l_range: [2.4, 4.0],
            h_range: [1.2, 2.0],
            yaw_max: 75.0_f64.to_radians(),
            max_bev_iou: 0.05,
            rejection_budget: 1000,
        }
    }
}

/// Samples a scene. Draw order per candidate box is fixed:
/// `(x, y, w, l, h, yaw)`.
pub fn gen_scene(cfg: &SceneGenConfig, vspec: &VoxelGridSpec, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(cfg.n_boxes_min..=cfg.n_boxes_max);
    let mut boxes: Vec<OrientedBox> = Vec::with_capacity(n);
    let mut tries = 0usize;
    while boxes.len() < n {
        if tries >= cfg.rejection_budget {
            return Err(Error::RejectionBudget {
                placed: boxes.len(),
                requested: n,
            });
        }
        tries += 1;
        let x = rng.gen_range(cfg.x_min..cfg.x_max);
        let y_lim = cfg.y_cap.min(cfg.y_slope * x);
        let y = rng.gen_range(-y_lim..y_lim);
        let w = rng.gen_range(cfg.w_range[0]..cfg.w_range[1]);
        let l = rng.gen_range(cfg.l_range[0]..cfg.l_range[1]);
        let h = rng.gen_range(cfg.h_range[0]..cfg.h_range[1]);
        let yaw = rng.gen_range(-cfg.yaw_max..cfg.yaw_max);
        let candidate = OrientedBox {
            x,
            y,
            z: h / 2.0,
            w,
            l,
            h,
            yaw,
        };

        let inside = candidate.corners_bev().iter().all(|&[cx, cy]| {
            cx >= vspec.x_min
                && cx < vspec.x_max
                && cy >= vspec.y_min
                && cy < vspec.y_max
                && cy.abs() <= cfg.y_cap.min(cfg.y_slope * cx).max(0.0)
        });
        if !inside || candidate.z_interval().1 >= vspec.z_max {
            continue;
        }
        let overlaps = boxes
            .iter()
            .any(|b| crate::eval::iou_bev(b, &candidate) >= cfg.max_bev_iou);
        if overlaps {
            continue;
        }
        boxes.push(candidate);
    }
    Ok(Scene { boxes })
}

/// Deterministic per-box surface albedo, spread over [0.3, 0.9).
pub fn box_albedo(index: usize) -> f64 {
    0.3 + 0.6 * ((index as f64 + 1.0) * 0.618_033_988_749_894_9).fract()
}

/// Albedo of the ground plane.
pub const GROUND_ALBEDO: f64 = 0.12;

/// Ray/box intersection in the box frame (slab test). Returns the entry
/// parameter `t > 0` in units of `dir`, or `None`. Rays starting inside
/// the box miss.
pub(crate) fn ray_box_intersect(o: [f64; 3], dir: [f64; 3], b: &OrientedBox) -> Option<f64> {
    // Rotate into the box frame: subtract the centre, rotate by -yaw.
    let (c, s) = (b.yaw.cos(), b.yaw.sin());
    let rel = [o[0] - b.x, o[1] - b.y, o[2] - b.z];
    let ob = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]];
    let db = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let half = [b.l / 2.0, b.w / 2.0, b.h / 2.0];

    let mut t_min = f64::NEG_INFINITY;
    let mut t_max = f64::INFINITY;
    for a in 0..3 {
        if db[a].abs() < 1e-12 {
            if ob[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let mut t0 = (-half[a] - ob[a]) / db[a];
        let mut t1 = (half[a] - ob[a]) / db[a];
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_min = t_min.max(t0);
        t_max = t_max.min(t1);
        if t_min > t_max {
            return None;
        }
    }
    (t_min > 0.0).then_some(t_min)
}

/// First surface along a ray: `(t, box index or None for ground,
/// world-frame surface normal)`.
pub(crate) fn ray_scene_intersect(
    o: [f64; 3],
    dir: [f64; 3],
    scene: &Scene,
    ground: bool,
) -> Option<(f64, Option<usize>, [f64; 3])> {
    let mut best: Option<(f64, Option<usize>, [f64; 3])> = None;
    for (i, b) in scene.boxes.iter().enumerate() {
        if let Some(t) = ray_box_intersect(o, dir, b) {
            if best.map_or(true, |(bt, _, _)| t < bt) {
                best = Some((t, Some(i), box_hit_normal(o, dir, t, b)));
            }
        }
    }
    if ground && dir[2] < -1e-12 {
        let t = -o[2] / dir[2];
        if t > 0.0 && best.map_or(true, |(bt, _, _)| t < bt) {
            best = Some((t, None, [0.0, 0.0, 1.0]));
        }
    }
    best
}

/// Outward world-frame normal of the box face hit at parameter `t`.
fn box_hit_normal(o: [f64; 3], dir: [f64; 3], t: f64, b: &OrientedBox) -> [f64; 3] {
    let p = [o[0] + t * dir[0], o[1] + t * dir[1], o[2] + t * dir[2]];
    let (c, s) = (b.yaw.cos(), b.yaw.sin());
    let rel = [p[0] - b.x, p[1] - b.y, p[2] - b.z];
    let pb = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]];
    let half = [b.l / 2.0, b.w / 2.0, b.h / 2.0];
    // The face whose slab the hit point sits on (largest normalised coord).
    let mut axis = 0;
    let mut best = f64::NEG_INFINITY;
    for a in 0..3 {
        let v = pb[a].abs() / half[a];
        if v > best {
            best = v;
            axis = a;
        }
    }
    let sign = pb[axis].signum();
    let local = match axis {
        0 => [sign, 0.0, 0.0],
        1 => [0.0, sign, 0.0],
        _ => [0.0, 0.0, sign],
    };
    // Rotate the local normal back to world frame (+yaw).
    [
        c * local[0] - s * local[1],
        s * local[0] + c * local[1],
        local[2],
    ]
}

/// LiDAR sweep parameters: a fan of rays from a sensor on the +z axis.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarConfig {
    pub n_azimuth: usize,
    pub azimuth_min: f64,
    pub azimuth_max: f64,
    pub n_rings: usize,
    pub elevation_min: f64,
    pub elevation_max: f64,
    pub max_range: f64,
    pub sigma_range: f64,
    pub ground: bool,
    pub sensor_height: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            n_azimuth: 96,
            azimuth_min: -1.4,
            azimuth_max: 1.4,
            n_rings: 12,
            elevation_min: -0.42,
            elevation_max: 0.07,
            max_range: 60.0,
            sigma_range: 0.02,
            ground: true,
            sensor_height: 1.6,
        }
    }
}

fn lerp_step(lo: f64, hi: f64, i: usize, n: usize) -> f64 {
    if n <= 1 {
        (lo + hi) / 2.0
    } else {
        lo + (hi - lo) * i as f64 / (n - 1) as f64
    }
}

/// Casts the ray fan against the scene. Rays sweep rings (outer) then
/// azimuths (inner); one Gaussian range perturbation is drawn per hit.
/// Misses and hits beyond `max_range` emit nothing.
pub fn lidar_scan(scene: &Scene, cfg: &LidarConfig, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.sigma_range.max(0.0)).expect("sigma >= 0");
    let o = [0.0, 0.0, cfg.sensor_height];
    let mut points = Vec::new();
    for ring in 0..cfg.n_rings {
        let elev = lerp_step(cfg.elevation_min, cfg.elevation_max, ring, cfg.n_rings);
        for a in 0..cfg.n_azimuth {
            let az = lerp_step(cfg.azimuth_min, cfg.azimuth_max, a, cfg.n_azimuth);
            let dir = [elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()];
            let Some((t, hit_box, _)) = ray_scene_intersect(o, dir, scene, cfg.ground) else {
                continue;
            };
            if t > cfg.max_range {
                continue;
            }
            let t_noisy = if cfg.sigma_range > 0.0 {
                t + noise.sample(&mut rng)
            } else {
                t
            };
            let refl = match hit_box {
                Some(i) => box_albedo(i),
                None => GROUND_ALBEDO,
            };
            points.push([
                o[0] + t_noisy * dir[0],
                o[1] + t_noisy * dir[1],
                o[2] + t_noisy * dir[2],
                refl,
            ]);
        }
    }
    PointCloud { points }
}

/// Camera rendering parameters.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    /// Per-channel Gaussian pixel noise.
    pub noise_sigma: f64,
    /// Depth at which the inverse-depth channel saturates to 1.
    pub inv_depth_ref: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.02,
            inv_depth_ref: 2.0,
        }
    }
}

const LIGHT_DIR: [f64; 3] = [0.456, -0.274, 0.821]; // roughly unit length

/// Renders the camera view: a `[h,w,3]` image (inverse depth, surface
/// shade, albedo; all noisy, clamped to [0,1]) and the exact per-pixel
/// depth. Pixel rays use unnormalised direction `((u−cx)/fx, (v−cy)/fy,
/// 1)` in the camera frame, so the hit parameter *is* the camera depth.
/// Three noise draws happen per pixel regardless of hits.
pub fn render_views(
    scene: &Scene,
    calib: &CameraCalib,
    h: usize,
    w: usize,
    cfg: &RenderConfig,
    seed: u64,
) -> (Tensor64, DepthMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("sigma >= 0");
    // Camera origin and rotation transposed (camera→world).
    let rt = transpose3(&calib.rot);
    let origin = mat3_mul_vec(&rt, [-calib.t[0], -calib.t[1], -calib.t[2]]);

    let mut img = vec![0.0f64; h * w * 3];
    let mut depth = vec![DEPTH_SKY; h * w];
    for r in 0..h {
        for c in 0..w {
            let dir_cam = [
                (c as f64 - calib.cx) / calib.fx,
                (r as f64 - calib.cy) / calib.fy,
                1.0,
            ];
            let dir = mat3_mul_vec(&rt, dir_cam);
            let hit = ray_scene_intersect(origin, dir, scene, true);
            let (mut ch0, mut ch1, mut ch2) = (0.0, 0.0, 0.0);
            if let Some((t, hit_box, normal)) = hit {
                depth[r * w + c] = t;
                ch0 = (cfg.inv_depth_ref / t).clamp(0.0, 1.0);
                let dot = normal[0] * LIGHT_DIR[0]
                    + normal[1] * LIGHT_DIR[1]
                    + normal[2] * LIGHT_DIR[2];
                ch1 = dot.abs().clamp(0.0, 1.0);
                ch2 = match hit_box {
                    Some(i) => box_albedo(i),
                    None => GROUND_ALBEDO,
                };
            }
            let base = (r * w + c) * 3;
            for (k, v) in [ch0, ch1, ch2].into_iter().enumerate() {
                let n = if cfg.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                img[base + k] = (v + n).clamp(0.0, 1.0);
            }
        }
    }
    (
        Tensor::from_vec(&[h, w, 3], img).expect("image shape"),
        DepthMap { h, w, data: depth },
    )
}

fn transpose3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

/// One fully-rendered scene.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub scene: Scene,
    pub cloud: PointCloud,
    pub image: Tensor64,
    pub depth: DepthMap,
}

/// An ordered set of scene samples.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<SceneSample>,
}

/// Everything needed to synthesise scenes.
pub struct SynthSpec<'a> {
    pub gen: &'a SceneGenConfig,
    pub lidar: &'a LidarConfig,
    pub render: &'a RenderConfig,
    pub calib: &'a CameraCalib,
    pub vspec: &'a VoxelGridSpec,
    pub image_h: usize,
    pub image_w: usize,
}

/// Builds `n` scenes. Scene `i` uses sub-seeds derived from
/// `(master, "scene"/"lidar"/"render", offset + i)`, so train and eval
/// splits built at different offsets never share randomness.
pub fn build_dataset(spec: &SynthSpec, n: usize, master: u64, offset: u64) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let k = offset + i as u64;
        let scene = gen_scene(spec.gen, spec.vspec, derive_seed(master, "scene", k))?;
        let cloud = lidar_scan(&scene, spec.lidar, derive_seed(master, "lidar", k));
        let (image, depth) = render_views(
            &scene,
            spec.calib,
            spec.image_h,
            spec.image_w,
            spec.render,
            derive_seed(master, "render", k),
        );
        samples.push(SceneSample {
            scene,
            cloud,
            image,
            depth,
        });
    }
    Ok(Dataset { samples })
}

impl Dataset {
    /// Serialises to a container: a scene-count record followed by four
    /// records per scene, in scene order.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.push_i64("meta/n_scenes", &[1], vec![self.samples.len() as i64]);
        for (i, s) in self.samples.iter().enumerate() {
            let boxes: Vec<f64> = s
                .scene
                .boxes
                .iter()
                .flat_map(|b| b.to_array())
                .collect();
            c.push_f64(
                &format!("scene/{i}/boxes"),
                &[s.scene.boxes.len(), 7],
                boxes,
            );
            let cloud: Vec<f64> = s.cloud.points.iter().flatten().copied().collect();
            c.push_f64(
                &format!("scene/{i}/cloud"),
                &[s.cloud.points.len(), 4],
                cloud,
            );
            c.push_f64(
                &format!("scene/{i}/image"),
                s.image.shape(),
                s.image.to_vec(),
            );
            c.push_f64(
                &format!("scene/{i}/depth"),
                &[s.depth.h, s.depth.w],
                s.depth.data.clone(),
            );
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let n = c.i64_scalar("meta/n_scenes")? as usize;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let (bdims, bdata) = c.f64_record(&format!("scene/{i}/boxes"))?;
            if bdims.len() != 2 || bdims[1] != 7 {
                return Err(Error::BadContainer(format!("scene {i} boxes shape")));
            }
            let boxes = bdata.chunks_exact(7).map(OrientedBox::from_array).collect();

            let (cdims, cdata) = c.f64_record(&format!("scene/{i}/cloud"))?;
            if cdims.len() != 2 || cdims[1] != 4 {
                return Err(Error::BadContainer(format!("scene {i} cloud shape")));
            }
            let points = cdata
                .chunks_exact(4)
                .map(|p| [p[0], p[1], p[2], p[3]])
                .collect();

            let (idims, idata) = c.f64_record(&format!("scene/{i}/image"))?;
            if idims.len() != 3 || idims[2] != 3 {
                return Err(Error::BadContainer(format!("scene {i} image shape")));
            }
            let image = Tensor::from_vec(&[idims[0], idims[1], idims[2]], idata.to_vec())?;

            let (ddims, ddata) = c.f64_record(&format!("scene/{i}/depth"))?;
            if ddims.len() != 2 {
                return Err(Error::BadContainer(format!("scene {i} depth shape")));
            }
            samples.push(SceneSample {
                scene: Scene { boxes },
                cloud: PointCloud { points },
                image,
                depth: DepthMap {
                    h: ddims[0],
                    w: ddims[1],
                    data: ddata.to_vec(),
                },
            });
        }
        Ok(Self { samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::iou_bev;

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
    fn derive_seed_is_stable_and_distinct() {
        let a = derive_seed(7, "scene", 0);
        assert_eq!(a, derive_seed(7, "scene", 0));
        assert_ne!(a, derive_seed(7, "scene", 1));
        assert_ne!(a, derive_seed(7, "lidar", 0));
        assert_ne!(a, derive_seed(8, "scene", 0));
    }

    #[test]
    fn scenes_are_reproducible_and_respect_invariants() {
        let cfg = SceneGenConfig::default();
        let vspec = toy_vspec();
        for seed in 0..50u64 {
            let s1 = gen_scene(&cfg, &vspec, seed).unwrap();
            let s2 = gen_scene(&cfg, &vspec, seed).unwrap();
            assert_eq!(s1.boxes, s2.boxes, "seed {seed} not reproducible");
            assert!(!s1.boxes.is_empty() && s1.boxes.len() <= cfg.n_boxes_max);
            for b in &s1.boxes {
                for [cx, cy] in b.corners_bev() {
                    assert!(cx >= vspec.x_min && cx < vspec.x_max, "x corner");
                    assert!(cy >= vspec.y_min && cy < vspec.y_max, "y corner");
                }
                assert!(b.z_interval().1 < vspec.z_max);
                assert!((b.z - b.h / 2.0).abs() < 1e-12, "boxes rest on ground");
            }
            for i in 0..s1.boxes.len() {
                for j in i + 1..s1.boxes.len() {
                    assert!(
                        iou_bev(&s1.boxes[i], &s1.boxes[j]) < cfg.max_bev_iou,
                        "seed {seed}: boxes {i},{j} overlap"
                    );
                }
            }
        }
    }

    #[test]
    fn empty_scene_with_ground_off_yields_empty_cloud() {
        let cfg = LidarConfig {
            ground: false,
            ..Default::default()
        };
        let cloud = lidar_scan(&Scene::default(), &cfg, 3);
        assert!(cloud.points.is_empty());
    }

    #[test]
    fn noiseless_hits_lie_on_box_faces() {
        let b = OrientedBox {
            x: 10.0,
            y: 0.5,
            z: 0.9,
            w: 2.0,
            l: 3.5,
            h: 1.8,
            yaw: 0.4,
        };
        let scene = Scene { boxes: vec![b] };
        let cfg = LidarConfig {
            sigma_range: 0.0,
            ground: false,
            ..Default::default()
        };
        let cloud = lidar_scan(&scene, &cfg, 0);
        assert!(cloud.points.len() > 20, "box should catch many rays");
        let (c, s) = (b.yaw.cos(), b.yaw.sin());
        for p in &cloud.points {
            let rel = [p[0] - b.x, p[1] - b.y, p[2] - b.z];
            let pb = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]];
            let half = [b.l / 2.0, b.w / 2.0, b.h / 2.0];
            // On a face, one |coordinate| equals its half-extent and the
            // others are inside.
            let residual = (0..3)
                .map(|a| pb[a].abs() - half[a])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(residual.abs() <= 1e-9, "off-face residual {residual}");
            assert_eq!(p[3], box_albedo(0));
        }
    }

    #[test]
    fn ground_points_have_zero_height() {
        let cfg = LidarConfig {
            sigma_range: 0.0,
            ..Default::default()
        };
        let cloud = lidar_scan(&Scene::default(), &cfg, 1);
        assert!(!cloud.points.is_empty());
        for p in &cloud.points {
            assert!(p[2].abs() <= 1e-9);
            assert_eq!(p[3], GROUND_ALBEDO);
        }
    }

    #[test]
    fn lidar_is_deterministic_across_calls() {
        let scene = gen_scene(&SceneGenConfig::default(), &toy_vspec(), 5).unwrap();
        let cfg = LidarConfig::default();
        let a = lidar_scan(&scene, &cfg, 42);
        let b = lidar_scan(&scene, &cfg, 42);
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn render_depth_is_positive_or_sentinel() {
        let scene = gen_scene(&SceneGenConfig::default(), &toy_vspec(), 11).unwrap();
        let calib = CameraCalib::looking_forward([0.0, 0.0, 1.6], 16.0, 16.0, 15.5, 11.5);
        let (img, depth) = render_views(&scene, &calib, 24, 32, &RenderConfig::default(), 9);
        assert!(img.all_finite());
        assert!(img.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for &d in &depth.data {
            assert!(d > 0.0 || d == DEPTH_SKY);
        }
        // Some sky above the horizon, some surface below.
        assert!(depth.data.iter().any(|&d| d == DEPTH_SKY));
        assert!(depth.data.iter().any(|&d| d > 0.0));
    }

    #[test]
    fn lidar_and_camera_geometry_agree() {
        // Every camera-visible noiseless LiDAR point must project onto a
        // pixel whose rendered depth matches the point's camera depth to
        // within one depth-bin width. Visibility is decided by re-casting
        // a camera ray at the point.
        let scene = gen_scene(&SceneGenConfig::default(), &toy_vspec(), 21).unwrap();
        let calib = CameraCalib::looking_forward([0.0, 0.0, 1.6], 16.0, 16.0, 15.5, 11.5);
        let lidar_cfg = LidarConfig {
            sigma_range: 0.0,
            ..Default::default()
        };
        let render_cfg = RenderConfig {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let (h, w) = (24usize, 32usize);
        let cloud = lidar_scan(&scene, &lidar_cfg, 0);
        let (_, depth) = render_views(&scene, &calib, h, w, &render_cfg, 0);
        let bin_width = crate::geometry::DepthBinSpec::new(12, 2.0, 46.8)
            .unwrap()
            .width();

        let rt = transpose3(&calib.rot);
        let cam_origin = mat3_mul_vec(&rt, [-calib.t[0], -calib.t[1], -calib.t[2]]);
        let mut checked = 0usize;
        for p in &cloud.points {
            let Some((u, v, d)) = crate::geometry::project(&calib, [p[0], p[1], p[2]]) else {
                continue;
            };
            let (c0, r0) = (u.floor(), v.floor());
            if c0 < 0.0 || c0 + 1.0 >= w as f64 || r0 < 0.0 || r0 + 1.0 >= h as f64 {
                continue;
            }
            // Occlusion check: cast from the camera toward the point.
            let dir = [
                p[0] - cam_origin[0],
                p[1] - cam_origin[1],
                p[2] - cam_origin[2],
            ];
            let vis = ray_scene_intersect(cam_origin, dir, &scene, true)
                .map(|(t, _, _)| (t - 1.0).abs() < 1e-6)
                .unwrap_or(false);
            if !vis {
                continue;
            }
            // Bilinearly interpolate the four surrounding depth samples,
            // skipping cells that straddle a silhouette (sky neighbours or
            // a depth spread over one metre): there the map legitimately
            // sees a different surface than the point.
            let (ri, ci) = (r0 as usize, c0 as usize);
            let corners = [
                depth.at(ri, ci),
                depth.at(ri, ci + 1),
                depth.at(ri + 1, ci),
                depth.at(ri + 1, ci + 1),
            ];
            if corners.iter().any(|&dc| dc == DEPTH_SKY) {
                continue;
            }
            let spread = corners.iter().fold(f64::MIN, |a, &b| a.max(b))
                - corners.iter().fold(f64::MAX, |a, &b| a.min(b));
            if spread > 1.0 {
                continue;
            }
            let (fu, fv) = (u - c0, v - r0);
            let dm = corners[0] * (1.0 - fv) * (1.0 - fu)
                + corners[1] * (1.0 - fv) * fu
                + corners[2] * fv * (1.0 - fu)
                + corners[3] * fv * fu;
            assert!(
                (dm - d).abs() <= bin_width,
                "depth map {dm} vs projected {d}"
            );
            checked += 1;
        }
        assert!(checked > 50, "only {checked} points verified");
    }

    #[test]
    fn dataset_container_roundtrip() {
        let vspec = toy_vspec();
        let calib = CameraCalib::looking_forward([0.0, 0.0, 1.6], 16.0, 16.0, 15.5, 11.5);
        let spec = SynthSpec {
            gen: &SceneGenConfig::default(),
            lidar: &LidarConfig::default(),
            render: &RenderConfig::default(),
            calib: &calib,
            vspec: &vspec,
            image_h: 12,
            image_w: 16,
        };
        let ds = build_dataset(&spec, 3, 99, 0).unwrap();
        let bytes = ds.to_container().to_bytes();
        let back = Dataset::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.samples.len(), 3);
        for (a, b) in ds.samples.iter().zip(back.samples.iter()) {
            assert_eq!(a.scene.boxes, b.scene.boxes);
            assert_eq!(a.cloud.points, b.cloud.points);
            assert_eq!(a.image.as_slice(), b.image.as_slice());
            assert_eq!(a.depth.data, b.depth.data);
        }
        // Bit-identical re-serialisation.
        assert_eq!(bytes, back.to_container().to_bytes());
    }

    #[test]
    fn dataset_builds_are_seed_reproducible() {
        let vspec = toy_vspec();
        let calib = CameraCalib::looking_forward([0.0, 0.0, 1.6], 16.0, 16.0, 15.5, 11.5);
        let spec = SynthSpec {
            gen: &SceneGenConfig::default(),
            lidar: &LidarConfig::default(),
            render: &RenderConfig::default(),
            calib: &calib,
            vspec: &vspec,
            image_h: 8,
            image_w: 12,
        };
        let a = build_dataset(&spec, 2, 7, 0).unwrap().to_container().to_bytes();
        let b = build_dataset(&spec, 2, 7, 0).unwrap().to_container().to_bytes();
        assert_eq!(a, b);
        let c = build_dataset(&spec, 2, 8, 0).unwrap().to_container().to_bytes();
        assert_ne!(a, c);
    }
}
