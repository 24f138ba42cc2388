//! BEV feature heatmaps as binary PGM images.
//!
//! A feature grid `[H, W, C]` collapses to one grey pixel per cell: the
//! channel mean of |value|, min–max normalized to 0–255, written as a
//! binary PGM (magic `P5`, maxval 255, rows top to bottom). PGM is
//! bit-exact, dependency-free and easy to diff in tests.
//!
//! Quantization pins two conventions:
//!
//! * A constant plane (including all-zero) has no contrast to show and
//!   maps to an all-zero (black) image.
//! * Any cell strictly above the plane minimum maps to at least 1, so a
//!   nonzero pixel count in the image equals the count of cells above
//!   the minimum. For masked residual grids, whose minimum is zero, the
//!   nonzero pixels are exactly the kept cells with positive magnitude.

use std::path::{Path, PathBuf};

use crate::distill::{residual_features, MaskConfig};
use crate::error::{Error, Result};
use crate::models::{Geometry, StudentModel, TAModel, TeacherModel};
use crate::synthdata::SceneSample;
use crate::tape::GradTape;
use crate::Tensor64;

/// Collapses `[H, W, C]` to the per-cell channel mean of |value|.
/// Returns `(height, width, plane)` with the plane in row-major order.
pub fn channel_mean_magnitude(t: &Tensor64) -> Result<(usize, usize, Vec<f64>)> {
    if t.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "heatmap expects a [H,W,C] grid, got {:?}",
            t.shape()
        )));
    }
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let data = t.as_slice();
    let plane = (0..h * w)
        .map(|cell| {
            let base = cell * c;
            data[base..base + c].iter().map(|v| v.abs()).sum::<f64>() / c as f64
        })
        .collect();
    Ok((h, w, plane))
}

/// Min–max normalizes a plane to bytes. The minimum maps to 0; any value
/// strictly above it maps to `1 + round(norm · 254)` ∈ [1, 255], so
/// "above minimum" and "nonzero pixel" coincide. A constant plane maps
/// to all zeros by convention.
pub fn normalize_to_bytes(plane: &[f64]) -> Vec<u8> {
    let min = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let max = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if plane.is_empty() || !(max > min) {
        return vec![0; plane.len()];
    }
    let span = max - min;
    plane
        .iter()
        .map(|&v| {
            if v > min {
                1 + ((v - min) / span * 254.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Assembles a binary PGM: header `P5\n{w} {h}\n255\n`, then `h` rows of
/// `w` bytes, top to bottom.
pub fn pgm_bytes(w: usize, h: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != w * h {
        return Err(Error::ShapeMismatch(format!(
            "pgm: {} pixels for a {w}x{h} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Full pipeline for one grid: channel-mean magnitude → normalize → PGM.
pub fn feature_to_pgm(t: &Tensor64) -> Result<Vec<u8>> {
    let (h, w, plane) = channel_mean_magnitude(t)?;
    pgm_bytes(w, h, &normalize_to_bytes(&plane))
}

pub fn write_feature_pgm(t: &Tensor64, path: &Path) -> Result<()> {
    std::fs::write(path, feature_to_pgm(t)?)?;
    Ok(())
}

/// Runs all three models on one scene and writes the six BEV heatmaps —
/// teacher, assistant, both student branches, the masked residual and
/// the fused student grid — as `{stem}_<grid>.pgm` under `out_dir`.
/// Returns the written paths in that order.
pub fn export_scene_heatmaps(
    teacher: &TeacherModel,
    ta: &TAModel,
    student: &StudentModel,
    sample: &SceneSample,
    geo: &Geometry,
    mask: &MaskConfig,
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    let mut tape = GradTape::training();
    let t_out = teacher.forward(&mut tape, &sample.cloud, geo)?;
    let ta_out = ta.forward(&mut tape, &sample.image, &sample.depth, geo)?;
    let s_out = student.forward(&mut tape, &sample.image, geo)?;
    let f_t = t_out.f_bev.detached();
    let f_ta = ta_out.f_bev.detached();
    let f_res = residual_features(&f_t, &f_ta, mask)?;
    std::fs::create_dir_all(out_dir)?;
    let grids: [(&str, &Tensor64); 6] = [
        ("f_t", &f_t),
        ("f_ta", &f_ta),
        ("f_s1", &s_out.f_s1),
        ("f_s2_star", &s_out.f_s2_star),
        ("f_res", &f_res),
        ("f_s", &s_out.f_s),
    ];
    let mut paths = Vec::with_capacity(grids.len());
    for (name, grid) in grids {
        let path = out_dir.join(format!("{stem}_{name}.pgm"));
        write_feature_pgm(grid, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::quantile_keep_indices;
    use crate::tensor::Tensor;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_zero_feature_gives_black_pgm_with_correct_header() {
        let t: Tensor64 = Tensor::zeros(&[32, 32, 4]);
        let pgm = feature_to_pgm(&t).unwrap();
        let header = b"P5\n32 32\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 32 * 32);
        assert!(pgm[header.len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn constant_nonzero_feature_maps_to_black_by_convention() {
        let t: Tensor64 = Tensor::filled(&[5, 7, 3], 2.75);
        let pgm = feature_to_pgm(&t).unwrap();
        let header = b"P5\n7 5\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert!(pgm[header.len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn normalization_maps_min_to_zero_and_max_to_255() {
        let bytes = normalize_to_bytes(&[0.0, 0.5, 1.0]);
        assert_eq!(bytes, vec![0, 128, 255]);
        // Values barely above the minimum still register as nonzero.
        let tiny = normalize_to_bytes(&[0.0, 1e-12, 1.0]);
        assert_eq!(tiny[0], 0);
        assert_eq!(tiny[1], 1);
        assert_eq!(tiny[2], 255);
    }

    #[test]
    fn residual_heatmap_nonzero_pixels_match_recomputed_mask() {
        let (h, w, c) = (16, 16, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::from_vec(
                &[h, w, c],
                (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let f_t: Tensor64 = mk(&mut rng);
        let f_ta: Tensor64 = mk(&mut rng);
        let cfg = MaskConfig { keep_quantile: 0.3 };
        let f_res = residual_features(&f_t, &f_ta, &cfg).unwrap();
        let pgm = feature_to_pgm(&f_res).unwrap();
        let header_len = format!("P5\n{w} {h}\n255\n").len();
        let nonzero_pixels = pgm[header_len..].iter().filter(|&&b| b != 0).count();

        // Independent recomputation of the kept set from the raw inputs.
        let cell_mag: Vec<f64> = (0..h * w)
            .map(|cell| {
                (0..c)
                    .map(|ch| {
                        let i = cell * c + ch;
                        (f_t.as_slice()[i] - f_ta.as_slice()[i]).abs()
                    })
                    .sum::<f64>()
                    / c as f64
            })
            .collect();
        let kept = quantile_keep_indices(&cell_mag, &cfg);
        let kept_positive = kept.iter().filter(|&&i| cell_mag[i] > 0.0).count();
        assert_eq!(nonzero_pixels, kept_positive);
        // With continuous random inputs every kept cell is positive.
        assert_eq!(kept_positive, cfg.keep_count(h * w));
    }

    #[test]
    fn export_writes_six_deterministic_files() {
        use crate::config::RunConfig;
        use crate::models::{StudentModel, TAModel, TeacherModel};
        use crate::synthdata::{build_dataset, derive_seed};

        let mut rc = RunConfig::default();
        rc.data.train_scenes = 1;
        let geo = rc.geometry().unwrap();
        let spec = rc.synth_spec(&geo.calib);
        let data = build_dataset(&spec, 1, rc.seed, 0).unwrap();
        let teacher = TeacherModel::new(&rc.model, &geo, derive_seed(rc.seed, "init/teacher", 0));
        let ta = TAModel::new(&rc.model, &geo, derive_seed(rc.seed, "init/ta", 0));
        let student = StudentModel::new(&rc.model, &geo, derive_seed(rc.seed, "init/student", 0));
        let dir = tempfile::tempdir().unwrap();
        let mask = rc.mask_config();
        let write = || {
            export_scene_heatmaps(
                &teacher,
                &ta,
                &student,
                &data.samples[0],
                &geo,
                &mask,
                dir.path(),
                "scene0",
            )
            .unwrap()
        };
        let paths = write();
        assert_eq!(paths.len(), 6);
        let names: Vec<String> = paths
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            names,
            vec![
                "scene0_f_t.pgm",
                "scene0_f_ta.pgm",
                "scene0_f_s1.pgm",
                "scene0_f_s2_star.pgm",
                "scene0_f_res.pgm",
                "scene0_f_s.pgm"
            ]
        );
        let first: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
        // Re-export and compare bytes: the export is a pure function of
        // models + scene.
        let paths2 = write();
        for (p, bytes) in paths2.iter().zip(&first) {
            assert_eq!(&std::fs::read(p).unwrap(), bytes);
        }
        // Header matches the BEV dimensions.
        let (nx, ny) = geo.bev_dims();
        let header = format!("P5\n{ny} {nx}\n255\n").into_bytes();
        assert_eq!(&first[0][..header.len()], &header[..]);
    }
}
