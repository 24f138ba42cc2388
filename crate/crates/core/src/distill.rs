//! Training objectives: feature-mimicking losses, masked residual
//! construction, focal classification and smooth-L1 regression terms, and
//! their composition into one reported total.
//!
//! The two feature losses compare the student's first branch against the
//! assistant grid and its enhanced second branch against the masked
//! teacher−assistant residual. Targets are always detached tensors, so no
//! gradient can reach frozen models. Scalar parts are combined with a
//! pinned floating-point association — `(imd + cmrd) + (cls + reg)` — so
//! the reported total equals the sum of the parts bit-for-bit.

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::GradTape;
use crate::tensor::Tensor;

/// Residual-mask settings: keep the highest-magnitude fraction of cells.
#[derive(Clone, Copy, Debug)]
pub struct MaskConfig {
    /// Fraction of BEV cells kept, in `(0, 1]`.
    pub keep_quantile: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { keep_quantile: 0.3 }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_quantile > 0.0 && self.keep_quantile <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "keep_quantile must lie in (0, 1], got {}",
                self.keep_quantile
            )));
        }
        Ok(())
    }

    /// Number of cells kept on an `n`-cell grid: `ceil(q·n)`.
    pub fn keep_count(&self, n_cells: usize) -> usize {
        (self.keep_quantile * n_cells as f64).ceil() as usize
    }
}

/// Indices (row-major cell order) of the kept cells: the `keep_count`
/// largest magnitudes, ties broken toward the smaller index.
pub fn quantile_keep_indices<F: Scalar>(cell_mag: &[F], cfg: &MaskConfig) -> Vec<usize> {
    let k = cfg.keep_count(cell_mag.len()).min(cell_mag.len());
    let mut order: Vec<usize> = (0..cell_mag.len()).collect();
    order.sort_by(|&i, &j| {
        cell_mag[j]
            .partial_cmp(&cell_mag[i])
            .expect("non-finite magnitude in mask")
            .then(i.cmp(&j))
    });
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    keep
}

/// Masked teacher−assistant residual (Mask(|F_T − F_TA|)).
///
/// Both inputs are plain detached grids of shape `[H, W, C]`; the result
/// is a fixed, gradient-free target. Cells are ranked by the channel mean
/// of `|F_T − F_TA|`; every cell outside the kept quantile is zeroed
/// across all channels.
pub fn residual_features<F: Scalar>(
    f_t: &Tensor<F>,
    f_ta: &Tensor<F>,
    cfg: &MaskConfig,
) -> Result<Tensor<F>> {
    cfg.validate()?;
    if f_t.shape() != f_ta.shape() {
        return Err(Error::ShapeMismatch(format!(
            "residual features: {:?} vs {:?}",
            f_t.shape(),
            f_ta.shape()
        )));
    }
    if f_t.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "residual features expect [H,W,C], got {:?}",
            f_t.shape()
        )));
    }
    let (h, w, c) = (f_t.shape()[0], f_t.shape()[1], f_t.shape()[2]);
    let at = f_t.as_slice();
    let ata = f_ta.as_slice();
    let mut diff: Vec<F> = at
        .iter()
        .zip(ata.iter())
        .map(|(&a, &b)| (a - b).abs())
        .collect();

    let inv_c = F::from_f64_lossy(1.0 / c as f64);
    let cell_mag: Vec<F> = (0..h * w)
        .map(|cell| {
            let base = cell * c;
            let mut s = F::zero();
            for ch in 0..c {
                s += diff[base + ch];
            }
            s * inv_c
        })
        .collect();

    let keep = quantile_keep_indices(&cell_mag, cfg);
    let mut kept = vec![false; h * w];
    for &i in &keep {
        kept[i] = true;
    }
    for cell in 0..h * w {
        if !kept[cell] {
            for ch in 0..c {
                diff[cell * c + ch] = F::zero();
            }
        }
    }
    Tensor::from_vec(&[h, w, c], diff)
}

/// Intra-modal feature loss: MSE between the student's first branch and
/// the (detached) assistant grid.
pub fn imd_loss<F: Scalar>(
    tape: &mut GradTape<F>,
    f_s1: &Tensor<F>,
    f_ta: &Tensor<F>,
) -> Result<Tensor<F>> {
    ops::mse(tape, f_s1, &f_ta.detached())
}

/// Cross-modal residual loss: MSE between the enhanced second branch and
/// the fixed masked residual.
pub fn cmrd_loss<F: Scalar>(
    tape: &mut GradTape<F>,
    f_s2_star: &Tensor<F>,
    f_res: &Tensor<F>,
) -> Result<Tensor<F>> {
    ops::mse(tape, f_s2_star, &f_res.detached())
}

/// Cross-modal baseline: MSE straight against the full (detached) teacher
/// grid. Shares the kernel with the other feature losses.
pub fn cmd_loss<F: Scalar>(
    tape: &mut GradTape<F>,
    f_student: &Tensor<F>,
    f_t: &Tensor<F>,
) -> Result<Tensor<F>> {
    ops::mse(tape, f_student, &f_t.detached())
}

/// Lower clamp applied to predicted scores inside the focal loss.
pub const QFL_SCORE_EPS: f64 = 1e-6;

/// Quality focal loss against soft targets, averaged over all cells:
/// per cell `−|y−σ|^β · [y·ln σ + (1−y)·ln(1−σ)]` with σ clamped to
/// `[1e-6, 1−1e-6]`. Targets are detached.
pub fn qfl<F: Scalar>(
    tape: &mut GradTape<F>,
    pred_score: &Tensor<F>,
    target: &Tensor<F>,
    beta: f64,
) -> Result<Tensor<F>> {
    if pred_score.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "qfl: {:?} vs {:?}",
            pred_score.shape(),
            target.shape()
        )));
    }
    let lo = F::from_f64_lossy(QFL_SCORE_EPS);
    let hi = F::one() - lo;
    let y = tape.constant(&target.detached());
    let one_minus_y = tape.constant(&target.map(|v| F::one() - v));

    let s = ops::clamp(tape, pred_score, lo, hi);
    let gap = ops::sub(tape, &s, &y)?;
    let weight = ops::abs_pow(tape, &gap, F::from_f64_lossy(beta));
    let log_s = ops::ln(tape, &s);
    let neg_s = ops::neg(tape, &s);
    let one_minus_s = ops::add_scalar(tape, &neg_s, F::one());
    let log_1ms = ops::ln(tape, &one_minus_s);
    let pos = ops::mul(tape, &y, &log_s);
    let negt = ops::mul(tape, &one_minus_y, &log_1ms);
    let ce = ops::add(tape, &pos, &negt)?;
    let weighted = ops::mul(tape, &weight, &ce);
    let m = ops::mean(tape, &weighted);
    Ok(ops::neg(tape, &m))
}

/// Smooth-L1 regression loss over foreground cells only.
///
/// `pred` and `target` are `[H, W, R]` regression maps; `foreground`
/// flags cells (row-major over `H·W`). The mean runs over selected cells
/// and channels. With no foreground the loss is an exact zero constant
/// and the returned flag is false so callers can log a warning.
pub fn smooth_l1<F: Scalar>(
    tape: &mut GradTape<F>,
    pred: &Tensor<F>,
    target: &Tensor<F>,
    foreground: &[bool],
) -> Result<(Tensor<F>, bool)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "smooth_l1: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "smooth_l1 expects [H,W,R], got {:?}",
            pred.shape()
        )));
    }
    let (h, w, r) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    if foreground.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "foreground mask has {} flags for {} cells",
            foreground.len(),
            h * w
        )));
    }
    let n_fg = foreground.iter().filter(|&&f| f).count();
    if n_fg == 0 {
        return Ok((tape.constant(&Tensor::scalar(F::zero())), false));
    }
    let mask_data: Vec<F> = (0..h * w * r)
        .map(|i| {
            if foreground[i / r] {
                F::one()
            } else {
                F::zero()
            }
        })
        .collect();
    let mask = tape.constant(&Tensor::from_vec(&[h, w, r], mask_data)?);
    let d = ops::sub(tape, pred, &target.detached())?;
    let elem = ops::smooth_l1_elem(tape, &d);
    let masked = ops::mul(tape, &elem, &mask);
    let total = ops::sum(tape, &masked);
    let loss = ops::scale(tape, &total, F::from_f64_lossy(1.0 / (n_fg * r) as f64));
    Ok((loss, true))
}

/// Cells whose score map exceeds `thresh`; row-major flags.
pub fn foreground_mask<F: Scalar>(score_map: &Tensor<F>, thresh: f64) -> Vec<bool> {
    let t = F::from_f64_lossy(thresh);
    score_map.as_slice().iter().map(|&s| s > t).collect()
}

/// One training step's loss parts. `l_logit = l_cls + l_reg` and
/// `l_total = (l_imd + l_cmrd) + l_logit + l_depth` hold exactly (the
/// association is pinned; `l_depth` is zero unless auxiliary depth
/// supervision is switched on).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_imd: f64,
    pub l_cmrd: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_depth: f64,
    pub l_logit: f64,
    pub l_total: f64,
}

impl LossReport {
    /// Combines parts, failing on any non-finite part with its name.
    pub fn new(l_imd: f64, l_cmrd: f64, l_cls: f64, l_reg: f64, l_depth: f64) -> Result<Self> {
        for (name, v) in [
            ("l_imd", l_imd),
            ("l_cmrd", l_cmrd),
            ("l_cls", l_cls),
            ("l_reg", l_reg),
            ("l_depth", l_depth),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "loss part {name} is non-finite ({v})"
                )));
            }
        }
        let l_logit = l_cls + l_reg;
        let l_total = (l_imd + l_cmrd) + l_logit + l_depth;
        Ok(Self {
            l_imd,
            l_cmrd,
            l_cls,
            l_reg,
            l_depth,
            l_logit,
            l_total,
        })
    }
}
