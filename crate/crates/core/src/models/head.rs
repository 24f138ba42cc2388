//! Toy detection head: two 3×3 convolutions, then per-cell 1×1 heads
//! emitting a sigmoid objectness score and eight box-regression channels.

use crate::error::Result;
use crate::ops;
use crate::tape::GradTape;
use crate::Tensor64;

use super::layers::Conv2dLayer;
use super::{focal_bias, ModelParams, BOX_ENCODING};

/// Regression channel count per BEV cell.
pub const REG_CHANNELS: usize = BOX_ENCODING;

/// Per-cell predictions over the BEV grid: `score` is `[H,W,1]` in (0,1),
/// `reg` is `[H,W,8]` in the box encoding.
#[derive(Clone, Debug)]
pub struct DetectionSet {
    pub score: Tensor64,
    pub reg: Tensor64,
}

impl DetectionSet {
    /// Same maps with all tape linkage dropped (fixed targets).
    pub fn detached(&self) -> Self {
        Self {
            score: self.score.detached(),
            reg: self.reg.detached(),
        }
    }
}

/// Head layers over a BEV feature grid.
#[derive(Clone, Debug)]
pub struct DetectHead {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    cls: Conv2dLayer,
    reg: Conv2dLayer,
}

/// Foreground prior encoded into the freshly initialized score bias.
pub const SCORE_PRIOR: f64 = 0.1;

impl DetectHead {
    pub fn init(
        params: &mut ModelParams,
        name: &str,
        c_in: usize,
        c_mid: usize,
        master_seed: u64,
    ) -> Self {
        Self {
            conv1: Conv2dLayer::init(params, &format!("{name}/conv1"), 3, 1, c_in, c_mid, master_seed),
            conv2: Conv2dLayer::init(params, &format!("{name}/conv2"), 3, 1, c_mid, c_mid, master_seed),
            cls: Conv2dLayer::init_with_bias(
                params,
                &format!("{name}/cls"),
                1,
                1,
                c_mid,
                1,
                master_seed,
                focal_bias(SCORE_PRIOR),
            ),
            reg: Conv2dLayer::init(params, &format!("{name}/reg"), 1, 1, c_mid, REG_CHANNELS, master_seed),
        }
    }

    pub fn forward(
        &self,
        params: &ModelParams,
        tape: &mut GradTape<f64>,
        f_bev: &Tensor64,
    ) -> Result<DetectionSet> {
        let h = self.conv1.forward(params, tape, f_bev)?;
        let h = ops::relu(tape, &h);
        let h = self.conv2.forward(params, tape, &h)?;
        let h = ops::relu(tape, &h);
        let logits = self.cls.forward(params, tape, &h)?;
        let score = ops::sigmoid(tape, &logits);
        let reg = self.reg.forward(params, tape, &h)?;
        Ok(DetectionSet { score, reg })
    }
}
