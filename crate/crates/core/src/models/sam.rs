//! Spatial attention (SAM) and feature-fusion (FFM) modules.
//!
//! SAM cascades three atrous convolutions (dilation rates 1, 2, 3 with
//! ReLU after each), a deformable convolution and squeeze-and-excitation
//! channel attention; it aligns the student's cross-modal branch with the
//! residual target. FFM adds the two branch grids elementwise and mixes
//! the sum through three 3×3 convolutions with ReLUs between them.

use crate::error::Result;
use crate::ops;
use crate::tape::GradTape;
use crate::Tensor64;

use super::layers::{Conv2dLayer, DeformLayer, SeBlock};
use super::ModelParams;

/// Spatial attention module over a BEV grid (shape preserving).
#[derive(Clone, Debug)]
pub struct SamModule {
    atrous: [Conv2dLayer; 3],
    deform: DeformLayer,
    se: SeBlock,
}

impl SamModule {
    pub fn init(
        params: &mut ModelParams,
        name: &str,
        channels: usize,
        se_reduction: usize,
        master_seed: u64,
    ) -> Self {
        let atrous = [1, 2, 3].map(|rate| {
            Conv2dLayer::init(
                params,
                &format!("{name}/atrous{rate}"),
                3,
                rate,
                channels,
                channels,
                master_seed,
            )
        });
        let deform = DeformLayer::init(params, &format!("{name}/deform"), 3, channels, channels, master_seed);
        let se = SeBlock::init(params, &format!("{name}/se"), channels, se_reduction, master_seed);
        Self { atrous, deform, se }
    }

    pub fn forward(
        &self,
        params: &ModelParams,
        tape: &mut GradTape<f64>,
        x: &Tensor64,
    ) -> Result<Tensor64> {
        let mut h = x.clone();
        for conv in &self.atrous {
            h = conv.forward(params, tape, &h)?;
            h = ops::relu(tape, &h);
        }
        let h = self.deform.forward(params, tape, &h)?;
        self.se.forward(params, tape, &h)
    }

    /// Configures every stage as an identity (center-tap kernels, zero
    /// offsets, saturated gate). On nonnegative input — the convention for
    /// branch grids — the whole module then passes values through.
    pub fn set_identity(&self, params: &mut ModelParams) {
        for conv in &self.atrous {
            conv.set_identity(params);
        }
        self.deform.set_identity(params);
        self.se.set_saturated(params);
    }
}

/// Feature fusion module: `FFM(a, b) = conv(relu(conv(relu(conv(a+b)))))`.
#[derive(Clone, Debug)]
pub struct FfmModule {
    convs: [Conv2dLayer; 3],
}

impl FfmModule {
    pub fn init(params: &mut ModelParams, name: &str, channels: usize, master_seed: u64) -> Self {
        let convs = [1, 2, 3].map(|i| {
            Conv2dLayer::init(
                params,
                &format!("{name}/conv{i}"),
                3,
                1,
                channels,
                channels,
                master_seed,
            )
        });
        Self { convs }
    }

    pub fn forward(
        &self,
        params: &ModelParams,
        tape: &mut GradTape<f64>,
        a: &Tensor64,
        b: &Tensor64,
    ) -> Result<Tensor64> {
        let mut h = ops::add(tape, a, b)?;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(params, tape, &h)?;
            if i + 1 < self.convs.len() {
                h = ops::relu(tape, &h);
            }
        }
        Ok(h)
    }
}
