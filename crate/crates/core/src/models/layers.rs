//! Layer descriptors.
//!
//! A layer owns no storage, only its name, shape bookkeeping and specs;
//! init writes He-normal weights (zero biases unless stated) into the
//! model's registry and forward binds them onto the caller's tape.

use crate::error::Result;
use crate::ops::{self, Conv3dSpec, ConvSpec};
use crate::tape::GradTape;
use crate::tensor::Tensor;
use crate::Tensor64;

use super::{he_normal, ModelParams};

/// 2-d convolution layer (stride 1, same zero padding).
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub name: String,
    pub spec: ConvSpec,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2dLayer {
    /// He-normal weights, zero bias.
    pub fn init(
        params: &mut ModelParams,
        name: &str,
        k: usize,
        dilation: usize,
        cin: usize,
        cout: usize,
        master_seed: u64,
    ) -> Self {
        Self::init_with_bias(params, name, k, dilation, cin, cout, master_seed, 0.0)
    }

    /// He-normal weights with a constant bias (used by classification
    /// heads to start at a chosen foreground prior).
    #[allow(clippy::too_many_arguments)]
    pub fn init_with_bias(
        params: &mut ModelParams,
        name: &str,
        k: usize,
        dilation: usize,
        cin: usize,
        cout: usize,
        master_seed: u64,
        bias: f64,
    ) -> Self {
        let w_name = format!("{name}/w");
        params.insert(
            &w_name,
            he_normal(&[k, k, cin, cout], k * k * cin, master_seed, &w_name),
        );
        params.insert(&format!("{name}/b"), Tensor::filled(&[cout], bias));
        Self {
            name: name.to_string(),
            spec: ConvSpec::new(k, k, dilation),
            cin,
            cout,
        }
    }

    pub fn forward(
        &self,
        params: &ModelParams,
        tape: &mut GradTape<f64>,
        x: &Tensor64,
    ) -> Result<Tensor64> {
        let w = params.bind(tape, &format!("{}/w", self.name));
        let b = params.bind(tape, &format!("{}/b", self.name));
        ops::conv2d(tape, x, &w, &b, &self.spec)
    }

    /// Overwrites the weights with an exact identity mapping (center tap
    /// passes each channel through) and zero bias. Requires cin == cout.
    pub fn set_identity(&self, params: &mut ModelParams) {
        assert_eq!(self.cin, self.cout, "identity needs square channel map");
        let (kh, kw) = (self.spec.kh, self.spec.kw);
        let mut w = vec![0.0f64; kh * kw * self.cin * self.cout];
        let (ch, cw) = (kh / 2, kw / 2);
        for c in 0..self.cin {
            w[((ch * kw + cw) * self.cin + c) * self.cout + c] = 1.0;
        }
        params.set(
            &format!("{}/w", self.name),
            Tensor::from_vec(&[kh, kw, self.cin, self.cout], w).expect("identity kernel"),
        );
        params.set(&format!("{}/b", self.name), Tensor::zeros(&[self.cout]));
    }
}

/// 3-d convolution layer (stride 1, same zero padding, cubic kernel).
#[derive(Clone, Debug)]
pub struct Conv3dLayer {
    pub name: String,
    pub spec: Conv3dSpec,
    pub cin: usize,
    pub cout: usize,
}

impl Conv3dLayer {
    pub fn init(
        params: &mut ModelParams,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        master_seed: u64,
    ) -> Self {
        let w_name = format!("{name}/w");
        params.insert(
            &w_name,
            he_normal(&[k, k, k, cin, cout], k * k * k * cin, master_seed, &w_name),
        );
        params.insert(&format!("{name}/b"), Tensor::zeros(&[cout]));
        Self {
            name: name.to_string(),
            spec: Conv3dSpec { k },
            cin,
            cout,
        }
    }

    pub fn forward(
        &self,
        params: &ModelParams,
        tape: &mut GradTape<f64>,
        x: &Tensor64,
    ) -> Result<Tensor64> {
        let w = params.bind(tape, &format!("{}/w", self.name));
        let b = params.bind(tape, &format!("{}/b", self.name));
        ops::conv3d(tape, x, &w, &b, &self.spec)
    }
}

/// Deformable 2-d convolution (v1): learned offsets start at zero so the
/// layer is born as a plain convolution.
#[derive(Clone, Debug)]
pub struct DeformLayer {
    pub name: String,
    pub spec: ConvSpec,
    pub cin: usize,
    pub cout: usize,
}

impl DeformLayer {
    pub fn init(
        params: &mut ModelParams,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        master_seed: u64,
    ) -> Self {
        let ntaps = k * k;
        params.insert(
            &format!("{name}/offset_w"),
            Tensor::zeros(&[k, k, cin, 2 * ntaps]),
        );
        params.insert(&format!("{name}/offset_b"), Tensor::zeros(&[2 * ntaps]));
        let w_name = format!("{name}/w");
        params.insert(
            &w_name,
            he_normal(&[k, k, cin, cout], k * k * cin, master_seed, &w_name),
        );
        params.insert(&format!("{name}/b"), Tensor::zeros(&[cout]));
        Self {
            name: name.to_string(),
            spec: ConvSpec::square(k),
            cin,
            cout,
        }
    }

    pub fn forward(
        &self,
        params: &ModelParams,
        tape: &mut GradTape<f64>,
        x: &Tensor64,
    ) -> Result<Tensor64> {
        let ow = params.bind(tape, &format!("{}/offset_w", self.name));
        let ob = params.bind(tape, &format!("{}/offset_b", self.name));
        let w = params.bind(tape, &format!("{}/w", self.name));
        let b = params.bind(tape, &format!("{}/b", self.name));
        ops::deform_conv2d(tape, x, &ow, &ob, &w, &b, &self.spec)
    }

    /// Identity mapping: zero offsets (already the init state), center-tap
    /// passthrough kernel, zero bias.
    pub fn set_identity(&self, params: &mut ModelParams) {
        assert_eq!(self.cin, self.cout, "identity needs square channel map");
        let k = self.spec.kh;
        let mut w = vec![0.0f64; k * k * self.cin * self.cout];
        let c0 = k / 2;
        for c in 0..self.cin {
            w[((c0 * k + c0) * self.cin + c) * self.cout + c] = 1.0;
        }
        params.set(
            &format!("{}/w", self.name),
            Tensor::from_vec(&[k, k, self.cin, self.cout], w).expect("identity kernel"),
        );
        params.set(&format!("{}/b", self.name), Tensor::zeros(&[self.cout]));
        params.set(
            &format!("{}/offset_w", self.name),
            Tensor::zeros(&[k, k, self.cin, 2 * k * k]),
        );
        params.set(
            &format!("{}/offset_b", self.name),
            Tensor::zeros(&[2 * k * k]),
        );
    }
}

/// Squeeze-and-excitation channel attention: global average over the
/// spatial grid, a two-layer bottleneck MLP, then a sigmoid gate scaling
/// each channel.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub name: String,
    pub channels: usize,
    pub hidden: usize,
}

impl SeBlock {
    pub fn init(
        params: &mut ModelParams,
        name: &str,
        channels: usize,
        reduction: usize,
        master_seed: u64,
    ) -> Self {
        let hidden = (channels / reduction).max(1);
        let w1 = format!("{name}/fc1_w");
        let w2 = format!("{name}/fc2_w");
        params.insert(&w1, he_normal(&[channels, hidden], channels, master_seed, &w1));
        params.insert(&format!("{name}/fc1_b"), Tensor::zeros(&[hidden]));
        params.insert(&w2, he_normal(&[hidden, channels], hidden, master_seed, &w2));
        params.insert(&format!("{name}/fc2_b"), Tensor::zeros(&[channels]));
        Self {
            name: name.to_string(),
            channels,
            hidden,
        }
    }

    pub fn forward(
        &self,
        params: &ModelParams,
        tape: &mut GradTape<f64>,
        x: &Tensor64,
    ) -> Result<Tensor64> {
        let w1 = params.bind(tape, &format!("{}/fc1_w", self.name));
        let b1 = params.bind(tape, &format!("{}/fc1_b", self.name));
        let w2 = params.bind(tape, &format!("{}/fc2_w", self.name));
        let b2 = params.bind(tape, &format!("{}/fc2_b", self.name));

        let pooled = ops::mean_hw(tape, x)?;
        let row = ops::reshape(tape, &pooled, &[1, self.channels])?;
        let h = ops::matmul(tape, &row, &w1)?;
        let h = ops::add_rows(tape, &h, &b1)?;
        let h = ops::relu(tape, &h);
        let g = ops::matmul(tape, &h, &w2)?;
        let g = ops::add_rows(tape, &g, &b2)?;
        let g = ops::sigmoid(tape, &g);
        let gate = ops::reshape(tape, &g, &[self.channels])?;
        ops::scale_channels(tape, x, &gate)
    }

    /// Saturates the gate at ≈1 (zero weights, large second bias), making
    /// the block an identity to within sigmoid saturation error.
    pub fn set_saturated(&self, params: &mut ModelParams) {
        params.set(
            &format!("{}/fc1_w", self.name),
            Tensor::zeros(&[self.channels, self.hidden]),
        );
        params.set(&format!("{}/fc1_b", self.name), Tensor::zeros(&[self.hidden]));
        params.set(
            &format!("{}/fc2_w", self.name),
            Tensor::zeros(&[self.hidden, self.channels]),
        );
        params.set(
            &format!("{}/fc2_b", self.name),
            Tensor::filled(&[self.channels], 16.0),
        );
    }
}
