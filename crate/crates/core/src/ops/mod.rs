//! Differentiable tensor operations.
//!
//! Each public function validates shapes, runs the forward kernel and
//! records one node (or a short chain of nodes) on the tape. Plain input
//! tensors are auto-registered as constant leaves. Ops whose validity
//! depends on caller data return `Result`; unary elementwise ops cannot
//! fail and return the tensor directly.

pub mod kernels;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GradTape, Op};
use crate::tensor::{numel, Tensor};

/// Shape parameters of a stride-1, same-padded 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kh: usize,
    pub kw: usize,
    /// Atrous rate; 1 is an ordinary dense kernel.
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(kh: usize, kw: usize, dilation: usize) -> Self {
        Self { kh, kw, dilation }
    }

    /// Square dense kernel.
    pub fn square(k: usize) -> Self {
        Self::new(k, k, 1)
    }
}

/// Shape parameters of a stride-1, same-padded cubic 3-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub k: usize,
}

/// Precomputed trilinear gather pattern from a frustum grid `[H,W,D]` into
/// a voxel grid. Each output voxel lists up to eight `(flat_hwd, weight)`
/// taps; voxels that project outside the frustum have no taps and stay
/// zero.
#[derive(Clone, Debug)]
pub struct FrustumTaps<F: Scalar> {
    pub frustum_hwd: [usize; 3],
    pub voxel_dims: [usize; 3],
    pub taps: Vec<Vec<(usize, F)>>,
}

impl<F: Scalar> FrustumTaps<F> {
    pub fn frustum_cells(&self) -> usize {
        self.frustum_hwd.iter().product()
    }

    pub fn voxel_cells(&self) -> usize {
        self.voxel_dims.iter().product()
    }
}

fn same_shape<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what} needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

macro_rules! record_binary {
    ($tape:expr, $a:expr, $b:expr, $op:expr, $f:expr) => {{
        let ia = $tape.node_of($a)?;
        let ib = $tape.node_of($b)?;
        let data = $a
            .as_slice()
            .iter()
            .zip($b.as_slice().iter())
            .map($f)
            .collect();
        Ok($tape.record($op, vec![ia, ib], $a.shape().to_vec(), data))
    }};
}

macro_rules! record_unary {
    ($tape:expr, $x:expr, $op:expr, $f:expr) => {{
        let ix = $tape
            .node_of($x)
            .expect("unary op input from a foreign tape");
        let data = $x.as_slice().iter().map($f).collect();
        $tape.record($op, vec![ix], $x.shape().to_vec(), data)
    }};
}

/// Elementwise sum of two same-shape tensors.
pub fn add<F: Scalar>(tape: &mut GradTape<F>, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    same_shape(a, b, "add")?;
    record_binary!(tape, a, b, Op::Add, |(&x, &y)| x + y)
}

/// Elementwise difference of two same-shape tensors.
pub fn sub<F: Scalar>(tape: &mut GradTape<F>, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    same_shape(a, b, "sub")?;
    record_binary!(tape, a, b, Op::Sub, |(&x, &y)| x - y)
}

/// Elementwise product of two same-shape tensors.
pub fn mul_checked<F: Scalar>(
    tape: &mut GradTape<F>,
    a: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<Tensor<F>> {
    same_shape(a, b, "mul")?;
    record_binary!(tape, a, b, Op::Mul, |(&x, &y)| x * y)
}

/// Elementwise product; panics on shape mismatch (internal-use shorthand).
pub fn mul<F: Scalar>(tape: &mut GradTape<F>, a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    mul_checked(tape, a, b).expect("mul shape mismatch")
}

/// Elementwise negation.
pub fn neg<F: Scalar>(tape: &mut GradTape<F>, x: &Tensor<F>) -> Tensor<F> {
    record_unary!(tape, x, Op::Neg, |&v| -v)
}

/// Multiplication by a compile-time-known constant.
pub fn scale<F: Scalar>(tape: &mut GradTape<F>, x: &Tensor<F>, c: F) -> Tensor<F> {
    record_unary!(tape, x, Op::Scale(c), |&v| v * c)
}

/// Addition of a scalar constant.
pub fn add_scalar<F: Scalar>(tape: &mut GradTape<F>, x: &Tensor<F>, c: F) -> Tensor<F> {
    record_unary!(tape, x, Op::AddScalar(c), |&v| v + c)
}

/// Sum of all elements into a rank-0 scalar.
pub fn sum<F: Scalar>(tape: &mut GradTape<F>, x: &Tensor<F>) -> Tensor<F> {
    let ix = tape.node_of(x).expect("sum input from a foreign tape");
    let total = x.as_slice().iter().fold(F::zero(), |a, &v| a + v);
    tape.record(Op::Sum, vec![ix], vec![], vec![total])
}

/// Mean of all elements into a rank-0 scalar.
pub fn mean<F: Scalar>(tape: &mut GradTape<F>, x: &Tensor<F>) -> Tensor<F> {
    let n = x.len().max(1);
    let s = sum(tape, x);
    scale(tape, &s, F::from_f64_lossy(1.0 / n as f64))
}

/// Rectified linear unit; the subgradient at zero is zero.
pub fn relu<F: Scalar>(tape: &mut GradTape<F>, x: &Tensor<F>) -> Tensor<F> {
    record_unary!(tape, x, Op::Relu, |&v| v.max(F::zero()))
}

/// Logistic sigmoid.
pub fn sigmoid<F: Scalar>(tape: &mut GradTape<F>, x: &Tensor<F>) -> Tensor<F> {
    record_unary!(tape, x, Op::Sigmoid, |&v| F::one()
        / (F::one() + (-v).exp()))
}

pub fn sin<F: Scalar>(tape: &mut GradTape<F>, x: &Tensor<F>) -> Tensor<F> {
    record_unary!(tape, x, Op::Sin, |&v| v.sin())
}

pub fn cos<F: Scalar>(tape: &mut GradTape<F>, x: &Tensor<F>) -> Tensor<F> {
    record_unary!(tape, x, Op::Cos, |&v| v.cos())
}

pub fn exp<F: Scalar>(tape: &mut GradTape<F>, x: &Tensor<F>) -> Tensor<F> {
    record_unary!(tape, x, Op::Exp, |&v| v.exp())
}

pub fn ln<F: Scalar>(tape: &mut GradTape<F>, x: &Tensor<F>) -> Tensor<F> {
    record_unary!(tape, x, Op::Ln, |&v| v.ln())
}

/// Clamp to `[lo, hi]`; the subgradient outside the open interval is zero.
pub fn clamp<F: Scalar>(tape: &mut GradTape<F>, x: &Tensor<F>, lo: F, hi: F) -> Tensor<F> {
    record_unary!(tape, x, Op::Clamp { lo, hi }, |&v| v.max(lo).min(hi))
}

/// Elementwise `|x|^p` with `p ≥ 1`; the subgradient at zero is zero.
pub fn abs_pow<F: Scalar>(tape: &mut GradTape<F>, x: &Tensor<F>, p: F) -> Tensor<F> {
    record_unary!(tape, x, Op::AbsPow { p }, |&v| v.abs().powf(p))
}

/// Elementwise smooth-L1: `0.5x²` for `|x| < 1`, else `|x| − 0.5`.
pub fn smooth_l1_elem<F: Scalar>(tape: &mut GradTape<F>, x: &Tensor<F>) -> Tensor<F> {
    let half = F::from_f64_lossy(0.5);
    record_unary!(tape, x, Op::SmoothL1Elem, |&v| if v.abs() < F::one() {
        half * v * v
    } else {
        v.abs() - half
    })
}

/// Same data under a new shape with equal element count.
pub fn reshape<F: Scalar>(
    tape: &mut GradTape<F>,
    x: &Tensor<F>,
    shape: &[usize],
) -> Result<Tensor<F>> {
    if numel(shape) != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "cannot reshape {:?} to {:?}",
            x.shape(),
            shape
        )));
    }
    let ix = tape.node_of(x)?;
    Ok(tape.record(Op::Reshape, vec![ix], shape.to_vec(), x.to_vec()))
}

/// Matrix product of `[m,k]` and `[k,n]`.
pub fn matmul<F: Scalar>(
    tape: &mut GradTape<F>,
    a: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<Tensor<F>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul needs two matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ia = tape.node_of(a)?;
    let ib = tape.node_of(b)?;
    let data = kernels::matmul(a.as_slice(), b.as_slice(), m, k, n);
    Ok(tape.record(Op::MatMul { m, k, n }, vec![ia, ib], vec![m, n], data))
}

/// Adds a `[C]` bias to every row of an `[N,C]` matrix.
pub fn add_rows<F: Scalar>(
    tape: &mut GradTape<F>,
    x: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<Tensor<F>> {
    if x.rank() != 2 || b.rank() != 1 || x.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch(format!(
            "add_rows needs [N,C] and [C], got {:?} and {:?}",
            x.shape(),
            b.shape()
        )));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let ix = tape.node_of(x)?;
    let ib = tape.node_of(b)?;
    let bs = b.as_slice();
    let data = x
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + bs[i % c])
        .collect();
    Ok(tape.record(Op::AddRows, vec![ix, ib], vec![n, c], data))
}

/// Numerically stabilised softmax along one axis.
pub fn softmax_axis<F: Scalar>(
    tape: &mut GradTape<F>,
    x: &Tensor<F>,
    axis: usize,
) -> Result<Tensor<F>> {
    if axis >= x.rank() {
        return Err(Error::ShapeMismatch(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let ix = tape.node_of(x)?;
    let data = kernels::softmax_axis_fwd(x.as_slice(), x.shape(), axis);
    Ok(tape.record(Op::SoftmaxAxis { axis }, vec![ix], x.shape().to_vec(), data))
}

/// Mean over the first two axes of `[H,W,C]`, yielding `[C]`.
pub fn mean_hw<F: Scalar>(tape: &mut GradTape<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "mean_hw needs [H,W,C], got {:?}",
            x.shape()
        )));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ix = tape.node_of(x)?;
    let inv = F::from_f64_lossy(1.0 / (h * w) as f64);
    let xs = x.as_slice();
    let mut data = vec![F::zero(); c];
    for hw in 0..h * w {
        for ch in 0..c {
            data[ch] += xs[hw * c + ch];
        }
    }
    for v in data.iter_mut() {
        *v *= inv;
    }
    Ok(tape.record(Op::MeanHw, vec![ix], vec![c], data))
}

/// Scales each channel of `[H,W,C]` by a `[C]` gate.
pub fn scale_channels<F: Scalar>(
    tape: &mut GradTape<F>,
    x: &Tensor<F>,
    gate: &Tensor<F>,
) -> Result<Tensor<F>> {
    if x.rank() != 3 || gate.rank() != 1 || x.shape()[2] != gate.shape()[0] {
        return Err(Error::ShapeMismatch(format!(
            "scale_channels needs [H,W,C] and [C], got {:?} and {:?}",
            x.shape(),
            gate.shape()
        )));
    }
    let c = gate.shape()[0];
    let ix = tape.node_of(x)?;
    let ig = tape.node_of(gate)?;
    let gs = gate.as_slice();
    let data = x
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * gs[i % c])
        .collect();
    Ok(tape.record(Op::ScaleChannels, vec![ix, ig], x.shape().to_vec(), data))
}

fn check_conv_kernel(extent: usize, k: usize, dilation: usize, axis: &str) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::InvalidSpec(format!(
            "convolution kernels must be odd, got {k} on {axis}"
        )));
    }
    // Every kernel tap must be able to touch the input for at least one
    // output position; otherwise the outermost taps are dead weights.
    let reach = dilation * (k - 1) + 1;
    if reach > 2 * extent - 1 {
        return Err(Error::KernelTooLarge(format!(
            "effective kernel extent {reach} exceeds what a {extent}-wide input can support on {axis}"
        )));
    }
    Ok(())
}

/// 2-d convolution, stride 1, same zero padding, optional dilation.
/// `x` is `[H,W,Cin]`, `w` is `[kh,kw,Cin,Cout]`, `b` is `[Cout]`.
pub fn conv2d<F: Scalar>(
    tape: &mut GradTape<F>,
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    spec: &ConvSpec,
) -> Result<Tensor<F>> {
    if x.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d input must be [H,W,Cin], got {:?}",
            x.shape()
        )));
    }
    if w.rank() != 4 || w.shape()[0] != spec.kh || w.shape()[1] != spec.kw {
        return Err(Error::ShapeMismatch(format!(
            "conv2d weights must be [{},{},Cin,Cout], got {:?}",
            spec.kh,
            spec.kw,
            w.shape()
        )));
    }
    if w.shape()[2] != x.shape()[2] {
        return Err(Error::ChannelMismatch(format!(
            "conv2d input has {} channels but weights expect {}",
            x.shape()[2],
            w.shape()[2]
        )));
    }
    if b.rank() != 1 || b.shape()[0] != w.shape()[3] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d bias must be [{}], got {:?}",
            w.shape()[3],
            b.shape()
        )));
    }
    if spec.dilation == 0 {
        return Err(Error::InvalidSpec("conv2d dilation must be >= 1".into()));
    }
    check_conv_kernel(x.shape()[0], spec.kh, spec.dilation, "rows")?;
    check_conv_kernel(x.shape()[1], spec.kw, spec.dilation, "cols")?;

    let ix = tape.node_of(x)?;
    let iw = tape.node_of(w)?;
    let ib = tape.node_of(b)?;
    let data = kernels::conv2d_fwd(x.as_slice(), x.shape(), w.as_slice(), w.shape(), b.as_slice(), spec);
    let shape = vec![x.shape()[0], x.shape()[1], w.shape()[3]];
    Ok(tape.record(Op::Conv2d { spec: *spec }, vec![ix, iw, ib], shape, data))
}

/// 3-d convolution, stride 1, same zero padding.
/// `x` is `[X,Y,Z,Cin]`, `w` is `[k,k,k,Cin,Cout]`, `b` is `[Cout]`.
pub fn conv3d<F: Scalar>(
    tape: &mut GradTape<F>,
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    spec: &Conv3dSpec,
) -> Result<Tensor<F>> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv3d input must be [X,Y,Z,Cin], got {:?}",
            x.shape()
        )));
    }
    let k = spec.k;
    if w.rank() != 5 || w.shape()[0] != k || w.shape()[1] != k || w.shape()[2] != k {
        return Err(Error::ShapeMismatch(format!(
            "conv3d weights must be [{k},{k},{k},Cin,Cout], got {:?}",
            w.shape()
        )));
    }
    if w.shape()[3] != x.shape()[3] {
        return Err(Error::ChannelMismatch(format!(
            "conv3d input has {} channels but weights expect {}",
            x.shape()[3],
            w.shape()[3]
        )));
    }
    if b.rank() != 1 || b.shape()[0] != w.shape()[4] {
        return Err(Error::ShapeMismatch(format!(
            "conv3d bias must be [{}], got {:?}",
            w.shape()[4],
            b.shape()
        )));
    }
    for (axis, extent) in ["x", "y", "z"].iter().zip(x.shape()[..3].iter()) {
        check_conv_kernel(*extent, k, 1, axis)?;
    }

    let ix = tape.node_of(x)?;
    let iw = tape.node_of(w)?;
    let ib = tape.node_of(b)?;
    let data = kernels::conv3d_fwd(x.as_slice(), x.shape(), w.as_slice(), w.shape(), b.as_slice(), spec);
    let shape = vec![x.shape()[0], x.shape()[1], x.shape()[2], w.shape()[4]];
    Ok(tape.record(Op::Conv3d { spec: *spec }, vec![ix, iw, ib], shape, data))
}

/// Bilinear sampling of `[H,W,C]` at `[N,2]` (row, col) pixel coordinates.
/// Out-of-bounds corners contribute zero; gradients flow into both the
/// feature map and the coordinates.
pub fn bilinear_sample<F: Scalar>(
    tape: &mut GradTape<F>,
    x: &Tensor<F>,
    coords: &Tensor<F>,
) -> Result<Tensor<F>> {
    if x.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "bilinear_sample input must be [H,W,C], got {:?}",
            x.shape()
        )));
    }
    if coords.rank() != 2 || coords.shape()[1] != 2 {
        return Err(Error::ShapeMismatch(format!(
            "bilinear_sample coords must be [N,2], got {:?}",
            coords.shape()
        )));
    }
    let n = coords.shape()[0];
    let c = x.shape()[2];
    let ix = tape.node_of(x)?;
    let ic = tape.node_of(coords)?;
    let data = kernels::bilinear_fwd(x.as_slice(), x.shape(), coords.as_slice());
    Ok(tape.record(Op::BilinearSample, vec![ix, ic], vec![n, c], data))
}

/// Lifts image features into a frustum: `out[h,w,d,c] = img[h,w,c] ·
/// dist[h,w,d]`.
pub fn frustum_lift<F: Scalar>(
    tape: &mut GradTape<F>,
    img: &Tensor<F>,
    dist: &Tensor<F>,
) -> Result<Tensor<F>> {
    if img.rank() != 3 || dist.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "frustum_lift needs [H,W,C] and [H,W,D], got {:?} and {:?}",
            img.shape(),
            dist.shape()
        )));
    }
    if img.shape()[..2] != dist.shape()[..2] {
        return Err(Error::ShapeMismatch(format!(
            "frustum_lift spatial dims disagree: {:?} vs {:?}",
            img.shape(),
            dist.shape()
        )));
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let d = dist.shape()[2];
    let ii = tape.node_of(img)?;
    let id = tape.node_of(dist)?;
    let data = kernels::frustum_lift_fwd(img.as_slice(), img.shape(), dist.as_slice(), dist.shape());
    Ok(tape.record(Op::FrustumLift, vec![ii, id], vec![h, w, d, c], data))
}

/// Gathers a frustum feature volume `[H,W,D,C]` into a voxel grid
/// `[nx,ny,nz,C]` through precomputed trilinear taps.
pub fn frustum_sample<F: Scalar>(
    tape: &mut GradTape<F>,
    fr: &Tensor<F>,
    taps: &Arc<FrustumTaps<F>>,
) -> Result<Tensor<F>> {
    if fr.rank() != 4 || fr.shape()[..3] != taps.frustum_hwd {
        return Err(Error::ShapeMismatch(format!(
            "frustum_sample input {:?} does not match tap table {:?}",
            fr.shape(),
            taps.frustum_hwd
        )));
    }
    let c = fr.shape()[3];
    let ix = tape.node_of(fr)?;
    let data = kernels::frustum_sample_fwd(fr.as_slice(), taps, c);
    let shape = vec![
        taps.voxel_dims[0],
        taps.voxel_dims[1],
        taps.voxel_dims[2],
        c,
    ];
    Ok(tape.record(
        Op::FrustumSample {
            taps: Arc::clone(taps),
        },
        vec![ix],
        shape,
        data,
    ))
}

/// Mean squared error between two same-shape tensors, as a scalar node.
pub fn mse<F: Scalar>(tape: &mut GradTape<F>, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    same_shape(a, b, "mse")?;
    let d = sub(tape, a, b)?;
    let sq = mul(tape, &d, &d);
    Ok(mean(tape, &sq))
}

/// Deformable 2-d convolution (v1): a plain convolution predicts per-tap
/// sampling offsets, the input is bilinearly gathered at the offset
/// positions, and a dense kernel contracts the gathered columns.
///
/// Offset channels are ordered per tap `t = i·kw + j` as `(Δrow, Δcol)`,
/// so `offset_w` maps to `2·kh·kw` channels. With zero offset weights and
/// biases the op reduces exactly to `conv2d(x, w, b, spec)`.
pub fn deform_conv2d<F: Scalar>(
    tape: &mut GradTape<F>,
    x: &Tensor<F>,
    offset_w: &Tensor<F>,
    offset_b: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    spec: &ConvSpec,
) -> Result<Tensor<F>> {
    if x.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "deform_conv2d input must be [H,W,Cin], got {:?}",
            x.shape()
        )));
    }
    let (h, wid, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ntaps = spec.kh * spec.kw;
    if offset_w.rank() != 4 || offset_w.shape()[3] != 2 * ntaps {
        return Err(Error::ShapeMismatch(format!(
            "offset weights must predict {} channels, got {:?}",
            2 * ntaps,
            offset_w.shape()
        )));
    }
    if w.rank() != 4 || w.shape() != [spec.kh, spec.kw, cin, w.shape()[3]] {
        return Err(Error::ShapeMismatch(format!(
            "deform_conv2d weights must be [{},{},{},Cout], got {:?}",
            spec.kh,
            spec.kw,
            cin,
            w.shape()
        )));
    }
    let cout = w.shape()[3];

    let offsets = conv2d(tape, x, offset_w, offset_b, spec)?; // [H,W,2K]

    // Base sampling grid of the undeformed kernel, laid out to match the
    // offset channels.
    let d = spec.dilation as isize;
    let (ch_r, ch_c) = ((spec.kh as isize - 1) / 2, (spec.kw as isize - 1) / 2);
    let mut base = vec![F::zero(); h * wid * 2 * ntaps];
    for r in 0..h as isize {
        for cc in 0..wid as isize {
            let off = ((r as usize * wid) + cc as usize) * 2 * ntaps;
            for ki in 0..spec.kh as isize {
                for kj in 0..spec.kw as isize {
                    let t = (ki * spec.kw as isize + kj) as usize;
                    base[off + 2 * t] = F::from_f64_lossy((r + (ki - ch_r) * d) as f64);
                    base[off + 2 * t + 1] = F::from_f64_lossy((cc + (kj - ch_c) * d) as f64);
                }
            }
        }
    }
    let base = Tensor::from_vec(&[h, wid, 2 * ntaps], base)?;
    let pos = add(tape, &offsets, &base)?;
    let coords = reshape(tape, &pos, &[h * wid * ntaps, 2])?;
    let cols = bilinear_sample(tape, x, &coords)?; // [H·W·K, Cin]
    let cols = reshape(tape, &cols, &[h * wid, ntaps * cin])?;
    let wmat = reshape(tape, w, &[ntaps * cin, cout])?;
    let out = matmul(tape, &cols, &wmat)?;
    let out = add_rows(tape, &out, b)?;
    reshape(tape, &out, &[h, wid, cout])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::GradTape;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn elementwise_shape_mismatch_errors() {
        let mut tape = GradTape::new();
        let a = t(&[2], vec![1.0, 2.0]);
        let b = t(&[3], vec![1.0, 2.0, 3.0]);
        assert!(add(&mut tape, &a, &b).is_err());
        assert!(sub(&mut tape, &a, &b).is_err());
        assert!(mul_checked(&mut tape, &a, &b).is_err());
    }

    #[test]
    fn matmul_small_case() {
        let mut tape = GradTape::new();
        let a = t(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&mut tape, &a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.as_slice(), &[58.0, 64.0, 139.0, 154.0]);
        let bad = t(&[2, 2], vec![0.0; 4]);
        assert!(matmul(&mut tape, &a, &bad).is_err());
    }

    #[test]
    fn softmax_lanes_sum_to_one() {
        let mut tape = GradTape::new();
        let x = t(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let y = softmax_axis(&mut tape, &x, 1).unwrap();
        for row in 0..2 {
            let s: f64 = y.as_slice()[row * 3..(row + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Large inputs stay finite thanks to the max shift.
        let big = t(&[1, 2], vec![1000.0, 1001.0]);
        let yb = softmax_axis(&mut tape, &big, 1).unwrap();
        assert!(yb.all_finite());
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let mut tape = GradTape::new();
        let x = t(&[3, 4, 1], (0..12).map(|v| v as f64).collect());
        // 3×3 kernel with a single 1 at the centre.
        let mut wv = vec![0.0; 9];
        wv[4] = 1.0;
        let w = t(&[3, 3, 1, 1], wv);
        let b = t(&[1], vec![0.0]);
        let y = conv2d(&mut tape, &x, &w, &b, &ConvSpec::square(3)).unwrap();
        assert_eq!(y.as_slice(), x.as_slice());
    }

    #[test]
    fn conv2d_oracle_hand_computed() {
        // 2×2 input, one channel, 3×3 averaging kernel: each output is the
        // sum of the in-bounds neighbourhood.
        let mut tape = GradTape::new();
        let x = t(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let w = t(&[3, 3, 1, 1], vec![1.0; 9]);
        let b = t(&[1], vec![0.5]);
        let y = conv2d(&mut tape, &x, &w, &b, &ConvSpec::square(3)).unwrap();
        assert_eq!(y.as_slice(), &[10.5, 10.5, 10.5, 10.5]);
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let mut tape = GradTape::new();
        let x = t(&[4, 4, 2], vec![0.0; 32]);
        let w_badc = t(&[3, 3, 3, 1], vec![0.0; 27]);
        let b = t(&[1], vec![0.0]);
        assert!(matches!(
            conv2d(&mut tape, &x, &w_badc, &b, &ConvSpec::square(3)),
            Err(Error::ChannelMismatch(_))
        ));
        let w_even = t(&[2, 2, 2, 1], vec![0.0; 8]);
        assert!(matches!(
            conv2d(&mut tape, &x, &w_even, &b, &ConvSpec::new(2, 2, 1)),
            Err(Error::InvalidSpec(_))
        ));
        // Dilated 5-tap reach of 9 exceeds 2·4−1 = 7.
        let w5 = t(&[5, 5, 2, 1], vec![0.0; 50]);
        assert!(matches!(
            conv2d(&mut tape, &x, &w5, &b, &ConvSpec::new(5, 5, 2)),
            Err(Error::KernelTooLarge(_))
        ));
    }

    #[test]
    fn dilated_conv_skips_neighbours() {
        // Dilation 2 with a 3×3 cross kernel reads cells two away.
        let mut tape = GradTape::new();
        let x = t(&[5, 5, 1], (0..25).map(|v| v as f64).collect());
        let mut wv = vec![0.0; 9];
        wv[1] = 1.0; // tap directly above the centre
        let w = t(&[3, 3, 1, 1], wv);
        let b = t(&[1], vec![0.0]);
        let y = conv2d(&mut tape, &x, &w, &b, &ConvSpec::new(3, 3, 2)).unwrap();
        // Output at (2,2) reads input at (0,2) = 2.
        assert_eq!(y.get(&[2, 2, 0]), 2.0);
        // Output at (1,2) would read (−1,2): zero padding.
        assert_eq!(y.get(&[1, 2, 0]), 0.0);
    }

    #[test]
    fn bilinear_sample_matches_hand_values() {
        let mut tape = GradTape::new();
        // 2×2 single-channel map: [[1,2],[3,4]].
        let x = t(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let coords = t(
            &[4, 2],
            vec![
                0.0, 0.0, // exact corner
                0.5, 0.5, // centre: mean of all four
                1.0, 0.5, // bottom edge midpoint
                -5.0, -5.0, // far outside: zero
            ],
        );
        let y = bilinear_sample(&mut tape, &x, &coords).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 2.5, 3.5, 0.0]);
    }

    #[test]
    fn frustum_lift_outer_product() {
        let mut tape = GradTape::new();
        let img = t(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let dist = t(&[1, 2, 3], vec![0.1, 0.2, 0.7, 1.0, 0.0, 0.0]);
        let out = frustum_lift(&mut tape, &img, &dist).unwrap();
        assert_eq!(out.shape(), &[1, 2, 3, 2]);
        // Pixel (0,0): img (1,2) times dist (0.1,0.2,0.7).
        assert_eq!(out.get(&[0, 0, 0, 0]), 0.1);
        assert_eq!(out.get(&[0, 0, 0, 1]), 0.2);
        assert!((out.get(&[0, 0, 2, 0]) - 0.7).abs() < 1e-15);
        // Pixel (0,1): all mass in bin 0.
        assert_eq!(out.get(&[0, 1, 0, 0]), 3.0);
        assert_eq!(out.get(&[0, 1, 1, 0]), 0.0);
    }

    #[test]
    fn deform_conv_with_zero_offsets_equals_conv2d() {
        let mut tape = GradTape::new();
        let x = t(&[4, 5, 2], (0..40).map(|v| (v as f64) * 0.17 - 3.0).collect());
        let w = t(
            &[3, 3, 2, 3],
            (0..54).map(|v| ((v * 7 % 13) as f64) * 0.1 - 0.6).collect(),
        );
        let b = t(&[3], vec![0.3, -0.2, 0.05]);
        let spec = ConvSpec::square(3);
        let ow = Tensor::zeros(&[3, 3, 2, 18]);
        let ob = Tensor::zeros(&[18]);
        let yd = deform_conv2d(&mut tape, &x, &ow, &ob, &w, &b, &spec).unwrap();
        let yc = conv2d(&mut tape, &x, &w, &b, &spec).unwrap();
        assert!(yd.max_abs_diff(&yc) <= 1e-12);
    }
}
