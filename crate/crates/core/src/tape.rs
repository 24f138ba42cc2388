//! Reverse-mode gradient tape.
//!
//! Every differentiable operation appends one node holding the op kind, the
//! indices of its input nodes and the forward value. [`GradTape::backward`]
//! seeds a scalar root with gradient one and replays the nodes in reverse,
//! dispatching to the analytic backward rule of each op. The tape is
//! append-only and `backward` takes `&self`, so one tape can serve several
//! forwards and several backward calls; repeated calls use fresh
//! accumulators and a fixed traversal order, which makes gradients bitwise
//! reproducible.
//!
//! In checked mode (the default) every recorded value is scanned for
//! non-finite elements and a violation panics naming the op; training loops
//! construct the tape with [`GradTape::training`] to skip the scan.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::kernels;
use crate::ops::{Conv3dSpec, ConvSpec, FrustumTaps};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle tying a tensor to the tape node that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) tape: u64,
    pub(crate) idx: usize,
}

/// Operation kinds recorded on the tape.
///
/// Ops that need saved state for the backward pass carry it inline; values
/// of inputs and outputs are always available through the node list.
#[derive(Clone, Debug)]
pub(crate) enum Op<F: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(F),
    AddScalar(F),
    Sum,
    Reshape,
    MatMul { m: usize, k: usize, n: usize },
    AddRows,
    Relu,
    Sigmoid,
    Sin,
    Cos,
    Exp,
    Ln,
    Clamp { lo: F, hi: F },
    AbsPow { p: F },
    SmoothL1Elem,
    SoftmaxAxis { axis: usize },
    MeanHw,
    ScaleChannels,
    Conv2d { spec: ConvSpec },
    Conv3d { spec: Conv3dSpec },
    BilinearSample,
    FrustumLift,
    FrustumSample { taps: Arc<FrustumTaps<F>> },
}

impl<F: Scalar> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sum => "sum",
            Op::Reshape => "reshape",
            Op::MatMul { .. } => "matmul",
            Op::AddRows => "add_rows",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Clamp { .. } => "clamp",
            Op::AbsPow { .. } => "abs_pow",
            Op::SmoothL1Elem => "smooth_l1_elem",
            Op::SoftmaxAxis { .. } => "softmax_axis",
            Op::MeanHw => "mean_hw",
            Op::ScaleChannels => "scale_channels",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv3d { .. } => "conv3d",
            Op::BilinearSample => "bilinear_sample",
            Op::FrustumLift => "frustum_lift",
            Op::FrustumSample { .. } => "frustum_sample",
        }
    }
}

struct Node<F: Scalar> {
    op: Op<F>,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    data: Arc<[F]>,
    needs_grad: bool,
}

/// Reverse-mode tape over tensors.
pub struct GradTape<F: Scalar> {
    id: u64,
    nodes: Vec<Node<F>>,
    params: Vec<(String, usize)>,
    checked: bool,
}

impl<F: Scalar> Default for GradTape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> GradTape<F> {
    /// Tape with checked mode on: every forward output is scanned for
    /// NaN/Inf and a violation panics naming the op.
    pub fn new() -> Self {
        Self {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            checked: true,
        }
    }

    /// Tape with checked mode off, for hot training loops.
    pub fn training() -> Self {
        let mut t = Self::new();
        t.checked = false;
        t
    }

    pub fn set_checked(&mut self, on: bool) {
        self.checked = on;
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Registers a trainable leaf under a unique name and returns the
    /// on-tape tensor.
    pub fn param(&mut self, name: &str, value: &Tensor<F>) -> Tensor<F> {
        assert!(
            !self.params.iter().any(|(n, _)| n == name),
            "duplicate parameter name {name}"
        );
        let idx = self.push_leaf(value, true);
        self.params.push((name.to_string(), idx));
        self.tensor_at(idx)
    }

    /// Registers a constant leaf (no gradient flows into it).
    pub fn constant(&mut self, value: &Tensor<F>) -> Tensor<F> {
        let idx = self.push_leaf(value, false);
        self.tensor_at(idx)
    }

    /// Like [`GradTape::param`], but idempotent: a name already bound on
    /// this tape returns its existing handle, so the same weights can be
    /// reused by several forward passes that accumulate into one loss.
    /// Rebinding a name to different storage panics.
    pub fn bind_param(&mut self, name: &str, value: &Tensor<F>) -> Tensor<F> {
        if let Some(&(_, idx)) = self.params.iter().find(|(n, _)| n == name) {
            assert!(
                Arc::ptr_eq(&self.nodes[idx].data, &value.data_arc()),
                "parameter {name} rebound to different storage on one tape"
            );
            return self.tensor_at(idx);
        }
        self.param(name, value)
    }

    /// Names and node handles of registered trainable leaves, in
    /// registration order.
    pub fn params(&self) -> impl Iterator<Item = (&str, NodeRef)> {
        let tape = self.id;
        self.params
            .iter()
            .map(move |(n, i)| (n.as_str(), NodeRef { tape, idx: *i }))
    }

    fn push_leaf(&mut self, value: &Tensor<F>, trainable: bool) -> usize {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: value.shape().to_vec(),
            data: value.data_arc(),
            needs_grad: trainable,
        });
        self.nodes.len() - 1
    }

    fn tensor_at(&self, idx: usize) -> Tensor<F> {
        let node = &self.nodes[idx];
        Tensor::from_arc(
            node.shape.clone(),
            Arc::clone(&node.data),
            Some(NodeRef {
                tape: self.id,
                idx,
            }),
        )
    }

    /// Node index of a tensor on this tape; plain tensors are auto-placed
    /// as constant leaves. A tensor recorded on a different tape is an
    /// error.
    pub(crate) fn node_of(&mut self, t: &Tensor<F>) -> Result<usize> {
        match t.node {
            Some(NodeRef { tape, idx }) if tape == self.id => Ok(idx),
            Some(_) => Err(Error::NotOnTape(
                "tensor was recorded on a different tape".into(),
            )),
            None => Ok(self.push_leaf(t, false)),
        }
    }

    /// Appends an op node and returns its output tensor.
    pub(crate) fn record(
        &mut self,
        op: Op<F>,
        inputs: Vec<usize>,
        shape: Vec<usize>,
        data: Vec<F>,
    ) -> Tensor<F> {
        debug_assert_eq!(numel(&shape), data.len());
        if self.checked && data.iter().any(|v| !v.is_finite()) {
            panic!("non-finite output from op `{}` in checked mode", op.name());
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            data: data.into(),
            needs_grad,
        });
        self.tensor_at(self.nodes.len() - 1)
    }

    fn value(&self, idx: usize) -> &[F] {
        &self.nodes[idx].data
    }

    fn shape(&self, idx: usize) -> &[usize] {
        &self.nodes[idx].shape
    }

    /// Reverse pass from a scalar root. Returns per-node gradients for every
    /// node the root depends on; trainable leaves the root does not reach
    /// are reported as zero gradients by [`GradientMap::grad`].
    pub fn backward(&self, root: &Tensor<F>) -> Result<GradientMap<F>> {
        let root_idx = match root.node {
            Some(NodeRef { tape, idx }) if tape == self.id => idx,
            Some(_) => {
                return Err(Error::NotOnTape(
                    "backward root was recorded on a different tape".into(),
                ))
            }
            None => return Err(Error::NotOnTape("backward root is not on any tape".into())),
        };
        if root.len() != 1 {
            return Err(Error::NonScalarRoot { len: root.len() });
        }

        let mut grads: Vec<Option<Vec<F>>> = vec![None; root_idx + 1];
        grads[root_idx] = Some(vec![F::one()]);

        for idx in (0..=root_idx).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(GradientMap {
            tape: self.id,
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| {
                    g.map(|v| {
                        Tensor::from_arc(self.nodes[i].shape.clone(), v.into(), None)
                    })
                })
                .collect(),
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let ins = &node.inputs;
        // Adds `delta` into the gradient accumulator of input slot `slot`.
        macro_rules! accum {
            ($slot:expr, $delta:expr) => {{
                let input_idx = ins[$slot];
                if self.nodes[input_idx].needs_grad {
                    let delta: Vec<F> = $delta;
                    let acc = grads[input_idx]
                        .get_or_insert_with(|| vec![F::zero(); delta.len()]);
                    debug_assert_eq!(acc.len(), delta.len());
                    for (a, d) in acc.iter_mut().zip(delta.iter()) {
                        *a += *d;
                    }
                }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                accum!(0, g.to_vec());
                accum!(1, g.to_vec());
            }
            Op::Sub => {
                accum!(0, g.to_vec());
                accum!(1, g.iter().map(|&v| -v).collect());
            }
            Op::Mul => {
                let a = self.value(ins[0]);
                let b = self.value(ins[1]);
                accum!(0, g.iter().zip(b).map(|(&gv, &bv)| gv * bv).collect());
                accum!(1, g.iter().zip(a).map(|(&gv, &av)| gv * av).collect());
            }
            Op::Neg => {
                accum!(0, g.iter().map(|&v| -v).collect());
            }
            Op::Scale(c) => {
                accum!(0, g.iter().map(|&v| v * *c).collect());
            }
            Op::AddScalar(_) => {
                accum!(0, g.to_vec());
            }
            Op::Sum => {
                let n = numel(self.shape(ins[0]));
                accum!(0, vec![g[0]; n]);
            }
            Op::Reshape => {
                accum!(0, g.to_vec());
            }
            Op::MatMul { m, k, n } => {
                let a = self.value(ins[0]);
                let b = self.value(ins[1]);
                accum!(0, kernels::matmul_nt(g, b, *m, *n, *k));
                accum!(1, kernels::matmul_tn(a, g, *m, *k, *n));
            }
            Op::AddRows => {
                let shape = self.shape(idx);
                let (rows, cols) = (shape[0], shape[1]);
                accum!(0, g.to_vec());
                let mut gb = vec![F::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] += g[r * cols + c];
                    }
                }
                accum!(1, gb);
            }
            Op::Relu => {
                let x = self.value(ins[0]);
                accum!(
                    0,
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                        .collect()
                );
            }
            Op::Sigmoid => {
                let y = self.value(idx);
                accum!(
                    0,
                    g.iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * yv * (F::one() - yv))
                        .collect()
                );
            }
            Op::Sin => {
                let x = self.value(ins[0]);
                accum!(0, g.iter().zip(x).map(|(&gv, &xv)| gv * xv.cos()).collect());
            }
            Op::Cos => {
                let x = self.value(ins[0]);
                accum!(0, g.iter().zip(x).map(|(&gv, &xv)| -gv * xv.sin()).collect());
            }
            Op::Exp => {
                let y = self.value(idx);
                accum!(0, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect());
            }
            Op::Ln => {
                let x = self.value(ins[0]);
                accum!(0, g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect());
            }
            Op::Clamp { lo, hi } => {
                let x = self.value(ins[0]);
                accum!(
                    0,
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| {
                            if xv > *lo && xv < *hi {
                                gv
                            } else {
                                F::zero()
                            }
                        })
                        .collect()
                );
            }
            Op::AbsPow { p } => {
                let x = self.value(ins[0]);
                accum!(
                    0,
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| {
                            if xv == F::zero() {
                                F::zero()
                            } else {
                                gv * *p * xv.abs().powf(*p - F::one()) * xv.signum()
                            }
                        })
                        .collect()
                );
            }
            Op::SmoothL1Elem => {
                let x = self.value(ins[0]);
                accum!(
                    0,
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| {
                            if xv.abs() < F::one() {
                                gv * xv
                            } else {
                                gv * xv.signum()
                            }
                        })
                        .collect()
                );
            }
            Op::SoftmaxAxis { axis } => {
                let y = self.value(idx);
                accum!(0, kernels::softmax_axis_bwd(g, y, self.shape(idx), *axis));
            }
            Op::MeanHw => {
                let shape = self.shape(ins[0]);
                let (h, w, c) = (shape[0], shape[1], shape[2]);
                let inv = F::from_f64_lossy(1.0 / (h * w) as f64);
                let mut gx = vec![F::zero(); h * w * c];
                for hw in 0..h * w {
                    for ch in 0..c {
                        gx[hw * c + ch] = g[ch] * inv;
                    }
                }
                accum!(0, gx);
            }
            Op::ScaleChannels => {
                let x = self.value(ins[0]);
                let gate = self.value(ins[1]);
                let c = self.shape(ins[1])[0];
                accum!(
                    0,
                    g.iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * gate[i % c])
                        .collect()
                );
                let mut gg = vec![F::zero(); c];
                for (i, &gv) in g.iter().enumerate() {
                    gg[i % c] += gv * x[i];
                }
                accum!(1, gg);
            }
            Op::Conv2d { spec } => {
                let x = self.value(ins[0]);
                let wt = self.value(ins[1]);
                let xs = self.shape(ins[0]);
                let ws = self.shape(ins[1]);
                let need_gx = self.nodes[ins[0]].needs_grad;
                let (gx, gw, gb) = kernels::conv2d_bwd(g, x, xs, wt, ws, spec, need_gx);
                if need_gx {
                    accum!(0, gx);
                }
                accum!(1, gw);
                accum!(2, gb);
            }
            Op::Conv3d { spec } => {
                let x = self.value(ins[0]);
                let wt = self.value(ins[1]);
                let xs = self.shape(ins[0]);
                let ws = self.shape(ins[1]);
                let need_gx = self.nodes[ins[0]].needs_grad;
                let (gx, gw, gb) = kernels::conv3d_bwd(g, x, xs, wt, ws, spec, need_gx);
                if need_gx {
                    accum!(0, gx);
                }
                accum!(1, gw);
                accum!(2, gb);
            }
            Op::BilinearSample => {
                let x = self.value(ins[0]);
                let coords = self.value(ins[1]);
                let xs = self.shape(ins[0]);
                let need_gx = self.nodes[ins[0]].needs_grad;
                let need_gc = self.nodes[ins[1]].needs_grad;
                let (gx, gc) = kernels::bilinear_bwd(g, x, xs, coords, need_gx, need_gc);
                if need_gx {
                    accum!(0, gx);
                }
                if need_gc {
                    accum!(1, gc);
                }
            }
            Op::FrustumLift => {
                let img = self.value(ins[0]);
                let dist = self.value(ins[1]);
                let is = self.shape(ins[0]);
                let ds = self.shape(ins[1]);
                let (gi, gd) = kernels::frustum_lift_bwd(g, img, is, dist, ds);
                accum!(0, gi);
                accum!(1, gd);
            }
            Op::FrustumSample { taps } => {
                let c = self.shape(ins[0])[3];
                accum!(0, kernels::frustum_sample_bwd(g, taps, c));
            }
        }
    }
}

/// Gradients produced by one backward pass.
pub struct GradientMap<F: Scalar> {
    tape: u64,
    grads: Vec<Option<Tensor<F>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, usize)>,
}

impl<F: Scalar> GradientMap<F> {
    /// Gradient of the root with respect to an on-tape tensor. Nodes the
    /// root does not depend on report a zero tensor of the right shape.
    pub fn grad(&self, t: &Tensor<F>) -> Result<Tensor<F>> {
        let idx = match t.node {
            Some(NodeRef { tape, idx }) if tape == self.tape => idx,
            _ => {
                return Err(Error::NotOnTape(
                    "gradient lookup for a tensor not on the differentiated tape".into(),
                ))
            }
        };
        Ok(match self.grads.get(idx).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[idx]),
        })
    }

    /// Gradient of a named trainable leaf (zeros when unreached).
    pub fn param_grad(&self, name: &str) -> Option<Tensor<F>> {
        let idx = self.params.iter().find(|(n, _)| n == name)?.1;
        Some(match self.grads.get(idx).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[idx]),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = GradTape::new();
        let x = tape.param("x", &Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap());
        let sq = ops::mul(&mut tape, &x, &x);
        let y = ops::sum(&mut tape, &sq);
        let grads = tape.backward(&y).unwrap();
        assert_eq!(grads.grad(&x).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_branch_gets_zero_gradient() {
        let mut tape = GradTape::new();
        let x = tape.param("x", &Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0]).unwrap());
        let c = tape.constant(&Tensor::from_vec(&[3], vec![5.0f64, 5.0, 5.0]).unwrap());
        // Root ignores x entirely: gradient of x must come back as zeros.
        let cc = ops::mul(&mut tape, &c, &c);
        let y = ops::sum(&mut tape, &cc);
        let grads = tape.backward(&y).unwrap();
        assert_eq!(grads.grad(&x).unwrap().as_slice(), &[0.0, 0.0, 0.0]);
        assert!(grads.grad(&c).is_ok());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = GradTape::new();
        let x = tape.param("x", &Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap());
        let y = ops::mul(&mut tape, &x, &x);
        assert!(matches!(
            tape.backward(&y),
            Err(Error::NonScalarRoot { len: 2 })
        ));
    }

    #[test]
    fn root_from_other_tape_is_rejected() {
        let mut a = GradTape::new();
        let b = GradTape::<f64>::new();
        let x = a.param("x", &Tensor::scalar(2.0));
        let y = ops::mul(&mut a, &x, &x);
        assert!(matches!(b.backward(&y), Err(Error::NotOnTape(_))));
    }

    #[test]
    fn backward_is_repeatable_and_bitwise_stable() {
        let mut tape = GradTape::new();
        let x = tape.param(
            "x",
            &Tensor::from_vec(&[4], vec![0.3f64, -1.7, 2.9, 0.01]).unwrap(),
        );
        let s = ops::sin(&mut tape, &x);
        let p = ops::mul(&mut tape, &s, &x);
        let y = ops::sum(&mut tape, &p);
        let g1 = tape.backward(&y).unwrap().grad(&x).unwrap();
        let g2 = tape.backward(&y).unwrap().grad(&x).unwrap();
        assert_eq!(g1.as_slice(), g2.as_slice());
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn checked_mode_panics_on_nan() {
        let mut tape = GradTape::new();
        let x = tape.param("x", &Tensor::from_vec(&[1], vec![-1.0f64]).unwrap());
        let _ = ops::ln(&mut tape, &x); // ln of a negative number
    }

    #[test]
    fn gradient_flows_through_shared_subexpression() {
        // y = (x·x) + (x·x) reuses one node twice; dy/dx = 4x = 12 at x=3.
        let mut tape = GradTape::new();
        let x = tape.param("x", &Tensor::scalar(3.0f64));
        let sq = ops::mul(&mut tape, &x, &x);
        let two_sq = ops::add(&mut tape, &sq, &sq).unwrap();
        let y = ops::sum(&mut tape, &two_sq);
        let g = tape.backward(&y).unwrap().grad(&x).unwrap();
        assert_eq!(g.item(), 12.0);
    }
}
