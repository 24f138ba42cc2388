//! Finite-difference verification of tape gradients.
//!
//! The checker is deliberately independent of the backward pass: it only
//! evaluates forward functions at perturbed inputs, so it cannot inherit a
//! bug from the rules it is checking. Central differences give O(ε²)
//! truncation error, which at ε ≈ 1e-6 in `f64` leaves ~1e-7 relative
//! agreement for smooth ops. Piecewise ops (relu, clamp, smooth-L1, the
//! quantile mask) are only checked at inputs away from their kinks, where
//! the central difference straddles a smooth region.

use crate::scalar::Scalar;
use crate::tape::GradTape;
use crate::tensor::Tensor;

/// Perturbation used by the default `f64` checks.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport<F: Scalar> {
    pub max_abs_err: F,
    pub max_rel_err: F,
    /// Flat index of the element with the largest relative error.
    pub worst_index: usize,
    pub pass: bool,
}

/// Central-difference gradient of a scalar-valued function.
pub fn finite_diff_grad<F: Scalar>(
    f: impl Fn(&Tensor<F>) -> F,
    x: &Tensor<F>,
    eps: F,
) -> Tensor<F> {
    let base = x.to_vec();
    let two = F::from_f64_lossy(2.0);
    let mut g = vec![F::zero(); x.len()];
    for i in 0..x.len() {
        let mut xp = base.clone();
        xp[i] += eps;
        let mut xm = base.clone();
        xm[i] -= eps;
        let fp = f(&Tensor::from_vec(x.shape(), xp).expect("shape"));
        let fm = f(&Tensor::from_vec(x.shape(), xm).expect("shape"));
        g[i] = (fp - fm) / (two * eps);
    }
    Tensor::from_vec(x.shape(), g).expect("shape")
}

/// Compares two gradients elementwise. An element passes when its absolute
/// error is within `abs_tol` or its relative error (normalised by the
/// larger magnitude) is within `rel_tol`.
pub fn compare_grads<F: Scalar>(
    analytic: &Tensor<F>,
    reference: &Tensor<F>,
    rel_tol: F,
    abs_tol: F,
) -> GradCheckReport<F> {
    assert_eq!(analytic.shape(), reference.shape(), "gradient shape mismatch");
    let mut max_abs = F::zero();
    let mut max_rel = F::zero();
    let mut worst = 0usize;
    let mut pass = true;
    for (i, (&a, &r)) in analytic
        .as_slice()
        .iter()
        .zip(reference.as_slice().iter())
        .enumerate()
    {
        let abs_err = (a - r).abs();
        let denom = a.abs().max(r.abs());
        let rel_err = if denom > F::zero() {
            abs_err / denom
        } else {
            F::zero()
        };
        if abs_err > max_abs {
            max_abs = abs_err;
        }
        if rel_err > max_rel {
            max_rel = rel_err;
            worst = i;
        }
        if !(abs_err <= abs_tol || rel_err <= rel_tol) {
            pass = false;
        }
    }
    GradCheckReport {
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        worst_index: worst,
        pass,
    }
}

/// Runs a tape forward `f` with `x` as a trainable leaf, takes the analytic
/// gradient, re-evaluates `f` under central differences, and compares.
///
/// `f` must build a scalar from its tensor argument; it is called once on a
/// tape for the analytic path and `2·len(x)` times on throwaway tapes for
/// the numeric path.
pub fn grad_check<F: Scalar>(
    f: impl Fn(&mut GradTape<F>, &Tensor<F>) -> Tensor<F>,
    x: &Tensor<F>,
    eps: F,
    rel_tol: F,
    abs_tol: F,
) -> GradCheckReport<F> {
    let mut tape = GradTape::new();
    let xp = tape.param("gradcheck_x", x);
    let y = f(&mut tape, &xp);
    let analytic = tape
        .backward(&y)
        .expect("grad_check forward must produce a scalar on the tape")
        .grad(&xp)
        .expect("leaf gradient");

    let fd = finite_diff_grad(
        |xv| {
            let mut t = GradTape::new();
            let xc = t.constant(xv);
            f(&mut t, &xc).item()
        },
        x,
        eps,
    );

    compare_grads(&analytic, &fd, rel_tol, abs_tol)
}
