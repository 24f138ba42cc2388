//! Pure array kernels behind the tape ops.
//!
//! Every kernel takes plain slices plus explicit dims, so the math is
//! testable without a tape. All loops run in a fixed order, which keeps
//! repeated runs bitwise identical.

use crate::ops::{Conv3dSpec, ConvSpec, FrustumTaps};
use crate::scalar::Scalar;

/// C[m,n] = A[m,k] · B[k,n].
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let (brow, orow) = (&b[p * n..(p + 1) * n], &mut out[i * n..(i + 1) * n]);
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// C[m,k] = A[m,n] · B[k,n]ᵀ.
pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        for p in 0..k {
            let mut acc = F::zero();
            let (arow, brow) = (&a[i * n..(i + 1) * n], &b[p * n..(p + 1) * n]);
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// C[k,n] = A[m,k]ᵀ · B[m,n].
pub fn matmul_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let (brow, orow) = (&b[i * n..(i + 1) * n], &mut out[p * n..(p + 1) * n]);
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// 2-d convolution, stride 1, same zero padding, square dilation.
/// `x` is `[H,W,Cin]`, `wt` is `[kh,kw,Cin,Cout]`, `b` is `[Cout]`.
pub fn conv2d_fwd<F: Scalar>(
    x: &[F],
    xs: &[usize],
    wt: &[F],
    ws: &[usize],
    b: &[F],
    spec: &ConvSpec,
) -> Vec<F> {
    let (h, w, cin) = (xs[0], xs[1], xs[2]);
    let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
    let d = spec.dilation as isize;
    let (ph, pw) = ((kh as isize - 1) / 2 * d, (kw as isize - 1) / 2 * d);
    let mut out = vec![F::zero(); h * w * cout];
    let mut acc = vec![F::zero(); cout];
    for oh in 0..h as isize {
        for ow in 0..w as isize {
            acc.iter_mut().for_each(|v| *v = F::zero());
            for ki in 0..kh as isize {
                let ih = oh + ki * d - ph;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for kj in 0..kw as isize {
                    let iw = ow + kj * d - pw;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    let xoff = ((ih as usize * w) + iw as usize) * cin;
                    let woff = ((ki as usize * kw) + kj as usize) * cin * cout;
                    for ci in 0..cin {
                        let xv = x[xoff + ci];
                        let wrow = &wt[woff + ci * cout..woff + (ci + 1) * cout];
                        for co in 0..cout {
                            acc[co] += xv * wrow[co];
                        }
                    }
                }
            }
            let ooff = ((oh as usize * w) + ow as usize) * cout;
            for co in 0..cout {
                out[ooff + co] = acc[co] + b[co];
            }
        }
    }
    out
}

/// Backward of [`conv2d_fwd`]; returns `(gx, gw, gb)`, with `gx` empty when
/// `need_gx` is false.
pub fn conv2d_bwd<F: Scalar>(
    g: &[F],
    x: &[F],
    xs: &[usize],
    wt: &[F],
    ws: &[usize],
    spec: &ConvSpec,
    need_gx: bool,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (h, w, cin) = (xs[0], xs[1], xs[2]);
    let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
    let d = spec.dilation as isize;
    let (ph, pw) = ((kh as isize - 1) / 2 * d, (kw as isize - 1) / 2 * d);
    let mut gx = vec![F::zero(); if need_gx { h * w * cin } else { 0 }];
    let mut gw = vec![F::zero(); wt.len()];
    let mut gb = vec![F::zero(); cout];
    for oh in 0..h as isize {
        for ow in 0..w as isize {
            let goff = ((oh as usize * w) + ow as usize) * cout;
            let grow = &g[goff..goff + cout];
            for co in 0..cout {
                gb[co] += grow[co];
            }
            for ki in 0..kh as isize {
                let ih = oh + ki * d - ph;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for kj in 0..kw as isize {
                    let iw = ow + kj * d - pw;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    let xoff = ((ih as usize * w) + iw as usize) * cin;
                    let woff = ((ki as usize * kw) + kj as usize) * cin * cout;
                    for ci in 0..cin {
                        let xv = x[xoff + ci];
                        let wrow = &wt[woff + ci * cout..woff + (ci + 1) * cout];
                        let gwrow = &mut gw[woff + ci * cout..woff + (ci + 1) * cout];
                        let mut acc = F::zero();
                        for co in 0..cout {
                            gwrow[co] += xv * grow[co];
                            acc += wrow[co] * grow[co];
                        }
                        if need_gx {
                            gx[xoff + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// 3-d convolution, stride 1, same zero padding, no dilation.
/// `x` is `[X,Y,Z,Cin]`, `wt` is `[k,k,k,Cin,Cout]`, `b` is `[Cout]`.
pub fn conv3d_fwd<F: Scalar>(
    x: &[F],
    xs: &[usize],
    wt: &[F],
    ws: &[usize],
    b: &[F],
    _spec: &Conv3dSpec,
) -> Vec<F> {
    let (nx, ny, nz, cin) = (xs[0], xs[1], xs[2], xs[3]);
    let (k, cout) = (ws[0], ws[4]);
    let p = (k as isize - 1) / 2;
    let mut out = vec![F::zero(); nx * ny * nz * cout];
    let mut acc = vec![F::zero(); cout];
    for ox in 0..nx as isize {
        for oy in 0..ny as isize {
            for oz in 0..nz as isize {
                acc.iter_mut().for_each(|v| *v = F::zero());
                for ki in 0..k as isize {
                    let ix = ox + ki - p;
                    if ix < 0 || ix >= nx as isize {
                        continue;
                    }
                    for kj in 0..k as isize {
                        let iy = oy + kj - p;
                        if iy < 0 || iy >= ny as isize {
                            continue;
                        }
                        for kl in 0..k as isize {
                            let iz = oz + kl - p;
                            if iz < 0 || iz >= nz as isize {
                                continue;
                            }
                            let xoff =
                                (((ix as usize * ny) + iy as usize) * nz + iz as usize) * cin;
                            let woff = (((ki as usize * k) + kj as usize) * k + kl as usize)
                                * cin
                                * cout;
                            for ci in 0..cin {
                                let xv = x[xoff + ci];
                                let wrow = &wt[woff + ci * cout..woff + (ci + 1) * cout];
                                for co in 0..cout {
                                    acc[co] += xv * wrow[co];
                                }
                            }
                        }
                    }
                }
                let ooff = (((ox as usize * ny) + oy as usize) * nz + oz as usize) * cout;
                for co in 0..cout {
                    out[ooff + co] = acc[co] + b[co];
                }
            }
        }
    }
    out
}

/// Backward of [`conv3d_fwd`]; returns `(gx, gw, gb)`.
pub fn conv3d_bwd<F: Scalar>(
    g: &[F],
    x: &[F],
    xs: &[usize],
    wt: &[F],
    ws: &[usize],
    _spec: &Conv3dSpec,
    need_gx: bool,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (nx, ny, nz, cin) = (xs[0], xs[1], xs[2], xs[3]);
    let (k, cout) = (ws[0], ws[4]);
    let p = (k as isize - 1) / 2;
    let mut gx = vec![F::zero(); if need_gx { x.len() } else { 0 }];
    let mut gw = vec![F::zero(); wt.len()];
    let mut gb = vec![F::zero(); cout];
    for ox in 0..nx as isize {
        for oy in 0..ny as isize {
            for oz in 0..nz as isize {
                let goff = (((ox as usize * ny) + oy as usize) * nz + oz as usize) * cout;
                let grow = &g[goff..goff + cout];
                for co in 0..cout {
                    gb[co] += grow[co];
                }
                for ki in 0..k as isize {
                    let ix = ox + ki - p;
                    if ix < 0 || ix >= nx as isize {
                        continue;
                    }
                    for kj in 0..k as isize {
                        let iy = oy + kj - p;
                        if iy < 0 || iy >= ny as isize {
                            continue;
                        }
                        for kl in 0..k as isize {
                            let iz = oz + kl - p;
                            if iz < 0 || iz >= nz as isize {
                                continue;
                            }
                            let xoff =
                                (((ix as usize * ny) + iy as usize) * nz + iz as usize) * cin;
                            let woff = (((ki as usize * k) + kj as usize) * k + kl as usize)
                                * cin
                                * cout;
                            for ci in 0..cin {
                                let xv = x[xoff + ci];
                                let wrow = &wt[woff + ci * cout..woff + (ci + 1) * cout];
                                let gwrow = &mut gw[woff + ci * cout..woff + (ci + 1) * cout];
                                let mut acc = F::zero();
                                for co in 0..cout {
                                    gwrow[co] += xv * grow[co];
                                    acc += wrow[co] * grow[co];
                                }
                                if need_gx {
                                    gx[xoff + ci] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

#[inline]
fn corner_weights<F: Scalar>(y: F, x: F) -> ([isize; 2], [isize; 2], [[F; 2]; 2]) {
    let y0 = y.floor();
    let x0 = x.floor();
    let dy = y - y0;
    let dx = x - x0;
    let (y0, x0) = (y0.to_f64().unwrap() as isize, x0.to_f64().unwrap() as isize);
    let one = F::one();
    (
        [y0, y0 + 1],
        [x0, x0 + 1],
        [
            [(one - dy) * (one - dx), (one - dy) * dx],
            [dy * (one - dx), dy * dx],
        ],
    )
}

/// Bilinear sampling of `x` (`[H,W,C]`) at `coords` (`[N,2]`, row then
/// column, in pixel units). Corners that fall outside the map contribute
/// zero. Output is `[N,C]`.
pub fn bilinear_fwd<F: Scalar>(x: &[F], xs: &[usize], coords: &[F]) -> Vec<F> {
    let (h, w, c) = (xs[0], xs[1], xs[2]);
    let n = coords.len() / 2;
    let mut out = vec![F::zero(); n * c];
    for i in 0..n {
        let (ys, xcs, wts) = corner_weights(coords[2 * i], coords[2 * i + 1]);
        for (ri, &r) in ys.iter().enumerate() {
            if r < 0 || r >= h as isize {
                continue;
            }
            for (ci, &col) in xcs.iter().enumerate() {
                if col < 0 || col >= w as isize {
                    continue;
                }
                let wgt = wts[ri][ci];
                let off = ((r as usize * w) + col as usize) * c;
                for ch in 0..c {
                    out[i * c + ch] += wgt * x[off + ch];
                }
            }
        }
    }
    out
}

/// Backward of [`bilinear_fwd`]; returns `(gx, gcoords)`. The coordinate
/// gradient uses the derivative of the corner weights, with out-of-bounds
/// corners reading zero.
pub fn bilinear_bwd<F: Scalar>(
    g: &[F],
    x: &[F],
    xs: &[usize],
    coords: &[F],
    need_gx: bool,
    need_gc: bool,
) -> (Vec<F>, Vec<F>) {
    let (h, w, c) = (xs[0], xs[1], xs[2]);
    let n = coords.len() / 2;
    let mut gx = vec![F::zero(); if need_gx { x.len() } else { 0 }];
    let mut gc = vec![F::zero(); if need_gc { coords.len() } else { 0 }];
    let one = F::one();
    for i in 0..n {
        let y = coords[2 * i];
        let xc = coords[2 * i + 1];
        let (ys, xcs, wts) = corner_weights(y, xc);
        let dy = y - y.floor();
        let dx = xc - xc.floor();
        // d(weight)/dy and d(weight)/dx per corner, in the same [row][col]
        // layout as the weights themselves.
        let dwdy = [[-(one - dx), -dx], [one - dx, dx]];
        let dwdx = [[-(one - dy), one - dy], [-dy, dy]];
        for (ri, &r) in ys.iter().enumerate() {
            if r < 0 || r >= h as isize {
                continue;
            }
            for (ci, &col) in xcs.iter().enumerate() {
                if col < 0 || col >= w as isize {
                    continue;
                }
                let off = ((r as usize * w) + col as usize) * c;
                for ch in 0..c {
                    let gv = g[i * c + ch];
                    if need_gx {
                        gx[off + ch] += wts[ri][ci] * gv;
                    }
                    if need_gc {
                        gc[2 * i] += dwdy[ri][ci] * x[off + ch] * gv;
                        gc[2 * i + 1] += dwdx[ri][ci] * x[off + ch] * gv;
                    }
                }
            }
        }
    }
    (gx, gc)
}

/// Numerically stabilised softmax along `axis`.
pub fn softmax_axis_fwd<F: Scalar>(x: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = F::neg_infinity();
            for k in 0..len {
                m = m.max(x[base + k * inner]);
            }
            let mut z = F::zero();
            for k in 0..len {
                let e = (x[base + k * inner] - m).exp();
                out[base + k * inner] = e;
                z += e;
            }
            for k in 0..len {
                out[base + k * inner] /= z;
            }
        }
    }
    out
}

/// Backward of softmax given its output `y`: gX = y ⊙ (g − Σ g⊙y).
pub fn softmax_axis_bwd<F: Scalar>(g: &[F], y: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut gx = vec![F::zero(); g.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = F::zero();
            for k in 0..len {
                dot += g[base + k * inner] * y[base + k * inner];
            }
            for k in 0..len {
                gx[base + k * inner] = y[base + k * inner] * (g[base + k * inner] - dot);
            }
        }
    }
    gx
}

/// Outer product of an image and a depth distribution:
/// `out[h,w,d,c] = img[h,w,c] · dist[h,w,d]`.
pub fn frustum_lift_fwd<F: Scalar>(img: &[F], is: &[usize], dist: &[F], ds: &[usize]) -> Vec<F> {
    let (h, w, c) = (is[0], is[1], is[2]);
    let d = ds[2];
    let mut out = vec![F::zero(); h * w * d * c];
    for hw in 0..h * w {
        for k in 0..d {
            let dv = dist[hw * d + k];
            let ioff = hw * c;
            let ooff = (hw * d + k) * c;
            for ch in 0..c {
                out[ooff + ch] = img[ioff + ch] * dv;
            }
        }
    }
    out
}

/// Backward of [`frustum_lift_fwd`]; returns `(g_img, g_dist)`.
pub fn frustum_lift_bwd<F: Scalar>(
    g: &[F],
    img: &[F],
    is: &[usize],
    dist: &[F],
    ds: &[usize],
) -> (Vec<F>, Vec<F>) {
    let (h, w, c) = (is[0], is[1], is[2]);
    let d = ds[2];
    let mut gi = vec![F::zero(); img.len()];
    let mut gd = vec![F::zero(); dist.len()];
    for hw in 0..h * w {
        for k in 0..d {
            let dv = dist[hw * d + k];
            let ioff = hw * c;
            let ooff = (hw * d + k) * c;
            let mut acc = F::zero();
            for ch in 0..c {
                gi[ioff + ch] += g[ooff + ch] * dv;
                acc += g[ooff + ch] * img[ioff + ch];
            }
            gd[hw * d + k] += acc;
        }
    }
    (gi, gd)
}

/// Gathers frustum features (`[H,W,D,C]`) into voxels using precomputed
/// trilinear taps. Output is `[nx,ny,nz,C]`.
pub fn frustum_sample_fwd<F: Scalar>(fr: &[F], taps: &FrustumTaps<F>, c: usize) -> Vec<F> {
    let nvox = taps.taps.len();
    let mut out = vec![F::zero(); nvox * c];
    for (v, vt) in taps.taps.iter().enumerate() {
        for &(hwd, wgt) in vt.iter() {
            let foff = hwd * c;
            let ooff = v * c;
            for ch in 0..c {
                out[ooff + ch] += wgt * fr[foff + ch];
            }
        }
    }
    out
}

/// Backward of [`frustum_sample_fwd`]: scatters voxel gradients back to
/// frustum cells.
pub fn frustum_sample_bwd<F: Scalar>(g: &[F], taps: &FrustumTaps<F>, c: usize) -> Vec<F> {
    let mut gf = vec![F::zero(); taps.frustum_cells() * c];
    for (v, vt) in taps.taps.iter().enumerate() {
        for &(hwd, wgt) in vt.iter() {
            let foff = hwd * c;
            let ooff = v * c;
            for ch in 0..c {
                gf[foff + ch] += wgt * g[ooff + ch];
            }
        }
    }
    gf
}
