//! Numeric building blocks shared by the forward and backward passes.
//!
//! Reductions accumulate in `f64` regardless of the tensor scalar type.

use alloc::vec;
use alloc::vec::Vec;


// Float math for no_std builds. Unused when something in the graph links std.
#[allow(unused_imports)]
use num_traits::Float;

use crate::real::Real;

/// `c[m,n] = a[m,k] · b[k,n]`
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let av = av.widen();
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv.widen();
            }
        }
        out.extend(acc.iter().map(|&v| T::cast(v)));
    }
    out
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out.push(T::cast(dot(arow, &b[j * k..(j + 1) * k])));
        }
    }
    out
}

/// `c[m,n] = a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut acc = vec![0f64; m * n];
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let av = av.widen();
            if av == 0.0 {
                continue;
            }
            for (s, &bv) in acc[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *s += av * bv.widen();
            }
        }
    }
    acc.into_iter().map(T::cast).collect()
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.widen() * y.widen()).sum()
}

pub fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_f64(x: f64) -> f64 {
    sigmoid(x)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let xf = x.widen();
    let t = (GELU_C * (xf + GELU_A * xf * xf * xf)).tanh();
    T::cast(0.5 * xf * (1.0 + t))
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let xf = x.widen();
    let t = (GELU_C * (xf + GELU_A * xf * xf * xf)).tanh();
    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xf * xf);
    T::cast(0.5 * (1.0 + t) + 0.5 * xf * dt)
}

/// In-place softmax of one row with max subtraction.
pub fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.widen()));
    let mut sum = 0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v.widen() - max).exp();
        sum += e;
        *o = T::cast(e);
    }
    for o in out.iter_mut() {
        *o = T::cast(o.widen() / sum);
    }
}

/// Softmax over the unmasked entries of a row; masked entries get exactly 0.
/// A fully masked row is treated as unmasked.
pub fn masked_softmax_row<T: Real>(row: &[T], mask: &[bool], out: &mut [T]) {
    if mask.iter().all(|&m| m) {
        softmax_row(row, out);
        return;
    }
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .fold(f64::NEG_INFINITY, |acc, (&v, _)| acc.max(v.widen()));
    let mut sum = 0f64;
    for ((o, &v), &m) in out.iter_mut().zip(row).zip(mask) {
        if m {
            *o = T::zero();
        } else {
            let e = (v.widen() - max).exp();
            sum += e;
            *o = T::cast(e);
        }
    }
    for o in out.iter_mut() {
        *o = T::cast(o.widen() / sum);
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// The four bilinear taps of a sampling location.
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    /// Flattened cell index `y * width + x` of each tap.
    pub cell: [usize; 4],
    pub weight: [f64; 4],
    /// d weight / d x (zero when x was clamped).
    pub dx: [f64; 4],
    /// d weight / d y (zero when y was clamped).
    pub dy: [f64; 4],
}

/// Bilinear taps for continuous pixel coordinates `(x, y)` on a `height × width`
/// grid with pixel centres at integer coordinates. Out-of-range points are
/// clamped onto the valid square.
pub fn bilinear_taps(x: f64, y: f64, height: usize, width: usize) -> Taps {
    let xmax = (width - 1) as f64;
    let ymax = (height - 1) as f64;
    let x_free = x >= 0.0 && x <= xmax;
    let y_free = y >= 0.0 && y <= ymax;
    let xc = x.clamp(0.0, xmax);
    let yc = y.clamp(0.0, ymax);
    let x0 = (num_traits::Float::floor(xc) as usize).min(width - 1);
    let y0 = (num_traits::Float::floor(yc) as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let cell = [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1];
    let weight = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
    let dx = if x_free { [-(1.0 - fy), 1.0 - fy, -fy, fy] } else { [0.0; 4] };
    let dy = if y_free { [-(1.0 - fx), -fx, 1.0 - fx, fx] } else { [0.0; 4] };
    Taps { cell, weight, dx, dy }
}

/// Corner-form box `[x1, y1, x2, y2]` from `(cx, cy, w, h)`, with extents
/// clamped to at least `1e-6`. Returns the box and whether w/h were clamped.
pub fn cxcywh_to_corners(b: [f64; 4]) -> ([f64; 4], [bool; 2]) {
    let w = b[2].max(1e-6);
    let h = b[3].max(1e-6);
    (
        [b[0] - w / 2.0, b[1] - h / 2.0, b[0] + w / 2.0, b[1] + h / 2.0],
        [b[2] < 1e-6, b[3] < 1e-6],
    )
}

/// Generalized IoU of two corner-form boxes.
pub fn giou_corners(p: [f64; 4], g: [f64; 4]) -> f64 {
    giou_with_grad(p, g).0
}

/// Generalized IoU and its gradient with respect to the corners of `p`.
pub fn giou_with_grad(p: [f64; 4], g: [f64; 4]) -> (f64, [f64; 4]) {
    let pw = p[2] - p[0];
    let ph = p[3] - p[1];
    let ap = pw * ph;
    let ag = (g[2] - g[0]) * (g[3] - g[1]);
    let ix1 = p[0].max(g[0]);
    let iy1 = p[1].max(g[1]);
    let ix2 = p[2].min(g[2]);
    let iy2 = p[3].min(g[3]);
    let iw_raw = ix2 - ix1;
    let ih_raw = iy2 - iy1;
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    let union = ap + ag - inter;
    let ex1 = p[0].min(g[0]);
    let ey1 = p[1].min(g[1]);
    let ex2 = p[2].max(g[2]);
    let ey2 = p[3].max(g[3]);
    let ew = ex2 - ex1;
    let eh = ey2 - ey1;
    let enc = ew * eh;
    let iou = inter / union;
    let giou = iou - (enc - union) / enc;

    // d/d [x1, y1, x2, y2] of the prediction
    let mut d_inter = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if p[0] > g[0] {
            d_inter[0] = -ih;
        }
        if p[2] < g[2] {
            d_inter[2] = ih;
        }
        if p[1] > g[1] {
            d_inter[1] = -iw;
        }
        if p[3] < g[3] {
            d_inter[3] = iw;
        }
    }
    let d_ap = [-ph, -pw, ph, pw];
    let mut d_enc = [0.0; 4];
    if p[0] < g[0] {
        d_enc[0] = -eh;
    }
    if p[2] > g[2] {
        d_enc[2] = eh;
    }
    if p[1] < g[1] {
        d_enc[1] = -ew;
    }
    if p[3] > g[3] {
        d_enc[3] = ew;
    }
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d_union = d_ap[i] - d_inter[i];
        let d_iou = (d_inter[i] * union - inter * d_union) / (union * union);
        grad[i] = d_iou + (d_union * enc - union * d_enc[i]) / (enc * enc);
    }
    (giou, grad)
}

/// Smooth-L1 value and derivative with transition at `beta`.
#[inline]
pub fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

/// Elementwise binary cross-entropy with logits and its derivative.
#[inline]
pub fn bce_logits(x: f64, t: f64) -> (f64, f64) {
    let loss = x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
    (loss, sigmoid_f64(x) - t)
}
