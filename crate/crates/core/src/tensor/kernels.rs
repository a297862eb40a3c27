//! Slice-level forward/backward kernels shared by the tape primitives.

use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn check_perm(ndim: usize, perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; ndim];
    if perm.len() != ndim {
        return Err(Error::shape(format!("permutation {perm:?} has wrong rank for {ndim}-d tensor")));
    }
    for &p in perm {
        if p >= ndim || seen[p] {
            return Err(Error::shape(format!("{perm:?} is not a permutation of 0..{ndim}")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Gathers `src` (shape `shape`) into permuted order.
pub(crate) fn permute_slice<T: Copy>(src: &[T], shape: &[usize], perm: &[usize], out: &mut [T]) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let nd = out_shape.len();
    if nd == 0 {
        out[0] = src[0];
        return;
    }
    let last = out_shape[nd - 1];
    let last_stride = src_strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    let mut o = 0;
    while o < out.len() {
        if last_stride == 1 {
            out[o..o + last].copy_from_slice(&src[base..base + last]);
        } else {
            for j in 0..last {
                out[o + j] = src[base + j * last_stride];
            }
        }
        o += last;
        // advance odometer over the leading axes
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    check_perm(x.ndim(), perm)?;
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let mut out = vec![T::zero(); x.numel()];
    permute_slice(x.data(), x.shape(), perm, &mut out);
    Tensor::new(&out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Broadcast plan for batched matrix products over leading dimensions.
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_off: Vec<usize>,
    pub b_off: Vec<usize>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(format!("matmul needs rank >= 2 operands, got {a:?} and {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape(format!("matmul inner dimensions disagree: {a:?} x {b:?}")));
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let nd = ba.len().max(bb.len());
    let mut batch = vec![0; nd];
    let pad = |s: &[usize], i: usize| -> usize {
        let off = nd - s.len();
        if i < off {
            1
        } else {
            s[i - off]
        }
    };
    for (i, slot) in batch.iter_mut().enumerate() {
        let (da, db) = (pad(ba, i), pad(bb, i));
        *slot = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::shape(format!("matmul batch dims not broadcastable: {a:?} x {b:?}")));
        };
    }
    let total = numel(&batch);
    let sa: Vec<usize> = {
        let padded: Vec<usize> = (0..nd).map(|i| pad(ba, i)).collect();
        strides(&padded).iter().zip(&padded).map(|(&s, &d)| if d == 1 { 0 } else { s }).collect()
    };
    let sb: Vec<usize> = {
        let padded: Vec<usize> = (0..nd).map(|i| pad(bb, i)).collect();
        strides(&padded).iter().zip(&padded).map(|(&s, &d)| if d == 1 { 0 } else { s }).collect()
    };
    let mut a_off = Vec::with_capacity(total);
    let mut b_off = Vec::with_capacity(total);
    let bstr = strides(&batch);
    for flat in 0..total {
        let (mut oa, mut ob) = (0, 0);
        for i in 0..nd {
            let idx = (flat / bstr[i]) % batch[i];
            oa += idx * sa[i];
            ob += idx * sb[i];
        }
        a_off.push(oa * m * k);
        b_off.push(ob * k * n);
    }
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan { out_shape, m, k, n, a_off, b_off })
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], width: usize, out: &mut [T]) {
    for (row, orow) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mx).exp();
            s += *o;
        }
        let inv = T::one() / s;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
}

pub(crate) fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], width: usize, dx: &mut [T]) {
    for ((yr, dyr), dxr) in y.chunks_exact(width).zip(dy.chunks_exact(width)).zip(dx.chunks_exact_mut(width)) {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d += yv * (g - dot);
        }
    }
}

pub(crate) fn log_softmax_rows<T: Scalar>(x: &[T], width: usize, out: &mut [T]) {
    for (row, orow) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
}

pub(crate) fn log_softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], width: usize, dx: &mut [T]) {
    for ((yr, dyr), dxr) in y.chunks_exact(width).zip(dy.chunks_exact(width)).zip(dx.chunks_exact_mut(width)) {
        let s: T = dyr.iter().copied().sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d += g - yv.exp() * s;
        }
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let v = x.f64();
    T::of(0.5 * v * (1.0 + libm::erf(v * INV_SQRT_2)))
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let v = x.f64();
    let cdf = 0.5 * (1.0 + libm::erf(v * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
    T::of(cdf + v * pdf)
}

/// Normalizes `groups` contiguous slices, each split into `channels_per`
/// channel runs of `inner` elements; the affine parameters are indexed by
/// channel. Layer norm is the case `inner == 1`.
pub(crate) struct NormLayout {
    pub groups: usize,
    pub channels_per: usize,
    pub inner: usize,
    pub channels: usize,
}

pub(crate) fn norm_forward<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], lay: &NormLayout, eps: T, out: &mut [T], xhat: &mut [T], rstd: &mut [T]) {
    let glen = lay.channels_per * lay.inner;
    let inv_n = T::one() / T::of(glen as f64);
    for g in 0..lay.groups {
        let xs = &x[g * glen..(g + 1) * glen];
        let mean = xs.iter().copied().sum::<T>() * inv_n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let r = T::one() / (var + eps).sqrt();
        rstd[g] = r;
        let ch0 = (g * lay.channels_per) % lay.channels;
        for c in 0..lay.channels_per {
            let (ga, be) = (gamma[ch0 + c], beta[ch0 + c]);
            for i in 0..lay.inner {
                let p = g * glen + c * lay.inner + i;
                let h = (x[p] - mean) * r;
                xhat[p] = h;
                out[p] = h * ga + be;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn norm_backward<T: Scalar>(
    dy: &[T],
    gamma: &[T],
    xhat: &[T],
    rstd: &[T],
    lay: &NormLayout,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let glen = lay.channels_per * lay.inner;
    if let Some(dg) = dgamma {
        for g in 0..lay.groups {
            let ch0 = (g * lay.channels_per) % lay.channels;
            for c in 0..lay.channels_per {
                let mut s = T::zero();
                for i in 0..lay.inner {
                    let p = g * glen + c * lay.inner + i;
                    s += dy[p] * xhat[p];
                }
                dg[ch0 + c] += s;
            }
        }
    }
    if let Some(db) = dbeta {
        for g in 0..lay.groups {
            let ch0 = (g * lay.channels_per) % lay.channels;
            for c in 0..lay.channels_per {
                let base = g * glen + c * lay.inner;
                db[ch0 + c] += dy[base..base + lay.inner].iter().copied().sum::<T>();
            }
        }
    }
    if let Some(dx) = dx {
        let inv_n = T::one() / T::of(glen as f64);
        for g in 0..lay.groups {
            let ch0 = (g * lay.channels_per) % lay.channels;
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for c in 0..lay.channels_per {
                for i in 0..lay.inner {
                    let p = g * glen + c * lay.inner + i;
                    let dh = dy[p] * gamma[ch0 + c];
                    m1 += dh;
                    m2 += dh * xhat[p];
                }
            }
            m1 *= inv_n;
            m2 *= inv_n;
            for c in 0..lay.channels_per {
                for i in 0..lay.inner {
                    let p = g * glen + c * lay.inner + i;
                    let dh = dy[p] * gamma[ch0 + c];
                    dx[p] += rstd[g] * (dh - m1 - xhat[p] * m2);
                }
            }
        }
    }
}

/// Average pool with kernel == stride == `k` over `[planes, h, w]`.
pub(crate) fn avg_pool<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (ho, wo) = (h / k, w / k);
    let inv = T::one() / T::of((k * k) as f64);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                out[(p * ho + i / k) * wo + j / k] += x[(p * h + i) * w + j];
            }
        }
    }
    for v in &mut out {
        *v *= inv;
    }
    out
}

pub(crate) fn avg_pool_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let (ho, wo) = (h / k, w / k);
    let inv = T::one() / T::of((k * k) as f64);
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                dx[(p * h + i) * w + j] += dy[(p * ho + i / k) * wo + j / k] * inv;
            }
        }
    }
}

pub(crate) fn upsample_nearest<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                out[(p * ho + i) * wo + j] = x[(p * h + i / f) * w + j / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, f: usize, dx: &mut [T]) {
    let (ho, wo) = (h * f, w * f);
    for p in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                dx[(p * h + i / f) * w + j / f] += dy[(p * ho + i) * wo + j];
            }
        }
    }
}

/// Fused scaled dot-product attention over `batch` independent problems.
/// Returns `(output, probabilities)`.
pub(crate) struct AttnDims {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub d: usize,
    pub dv: usize,
}

pub(crate) fn attention_forward<T: Scalar>(q: &[T], k: &[T], v: &[T], dims: &AttnDims, scale: T) -> (Vec<T>, Vec<T>) {
    let AttnDims { batch, lq, lk, d, dv } = *dims;
    let mut probs = vec![T::zero(); batch * lq * lk];
    let mut out = vec![T::zero(); batch * lq * dv];
    let mut scores = vec![T::zero(); lq * lk];
    for b in 0..batch {
        let qb = &q[b * lq * d..(b + 1) * lq * d];
        let kb = &k[b * lk * d..(b + 1) * lk * d];
        let vb = &v[b * lk * dv..(b + 1) * lk * dv];
        T::gemm(lq, d, lk, scale, qb, d as isize, 1, kb, 1, d as isize, T::zero(), &mut scores, lk as isize, 1);
        let pb = &mut probs[b * lq * lk..(b + 1) * lq * lk];
        softmax_rows(&scores, lk, pb);
        let ob = &mut out[b * lq * dv..(b + 1) * lq * dv];
        T::gemm(lq, lk, dv, T::one(), pb, lk as isize, 1, vb, dv as isize, 1, T::zero(), ob, dv as isize, 1);
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    dims: &AttnDims,
    scale: T,
    mut dq: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut dv_out: Option<&mut [T]>,
) {
    let AttnDims { batch, lq, lk, d, dv } = *dims;
    let mut dp = vec![T::zero(); lq * lk];
    let mut ds = vec![T::zero(); lq * lk];
    for b in 0..batch {
        let qb = &q[b * lq * d..(b + 1) * lq * d];
        let kb = &k[b * lk * d..(b + 1) * lk * d];
        let vb = &v[b * lk * dv..(b + 1) * lk * dv];
        let pb = &probs[b * lq * lk..(b + 1) * lq * lk];
        let gb = &dout[b * lq * dv..(b + 1) * lq * dv];
        if let Some(dvv) = dv_out.as_deref_mut() {
            // dV += P^T dO
            let dvb = &mut dvv[b * lk * dv..(b + 1) * lk * dv];
            T::gemm(lk, lq, dv, T::one(), pb, 1, lk as isize, gb, dv as isize, 1, T::one(), dvb, dv as isize, 1);
        }
        if dq.is_none() && dk.is_none() {
            continue;
        }
        // dP = dO V^T
        T::gemm(lq, dv, lk, T::one(), gb, dv as isize, 1, vb, 1, dv as isize, T::zero(), &mut dp, lk as isize, 1);
        ds.iter_mut().for_each(|x| *x = T::zero());
        softmax_rows_backward(pb, &dp, lk, &mut ds);
        if let Some(dqq) = dq.as_deref_mut() {
            let dqb = &mut dqq[b * lq * d..(b + 1) * lq * d];
            T::gemm(lq, lk, d, scale, &ds, lk as isize, 1, kb, d as isize, 1, T::one(), dqb, d as isize, 1);
        }
        if let Some(dkk) = dk.as_deref_mut() {
            let dkb = &mut dkk[b * lk * d..(b + 1) * lk * d];
            T::gemm(lk, lq, d, scale, &ds, 1, lk as isize, qb, d as isize, 1, T::one(), dkb, d as isize, 1);
        }
    }
}
