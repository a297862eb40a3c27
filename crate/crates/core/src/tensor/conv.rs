//! 2-D convolution kernels (standard, grouped/depthwise, transposed) via
//! im2col + GEMM.

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv_out_size(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("convolution stride must be positive"));
    }
    if len + 2 * pad < k {
        return Err(Error::shape(format!("kernel {k} larger than padded input {len}+2*{pad}")));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

pub(crate) fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize, groups: usize) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::shape(format!("conv2d expects 4-d input and kernel, got {x:?} and {w:?}")));
    }
    let (n, cin, h, wd) = (x[0], x[1], x[2], x[3]);
    let (cout, cpg, kh, kw) = (w[0], w[1], w[2], w[3]);
    if groups == 0 || cin % groups != 0 || cout % groups != 0 || cpg != cin / groups {
        return Err(Error::shape(format!("conv2d channel mismatch: input {x:?}, kernel {w:?}, groups {groups}")));
    }
    let ho = conv_out_size(h, kh, stride, pad)?;
    let wo = conv_out_size(wd, kw, stride, pad)?;
    Ok(ConvGeom { n, cin, h, w: wd, cout, kh, kw, stride, pad, groups, ho, wo })
}

/// Geometry of a transposed convolution; `cin`/`cout` refer to the
/// transposed op's input/output, `h`/`w` to its (small) input and
/// `ho`/`wo` to its (large) output.
pub(crate) fn conv_t_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[0] {
        return Err(Error::shape(format!("conv_transpose2d shape mismatch: input {x:?}, kernel {w:?}")));
    }
    let (n, cin, h, wd) = (x[0], x[1], x[2], x[3]);
    let (cout, kh, kw) = (w[1], w[2], w[3]);
    if stride == 0 {
        return Err(Error::shape("convolution stride must be positive"));
    }
    let full_h = (h - 1) * stride + kh;
    let full_w = (wd - 1) * stride + kw;
    if full_h <= 2 * pad || full_w <= 2 * pad {
        return Err(Error::shape(format!("padding {pad} consumes transposed output of {x:?}")));
    }
    Ok(ConvGeom { n, cin, h, w: wd, cout, kh, kw, stride, pad, groups: 1, ho: full_h - 2 * pad, wo: full_w - 2 * pad })
}

/// `cols[(c*kh + a)*kw + b, i*wo + j] = img[c, i*s - p + a, j*s - p + b]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, s: usize, p: usize, ho: usize, wo: usize, cols: &mut [T]) {
    let l = ho * wo;
    for ch in 0..c {
        for a in 0..kh {
            for b in 0..kw {
                let row = ((ch * kh + a) * kw + b) * l;
                for i in 0..ho {
                    let y = (i * s + a) as isize - p as isize;
                    let dst = &mut cols[row + i * wo..row + (i + 1) * wo];
                    if y < 0 || y >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &img[(ch * h + y as usize) * w..(ch * h + y as usize + 1) * w];
                    for (j, d) in dst.iter_mut().enumerate() {
                        let x = (j * s + b) as isize - p as isize;
                        *d = if x < 0 || x >= w as isize { T::zero() } else { src[x as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, s: usize, p: usize, ho: usize, wo: usize, img: &mut [T]) {
    let l = ho * wo;
    for ch in 0..c {
        for a in 0..kh {
            for b in 0..kw {
                let row = ((ch * kh + a) * kw + b) * l;
                for i in 0..ho {
                    let y = (i * s + a) as isize - p as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let base = (ch * h + y as usize) * w;
                    for j in 0..wo {
                        let x = (j * s + b) as isize - p as isize;
                        if x >= 0 && x < w as isize {
                            img[base + x as usize] += cols[row + i * wo + j];
                        }
                    }
                }
            }
        }
    }
}

fn is_depthwise(g: &ConvGeom) -> bool {
    g.groups == g.cin && g.cout == g.cin && g.groups > 1
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.cout * g.ho * g.wo];
    let l = g.ho * g.wo;
    if is_depthwise(g) {
        depthwise_forward(x, w, g, &mut out);
    } else {
        let cpg = g.cin / g.groups;
        let opg = g.cout / g.groups;
        let kk = cpg * g.kh * g.kw;
        let mut cols = vec![T::zero(); kk * l];
        for n in 0..g.n {
            for gi in 0..g.groups {
                let img = &x[(n * g.cin + gi * cpg) * g.h * g.w..(n * g.cin + (gi + 1) * cpg) * g.h * g.w];
                im2col(img, cpg, g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.ho, g.wo, &mut cols);
                let wg = &w[gi * opg * kk..(gi + 1) * opg * kk];
                let o = &mut out[(n * g.cout + gi * opg) * l..(n * g.cout + (gi + 1) * opg) * l];
                T::gemm(opg, kk, l, T::one(), wg, kk as isize, 1, &cols, l as isize, 1, T::zero(), o, l as isize, 1);
            }
        }
    }
    if let Some(b) = bias {
        for n in 0..g.n {
            for c in 0..g.cout {
                let bv = b[c];
                out[(n * g.cout + c) * l..(n * g.cout + c + 1) * l].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let (s, p) = (g.stride as isize, g.pad as isize);
    for n in 0..g.n {
        for c in 0..g.cin {
            let img = &x[(n * g.cin + c) * g.h * g.w..(n * g.cin + c + 1) * g.h * g.w];
            let ker = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let o = &mut out[(n * g.cout + c) * g.ho * g.wo..(n * g.cout + c + 1) * g.ho * g.wo];
            for i in 0..g.ho {
                for j in 0..g.wo {
                    let mut acc = T::zero();
                    for a in 0..g.kh {
                        let y = i as isize * s - p + a as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        for b in 0..g.kw {
                            let xx = j as isize * s - p + b as isize;
                            if xx < 0 || xx >= g.w as isize {
                                continue;
                            }
                            acc += ker[a * g.kw + b] * img[y as usize * g.w + xx as usize];
                        }
                    }
                    o[i * g.wo + j] = acc;
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(x: &[T], w: &[T], dy: &[T], g: &ConvGeom, mut dx: Option<&mut [T]>, mut dw: Option<&mut [T]>) {
    let (s, p) = (g.stride as isize, g.pad as isize);
    for n in 0..g.n {
        for c in 0..g.cin {
            let ioff = (n * g.cin + c) * g.h * g.w;
            let koff = c * g.kh * g.kw;
            let ooff = (n * g.cout + c) * g.ho * g.wo;
            for i in 0..g.ho {
                for j in 0..g.wo {
                    let gv = dy[ooff + i * g.wo + j];
                    for a in 0..g.kh {
                        let y = i as isize * s - p + a as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        for b in 0..g.kw {
                            let xx = j as isize * s - p + b as isize;
                            if xx < 0 || xx >= g.w as isize {
                                continue;
                            }
                            let xi = ioff + y as usize * g.w + xx as usize;
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xi] += w[koff + a * g.kw + b] * gv;
                            }
                            if let Some(dw) = dw.as_deref_mut() {
                                dw[koff + a * g.kw + b] += x[xi] * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(x: &[T], w: &[T], dy: &[T], g: &ConvGeom, mut dx: Option<&mut [T]>, mut dw: Option<&mut [T]>, db: Option<&mut [T]>) {
    let l = g.ho * g.wo;
    if let Some(db) = db {
        for n in 0..g.n {
            for c in 0..g.cout {
                db[c] += dy[(n * g.cout + c) * l..(n * g.cout + c + 1) * l].iter().copied().sum::<T>();
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    if is_depthwise(g) {
        depthwise_backward(x, w, dy, g, dx, dw);
        return;
    }
    let cpg = g.cin / g.groups;
    let opg = g.cout / g.groups;
    let kk = cpg * g.kh * g.kw;
    let mut cols = vec![T::zero(); kk * l];
    let mut dcols = vec![T::zero(); kk * l];
    for n in 0..g.n {
        for gi in 0..g.groups {
            let gy = &dy[(n * g.cout + gi * opg) * l..(n * g.cout + (gi + 1) * opg) * l];
            if let Some(dw) = dw.as_deref_mut() {
                let img = &x[(n * g.cin + gi * cpg) * g.h * g.w..(n * g.cin + (gi + 1) * cpg) * g.h * g.w];
                im2col(img, cpg, g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.ho, g.wo, &mut cols);
                let dwg = &mut dw[gi * opg * kk..(gi + 1) * opg * kk];
                // dW += dY · cols^T
                T::gemm(opg, l, kk, T::one(), gy, l as isize, 1, &cols, 1, l as isize, T::one(), dwg, kk as isize, 1);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let wg = &w[gi * opg * kk..(gi + 1) * opg * kk];
                // dcols = W^T · dY
                T::gemm(kk, opg, l, T::one(), wg, 1, kk as isize, gy, l as isize, 1, T::zero(), &mut dcols, l as isize, 1);
                let dimg = &mut dx[(n * g.cin + gi * cpg) * g.h * g.w..(n * g.cin + (gi + 1) * cpg) * g.h * g.w];
                col2im_add(&dcols, cpg, g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.ho, g.wo, dimg);
            }
        }
    }
}

pub(crate) fn conv_t_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let hw = g.h * g.w;
    let lo = g.ho * g.wo;
    let kk = g.cout * g.kh * g.kw;
    let mut out = vec![T::zero(); g.n * g.cout * lo];
    let mut cols = vec![T::zero(); kk * hw];
    for n in 0..g.n {
        let xn = &x[n * g.cin * hw..(n + 1) * g.cin * hw];
        // cols = W^T · x, W viewed as [cin, kk]
        T::gemm(kk, g.cin, hw, T::one(), w, 1, kk as isize, xn, hw as isize, 1, T::zero(), &mut cols, hw as isize, 1);
        let on = &mut out[n * g.cout * lo..(n + 1) * g.cout * lo];
        col2im_add(&cols, g.cout, g.ho, g.wo, g.kh, g.kw, g.stride, g.pad, g.h, g.w, on);
        if let Some(b) = bias {
            for c in 0..g.cout {
                on[c * lo..(c + 1) * lo].iter_mut().for_each(|v| *v += b[c]);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_t_backward<T: Scalar>(x: &[T], w: &[T], dy: &[T], g: &ConvGeom, mut dx: Option<&mut [T]>, mut dw: Option<&mut [T]>, db: Option<&mut [T]>) {
    let hw = g.h * g.w;
    let lo = g.ho * g.wo;
    let kk = g.cout * g.kh * g.kw;
    if let Some(db) = db {
        for n in 0..g.n {
            for c in 0..g.cout {
                db[c] += dy[(n * g.cout + c) * lo..(n * g.cout + c + 1) * lo].iter().copied().sum::<T>();
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    let mut dcols = vec![T::zero(); kk * hw];
    for n in 0..g.n {
        let gn = &dy[n * g.cout * lo..(n + 1) * g.cout * lo];
        im2col(gn, g.cout, g.ho, g.wo, g.kh, g.kw, g.stride, g.pad, g.h, g.w, &mut dcols);
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * g.cin * hw..(n + 1) * g.cin * hw];
            T::gemm(g.cin, kk, hw, T::one(), w, kk as isize, 1, &dcols, hw as isize, 1, T::one(), dxn, hw as isize, 1);
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xn = &x[n * g.cin * hw..(n + 1) * g.cin * hw];
            T::gemm(g.cin, hw, kk, T::one(), xn, hw as isize, 1, &dcols, 1, hw as isize, T::one(), dw, kk as isize, 1);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let cpg = g.cin / g.groups;
        let opg = g.cout / g.groups;
        let mut out = vec![0.0; g.n * g.cout * g.ho * g.wo];
        for n in 0..g.n {
            for co in 0..g.cout {
                let gi = co / opg;
                for i in 0..g.ho {
                    for j in 0..g.wo {
                        let mut s = 0.0;
                        for ci in 0..cpg {
                            for a in 0..g.kh {
                                for b in 0..g.kw {
                                    let y = (i * g.stride + a) as isize - g.pad as isize;
                                    let xx = (j * g.stride + b) as isize - g.pad as isize;
                                    if y < 0 || xx < 0 || y >= g.h as isize || xx >= g.w as isize {
                                        continue;
                                    }
                                    let c = gi * cpg + ci;
                                    s += w[((co * cpg + ci) * g.kh + a) * g.kw + b] * x[((n * g.cin + c) * g.h + y as usize) * g.w + xx as usize];
                                }
                            }
                        }
                        out[((n * g.cout + co) * g.ho + i) * g.wo + j] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn grouped_and_depthwise_match_naive_loops() {
        for &(cin, cout, groups, k, s, p) in &[(4, 6, 2, 3, 2, 1), (3, 3, 3, 3, 1, 1), (2, 5, 1, 7, 2, 3)] {
            let x: Vec<f64> = (0..2 * cin * 9 * 9).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..cout * (cin / groups) * k * k).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.5).collect();
            let g = conv_geom(&[2, cin, 9, 9], &[cout, cin / groups, k, k], s, p, groups).unwrap();
            let got = conv2d_forward(&x, &w, None, &g);
            assert_eq!(got, naive_conv(&x, &w, &g));
        }
    }

    #[test]
    fn transposed_output_arithmetic() {
        let g = conv_t_geom(&[1, 2, 3, 3], &[2, 4, 2, 2], 2, 0).unwrap();
        assert_eq!((g.ho, g.wo), (6, 6));
        let g = conv_t_geom(&[1, 2, 7, 7], &[2, 1, 4, 4], 4, 0).unwrap();
        assert_eq!((g.ho, g.wo), (28, 28));
    }
}
