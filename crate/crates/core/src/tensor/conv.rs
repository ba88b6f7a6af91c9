//! Direct 2-D convolution and 2x2 max pooling kernels.
//!
//! The stride-1 path works on a zero-padded copy of each input plane and
//! walks output rows at the padded width, so every (channel, tap) pair is a
//! single long contiguous loop. Columns past the valid output width are
//! scratch and get dropped on extraction.

use super::Tensor;
use crate::error::{MireError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_geom(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.rank() != 4 || w.rank() != 4 || b.rank() != 1 {
        return Err(MireError::shape(
            "conv2d",
            format!("expected x[B,C,H,W], w[O,C,kh,kw], b[O]; got {:?}, {:?}, {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let (bs, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, wc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wc != c || b.shape()[0] != o {
        return Err(MireError::shape(
            "conv2d",
            format!("channel mismatch: x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(MireError::shape(
            "conv2d",
            format!("kernel {kh}x{kw} does not fit input {h}x{wd} with padding {pad}, stride {stride}"),
        ));
    }
    Ok(ConvGeom {
        batch: bs,
        in_ch: c,
        h,
        w: wd,
        out_ch: o,
        kh,
        kw,
        stride,
        pad,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (wd + 2 * pad - kw) / stride + 1,
    })
}

fn pad_planes(x: &[f64], planes: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; planes * hp * wp];
    for p in 0..planes {
        for r in 0..h {
            let src = &x[(p * h + r) * w..(p * h + r + 1) * w];
            let dst = (p * hp + r + pad) * wp + pad;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

#[inline]
fn axpy(a: f64, xs: &[f64], ys: &mut [f64]) {
    for (y, x) in ys.iter_mut().zip(xs) {
        *y += a * x;
    }
}

/// Dot product with four fixed partial sums; the summation order is fixed,
/// so results are reproducible.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `acc[t] += sum_k w[k] * src[t + offs[k]]` for every `t` in `acc`.
#[inline]
fn taps9_gather(w: &[f64; 9], offs: &[usize; 9], src: &[f64], acc: &mut [f64]) {
    let n = acc.len();
    let s: [&[f64]; 9] = std::array::from_fn(|k| &src[offs[k]..offs[k] + n]);
    for t in 0..n {
        let mut v = acc[t];
        v += w[0] * s[0][t];
        v += w[1] * s[1][t];
        v += w[2] * s[2][t];
        v += w[3] * s[3][t];
        v += w[4] * s[4][t];
        v += w[5] * s[5][t];
        v += w[6] * s[6][t];
        v += w[7] * s[7][t];
        v += w[8] * s[8][t];
        acc[t] = v;
    }
}

/// Nine dot products `sum_t g[t] * src[t + offs[k]]`, fixed summation order.
#[inline]
fn dot9(g: &[f64], offs: &[usize; 9], src: &[f64]) -> [f64; 9] {
    let n = g.len();
    let s: [&[f64]; 9] = std::array::from_fn(|k| &src[offs[k]..offs[k] + n]);
    let mut acc = [[0.0f64; 4]; 9];
    let full = n / 4 * 4;
    let mut t = 0;
    while t < full {
        for k in 0..9 {
            for l in 0..4 {
                acc[k][l] += g[t + l] * s[k][t + l];
            }
        }
        t += 4;
    }
    let mut out = [0.0; 9];
    for k in 0..9 {
        let mut tail = 0.0;
        for u in full..n {
            tail += g[u] * s[k][u];
        }
        out[k] = (acc[k][0] + acc[k][1]) + (acc[k][2] + acc[k][3]) + tail;
    }
    out
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geom(x, w, b, stride, pad)?;
    let mut out = vec![0.0; g.batch * g.out_ch * g.oh * g.ow];
    if g.stride == 1 {
        let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
        let xpad = pad_planes(x.data(), g.batch * g.in_ch, g.h, g.w, g.pad);
        let span = (g.oh - 1) * wp + g.ow;
        let mut acc = vec![0.0; span];
        for bi in 0..g.batch {
            for o in 0..g.out_ch {
                acc.iter_mut().for_each(|v| *v = 0.0);
                for c in 0..g.in_ch {
                    let plane = &xpad[(bi * g.in_ch + c) * hp * wp..(bi * g.in_ch + c + 1) * hp * wp];
                    let wbase = (o * g.in_ch + c) * g.kh * g.kw;
                    let taps = &w.data()[wbase..wbase + g.kh * g.kw];
                    if taps.len() == 9 {
                        let tw: [f64; 9] = taps.try_into().unwrap();
                        let offs: [usize; 9] = std::array::from_fn(|k| (k / 3) * wp + k % 3);
                        taps9_gather(&tw, &offs, plane, &mut acc);
                    } else {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let off = ki * wp + kj;
                                axpy(taps[ki * g.kw + kj], &plane[off..off + span], &mut acc);
                            }
                        }
                    }
                }
                let bias = b.data()[o];
                let dst = &mut out[(bi * g.out_ch + o) * g.oh * g.ow..(bi * g.out_ch + o + 1) * g.oh * g.ow];
                for r in 0..g.oh {
                    for (d, s) in dst[r * g.ow..(r + 1) * g.ow].iter_mut().zip(&acc[r * wp..r * wp + g.ow]) {
                        *d = s + bias;
                    }
                }
            }
        }
    } else {
        let xd = x.data();
        for bi in 0..g.batch {
            for o in 0..g.out_ch {
                for r in 0..g.oh {
                    for col in 0..g.ow {
                        let mut s = b.data()[o];
                        for c in 0..g.in_ch {
                            for ki in 0..g.kh {
                                let ih = (r * g.stride + ki) as isize - g.pad as isize;
                                if ih < 0 || ih >= g.h as isize {
                                    continue;
                                }
                                for kj in 0..g.kw {
                                    let iw = (col * g.stride + kj) as isize - g.pad as isize;
                                    if iw < 0 || iw >= g.w as isize {
                                        continue;
                                    }
                                    s += w.data()[((o * g.in_ch + c) * g.kh + ki) * g.kw + kj]
                                        * xd[((bi * g.in_ch + c) * g.h + ih as usize) * g.w + iw as usize];
                                }
                            }
                        }
                        out[((bi * g.out_ch + o) * g.oh + r) * g.ow + col] = s;
                    }
                }
            }
        }
    }
    Tensor::new(&[g.batch, g.out_ch, g.oh, g.ow], out)
}

/// Returns `(dx, dw, db)`. `dx` is left at zero when `want_dx` is false.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    dout: &Tensor,
    want_dx: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv_geom(x, w, b, stride, pad)?;
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.out_ch];
    let dd = dout.data();
    if g.stride == 1 {
        let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
        let xpad = pad_planes(x.data(), g.batch * g.in_ch, g.h, g.w, g.pad);
        let mut dxpad = vec![0.0; xpad.len()];
        let span = (g.oh - 1) * wp + g.ow;
        let mut gpw = vec![0.0; span];
        let mut gext = vec![0.0; hp * wp + 2 * ((g.kh - 1) * wp + g.kw - 1)];
        for bi in 0..g.batch {
            for o in 0..g.out_ch {
                let src = &dd[(bi * g.out_ch + o) * g.oh * g.ow..(bi * g.out_ch + o + 1) * g.oh * g.ow];
                gpw.iter_mut().for_each(|v| *v = 0.0);
                for r in 0..g.oh {
                    gpw[r * wp..r * wp + g.ow].copy_from_slice(&src[r * g.ow..(r + 1) * g.ow]);
                }
                db[o] += src.iter().sum::<f64>();
                if g.kh * g.kw == 9 {
                    let offs: [usize; 9] = std::array::from_fn(|k| (k / 3) * wp + k % 3);
                    // zero margins let the input gradient be written as a gather
                    let margin = offs[8];
                    gext[margin..margin + span].copy_from_slice(&gpw);
                    for c in 0..g.in_ch {
                        let pbase = (bi * g.in_ch + c) * hp * wp;
                        let wbase = (o * g.in_ch + c) * 9;
                        let plane = &xpad[pbase..pbase + hp * wp];
                        let dots = dot9(&gpw, &offs, plane);
                        for k in 0..9 {
                            dw[wbase + k] += dots[k];
                        }
                        if want_dx {
                            let tw: [f64; 9] = std::array::from_fn(|k| w.data()[wbase + 8 - k]);
                            let roffs: [usize; 9] = std::array::from_fn(|k| offs[k]);
                            taps9_gather(&tw, &roffs, &gext, &mut dxpad[pbase..pbase + hp * wp]);
                        }
                    }
                    continue;
                }
                for c in 0..g.in_ch {
                    let pbase = (bi * g.in_ch + c) * hp * wp;
                    let wbase = (o * g.in_ch + c) * g.kh * g.kw;
                    for ki in 0..g.kh {
                        for kj in 0..g.kw {
                            let off = pbase + ki * wp + kj;
                            dw[wbase + ki * g.kw + kj] += dot(&gpw, &xpad[off..off + span]);
                            if want_dx {
                                let wv = w.data()[wbase + ki * g.kw + kj];
                                axpy(wv, &gpw, &mut dxpad[off..off + span]);
                            }
                        }
                    }
                }
            }
        }
        let mut dx = vec![0.0; x.len()];
        for p in 0..g.batch * g.in_ch {
            for r in 0..g.h {
                let src = (p * hp + r + g.pad) * wp + g.pad;
                dx[(p * g.h + r) * g.w..(p * g.h + r + 1) * g.w].copy_from_slice(&dxpad[src..src + g.w]);
            }
        }
        Ok((
            Tensor::new(x.shape(), dx)?,
            Tensor::new(w.shape(), dw)?,
            Tensor::new(b.shape(), db)?,
        ))
    } else {
        let xd = x.data();
        let mut dx = vec![0.0; x.len()];
        for bi in 0..g.batch {
            for o in 0..g.out_ch {
                for r in 0..g.oh {
                    for col in 0..g.ow {
                        let gv = dd[((bi * g.out_ch + o) * g.oh + r) * g.ow + col];
                        db[o] += gv;
                        for c in 0..g.in_ch {
                            for ki in 0..g.kh {
                                let ih = (r * g.stride + ki) as isize - g.pad as isize;
                                if ih < 0 || ih >= g.h as isize {
                                    continue;
                                }
                                for kj in 0..g.kw {
                                    let iw = (col * g.stride + kj) as isize - g.pad as isize;
                                    if iw < 0 || iw >= g.w as isize {
                                        continue;
                                    }
                                    let xi = ((bi * g.in_ch + c) * g.h + ih as usize) * g.w + iw as usize;
                                    let wi = ((o * g.in_ch + c) * g.kh + ki) * g.kw + kj;
                                    dw[wi] += gv * xd[xi];
                                    dx[xi] += gv * w.data()[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((
            Tensor::new(x.shape(), dx)?,
            Tensor::new(w.shape(), dw)?,
            Tensor::new(b.shape(), db)?,
        ))
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat index of the winning input element.
pub(crate) fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() != 4 || x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0 {
        return Err(MireError::shape(
            "maxpool2",
            format!("expected [B,C,H,W] with even H,W; got {:?}", x.shape()),
        ));
    }
    let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(bs * c * oh * ow);
    let mut arg = Vec::with_capacity(bs * c * oh * ow);
    for p in 0..bs * c {
        let base = p * h * w;
        for r in 0..oh {
            for col in 0..ow {
                let i0 = base + 2 * r * w + 2 * col;
                let cands = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = cands[0];
                for &ci in &cands[1..] {
                    if xd[ci] > xd[best] {
                        best = ci;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[bs, c, oh, ow], out)?, arg))
}

pub(crate) fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dout.data()) {
        dxd[i] += g;
    }
    dx
}
