//! Channel-first image helpers: Gaussian blur, crop, bilinear resize, and
//! greyscale export.

use crate::error::{MireError, Result};
use crate::tensor::Tensor;

/// Normalized 1-D Gaussian taps; `size` must be odd.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size % 2 == 0 || sigma <= 0.0 {
        return Err(MireError::config(format!(
            "gaussian kernel needs odd size and sigma > 0, got size {size}, sigma {sigma}"
        )));
    }
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

fn dims3(op: &'static str, img: &Tensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(MireError::shape(op, format!("expected [C,H,W], got {s:?}"))),
    }
}

/// Mirror index without repeating the edge (`-1 -> 1`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable blur with reflect padding.
pub fn blur(img: &Tensor, taps: &[f64]) -> Result<Tensor> {
    let (c, h, w) = dims3("blur", img)?;
    let r = (taps.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    for p in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let xx = reflect(x as isize + k as isize - r, w);
                    s += t * src[(p * h + y) * w + xx];
                }
                tmp[(p * h + y) * w + x] = s;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for p in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let yy = reflect(y as isize + k as isize - r, h);
                    s += t * tmp[(p * h + yy) * w + x];
                }
                out[(p * h + y) * w + x] = s;
            }
        }
    }
    Tensor::new(img.shape(), out)
}

pub fn crop(img: &Tensor, top: usize, left: usize, ch: usize, cw: usize) -> Result<Tensor> {
    let (c, h, w) = dims3("crop", img)?;
    if top + ch > h || left + cw > w || ch == 0 || cw == 0 {
        return Err(MireError::shape(
            "crop",
            format!("window {ch}x{cw} at ({top},{left}) outside {h}x{w}"),
        ));
    }
    let mut out = Vec::with_capacity(c * ch * cw);
    for p in 0..c {
        for y in top..top + ch {
            let row = (p * h + y) * w;
            out.extend_from_slice(&img.data()[row + left..row + left + cw]);
        }
    }
    Tensor::new(&[c, ch, cw], out)
}

/// Source coordinate and blend weight for half-pixel-centred resampling.
fn sample_axis(dst: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize with half-pixel centres; same-size resize is exact.
pub fn resize_bilinear(img: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (c, h, w) = dims3("resize_bilinear", img)?;
    if oh == 0 || ow == 0 {
        return Err(MireError::shape("resize_bilinear", "empty output size"));
    }
    let src = img.data();
    let ys: Vec<_> = (0..oh).map(|y| sample_axis(y, h, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|x| sample_axis(x, w, ow)).collect();
    let mut out = Vec::with_capacity(c * oh * ow);
    for p in 0..c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], fx);
                let bot = lerp(plane[y1 * w + x0], plane[y1 * w + x1], fx);
                out.push(lerp(top, bot, fy));
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// `a + t (b - a)` that returns `a` exactly at `t = 0` and `b` exactly at `t = 1`.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else if t == 1.0 {
        b
    } else {
        a + t * (b - a)
    }
}

/// Rec. 601 luma of a `[3,H,W]` image, or the single plane of `[1,H,W]` /
/// `[H,W]` input, as `[H,W]`.
pub fn luminance(img: &Tensor) -> Result<Tensor> {
    match img.shape() {
        &[_, _] => Ok(img.clone()),
        &[1, h, w] => img.reshape(&[h, w]),
        &[3, h, w] => {
            let d = img.data();
            let n = h * w;
            let data = (0..n).map(|p| 0.299 * d[p] + 0.587 * d[n + p] + 0.114 * d[2 * n + p]).collect();
            Tensor::new(&[h, w], data)
        }
        s => Err(MireError::shape("luminance", format!("expected [3,H,W], [1,H,W] or [H,W], got {s:?}"))),
    }
}

/// Places `[H,W]` panels side by side with a one-pixel white gap.
pub fn hconcat(panels: &[Tensor]) -> Result<Tensor> {
    let first = panels.first().ok_or_else(|| MireError::shape("hconcat", "no panels"))?;
    if first.rank() != 2 || panels.iter().any(|p| p.shape() != first.shape()) {
        return Err(MireError::shape("hconcat", "panels must be equal-sized [H,W] planes"));
    }
    let (h, w) = (first.rows(), first.cols());
    let total = panels.len() * (w + 1) - 1;
    let mut out = Tensor::full(&[h, total], 1.0);
    for (k, p) in panels.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                out.set2(r, k * (w + 1) + c, p.at2(r, c));
            }
        }
    }
    Ok(out)
}

/// Binary PGM (P5) bytes of an `[H,W]` plane; values are clamped to `[0,1]`.
pub fn to_pgm(plane: &Tensor) -> Result<Vec<u8>> {
    if plane.rank() != 2 {
        return Err(MireError::shape("to_pgm", format!("expected [H,W], got {:?}", plane.shape())));
    }
    let mut out = format!("P5\n{} {}\n255\n", plane.cols(), plane.rows()).into_bytes();
    out.extend(plane.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(5, 1.5).unwrap();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[4]);
        assert!(gaussian_kernel(4, 1.0).is_err());
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
    }

    #[test]
    fn constants_are_preserved() {
        let img = Tensor::full(&[3, 9, 9], 0.37);
        let k = gaussian_kernel(5, 1.5).unwrap();
        let b = blur(&img, &k).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.37).abs() < 1e-15));
        let r = resize_bilinear(&crop(&b, 2, 3, 4, 4).unwrap(), 9, 9).unwrap();
        assert!(r.data().iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = Tensor::new(&[1, 3, 4], (0..12).map(|v| v as f64 * 0.1).collect()).unwrap();
        assert_eq!(resize_bilinear(&img, 3, 4).unwrap(), img);
    }

    #[test]
    fn upsample_doubles_linear_ramp() {
        // A 2-pixel ramp [0, 1] upsampled to 4 gives [0, 0.25, 0.75, 1].
        let img = Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let r = resize_bilinear(&img, 1, 4).unwrap();
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn luminance_weights_sum_to_one() {
        let img = Tensor::full(&[3, 2, 2], 0.5);
        assert!(luminance(&img).unwrap().data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert!(luminance(&Tensor::zeros(&[2, 2, 2])).is_err());
    }

    #[test]
    fn pgm_layout() {
        let plane = Tensor::new(&[1, 3], vec![0.0, 0.5, 2.0]).unwrap();
        let joined = hconcat(&[plane.clone(), plane]).unwrap();
        assert_eq!(joined.shape(), &[1, 7]);
        let bytes = to_pgm(&joined).unwrap();
        assert!(bytes.starts_with(b"P5\n7 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 7..], &[0, 128, 255, 255, 0, 128, 255]);
    }
}
