//! Forward and backward kernels for the network layers.
//!
//! Feature maps are `[H, W, C]` with channels innermost. Each forward
//! function has a matching `*_backward` that maps an output gradient back
//! onto the inputs; the [`Graph`](crate::graph::Graph) records calls and
//! stitches these together.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

fn conv_dims<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (h, wd, cin) = x.dims3()?;
    let (kh, kw, wcin, cout) = match w.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(shape_err!("conv weight must be [3,3,Cin,Cout], got {:?}", w.shape())),
    };
    if kh != 3 || kw != 3 {
        return Err(shape_err!("conv kernel must be 3x3, got {kh}x{kw}"));
    }
    if wcin != cin {
        return Err(shape_err!("conv input has {cin} channels, weight expects {wcin}"));
    }
    if b.shape() != [cout] {
        return Err(shape_err!("conv bias shape {:?}, expected [{cout}]", b.shape()));
    }
    Ok((h, wd, cin, cout))
}

/// Unfolds 3x3 zero-padded neighbourhoods into rows of `9 * cin` values,
/// ordered `(ky, kx, c)` to match the weight layout.
fn im2col<T: Real>(x: &[T], h: usize, w: usize, cin: usize) -> Vec<T> {
    let row_len = 9 * cin;
    let mut col = vec![T::zero(); h * w * row_len];
    for y in 0..h {
        for xx in 0..w {
            let row = &mut col[(y * w + xx) * row_len..][..row_len];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * cin;
                    let dst = (ky * 3 + kx) * cin;
                    row[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], h: usize, w: usize, cin: usize) -> Vec<T> {
    let row_len = 9 * cin;
    let mut x = vec![T::zero(); h * w * cin];
    for y in 0..h {
        for xx in 0..w {
            let row = &col[(y * w + xx) * row_len..][..row_len];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * cin;
                    let src = (ky * 3 + kx) * cin;
                    x[dst..dst + cin]
                        .iter_mut()
                        .zip(&row[src..src + cin])
                        .for_each(|(d, s)| *d += *s);
                }
            }
        }
    }
    x
}

/// 3x3 convolution, zero padding 1, stride 1.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, wd, cin, cout) = conv_dims(x, w, b)?;
    x.check_finite("conv2d input")?;
    let col = im2col(x.data(), h, wd, cin);
    let k = 9 * cin;
    let pixels = h * wd;
    let mut out = Vec::with_capacity(pixels * cout);
    for _ in 0..pixels {
        out.extend_from_slice(b.data());
    }
    T::gemm(
        pixels,
        k,
        cout,
        &col,
        (k as isize, 1),
        w.data(),
        (cout as isize, 1),
        T::one(),
        &mut out,
        (cout as isize, 1),
    );
    Ok(Tensor::from_parts(vec![h, wd, cout], out))
}

/// Gradients of [`conv2d`] with respect to `(x, w, b)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (dx, dw, db) = conv2d_grads(x, w, b, dy, true)?;
    Ok((dx.expect("input gradient requested"), dw, db))
}

/// [`conv2d_backward`] that skips the input gradient unless `need_dx`.
pub(crate) fn conv2d_grads<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (h, wd, cin, cout) = conv_dims(x, w, b)?;
    if dy.shape() != [h, wd, cout] {
        return Err(shape_err!("conv output gradient shape {:?}", dy.shape()));
    }
    let col = im2col(x.data(), h, wd, cin);
    let k = 9 * cin;
    let pixels = h * wd;

    let mut dw = vec![T::zero(); k * cout];
    T::gemm(
        k,
        pixels,
        cout,
        &col,
        (1, k as isize),
        dy.data(),
        (cout as isize, 1),
        T::zero(),
        &mut dw,
        (cout as isize, 1),
    );

    let dx = if need_dx {
        let mut dcol = col;
        T::gemm(
            pixels,
            cout,
            k,
            dy.data(),
            (cout as isize, 1),
            w.data(),
            (1, cout as isize),
            T::zero(),
            &mut dcol,
            (k as isize, 1),
        );
        Some(Tensor::from_parts(x.shape().to_vec(), col2im(&dcol, h, wd, cin)))
    } else {
        None
    };

    let mut db = vec![T::zero(); cout];
    for px in dy.data().chunks_exact(cout) {
        db.iter_mut().zip(px).for_each(|(d, g)| *d += *g);
    }

    Ok((
        dx,
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![cout], db),
    ))
}

/// 2x2 mean pooling with stride 2.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("avg_pool2 needs even extents, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let src = x.data();
    let mut out = vec![T::zero(); oh * ow * c];
    for y in 0..oh {
        for xx in 0..ow {
            let o = (y * ow + xx) * c;
            let i00 = ((2 * y) * w + 2 * xx) * c;
            let i01 = i00 + c;
            let i10 = i00 + w * c;
            let i11 = i10 + c;
            for ch in 0..c {
                out[o + ch] = (src[i00 + ch] + src[i01 + ch] + src[i10 + ch] + src[i11 + ch]) * quarter;
            }
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow, c], out))
}

pub fn avg_pool2_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = match input_shape[..] {
        [h, w, c] => (h, w, c),
        _ => return Err(shape_err!("avg_pool2 input shape {:?}", input_shape)),
    };
    if dy.shape() != [h / 2, w / 2, c] {
        return Err(shape_err!("avg_pool2 gradient shape {:?}", dy.shape()));
    }
    let quarter = T::from_f64_lossy(0.25);
    let ow = w / 2;
    let g = dy.data();
    let mut dx = vec![T::zero(); h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let o = ((y / 2) * ow + xx / 2) * c;
            let i = (y * w + xx) * c;
            for ch in 0..c {
                dx[i + ch] = g[o + ch] * quarter;
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

/// Source taps for one output coordinate of a 2x bilinear upsample.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

/// Half-pixel-centre sampling: output `o` reads input coordinate
/// `(o + 0.5) / 2 - 0.5`, clamped to the valid range.
fn upsample_taps(n: usize) -> Vec<Tap> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

/// Bilinear 2x upsampling.
pub fn upsample_bilinear2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3()?;
    if h == 0 || w == 0 {
        return Err(shape_err!("upsample of empty extent {h}x{w}"));
    }
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let src = x.data();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); oh * ow * c];
    for (oy, ry) in ty.iter().enumerate() {
        for (ox, rx) in tx.iter().enumerate() {
            let o = (oy * ow + ox) * c;
            let taps = [
                (ry.lo, rx.lo, ry.w_lo * rx.w_lo),
                (ry.lo, rx.hi, ry.w_lo * rx.w_hi),
                (ry.hi, rx.lo, ry.w_hi * rx.w_lo),
                (ry.hi, rx.hi, ry.w_hi * rx.w_hi),
            ];
            for (sy, sx, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                let wt = T::from_f64_lossy(wt);
                let i = (sy * w + sx) * c;
                for ch in 0..c {
                    out[o + ch] += src[i + ch] * wt;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow, c], out))
}

pub fn upsample_bilinear2_backward<T: Real>(
    input_shape: &[usize],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, c) = match input_shape[..] {
        [h, w, c] => (h, w, c),
        _ => return Err(shape_err!("upsample input shape {:?}", input_shape)),
    };
    if dy.shape() != [2 * h, 2 * w, c] {
        return Err(shape_err!("upsample gradient shape {:?}", dy.shape()));
    }
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let g = dy.data();
    let ow = 2 * w;
    let mut dx = vec![T::zero(); h * w * c];
    for (oy, ry) in ty.iter().enumerate() {
        for (ox, rx) in tx.iter().enumerate() {
            let o = (oy * ow + ox) * c;
            let taps = [
                (ry.lo, rx.lo, ry.w_lo * rx.w_lo),
                (ry.lo, rx.hi, ry.w_lo * rx.w_hi),
                (ry.hi, rx.lo, ry.w_hi * rx.w_lo),
                (ry.hi, rx.hi, ry.w_hi * rx.w_hi),
            ];
            for (sy, sx, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                let wt = T::from_f64_lossy(wt);
                let i = (sy * w + sx) * c;
                for ch in 0..c {
                    dx[i + ch] += g[o + ch] * wt;
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Passes gradient where the input was strictly positive; zero at 0.
pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(dy, |v, g| if v > T::zero() { g } else { T::zero() })
}

/// Concatenates along the channel axis, `a` first.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, ca) = a.dims3()?;
    let (hb, wb, cb) = b.dims3()?;
    if (h, w) != (hb, wb) {
        return Err(shape_err!("concat spatial mismatch {h}x{w} vs {hb}x{wb}"));
    }
    let c = ca + cb;
    let mut out = Vec::with_capacity(h * w * c);
    for p in 0..h * w {
        out.extend_from_slice(&a.data()[p * ca..(p + 1) * ca]);
        out.extend_from_slice(&b.data()[p * cb..(p + 1) * cb]);
    }
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

/// Splits a concatenated gradient back into the `a` and `b` parts.
pub fn concat_channels_backward<T: Real>(
    ca: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, _, c) = dy.dims3()?;
    if ca > c {
        return Err(shape_err!("concat split {ca} exceeds {c} channels"));
    }
    Ok((slice_channels(dy, 0, ca)?, slice_channels(dy, ca, c - ca)?))
}

/// Channels `[start, start + len)` of an `[H, W, C]` tensor.
pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3()?;
    if start + len > c {
        return Err(shape_err!("channel slice {start}..{} out of {c}", start + len));
    }
    if len == 0 {
        return Ok(Tensor::zeros(&[h, w, 0]));
    }
    let mut out = Vec::with_capacity(h * w * len);
    for p in x.data().chunks_exact(c) {
        out.extend_from_slice(&p[start..start + len]);
    }
    Ok(Tensor::from_parts(vec![h, w, len], out))
}

/// Scatters a slice gradient into a zero tensor of the full channel count.
pub fn slice_channels_backward<T: Real>(
    input_shape: &[usize],
    start: usize,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, c) = match input_shape[..] {
        [h, w, c] => (h, w, c),
        _ => return Err(shape_err!("slice input shape {:?}", input_shape)),
    };
    let (_, _, len) = dy.dims3()?;
    if start + len > c || dy.shape()[..2] != [h, w] {
        return Err(shape_err!("slice gradient shape {:?}", dy.shape()));
    }
    let mut dx = vec![T::zero(); h * w * c];
    for p in 0..h * w {
        dx[p * c + start..p * c + start + len].copy_from_slice(&dy.data()[p * len..(p + 1) * len]);
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_identity_filter_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[4, 5, 2], &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 2, 2]);
        w.set(&[1, 1, 0, 0], 1.0);
        w.set(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_ones_filter_on_constant_image() {
        let c = 0.7f64;
        let x = Tensor::full(&[5, 5, 1], c);
        let w = Tensor::full(&[3, 3, 1, 1], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert!((y.at(&[2, 2, 0]) - 9.0 * c).abs() < 1e-12);
        assert!((y.at(&[0, 0, 0]) - 4.0 * c).abs() < 1e-12);
        assert!((y.at(&[0, 2, 0]) - 6.0 * c).abs() < 1e-12);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::<f64>::zeros(&[4, 4, 2]);
        assert!(conv2d(&x, &Tensor::zeros(&[3, 3, 3, 1]), &Tensor::zeros(&[1])).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[5, 5, 2, 1]), &Tensor::zeros(&[1])).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[3, 3, 2, 1]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn pool_block_mean() {
        let x = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool2(&x).unwrap().data(), &[2.5]);
        assert!(avg_pool2(&Tensor::<f64>::zeros(&[3, 2, 1])).is_err());
        let c = Tensor::full(&[4, 6, 2], 0.3f64);
        assert!(avg_pool2(&c).unwrap().data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn upsample_constant_and_single_pixel() {
        let c = Tensor::full(&[3, 2, 2], 0.4f64);
        let u = upsample_bilinear2(&c).unwrap();
        assert_eq!(u.shape(), &[6, 4, 2]);
        assert!(u.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        let one = Tensor::new(&[1, 1, 1], vec![2.5]).unwrap();
        assert_eq!(upsample_bilinear2(&one).unwrap().data(), &[2.5; 4]);
    }

    #[test]
    fn relu_values() {
        let x = Tensor::new(&[3], vec![-3.0, 0.0, 5.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 5.0]);
        let g = relu_backward(&x, &Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_shapes_and_empty() {
        let a = Tensor::<f64>::zeros(&[4, 4, 3]);
        let b = Tensor::<f64>::zeros(&[4, 4, 5]);
        assert_eq!(concat_channels(&a, &b).unwrap().shape(), &[4, 4, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[3, 2, 2], &mut rng);
        let e = Tensor::zeros(&[3, 2, 0]);
        assert_eq!(concat_channels(&x, &e).unwrap(), x);
        assert_eq!(concat_channels(&e, &x).unwrap(), x);
        assert!(concat_channels(&a, &Tensor::zeros(&[4, 2, 1])).is_err());
    }

    #[test]
    fn slice_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 6], &mut rng);
        let s = slice_channels(&x, 2, 3).unwrap();
        assert_eq!(s.at(&[1, 2, 0]), x.at(&[1, 2, 2]));
        let back = slice_channels_backward(x.shape(), 2, &s).unwrap();
        assert_eq!(back.at(&[1, 2, 4]), x.at(&[1, 2, 4]));
        assert_eq!(back.at(&[1, 2, 5]), 0.0);
    }
}
