//! Per-pixel kernels: separable composition, multi-size fusion and
//! local (spatially varying) convolution.
//!
//! A 2D kernel tensor has shape `[H, W, S, S]`: one `S x S` kernel per
//! output pixel. Row offset `a` of the kernel addresses image row
//! `y + a - S/2`, column offset `b` addresses image column `x + b - S/2`.
//! Samples outside the image read as zero.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

fn ensure_odd(s: usize) -> Result<()> {
    if s % 2 == 1 {
        Ok(())
    } else {
        Err(shape_err!("kernel size {s} is not odd"))
    }
}

/// Outer product `v ⊗ h` at every pixel: `[H,W,S] x [H,W,S] -> [H,W,S,S]`.
pub fn compose_2d<T: Real>(v: &Tensor<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    let (ht, wd, s) = v.dims3()?;
    v.expect_same_shape(h)?;
    let mut out = vec![T::zero(); ht * wd * s * s];
    for ((vp, hp), kp) in v
        .data()
        .chunks_exact(s)
        .zip(h.data().chunks_exact(s))
        .zip(out.chunks_exact_mut(s * s))
    {
        for (a, row) in kp.chunks_exact_mut(s).enumerate() {
            let va = vp[a];
            row.iter_mut().zip(hp).for_each(|(k, &hb)| *k = va * hb);
        }
    }
    Ok(Tensor::from_parts(vec![ht, wd, s, s], out))
}

pub fn compose_2d_backward<T: Real>(
    v: &Tensor<T>,
    h: &Tensor<T>,
    dk: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (ht, wd, s) = v.dims3()?;
    if dk.shape() != [ht, wd, s, s] {
        return Err(shape_err!("compose gradient shape {:?}", dk.shape()));
    }
    let mut dv = vec![T::zero(); v.len()];
    let mut dh = vec![T::zero(); h.len()];
    for p in 0..ht * wd {
        let vp = &v.data()[p * s..(p + 1) * s];
        let hp = &h.data()[p * s..(p + 1) * s];
        let g = &dk.data()[p * s * s..(p + 1) * s * s];
        for a in 0..s {
            let row = &g[a * s..(a + 1) * s];
            let mut acc = T::zero();
            for b in 0..s {
                acc += row[b] * hp[b];
                dh[p * s + b] += row[b] * vp[a];
            }
            dv[p * s + a] = acc;
        }
    }
    Ok((
        Tensor::from_parts(v.shape().to_vec(), dv),
        Tensor::from_parts(h.shape().to_vec(), dh),
    ))
}

/// Mean of centre-aligned kernels of different sizes, zero-embedded into
/// the largest size.
pub fn fuse_kernels<T: Real>(kernels: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = kernels
        .first()
        .ok_or_else(|| shape_err!("fusion needs at least one kernel size"))?;
    let (ht, wd, _) = first.dims_kernel()?;
    let mut s_max = 0;
    for k in kernels {
        let (kh, kw, s) = k.dims_kernel()?;
        if (kh, kw) != (ht, wd) {
            return Err(shape_err!("kernel field {kh}x{kw} != {ht}x{wd}"));
        }
        ensure_odd(s)?;
        s_max = s_max.max(s);
    }
    let scale = T::one() / T::from_usize(kernels.len()).unwrap();
    let mut out = vec![T::zero(); ht * wd * s_max * s_max];
    for k in kernels {
        let s = k.shape()[2];
        let off = (s_max - s) / 2;
        for (src, dst) in k
            .data()
            .chunks_exact(s * s)
            .zip(out.chunks_exact_mut(s_max * s_max))
        {
            for a in 0..s {
                let drow = &mut dst[(a + off) * s_max + off..][..s];
                drow.iter_mut()
                    .zip(&src[a * s..(a + 1) * s])
                    .for_each(|(d, &v)| *d += v * scale);
            }
        }
    }
    Ok(Tensor::from_parts(vec![ht, wd, s_max, s_max], out))
}

/// Column range `[lo, hi)` of kernel offsets that land inside a row of
/// length `w` for output column `x`.
#[inline]
fn valid_span(x: usize, r: usize, s: usize, w: usize) -> (usize, usize) {
    let lo = r.saturating_sub(x);
    let hi = s.min(w + r - x);
    (lo, hi)
}

/// Applies a distinct `S x S` kernel at every pixel of `frame`.
pub fn local_conv<T: Real>(frame: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = frame.dims2()?;
    let (kh, kw, s) = kernels.dims_kernel()?;
    ensure_odd(s)?;
    if (kh, kw) != (h, w) {
        return Err(shape_err!("kernel field {kh}x{kw} for {h}x{w} frame"));
    }
    let r = s / 2;
    let f = frame.data();
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let k = &kernels.data()[(y * w + x) * s * s..][..s * s];
            let (lo, hi) = valid_span(x, r, s, w);
            let mut acc = T::zero();
            for a in 0..s {
                let sy = y + a;
                if sy < r || sy - r >= h {
                    continue;
                }
                let frow = &f[(sy - r) * w + x + lo - r..][..hi - lo];
                let krow = &k[a * s + lo..a * s + hi];
                acc += krow.iter().zip(frow).map(|(&kv, &fv)| kv * fv).sum::<T>();
            }
            out[y * w + x] = acc;
        }
    }
    Ok(Tensor::from_parts(vec![h, w], out))
}

/// Gradients of [`local_conv`] with respect to `(frame, kernels)`.
pub fn local_conv_backward<T: Real>(
    frame: &Tensor<T>,
    kernels: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (df, dk) = local_conv_grads(frame, kernels, dy, true)?;
    Ok((df.expect("frame gradient requested"), dk))
}

/// [`local_conv_backward`] that skips the frame gradient unless `need_frame`.
pub(crate) fn local_conv_grads<T: Real>(
    frame: &Tensor<T>,
    kernels: &Tensor<T>,
    dy: &Tensor<T>,
    need_frame: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let (h, w) = frame.dims2()?;
    let (_, _, s) = kernels.dims_kernel()?;
    if dy.shape() != [h, w] {
        return Err(shape_err!("local_conv gradient shape {:?}", dy.shape()));
    }
    let r = s / 2;
    let f = frame.data();
    let mut dframe = if need_frame { vec![T::zero(); h * w] } else { Vec::new() };
    let mut dk = vec![T::zero(); kernels.len()];
    for y in 0..h {
        for x in 0..w {
            let g = dy.data()[y * w + x];
            let base = (y * w + x) * s * s;
            let k = &kernels.data()[base..base + s * s];
            let (lo, hi) = valid_span(x, r, s, w);
            for a in 0..s {
                let sy = y + a;
                if sy < r || sy - r >= h {
                    continue;
                }
                let fbase = (sy - r) * w + x + lo - r;
                let frow = &f[fbase..fbase + hi - lo];
                dk[base + a * s + lo..base + a * s + hi]
                    .iter_mut()
                    .zip(frow)
                    .for_each(|(d, &fv)| *d = g * fv);
                if need_frame {
                    dframe[fbase..fbase + hi - lo]
                        .iter_mut()
                        .zip(&k[a * s + lo..a * s + hi])
                        .for_each(|(d, &kv)| *d += g * kv);
                }
            }
        }
    }
    Ok((
        need_frame.then(|| Tensor::from_parts(vec![h, w], dframe)),
        Tensor::from_parts(kernels.shape().to_vec(), dk),
    ))
}

/// Vertical and horizontal 1D coefficients of one kernel size, `[H, W, S]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableKernel<T: Real = f64> {
    pub vertical: Tensor<T>,
    pub horizontal: Tensor<T>,
}

impl<T: Real> SeparableKernel<T> {
    pub fn size(&self) -> usize {
        self.vertical.shape()[2]
    }

    pub fn compose(&self) -> Result<Tensor<T>> {
        compose_2d(&self.vertical, &self.horizontal)
    }
}

/// Separable kernels for every `(frame, size)` pair of a burst.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelField<T: Real = f64> {
    sizes: Vec<usize>,
    height: usize,
    width: usize,
    /// Frame-major, sizes in the order of `sizes`.
    kernels: Vec<SeparableKernel<T>>,
}

impl<T: Real> KernelField<T> {
    /// `frames[i][j]` holds the kernel of frame `i` for `sizes[j]`.
    pub fn new(sizes: &[usize], frames: Vec<Vec<SeparableKernel<T>>>) -> Result<Self> {
        if sizes.is_empty() || frames.is_empty() {
            return Err(shape_err!("kernel field needs at least one frame and size"));
        }
        let (height, width, _) = frames[0][0].vertical.dims3()?;
        let mut kernels = Vec::with_capacity(frames.len() * sizes.len());
        for per_frame in frames {
            if per_frame.len() != sizes.len() {
                return Err(shape_err!(
                    "frame has {} kernels for {} sizes",
                    per_frame.len(),
                    sizes.len()
                ));
            }
            for (k, &s) in per_frame.into_iter().zip(sizes) {
                ensure_odd(s)?;
                let expect = [height, width, s];
                if k.vertical.shape() != expect || k.horizontal.shape() != expect {
                    return Err(shape_err!(
                        "kernel shapes {:?}/{:?}, expected {:?}",
                        k.vertical.shape(),
                        k.horizontal.shape(),
                        expect
                    ));
                }
                kernels.push(k);
            }
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            height,
            width,
            kernels,
        })
    }

    /// Every kernel is the 1-hot centre tap, so each 2D kernel is a delta.
    pub fn delta(height: usize, width: usize, frames: usize, sizes: &[usize]) -> Result<Self> {
        let per_frame = |_| {
            sizes
                .iter()
                .map(|&s| {
                    let unit = Tensor::from_fn(&[height, width, s], |i| {
                        if i % s == s / 2 {
                            T::one()
                        } else {
                            T::zero()
                        }
                    });
                    SeparableKernel {
                        vertical: unit.clone(),
                        horizontal: unit,
                    }
                })
                .collect()
        };
        Self::new(sizes, (0..frames).map(per_frame).collect())
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn burst_len(&self) -> usize {
        self.kernels.len() / self.sizes.len()
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn max_size(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(1)
    }

    pub fn kernel(&self, frame: usize, size_index: usize) -> &SeparableKernel<T> {
        &self.kernels[frame * self.sizes.len() + size_index]
    }

    pub fn frame_kernels(&self, frame: usize) -> &[SeparableKernel<T>] {
        let n = self.sizes.len();
        &self.kernels[frame * n..(frame + 1) * n]
    }

    /// Materialized fused kernel of one frame, `[H, W, S_max, S_max]`.
    pub fn fused(&self, frame: usize) -> Result<Tensor<T>> {
        let composed = self
            .frame_kernels(frame)
            .iter()
            .map(SeparableKernel::compose)
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = composed.iter().collect();
        fuse_kernels(&refs)
    }

    fn check_burst(&self, burst: &Tensor<T>) -> Result<()> {
        let (h, w, n) = burst.dims3()?;
        if (h, w) != (self.height, self.width) || n != self.burst_len() {
            return Err(shape_err!(
                "burst {h}x{w}x{n} vs kernel field {}x{}x{}",
                self.height,
                self.width,
                self.burst_len()
            ));
        }
        Ok(())
    }
}

/// Per-estimate outputs of the multi-kernel reconstruction.
#[derive(Debug, Clone)]
pub struct TrainingReconstruction<T: Real = f64> {
    /// `estimates[i][j]`: frame `i` filtered by its kernel of size `sizes[j]`.
    pub estimates: Vec<Vec<Tensor<T>>>,
    /// Mean of all estimates.
    pub output: Tensor<T>,
    pub local_convs: usize,
}

#[derive(Debug, Clone)]
pub struct Reconstruction<T: Real = f64> {
    pub output: Tensor<T>,
    pub local_convs: usize,
}

/// Filters every frame with every kernel size separately and averages the
/// `N * |S|` estimates.
pub fn reconstruct_training<T: Real>(
    burst: &Tensor<T>,
    field: &KernelField<T>,
) -> Result<TrainingReconstruction<T>> {
    field.check_burst(burst)?;
    let (h, w) = field.extent();
    let mut sum = vec![T::zero(); h * w];
    let mut estimates = Vec::with_capacity(field.burst_len());
    let mut local_convs = 0;
    for i in 0..field.burst_len() {
        let frame = burst.channel(i)?;
        let mut per_size = Vec::with_capacity(field.sizes().len());
        for k in field.frame_kernels(i) {
            let est = local_conv(&frame, &k.compose()?)?;
            local_convs += 1;
            sum.iter_mut().zip(est.data()).for_each(|(a, &e)| *a += e);
            per_size.push(est);
        }
        estimates.push(per_size);
    }
    let scale = T::one() / T::from_usize(local_convs).unwrap();
    sum.iter_mut().for_each(|v| *v *= scale);
    Ok(TrainingReconstruction {
        estimates,
        output: Tensor::from_parts(vec![h, w], sum),
        local_convs,
    })
}

/// Fuses each frame's multi-size kernels per pixel and filters every frame
/// once, averaging over the burst.
///
/// The fused kernel is accumulated from the separable factors straight into
/// a per-pixel `S_max x S_max` buffer, so no 2D kernel tensor is allocated.
pub fn reconstruct_inference<T: Real>(
    burst: &Tensor<T>,
    field: &KernelField<T>,
) -> Result<Reconstruction<T>> {
    field.check_burst(burst)?;
    let (h, w) = field.extent();
    let s_max = field.max_size();
    let r = s_max / 2;
    let n = field.burst_len();
    let size_scale = T::one() / T::from_usize(field.sizes().len()).unwrap();
    let frame_scale = T::one() / T::from_usize(n).unwrap();
    let mut out = vec![T::zero(); h * w];
    let mut fused = vec![T::zero(); s_max * s_max];
    let mut local_convs = 0;
    for i in 0..n {
        let frame = burst.channel(i)?;
        let f = frame.data();
        let kernels = field.frame_kernels(i);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                fused.iter_mut().for_each(|v| *v = T::zero());
                for k in kernels {
                    let s = k.size();
                    let off = (s_max - s) / 2;
                    let vp = &k.vertical.data()[p * s..(p + 1) * s];
                    let hp = &k.horizontal.data()[p * s..(p + 1) * s];
                    for (a, &va) in vp.iter().enumerate() {
                        let row = &mut fused[(a + off) * s_max + off..][..s];
                        row.iter_mut().zip(hp).for_each(|(d, &hb)| *d += va * hb);
                    }
                }
                let (lo, hi) = valid_span(x, r, s_max, w);
                let mut acc = T::zero();
                for a in 0..s_max {
                    let sy = y + a;
                    if sy < r || sy - r >= h {
                        continue;
                    }
                    let frow = &f[(sy - r) * w + x + lo - r..][..hi - lo];
                    let krow = &fused[a * s_max + lo..a * s_max + hi];
                    acc += krow.iter().zip(frow).map(|(&kv, &fv)| kv * fv).sum::<T>();
                }
                out[p] += acc * size_scale;
            }
        }
        local_convs += 1;
    }
    out.iter_mut().for_each(|v| *v *= frame_scale);
    Ok(Reconstruction {
        output: Tensor::from_parts(vec![h, w], out),
        local_convs,
    })
}

/// Predicted coefficients per pixel per frame with separable kernels (`2p`).
pub fn separable_coefficients(sizes: &[usize]) -> usize {
    2 * sizes.iter().sum::<usize>()
}

/// Coefficients per pixel per frame when predicting full 2D kernels.
pub fn full_kernel_coefficients(sizes: &[usize]) -> usize {
    sizes.iter().map(|s| s * s).sum()
}
