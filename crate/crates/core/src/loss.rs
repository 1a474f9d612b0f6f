//! Training losses and image quality metrics.

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// PSNR reported when the mean squared error is numerically zero.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Weights of the basic loss and the decaying per-estimate term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSchedule {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub alpha: f64,
    pub step: u64,
}

impl Default for LossSchedule {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
            beta: 100.0,
            alpha: 0.9998,
            step: 0,
        }
    }
}

impl LossSchedule {
    pub fn validate(&self) -> Result<()> {
        if (self.lambda1 + self.lambda2 - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "lambda1 + lambda2 must be 1, got {} + {}",
                self.lambda1, self.lambda2
            )));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// `beta * alpha^step`.
    pub fn anneal_weight(&self) -> f64 {
        self.beta * self.alpha.powf(self.step as f64)
    }

    pub fn at_step(self, step: u64) -> Self {
        Self { step, ..self }
    }
}

/// Forward differences of an `[H, W]` image: channel 0 along columns
/// (`x`), channel 1 along rows (`y`). The trailing column/row is zero.
pub fn grad_image<T: Real>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = img.dims2()?;
    if h < 2 || w < 2 {
        return Err(shape_err!("image gradient needs at least 2x2, got {h}x{w}"));
    }
    let d = img.data();
    let mut out = vec![T::zero(); h * w * 2];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                out[2 * p] = d[p + 1] - d[p];
            }
            if y + 1 < h {
                out[2 * p + 1] = d[p + w] - d[p];
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w, 2], out))
}

pub fn grad_image_backward<T: Real>(shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = match shape[..] {
        [h, w] => (h, w),
        _ => return Err(shape_err!("image gradient input shape {:?}", shape)),
    };
    if dy.shape() != [h, w, 2] {
        return Err(shape_err!("image gradient output grad shape {:?}", dy.shape()));
    }
    let g = dy.data();
    let mut dx = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                dx[p + 1] += g[2 * p];
                dx[p] -= g[2 * p];
            }
            if y + 1 < h {
                dx[p + w] += g[2 * p + 1];
                dx[p] -= g[2 * p + 1];
            }
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), dx))
}

/// Records `λ1·mean((pred−truth)²) + λ2·mean(|∇pred−∇truth|)`.
pub fn basic_loss_node<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    truth: Var,
    sched: &LossSchedule,
) -> Result<Var> {
    let diff = g.sub(pred, truth)?;
    let mse = g.mean_square(diff)?;
    // The image gradient is linear, so ∇pred − ∇truth = ∇(pred − truth).
    let grad = g.image_gradient(diff)?;
    let l1 = g.mean_abs(grad)?;
    g.weighted_sum(&[
        (mse, T::from_f64_lossy(sched.lambda1)),
        (l1, T::from_f64_lossy(sched.lambda2)),
    ])
}

/// Records the basic loss of the final output plus the annealed sum of
/// basic losses of every per-frame, per-size estimate.
pub fn total_loss_node<T: Real>(
    g: &mut Graph<T>,
    output: Var,
    estimates: &[Var],
    truth: Var,
    sched: &LossSchedule,
) -> Result<TotalLossVars> {
    if estimates.is_empty() {
        return Err(shape_err!("annealing term needs the per-estimate outputs"));
    }
    let basic = basic_loss_node(g, output, truth, sched)?;
    let per = estimates
        .iter()
        .map(|&e| basic_loss_node(g, e, truth, sched))
        .collect::<Result<Vec<_>>>()?;
    let weight = T::from_f64_lossy(sched.anneal_weight());
    let mut terms = vec![(basic, T::one())];
    terms.extend(per.into_iter().map(|v| (v, weight)));
    let total = g.weighted_sum(&terms)?;
    Ok(TotalLossVars { total, basic })
}

#[derive(Debug, Clone, Copy)]
pub struct TotalLossVars {
    pub total: Var,
    pub basic: Var,
}

/// Scalar basic loss of two images.
pub fn basic_loss<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>, sched: &LossSchedule) -> Result<f64> {
    pred.expect_same_shape(truth)?;
    let mut g = Graph::new();
    let p = g.constant(pred.clone())?;
    let t = g.constant(truth.clone())?;
    let loss = basic_loss_node(&mut g, p, t, sched)?;
    Ok(g.value(loss).data()[0].as_f64())
}

/// Scalar total loss; `estimates` holds every per-frame, per-size output.
pub fn total_loss<T: Real>(
    output: &Tensor<T>,
    estimates: &[&Tensor<T>],
    truth: &Tensor<T>,
    sched: &LossSchedule,
) -> Result<f64> {
    let mut g = Graph::new();
    let o = g.constant(output.clone())?;
    let t = g.constant(truth.clone())?;
    let e = estimates
        .iter()
        .map(|&e| g.constant(e.clone()))
        .collect::<Result<Vec<_>>>()?;
    let vars = total_loss_node(&mut g, o, &e, t, sched)?;
    Ok(g.value(vars.total).data()[0].as_f64())
}

pub fn mse<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    pred.expect_same_shape(truth)?;
    if pred.is_empty() {
        return Err(shape_err!("mse of empty images"));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Peak signal-to-noise ratio in dB for intensities on `[0, 1]`.
pub fn psnr<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    let e = mse(pred, truth)?;
    if e < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / e).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, &kv)| kv * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, &kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over all 11x11 Gaussian (σ = 1.5) windows
/// that fit inside the image.
pub fn ssim<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    pred.expect_same_shape(truth)?;
    let (h, w) = pred.dims2()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(shape_err!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"));
    }
    let x: Vec<f64> = pred.data().iter().map(|v| v.as_f64()).collect();
    let y: Vec<f64> = truth.data().iter().map(|v| v.as_f64()).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let k = gaussian_window();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let sxx = filter_valid(&xx, h, w, &k);
    let syy = filter_valid(&yy, h, w, &k);
    let sxy = filter_valid(&xy, h, w, &k);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}
