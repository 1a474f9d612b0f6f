//! Denoising frozen test sets and scoring the results.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::{discover_testsets, load_sample, manifest_hash, read_manifest};
use crate::error::{Error, Result};
use crate::kernels::{reconstruct_inference, reconstruct_training, KernelField};
use crate::loss::{psnr, ssim};
use crate::model::{forward, slice_head, Checkpoint};
use crate::synth::{BurstSample, Gain};
use crate::tensor::{Real, Tensor};

/// How per-size kernels are applied at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// One local convolution per frame and size, as in training.
    Naive,
    /// Kernels fused per pixel, one local convolution per frame.
    Fused,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Mode::Naive),
            "fused" => Ok(Mode::Fused),
            other => Err(Error::Config(format!("unknown mode `{other}`; expected naive or fused"))),
        }
    }
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Naive => "naive",
            Mode::Fused => "fused",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Denoised {
    pub output: Tensor<f64>,
    pub local_convs: usize,
}

/// Predicted kernels for a burst, in `f64`.
pub fn predict_kernels<T: Real>(ckpt: &Checkpoint<T>, sample: &BurstSample) -> Result<KernelField<f64>> {
    if sample.burst_len() != ckpt.config.burst_len() {
        return Err(Error::Config(format!(
            "burst has {} frames, model expects {}",
            sample.burst_len(),
            ckpt.config.burst_len()
        )));
    }
    let raw = forward(ckpt, &sample.network_input()?.cast())?;
    slice_head(&raw.cast(), &ckpt.config)
}

pub fn denoise<T: Real>(ckpt: &Checkpoint<T>, sample: &BurstSample, mode: Mode) -> Result<Denoised> {
    let field = predict_kernels(ckpt, sample)?;
    Ok(match mode {
        Mode::Naive => {
            let r = reconstruct_training(&sample.frames, &field)?;
            Denoised {
                output: r.output,
                local_convs: r.local_convs,
            }
        }
        Mode::Fused => {
            let r = reconstruct_inference(&sample.frames, &field)?;
            Denoised {
                output: r.output,
                local_convs: r.local_convs,
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub gain: Gain,
    pub sample: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Scores of the unprocessed reference frame.
    pub noisy_psnr: f64,
    pub noisy_ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainSummary {
    pub gain: Gain,
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub noisy_psnr: f64,
    pub noisy_ssim: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub model: String,
    pub mode: Mode,
    /// Manifest hash of every evaluated test set.
    pub testsets: Vec<(Gain, String)>,
    pub rows: Vec<EvalRow>,
}

/// Scores with a border of `s_max / 2` pixels removed.
pub fn score(output: &Tensor<f64>, truth: &Tensor<f64>, border: usize) -> Result<(f64, f64)> {
    let o = output.crop_border(border)?;
    let t = truth.crop_border(border)?;
    Ok((psnr(&o, &t)?, ssim(&o, &t)?))
}

/// Short model identifier derived from its kernel sizes.
pub fn model_label(sizes: &[usize]) -> String {
    match sizes {
        [s] => format!("KPN-L{s}"),
        _ => {
            let list: Vec<String> = sizes.iter().map(|s| s.to_string()).collect();
            format!("MKPN-{{{}}}", list.join(","))
        }
    }
}

/// Evaluates every test set found under `root` (see
/// [`discover_testsets`]).
pub fn evaluate<T: Real>(ckpt: &Checkpoint<T>, root: &Path, mode: Mode) -> Result<EvalReport> {
    let border = ckpt.config.max_kernel_size() / 2;
    let mut report = EvalReport {
        model: model_label(ckpt.config.kernel_sizes()),
        mode,
        testsets: Vec::new(),
        rows: Vec::new(),
    };
    for dir in discover_testsets(root)? {
        let manifest = read_manifest(&dir)?;
        if manifest.burst_len != ckpt.config.burst_len() {
            return Err(Error::Config(format!(
                "test set {} has bursts of {} frames, model expects {}",
                dir.display(),
                manifest.burst_len,
                ckpt.config.burst_len()
            )));
        }
        report.testsets.push((manifest.gain, manifest_hash(&dir)?));
        for entry in &manifest.entries {
            let sample = load_sample(&dir, entry)?;
            let out = denoise(ckpt, &sample, mode)?;
            let (p, s) = score(&out.output, &sample.ground_truth, border)?;
            let (np, ns) = score(&sample.reference_frame()?, &sample.ground_truth, border)?;
            report.rows.push(EvalRow {
                gain: manifest.gain,
                sample: entry.id,
                psnr: p,
                ssim: s,
                noisy_psnr: np,
                noisy_ssim: ns,
            });
        }
    }
    Ok(report)
}

impl EvalReport {
    /// Means per gain, in ascending gain order.
    pub fn summaries(&self) -> Vec<GainSummary> {
        let mut out = Vec::new();
        for gain in Gain::ALL {
            let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.gain == gain).collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            out.push(GainSummary {
                gain,
                count: rows.len(),
                psnr: mean(|r| r.psnr),
                ssim: mean(|r| r.ssim),
                noisy_psnr: mean(|r| r.noisy_psnr),
                noisy_ssim: mean(|r| r.noisy_ssim),
            });
        }
        out
    }

    pub fn summary(&self, gain: Gain) -> Option<GainSummary> {
        self.summaries().into_iter().find(|s| s.gain == gain)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,mode,gain,sample,psnr,ssim,noisy_psnr,noisy_ssim\n");
        // Multi-size labels contain commas.
        let model = if self.model.contains(',') {
            format!("\"{}\"", self.model)
        } else {
            self.model.clone()
        };
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.8},{:.8},{:.8},{:.8}",
                model,
                self.mode.name(),
                r.gain.level(),
                r.sample,
                r.psnr,
                r.ssim,
                r.noisy_psnr,
                r.noisy_ssim
            );
        }
        s
    }

    /// Human-readable per-gain table including the test-set hashes.
    pub fn table(&self) -> String {
        let mut s = format!("model {} ({} reconstruction)\n", self.model, self.mode.name());
        let _ = writeln!(
            s,
            "{:>6} {:>7} {:>9} {:>8} {:>11} {:>10}",
            "gain", "samples", "psnr_db", "ssim", "noisy_psnr", "noisy_ssim"
        );
        for g in self.summaries() {
            let _ = writeln!(
                s,
                "{:>6} {:>7} {:>9.2} {:>8.4} {:>11.2} {:>10.4}",
                g.gain.level(),
                g.count,
                g.psnr,
                g.ssim,
                g.noisy_psnr,
                g.noisy_ssim
            );
        }
        for (gain, hash) in &self.testsets {
            let _ = writeln!(s, "test set gain {}: manifest sha256 {hash}", gain.level());
        }
        s
    }
}
