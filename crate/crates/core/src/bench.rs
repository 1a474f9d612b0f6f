//! Wall-clock comparison of the two reconstruction paths.

use std::time::{Duration, Instant};

use rand::Rng;

use crate::error::Result;
use crate::kernels::{reconstruct_inference, reconstruct_training, KernelField, SeparableKernel};
use crate::synth::seeded_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ReconBench {
    pub sizes: Vec<usize>,
    pub extent: usize,
    pub burst_len: usize,
    pub naive_convs: usize,
    pub fused_convs: usize,
    /// Fastest of the repetitions.
    pub naive_time: Duration,
    pub fused_time: Duration,
    /// Largest absolute difference between the two outputs.
    pub max_abs_diff: f64,
}

/// Random burst and kernel field for benchmarking.
pub fn random_inputs(
    extent: usize,
    burst_len: usize,
    sizes: &[usize],
    seed: u64,
) -> Result<(Tensor<f64>, KernelField<f64>)> {
    let mut rng = seeded_rng(seed);
    let burst = Tensor::from_fn(&[extent, extent, burst_len], |_| rng.random::<f64>());
    let mut random = |s: usize| Tensor::from_fn(&[extent, extent, s], |_| rng.random_range(-0.5..0.5));
    let frames = (0..burst_len)
        .map(|_| {
            sizes
                .iter()
                .map(|&s| SeparableKernel {
                    vertical: random(s),
                    horizontal: random(s),
                })
                .collect()
        })
        .collect();
    Ok((burst, KernelField::new(sizes, frames)?))
}

/// Times both paths on the same inputs, `reps` times each.
pub fn bench_reconstruction(
    extent: usize,
    burst_len: usize,
    sizes: &[usize],
    reps: usize,
    seed: u64,
) -> Result<ReconBench> {
    let (burst, field) = random_inputs(extent, burst_len, sizes, seed)?;
    let mut naive_time = Duration::MAX;
    let mut fused_time = Duration::MAX;
    let mut naive = None;
    let mut fused = None;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        naive = Some(reconstruct_training(&burst, &field)?);
        naive_time = naive_time.min(t.elapsed());
        let t = Instant::now();
        fused = Some(reconstruct_inference(&burst, &field)?);
        fused_time = fused_time.min(t.elapsed());
    }
    let (naive, fused) = (naive.unwrap(), fused.unwrap());
    Ok(ReconBench {
        sizes: sizes.to_vec(),
        extent,
        burst_len,
        naive_convs: naive.local_convs,
        fused_convs: fused.local_convs,
        naive_time,
        fused_time,
        max_abs_diff: naive.output.max_abs_diff(&fused.output)?,
    })
}

impl ReconBench {
    pub fn header() -> &'static str {
        "sizes,extent,burst_len,naive_convs,fused_convs,naive_ms,fused_ms,max_abs_diff"
    }

    pub fn csv_line(&self) -> String {
        let sizes: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        format!(
            "{},{},{},{},{},{:.3},{:.3},{:e}",
            sizes.join(" "),
            self.extent,
            self.burst_len,
            self.naive_convs,
            self.fused_convs,
            self.naive_time.as_secs_f64() * 1e3,
            self.fused_time.as_secs_f64() * 1e3,
            self.max_abs_diff
        )
    }
}
