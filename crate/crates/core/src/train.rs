//! Training loop: synthetic burst stream, batched loss graph and Adam.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::SourcePool;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{total_loss_node, LossSchedule};
use crate::model::{forward_node, init_weights, Checkpoint, ModelConfig, ParamVars};
use crate::optim::{adam_step, AdamConfig, AdamState, StepOutcome};
use crate::synth::{derive_seed, make_burst, seeded_rng, BurstSample, BurstSpec, NoiseParams};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    /// Loss weights; the step field is ignored and taken from the checkpoint.
    pub schedule: LossSchedule,
    /// Total number of optimizer steps.
    pub steps: u64,
    pub batch_size: usize,
    pub patch: usize,
    pub poisson_lambda: f64,
    /// Seeds weight initialisation and the burst stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            schedule: LossSchedule::default(),
            steps: 100_000,
            batch_size: 4,
            patch: 128,
            poisson_lambda: crate::synth::DEFAULT_POISSON_LAMBDA,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adam.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.poisson_lambda > 0.0) {
            return Err(Error::Config("poisson rate must be > 0".into()));
        }
        self.model.check_extent(self.patch, self.patch)
    }

    pub fn burst_spec(&self) -> BurstSpec {
        BurstSpec {
            burst_len: self.model.burst_len(),
            patch: self.patch,
            poisson_lambda: self.poisson_lambda,
        }
    }
}

/// A reproducible source of training bursts addressed by step and batch slot.
pub trait BurstStream {
    fn sample(&self, step: u64, slot: usize) -> Result<BurstSample>;

    /// Seed behind `sample(step, slot)`, for diagnostics.
    fn sample_seed(&self, step: u64, slot: usize) -> u64;
}

/// Bursts built on the fly with log-uniform training noise.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    pub pool: SourcePool,
    pub spec: BurstSpec,
    pub seed: u64,
}

impl SyntheticStream {
    pub fn new(pool: SourcePool, spec: BurstSpec, seed: u64) -> Self {
        Self {
            pool,
            spec,
            seed: derive_seed(seed, u64::MAX),
        }
    }
}

impl BurstStream for SyntheticStream {
    fn sample(&self, step: u64, slot: usize) -> Result<BurstSample> {
        let mut rng = seeded_rng(self.sample_seed(step, slot));
        let noise = NoiseParams::sample_training(&mut rng);
        let source = self.pool.pick(&self.spec, &mut rng)?;
        make_burst(&source, &self.spec, &noise, &mut rng)
    }

    fn sample_seed(&self, step: u64, slot: usize) -> u64 {
        derive_seed(self.seed, (step << 16) | slot as u64)
    }
}

/// Recorded batch loss with handles to the parameters.
pub struct BatchGraph<T: Real> {
    pub graph: Graph<T>,
    pub params: ParamVars,
    /// Mean total loss over the batch.
    pub total: Var,
    /// Mean basic loss of the final outputs.
    pub basic: Var,
    /// Final reconstruction of each sample.
    pub outputs: Vec<Var>,
}

/// Records forward pass, kernel reconstruction and loss for a batch.
pub fn batch_graph<T: Real>(
    ckpt: &Checkpoint<T>,
    samples: &[BurstSample],
    schedule: &LossSchedule,
    trainable: bool,
) -> Result<BatchGraph<T>> {
    if samples.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let config = &ckpt.config;
    let mut g = Graph::new();
    let params = ParamVars::bind(&mut g, ckpt, trainable)?;
    let layout = config.head_layout();
    let weight = T::from_f64_lossy(1.0 / samples.len() as f64);
    let mut totals = Vec::with_capacity(samples.len());
    let mut basics = Vec::with_capacity(samples.len());
    let mut outputs = Vec::with_capacity(samples.len());
    for sample in samples {
        if sample.burst_len() != config.burst_len() {
            return Err(Error::Config(format!(
                "burst has {} frames, model expects {}",
                sample.burst_len(),
                config.burst_len()
            )));
        }
        let input = g.constant(sample.network_input()?.cast())?;
        let raw = forward_node(&mut g, config, &params, input)?;
        let frames = (0..config.burst_len())
            .map(|i| g.constant(sample.frames.channel(i)?.cast()))
            .collect::<Result<Vec<_>>>()?;
        let mut estimates = Vec::with_capacity(layout.len());
        for slot in &layout {
            let v = g.slice_channels(raw, slot.vertical, slot.size)?;
            let h = g.slice_channels(raw, slot.horizontal, slot.size)?;
            let k = g.compose_2d(v, h)?;
            estimates.push(g.local_conv(frames[slot.frame], k)?);
        }
        let output = g.mean(&estimates)?;
        let truth = g.constant(sample.ground_truth.cast())?;
        let vars = total_loss_node(&mut g, output, &estimates, truth, schedule)?;
        totals.push((vars.total, weight));
        basics.push((vars.basic, weight));
        outputs.push(output);
    }
    let total = g.weighted_sum(&totals)?;
    let basic = g.weighted_sum(&basics)?;
    Ok(BatchGraph {
        graph: g,
        params,
        total,
        basic,
        outputs,
    })
}

/// Loss, anneal weight and gradients of a batch.
pub struct BatchGradients<T: Real> {
    pub total_loss: f64,
    pub basic_loss: f64,
    pub grads: BTreeMap<String, Tensor<T>>,
}

pub fn batch_gradients<T: Real>(
    ckpt: &Checkpoint<T>,
    samples: &[BurstSample],
    schedule: &LossSchedule,
) -> Result<BatchGradients<T>> {
    let mut bg = batch_graph(ckpt, samples, schedule, true)?;
    let total_loss = bg.graph.value(bg.total).data()[0].as_f64();
    let basic_loss = bg.graph.value(bg.basic).data()[0].as_f64();
    bg.graph.backward(bg.total)?;
    let grads = bg
        .params
        .iter()
        .filter_map(|(name, v)| bg.graph.grad(v).map(|g| (name.to_string(), g)))
        .collect();
    Ok(BatchGradients {
        total_loss,
        basic_loss,
        grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    /// Zero-based step index this record belongs to.
    pub step: u64,
    pub total_loss: f64,
    pub basic_loss: f64,
    pub anneal_weight: f64,
    /// True when the gradient was non-finite and the update was dropped.
    pub skipped: bool,
}

pub struct Trainer<T: Real, S: BurstStream> {
    config: TrainConfig,
    stream: S,
    ckpt: Checkpoint<T>,
}

impl<T: Real, S: BurstStream> Trainer<T, S> {
    /// Fresh weights initialised from `config.seed`.
    pub fn new(config: TrainConfig, stream: S) -> Result<Self> {
        config.validate()?;
        let mut ckpt = init_weights(&config.model, config.seed)?;
        ckpt.optimizer = Some(AdamState::zeros_like(&ckpt.params));
        Ok(Self {
            config,
            stream,
            ckpt,
        })
    }

    /// Continues from a checkpoint; the stream and schedule pick up at its
    /// step count.
    pub fn resume(config: TrainConfig, stream: S, mut ckpt: Checkpoint<T>) -> Result<Self> {
        config.validate()?;
        if ckpt.config != config.model {
            return Err(Error::Config(
                "checkpoint model configuration differs from the training configuration".into(),
            ));
        }
        if ckpt.optimizer.is_none() {
            ckpt.optimizer = Some(AdamState::zeros_like(&ckpt.params));
        }
        Ok(Self {
            config,
            stream,
            ckpt,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> &Checkpoint<T> {
        &self.ckpt
    }

    pub fn into_checkpoint(self) -> Checkpoint<T> {
        self.ckpt
    }

    pub fn is_done(&self) -> bool {
        self.ckpt.step >= self.config.steps
    }

    /// One optimizer step on a fresh batch.
    pub fn step(&mut self) -> Result<LossRecord> {
        let step = self.ckpt.step;
        let schedule = self.config.schedule.at_step(step);
        let samples = (0..self.config.batch_size)
            .map(|slot| self.stream.sample(step, slot))
            .collect::<Result<Vec<_>>>()?;
        let batch = batch_gradients(&self.ckpt, &samples, &schedule).map_err(|e| match e {
            Error::NonFinite(msg) => {
                let seeds: Vec<String> = (0..self.config.batch_size)
                    .map(|slot| self.stream.sample_seed(step, slot).to_string())
                    .collect();
                Error::NonFinite(format!(
                    "{msg} at step {step} (batch sample seeds {})",
                    seeds.join(", ")
                ))
            }
            other => other,
        })?;
        if !batch.total_loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let state = self.ckpt.optimizer.get_or_insert_with(AdamState::default);
        let outcome = adam_step(&mut self.ckpt.params, &batch.grads, state, &self.config.adam)?;
        self.ckpt.step += 1;
        Ok(LossRecord {
            step,
            total_loss: batch.total_loss,
            basic_loss: batch.basic_loss,
            anneal_weight: schedule.anneal_weight(),
            skipped: outcome == StepOutcome::SkippedNonFinite,
        })
    }

    /// Steps until `config.steps` is reached, calling `on_step` after each.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&Checkpoint<T>, &LossRecord) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        let mut log = Vec::new();
        while !self.is_done() {
            let rec = self.step()?;
            on_step(&self.ckpt, &rec)?;
            log.push(rec);
        }
        Ok(log)
    }
}

/// Trailing moving average over `window` records.
pub fn smoothed_losses(records: &[LossRecord], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(records.len());
    let mut acc = 0.0;
    for (i, r) in records.iter().enumerate() {
        acc += r.total_loss;
        if i >= window {
            acc -= records[i - window].total_loss;
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

pub const LOSS_CSV_HEADER: &str = "step,total_loss,basic_loss,anneal_weight";

pub fn loss_csv_line(r: &LossRecord) -> String {
    format!("{},{},{},{:e}", r.step, r.total_loss, r.basic_loss, r.anneal_weight)
}

pub fn write_loss_csv(records: &[LossRecord], path: &Path) -> Result<()> {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", loss_csv_line(r));
    }
    std::fs::write(path, s)?;
    Ok(())
}
