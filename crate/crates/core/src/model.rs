//! U-Net that maps a burst plus its noise-estimate plane to per-pixel
//! separable kernels of several sizes.
//!
//! Architecture for `depth = D` and widths `w[0..D]`:
//!
//! * encoder level `i` (`0..D`): two 3x3 conv + ReLU layers of width `w[i]`
//!   at resolution `H / 2^i`, then 2x2 average pooling;
//! * bottleneck at `H / 2^D`: two conv + ReLU layers of width `w[D-1]`;
//! * decoder level `l` (`D-1` down to `1`): bilinear 2x upsampling,
//!   concatenation with the encoder features of level `l`, two conv + ReLU
//!   layers of width `w[l]`;
//! * head at `H / 2`: one linear 3x3 conv emitting `2 p N` channels,
//!   followed by a final bilinear 2x upsampling back to `H x W`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::Container;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{KernelField, SeparableKernel};
use crate::ops;
use crate::optim::AdamState;
use crate::tensor::{Real, Tensor};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    burst_len: usize,
    kernel_sizes: Vec<usize>,
    widths: Vec<usize>,
}

impl Default for ModelConfig {
    /// Desk-scale default: `N = 8`, all six kernel sizes, depth 3.
    fn default() -> Self {
        Self::new(8, &[1, 3, 5, 7, 9, 11], &[32, 64, 128]).unwrap()
    }
}

impl ModelConfig {
    /// Kernel sizes are sorted ascending; depth is `widths.len()`.
    pub fn new(burst_len: usize, kernel_sizes: &[usize], widths: &[usize]) -> Result<Self> {
        let mut sizes = kernel_sizes.to_vec();
        sizes.sort_unstable();
        let config = Self {
            burst_len,
            kernel_sizes: sizes,
            widths: widths.to_vec(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.burst_len == 0 {
            return bad("burst length must be >= 1".into());
        }
        if self.kernel_sizes.is_empty() {
            return bad("kernel size set is empty".into());
        }
        if let Some(s) = self.kernel_sizes.iter().find(|&&s| s % 2 == 0) {
            return bad(format!("kernel size {s} is not odd"));
        }
        if self.kernel_sizes.windows(2).any(|w| w[0] == w[1]) {
            return bad(format!("duplicate kernel sizes in {:?}", self.kernel_sizes));
        }
        if self.widths.is_empty() {
            return bad("depth must be >= 1".into());
        }
        if self.widths.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    pub fn burst_len(&self) -> usize {
        self.burst_len
    }

    pub fn kernel_sizes(&self) -> &[usize] {
        &self.kernel_sizes
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Sum of the kernel sizes.
    pub fn p(&self) -> usize {
        self.kernel_sizes.iter().sum()
    }

    pub fn max_kernel_size(&self) -> usize {
        *self.kernel_sizes.last().unwrap()
    }

    /// Burst frames plus the noise-estimate plane.
    pub fn input_channels(&self) -> usize {
        self.burst_len + 1
    }

    pub fn head_channels(&self) -> usize {
        2 * self.p() * self.burst_len
    }

    /// Width feeding the head convolution.
    pub fn head_input_channels(&self) -> usize {
        if self.depth() >= 2 {
            self.widths[1]
        } else {
            self.widths[0]
        }
    }

    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let m = 1 << self.depth();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(shape_err!(
                "input {h}x{w} must be divisible by 2^depth = {m}"
            ));
        }
        Ok(())
    }

    /// Ordered conv layers of the network.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let d = self.depth();
        let w = &self.widths;
        let mut layers = Vec::new();
        let mut cin = self.input_channels();
        for (i, &wi) in w.iter().enumerate() {
            layers.push(LayerSpec::new(format!("enc{i}.conv0"), cin, wi, true));
            layers.push(LayerSpec::new(format!("enc{i}.conv1"), wi, wi, true));
            cin = wi;
        }
        let wb = w[d - 1];
        layers.push(LayerSpec::new("bottleneck.conv0".into(), cin, wb, true));
        layers.push(LayerSpec::new("bottleneck.conv1".into(), wb, wb, true));
        let mut below = wb;
        for l in (1..d).rev() {
            layers.push(LayerSpec::new(format!("dec{l}.conv0"), below + w[l], w[l], true));
            layers.push(LayerSpec::new(format!("dec{l}.conv1"), w[l], w[l], true));
            below = w[l];
        }
        layers.push(LayerSpec::new("head".into(), below, self.head_channels(), false));
        layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(LayerSpec::parameter_count).sum()
    }

    /// Channel layout of the head: frames outermost, sizes ascending, the
    /// vertical factor before the horizontal one.
    pub fn head_layout(&self) -> Vec<HeadSlot> {
        let mut slots = Vec::new();
        let mut offset = 0;
        for frame in 0..self.burst_len {
            for (size_index, &size) in self.kernel_sizes.iter().enumerate() {
                slots.push(HeadSlot {
                    frame,
                    size_index,
                    size,
                    vertical: offset,
                    horizontal: offset + size,
                });
                offset += 2 * size;
            }
        }
        slots
    }

    pub(crate) fn write_meta(&self, c: &mut Container) {
        c.set_meta("burst_len", self.burst_len);
        c.set_meta("kernel_sizes", join(&self.kernel_sizes));
        c.set_meta("widths", join(&self.widths));
    }

    pub(crate) fn read_meta(c: &Container) -> Result<Self> {
        let burst_len = parse_num(c.require_meta("burst_len")?)?;
        let sizes = parse_list(c.require_meta("kernel_sizes")?)?;
        let widths = parse_list(c.require_meta("widths")?)?;
        Self::new(burst_len, &sizes, &widths)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_num(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("expected an integer, got `{s}`")))
}

pub(crate) fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(parse_num).collect()
}

/// One 3x3 conv layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub relu: bool,
}

impl LayerSpec {
    fn new(name: String, in_channels: usize, out_channels: usize, relu: bool) -> Self {
        Self {
            name,
            in_channels,
            out_channels,
            relu,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [3, 3, self.in_channels, self.out_channels]
    }

    pub fn parameter_count(&self) -> usize {
        9 * self.in_channels * self.out_channels + self.out_channels
    }
}

/// Location of one `(frame, size)` kernel pair in the head output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSlot {
    pub frame: usize,
    pub size_index: usize,
    pub size: usize,
    pub vertical: usize,
    pub horizontal: usize,
}

/// Model weights plus everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real = f32> {
    pub config: ModelConfig,
    /// Completed training steps.
    pub step: u64,
    pub params: BTreeMap<String, Tensor<T>>,
    pub optimizer: Option<AdamState<T>>,
}

impl<T: Real> Checkpoint<T> {
    /// Checks that every layer parameter exists exactly once with the
    /// shape the config implies.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let layers = self.config.layers();
        let mut expected = 0;
        for layer in &layers {
            let w = self
                .params
                .get(&layer.weight_name())
                .ok_or_else(|| Error::Config(format!("missing {}", layer.weight_name())))?;
            if w.shape() != layer.weight_shape() {
                return Err(shape_err!("{} has shape {:?}", layer.weight_name(), w.shape()));
            }
            let b = self
                .params
                .get(&layer.bias_name())
                .ok_or_else(|| Error::Config(format!("missing {}", layer.bias_name())))?;
            if b.shape() != [layer.out_channels] {
                return Err(shape_err!("{} has shape {:?}", layer.bias_name(), b.shape()));
            }
            expected += 2;
        }
        if self.params.len() != expected {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, config implies {expected}",
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Same weights in another element type; optimizer state is dropped.
    pub fn cast<U: Real>(&self) -> Checkpoint<U> {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            optimizer: None,
        }
    }
}

/// Fan-in scaled uniform initialization; zero biases.
///
/// ReLU layers draw from `±sqrt(6 / fan_in)`, the linear head from
/// `±sqrt(3 / fan_in)`. Layers are drawn in architecture order from one
/// seeded stream, so the result depends only on `(config, seed)`.
pub fn init_weights<T: Real>(config: &ModelConfig, seed: u64) -> Result<Checkpoint<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for layer in config.layers() {
        let fan_in = (9 * layer.in_channels) as f64;
        let gain = if layer.relu { 6.0 } else { 3.0 };
        let bound = (gain / fan_in).sqrt();
        let w = Tensor::from_fn(&layer.weight_shape(), |_| {
            T::from_f64_lossy(rng.random_range(-bound..bound))
        });
        params.insert(layer.weight_name(), w);
        params.insert(layer.bias_name(), Tensor::zeros(&[layer.out_channels]));
    }
    Ok(Checkpoint {
        config: config.clone(),
        step: 0,
        params,
        optimizer: None,
    })
}

/// Graph handles of the model parameters.
#[derive(Debug, Clone)]
pub struct ParamVars(BTreeMap<String, Var>);

impl ParamVars {
    /// Adds every parameter as a leaf: trainable or constant.
    pub fn bind<T: Real>(g: &mut Graph<T>, ckpt: &Checkpoint<T>, trainable: bool) -> Result<Self> {
        ckpt.validate()?;
        let mut vars = BTreeMap::new();
        for (name, t) in &ckpt.params {
            let v = if trainable {
                g.param(t.clone())?
            } else {
                g.constant(t.clone())?
            };
            vars.insert(name.clone(), v);
        }
        Ok(Self(vars))
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.0.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

fn conv_layer<T: Real>(
    g: &mut Graph<T>,
    params: &ParamVars,
    layer: &LayerSpec,
    x: Var,
) -> Result<Var> {
    let w = params.get(&layer.weight_name())?;
    let b = params.get(&layer.bias_name())?;
    let y = g.conv2d(x, w, b)?;
    if layer.relu {
        g.relu(y)
    } else {
        Ok(y)
    }
}

/// Records the network on `g`; `input` is `[H, W, N+1]`, the result
/// `[H, W, 2pN]`.
pub fn forward_node<T: Real>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    params: &ParamVars,
    input: Var,
) -> Result<Var> {
    let (h, w, c) = g.value(input).dims3()?;
    if c != config.input_channels() {
        return Err(shape_err!(
            "input has {c} channels, model expects {}",
            config.input_channels()
        ));
    }
    config.check_extent(h, w)?;

    let layers = config.layers();
    let mut next = layers.iter();
    let mut layer = || next.next().expect("layer list matches architecture");

    let d = config.depth();
    let mut skips = Vec::with_capacity(d);
    let mut x = input;
    for _ in 0..d {
        x = conv_layer(g, params, layer(), x)?;
        x = conv_layer(g, params, layer(), x)?;
        skips.push(x);
        x = g.avg_pool2(x)?;
    }
    x = conv_layer(g, params, layer(), x)?;
    x = conv_layer(g, params, layer(), x)?;
    for l in (1..d).rev() {
        x = g.upsample_bilinear2(x)?;
        x = g.concat_channels(x, skips[l])?;
        x = conv_layer(g, params, layer(), x)?;
        x = conv_layer(g, params, layer(), x)?;
    }
    x = conv_layer(g, params, layer(), x)?;
    g.upsample_bilinear2(x)
}

/// Runs the network without recording gradients.
pub fn forward<T: Real>(ckpt: &Checkpoint<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let params = ParamVars::bind(&mut g, ckpt, false)?;
    let x = g.constant(input.clone())?;
    let y = forward_node(&mut g, &ckpt.config, &params, x)?;
    Ok(g.value(y).clone())
}

/// Splits raw head output into per-frame, per-size separable kernels.
pub fn slice_head<T: Real>(raw: &Tensor<T>, config: &ModelConfig) -> Result<KernelField<T>> {
    let (_, _, c) = raw.dims3()?;
    if c != config.head_channels() {
        return Err(shape_err!(
            "head output has {c} channels, expected {}",
            config.head_channels()
        ));
    }
    let mut frames: Vec<Vec<SeparableKernel<T>>> = vec![Vec::new(); config.burst_len()];
    for slot in config.head_layout() {
        frames[slot.frame].push(SeparableKernel {
            vertical: ops::slice_channels(raw, slot.vertical, slot.size)?,
            horizontal: ops::slice_channels(raw, slot.horizontal, slot.size)?,
        });
    }
    KernelField::new(config.kernel_sizes(), frames)
}

/// Inverse of [`slice_head`].
pub fn flatten_head<T: Real>(field: &KernelField<T>) -> Result<Tensor<T>> {
    let (h, w) = field.extent();
    let mut raw = Tensor::zeros(&[h, w, 0]);
    for i in 0..field.burst_len() {
        for k in field.frame_kernels(i) {
            raw = ops::concat_channels(&raw, &k.vertical)?;
            raw = ops::concat_channels(&raw, &k.horizontal)?;
        }
    }
    Ok(raw)
}
