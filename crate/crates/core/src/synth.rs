//! Synthetic bursts: patch sampling, frame misalignment, signal-dependent
//! Gaussian noise and the per-pixel noise estimate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::container::Container;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Largest misalignment, in pixels, along either axis.
pub const MAX_OFFSET: i32 = 16;
/// Jitter range of frames that are not strongly misaligned.
pub const SMALL_OFFSET: i32 = 2;
pub const DEFAULT_PATCH: usize = 128;
pub const DEFAULT_POISSON_LAMBDA: f64 = 1.5;

/// Read-noise range sampled (in log10) for training.
pub const TRAIN_SIGMA_R_LOG10: (f64, f64) = (-3.0, -1.5);
/// Shot-noise range sampled (in log10) for training.
pub const TRAIN_SIGMA_S_LOG10: (f64, f64) = (-2.0, -1.0);

/// Per-pixel variance is `sigma_r² + sigma_s · y` for true intensity `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub sigma_r: f64,
    pub sigma_s: f64,
}

impl NoiseParams {
    pub fn new(sigma_r: f64, sigma_s: f64) -> Self {
        Self { sigma_r, sigma_s }
    }

    pub fn variance_at(&self, y: f64) -> f64 {
        self.sigma_r * self.sigma_r + self.sigma_s * y
    }

    /// Draws training noise uniformly in the exponent over the training
    /// ranges.
    pub fn sample_training(rng: &mut impl Rng) -> Self {
        let r = rng.random_range(TRAIN_SIGMA_R_LOG10.0..=TRAIN_SIGMA_R_LOG10.1);
        let s = rng.random_range(TRAIN_SIGMA_S_LOG10.0..=TRAIN_SIGMA_S_LOG10.1);
        Self::new(10f64.powf(r), 10f64.powf(s))
    }
}

/// Sensor gain presets of the test sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gain {
    X1,
    X2,
    X4,
    X8,
}

impl Gain {
    pub const ALL: [Gain; 4] = [Gain::X1, Gain::X2, Gain::X4, Gain::X8];

    pub fn from_level(level: u32) -> Result<Self> {
        match level {
            1 => Ok(Gain::X1),
            2 => Ok(Gain::X2),
            4 => Ok(Gain::X4),
            8 => Ok(Gain::X8),
            other => Err(Error::Config(format!("unknown gain {other}; expected 1, 2, 4 or 8"))),
        }
    }

    pub fn level(self) -> u32 {
        match self {
            Gain::X1 => 1,
            Gain::X2 => 2,
            Gain::X4 => 4,
            Gain::X8 => 8,
        }
    }
}

/// `(sigma_r, sigma_s)` of a gain preset.
pub fn gain_preset(gain: Gain) -> NoiseParams {
    let (r, s) = match gain {
        Gain::X1 => (-2.1, -2.6),
        Gain::X2 => (-1.8, -2.3),
        Gain::X4 => (-1.4, -1.9),
        Gain::X8 => (-1.1, -1.5),
    };
    NoiseParams::new(10f64.powf(r), 10f64.powf(s))
}

/// Mean over non-overlapping 4x4 blocks.
pub fn box_downsample4(image: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (h, w) = image.dims2()?;
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(shape_err!("box downsample needs extents divisible by 4, got {h}x{w}"));
    }
    let (oh, ow) = (h / 4, w / 4);
    let d = image.data();
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for dy in 0..4 {
                let row = (4 * y + dy) * w + 4 * x;
                for v in &d[row..row + 4] {
                    acc += v;
                }
            }
            out[y * ow + x] = acc / 16.0;
        }
    }
    Tensor::new(&[oh, ow], out)
}

/// Offsets of one burst plus the draws that produced them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffsetDraw {
    /// `(x, y)` per frame; frame 0 is `(0, 0)`.
    pub offsets: Vec<(i32, i32)>,
    /// Poisson draw clamped to the burst length.
    pub misaligned: usize,
    /// Whether each frame drew from the wide range (always false for frame 0).
    pub wide: Vec<bool>,
}

/// Draws frame offsets: one `n ~ Poisson(lambda)` per burst, then each
/// non-reference frame is drawn from `[-16, 16]²` with probability
/// `min(n, N) / N`, otherwise from `[-2, 2]²`.
pub fn sample_offsets(burst_len: usize, lambda: f64, rng: &mut impl Rng) -> Result<OffsetDraw> {
    if burst_len == 0 {
        return Err(Error::Config("burst length must be >= 1".into()));
    }
    let poisson = Poisson::new(lambda)
        .map_err(|_| Error::Config(format!("poisson rate must be > 0, got {lambda}")))?;
    let n = poisson.sample(rng) as usize;
    Ok(offsets_for_count(burst_len, n, rng))
}

/// [`sample_offsets`] with the Poisson draw fixed to `n`.
pub fn offsets_for_count(burst_len: usize, n: usize, rng: &mut impl Rng) -> OffsetDraw {
    let misaligned = n.min(burst_len);
    let p_wide = misaligned as f64 / burst_len as f64;
    let mut offsets = vec![(0, 0)];
    let mut wide = vec![false];
    for _ in 1..burst_len {
        let is_wide = rng.random_bool(p_wide);
        let r = if is_wide { MAX_OFFSET } else { SMALL_OFFSET };
        offsets.push((rng.random_range(-r..=r), rng.random_range(-r..=r)));
        wide.push(is_wide);
    }
    OffsetDraw {
        offsets,
        misaligned,
        wide,
    }
}

/// Draws `x ~ N(y, sigma_r² + sigma_s·y)` independently per pixel. The
/// result is not clipped.
pub fn add_noise(clean: &Tensor<f64>, noise: &NoiseParams, rng: &mut impl Rng) -> Tensor<f64> {
    let data = clean
        .data()
        .iter()
        .map(|&y| {
            let var = noise.variance_at(y.max(0.0));
            if var == 0.0 {
                y
            } else {
                let z: f64 = StandardNormal.sample(rng);
                y + var.sqrt() * z
            }
        })
        .collect();
    Tensor::new(clean.shape(), data).expect("noisy pixels are finite")
}

/// `sqrt(sigma_r² + sigma_s · max(x, 0))` per pixel.
pub fn estimate_noise(frame0: &Tensor<f64>, noise: &NoiseParams) -> Tensor<f64> {
    frame0.map(|x| noise.variance_at(x.max(0.0)).sqrt())
}

/// Shape parameters of generated bursts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BurstSpec {
    pub burst_len: usize,
    pub patch: usize,
    pub poisson_lambda: f64,
}

impl Default for BurstSpec {
    fn default() -> Self {
        Self {
            burst_len: 8,
            patch: DEFAULT_PATCH,
            poisson_lambda: DEFAULT_POISSON_LAMBDA,
        }
    }
}

impl BurstSpec {
    /// Smallest source extent that fits a patch shifted by the maximum offset.
    pub fn min_source(&self) -> usize {
        self.patch + 2 * MAX_OFFSET as usize
    }
}

/// A clean patch, its noisy misaligned burst and the noise estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BurstSample {
    pub ground_truth: Tensor<f64>,
    /// `[P, P, N]`, frame 0 is the unshifted reference.
    pub frames: Tensor<f64>,
    pub offsets: Vec<(i32, i32)>,
    pub noise: NoiseParams,
    pub noise_estimate: Tensor<f64>,
}

impl BurstSample {
    pub fn burst_len(&self) -> usize {
        self.offsets.len()
    }

    pub fn reference_frame(&self) -> Result<Tensor<f64>> {
        self.frames.channel(0)
    }

    /// Frames followed by the noise-estimate plane, `[P, P, N+1]`.
    pub fn network_input(&self) -> Result<Tensor<f64>> {
        let mut planes = (0..self.burst_len())
            .map(|i| self.frames.channel(i))
            .collect::<Result<Vec<_>>>()?;
        planes.push(self.noise_estimate.clone());
        let refs: Vec<_> = planes.iter().collect();
        Tensor::stack_channels(&refs)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.set_meta("kind", "burst_sample");
        c.set_meta("sigma_r", self.noise.sigma_r);
        c.set_meta("sigma_s", self.noise.sigma_s);
        let offsets: Vec<String> = self.offsets.iter().map(|(x, y)| format!("{x}:{y}")).collect();
        c.set_meta("offsets", offsets.join(","));
        c.push_tensor("ground_truth", &self.ground_truth)?;
        c.push_tensor("frames", &self.frames)?;
        c.push_tensor("noise_estimate", &self.noise_estimate)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("kind") != Some("burst_sample") {
            return Err(Error::Format("container is not a burst sample".into()));
        }
        let num = |key: &str| -> Result<f64> {
            c.require_meta(key)?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for {key}")))
        };
        let offsets = c
            .require_meta("offsets")?
            .split(',')
            .map(|pair| {
                let (x, y) = pair
                    .split_once(':')
                    .ok_or_else(|| Error::Format(format!("bad offset `{pair}`")))?;
                let parse = |v: &str| v.parse::<i32>().map_err(|_| Error::Format(format!("bad offset `{pair}`")));
                Ok((parse(x)?, parse(y)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let sample = Self {
            ground_truth: c.tensor("ground_truth")?,
            frames: c.tensor("frames")?,
            offsets,
            noise: NoiseParams::new(num("sigma_r")?, num("sigma_s")?),
            noise_estimate: c.tensor("noise_estimate")?,
        };
        let (h, w, n) = sample.frames.dims3()?;
        if n != sample.offsets.len()
            || sample.ground_truth.shape() != [h, w]
            || sample.noise_estimate.shape() != [h, w]
        {
            return Err(Error::Format("inconsistent burst sample shapes".into()));
        }
        Ok(sample)
    }
}

/// Builds a burst from a patch at `origin = (row, col)` with the given
/// per-frame `(x, y)` offsets; frame `i` reads the source at
/// `(row + y_i, col + x_i)`.
pub fn make_burst_at(
    source: &Tensor<f64>,
    patch: usize,
    origin: (usize, usize),
    offsets: &[(i32, i32)],
    noise: &NoiseParams,
    rng: &mut impl Rng,
) -> Result<BurstSample> {
    let (h, w) = source.dims2()?;
    if offsets.is_empty() {
        return Err(Error::Config("burst needs at least one frame".into()));
    }
    let crop = |dx: i32, dy: i32| -> Result<Tensor<f64>> {
        let top = origin.0 as i64 + dy as i64;
        let left = origin.1 as i64 + dx as i64;
        if top < 0 || left < 0 || top as usize + patch > h || left as usize + patch > w {
            return Err(shape_err!(
                "shifted patch at ({top}, {left}) leaves the {h}x{w} source"
            ));
        }
        let (top, left) = (top as usize, left as usize);
        Ok(Tensor::from_fn(&[patch, patch], |i| {
            source.data()[(top + i / patch) * w + left + i % patch]
        }))
    };
    let ground_truth = crop(0, 0)?;
    let mut frames = Vec::with_capacity(offsets.len());
    for &(dx, dy) in offsets {
        frames.push(add_noise(&crop(dx, dy)?, noise, rng));
    }
    let noise_estimate = estimate_noise(&frames[0], noise);
    let refs: Vec<_> = frames.iter().collect();
    Ok(BurstSample {
        ground_truth,
        frames: Tensor::stack_channels(&refs)?,
        offsets: offsets.to_vec(),
        noise: *noise,
        noise_estimate,
    })
}

/// Samples a patch location and frame offsets, then builds the noisy burst.
pub fn make_burst(
    source: &Tensor<f64>,
    spec: &BurstSpec,
    noise: &NoiseParams,
    rng: &mut impl Rng,
) -> Result<BurstSample> {
    let (h, w) = source.dims2()?;
    let need = spec.min_source();
    if h < need || w < need {
        return Err(shape_err!(
            "source {h}x{w} is smaller than the {need}x{need} needed for {}px patches",
            spec.patch
        ));
    }
    let m = MAX_OFFSET as usize;
    let row = rng.random_range(m..=h - spec.patch - m);
    let col = rng.random_range(m..=w - spec.patch - m);
    let draw = sample_offsets(spec.burst_len, spec.poisson_lambda, rng)?;
    make_burst_at(source, spec.patch, (row, col), &draw.offsets, noise, rng)
}

/// Mixes a master seed and an index into an independent stream seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(master ^ splitmix(index))
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
