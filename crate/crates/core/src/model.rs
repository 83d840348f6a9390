//! The growing generator and the fixed-capacity patch critic.
//!
//! The generator is a stem (RGB to `F` feature channels), a list of stage
//! blocks and a head (features to a tanh-bounded RGB image). Features, not
//! images, flow between stages: before stage `n` they are resampled to that
//! stage's resolution, receive optional noise, and pass through a residual
//! block of three convolutions. All layers are convolutional, so the output
//! size follows the input size.

use rand::Rng as _;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

pub const LEAKY_SLOPE: f32 = 0.2;
pub const DEFAULT_CHANNELS: usize = 64;
pub const DEFAULT_NOISE_AMP: f32 = 0.1;
/// Receptive field of one critic output, in input pixels per side.
pub const RECEPTIVE_FIELD: usize = 11;
/// Smallest generator input side.
pub const MIN_INPUT_SIDE: usize = 4;
const KERNEL: usize = 3;
const CRITIC_LAYERS: usize = 5;
const NORM_EPS: f32 = 1e-5;

pub fn normal_tensor(shape: Vec<usize>, std: f32, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f32 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::new(shape, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Mirror the border; constant inputs stay constant.
    Reflect,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub padding: Padding,
}

impl Conv2d {
    fn new(c_in: usize, c_out: usize, padding: Padding, std: f32, rng: &mut Rng) -> Self {
        Conv2d {
            weight: Var::param(normal_tensor(vec![c_out, c_in, KERNEL, KERNEL], std, rng)),
            bias: Var::param(Tensor::zeros(vec![c_out])),
            padding,
        }
    }

    fn he(c_in: usize, c_out: usize, padding: Padding, rng: &mut Rng) -> Self {
        let fan_in = (c_in * KERNEL * KERNEL) as f32;
        Self::new(c_in, c_out, padding, (2.0 / fan_in).sqrt(), rng)
    }

    pub fn forward(&self, x: &Var) -> Var {
        let y = match self.padding {
            Padding::Reflect => x.reflect_pad(KERNEL / 2).conv2d(&self.weight, 0),
            Padding::Zero => x.conv2d(&self.weight, KERNEL / 2),
        };
        let (_, h, w) = y.value().chw();
        y.add(&self.bias.broadcast_channel(h, w))
    }

    pub fn params(&self) -> Vec<&Var> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Var> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Per-channel normalization over the spatial axes with a learned affine map.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gain: Var,
    pub shift: Var,
}

impl InstanceNorm {
    fn new(channels: usize, gain: f32) -> Self {
        InstanceNorm {
            gain: Var::param(Tensor::full(vec![channels], gain)),
            shift: Var::param(Tensor::zeros(vec![channels])),
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let (_, h, w) = x.value().chw();
        let inv_hw = 1.0 / (h * w) as f32;
        let mean = x.reduce_spatial().scale(inv_hw).broadcast_channel(h, w);
        let centered = x.sub(&mean);
        let var = centered.square().reduce_spatial().scale(inv_hw).add_scalar(NORM_EPS);
        let gain = var.sqrt().safe_recip().mul(&self.gain).broadcast_channel(h, w);
        centered.mul(&gain).add(&self.shift.broadcast_channel(h, w))
    }

    pub fn params(&self) -> Vec<&Var> {
        vec![&self.gain, &self.shift]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Var> {
        vec![&mut self.gain, &mut self.shift]
    }
}

/// conv → instance norm → leaky ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: InstanceNorm,
}

impl ConvBlock {
    fn new(c_in: usize, c_out: usize, norm_gain: f32, rng: &mut Rng) -> Self {
        ConvBlock {
            conv: Conv2d::he(c_in, c_out, Padding::Reflect, rng),
            norm: InstanceNorm::new(c_out, norm_gain),
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        self.norm.forward(&self.conv.forward(x)).leaky_relu(LEAKY_SLOPE)
    }

    pub fn params(&self) -> Vec<&Var> {
        let mut p = self.conv.params();
        p.extend(self.norm.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Var> {
        let mut p = self.conv.params_mut();
        p.extend(self.norm.params_mut());
        p
    }
}

/// Three conv blocks added onto the incoming features.
#[derive(Clone, Debug)]
pub struct GeneratorStage {
    pub blocks: Vec<ConvBlock>,
}

impl GeneratorStage {
    /// The last block's normalization gain starts at zero, so a fresh stage
    /// passes its input through unchanged.
    fn new(channels: usize, rng: &mut Rng) -> Self {
        GeneratorStage {
            blocks: vec![
                ConvBlock::new(channels, channels, 1.0, rng),
                ConvBlock::new(channels, channels, 1.0, rng),
                ConvBlock::new(channels, channels, 0.0, rng),
            ],
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let branch = self.blocks.iter().fold(x.clone(), |h, b| b.forward(&h));
        x.add(&branch)
    }

    pub fn params(&self) -> Vec<&Var> {
        self.blocks.iter().flat_map(ConvBlock::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Var> {
        self.blocks.iter_mut().flat_map(ConvBlock::params_mut).collect()
    }
}

/// Whether forward passes inject feature noise.
pub enum Noise<'a> {
    Zero,
    Sampled(&'a mut Rng),
}

#[derive(Clone, Debug)]
pub struct GrowingGenerator {
    pub channels: usize,
    pub noise_amp: f32,
    /// Stage resolutions for a stage-0 input of `resolutions[0]`.
    pub resolutions: Vec<(usize, usize)>,
    pub stem: ConvBlock,
    pub stages: Vec<GeneratorStage>,
    pub head: Conv2d,
}

impl GrowingGenerator {
    /// A generator with a single stage.
    pub fn new(channels: usize, noise_amp: f32, resolutions: Vec<(usize, usize)>, rng: &mut Rng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("channel width must be positive"));
        }
        if resolutions.is_empty() {
            return Err(Error::invalid("generator needs at least one stage resolution"));
        }
        let stem = ConvBlock::new(3, channels, 1.0, rng);
        let stage0 = GeneratorStage::new(channels, rng);
        // small head: the untrained generator starts close to flat gray
        let head = Conv2d::new(channels, 3, Padding::Reflect, 0.1 / ((channels * 9) as f32).sqrt(), rng);
        Ok(GrowingGenerator {
            channels,
            noise_amp,
            resolutions,
            stem,
            stages: vec![stage0],
            head,
        })
    }

    /// Index of the top stage.
    pub fn current_stage(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Appends a new residual stage. Existing weights are untouched.
    pub fn grow(&mut self, rng: &mut Rng) -> Result<()> {
        if self.stages.len() >= self.resolutions.len() {
            return Err(Error::invalid(format!(
                "cannot grow past the final stage {}",
                self.resolutions.len() - 1
            )));
        }
        self.stages.push(GeneratorStage::new(self.channels, rng));
        Ok(())
    }

    /// Per-stage output sizes for a stage-0 input of size `input`; sizes are
    /// the schedule scaled by `input / resolutions[0]` per axis.
    pub fn stage_sizes(&self, input: (usize, usize)) -> Vec<(usize, usize)> {
        let base = self.resolutions[0];
        let sy = input.0 as f64 / base.0 as f64;
        let sx = input.1 as f64 / base.1 as f64;
        (0..self.stages.len())
            .map(|n| {
                if n == 0 {
                    input
                } else {
                    let (h, w) = self.resolutions[n];
                    (
                        ((h as f64 * sy).round() as usize).max(2),
                        ((w as f64 * sx).round() as usize).max(2),
                    )
                }
            })
            .collect()
    }

    /// RGB output in `[-1, 1]` at the top stage's (scaled) resolution.
    pub fn forward(&self, input: &Var, mut noise: Noise<'_>) -> Result<Var> {
        let shape = input.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::invalid(format!(
                "generator input must be [3,H,W], got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
            return Err(Error::invalid(format!(
                "generator input {h}x{w} is below the {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE} minimum"
            )));
        }
        let sizes = self.stage_sizes((h, w));
        let mut feats = self.stem.forward(input);
        for (stage, &size) in self.stages.iter().zip(&sizes) {
            feats = feats.resize(size);
            if let Noise::Sampled(rng) = &mut noise {
                let z = normal_tensor(vec![self.channels, size.0, size.1], self.noise_amp, rng);
                feats = feats.add(&Var::constant(z));
            }
            feats = stage.forward(&feats);
        }
        Ok(self.head.forward(&feats).tanh())
    }

    /// Stage `s` owns its block; stage 0 also owns the stem.
    pub fn stage_params(&self, s: usize) -> Vec<&Var> {
        let mut p = Vec::new();
        if s == 0 {
            p.extend(self.stem.params());
        }
        p.extend(self.stages[s].params());
        p
    }

    pub fn stage_params_mut(&mut self, s: usize) -> Vec<&mut Var> {
        let mut p = Vec::new();
        if s == 0 {
            p.extend(self.stem.params_mut());
        }
        p.extend(self.stages[s].params_mut());
        p
    }

    pub fn head_params(&self) -> Vec<&Var> {
        self.head.params()
    }

    pub fn head_params_mut(&mut self) -> Vec<&mut Var> {
        self.head.params_mut()
    }

    /// Stem, then each stage block, then head.
    pub fn params(&self) -> Vec<&Var> {
        let mut p = self.stem.params();
        for s in &self.stages {
            p.extend(s.params());
        }
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Var> {
        let mut p = self.stem.params_mut();
        for s in &mut self.stages {
            p.extend(s.params_mut());
        }
        p.extend(self.head.params_mut());
        p
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|v| v.value().len()).sum()
    }

    /// SHA-256 over the block weights of stage `s` (excluding the stem).
    pub fn stage_digest(&self, s: usize) -> [u8; 32] {
        digest(self.stages[s].params())
    }

    pub fn stem_digest(&self) -> [u8; 32] {
        digest(self.stem.params())
    }
}

pub(crate) fn digest(params: Vec<&Var>) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.value().digest());
    }
    h.finalize().into()
}

/// Anything that scores an image patch-wise.
pub trait Critic {
    /// `[3,H,W]` image to a score map.
    fn score_map(&self, image: &Var) -> Result<Var>;
}

/// Five stride-1 3×3 convolutions with zero padding and no normalization,
/// so each output sees exactly an 11×11 input patch and the width does not
/// depend on the stage.
#[derive(Clone, Debug)]
pub struct PatchCritic {
    pub channels: usize,
    pub layers: Vec<Conv2d>,
}

impl PatchCritic {
    pub fn new(channels: usize, rng: &mut Rng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("channel width must be positive"));
        }
        let mut layers = Vec::with_capacity(CRITIC_LAYERS);
        for i in 0..CRITIC_LAYERS {
            let c_in = if i == 0 { 3 } else { channels };
            let c_out = if i + 1 == CRITIC_LAYERS { 1 } else { channels };
            layers.push(Conv2d::he(c_in, c_out, Padding::Zero, rng));
        }
        Ok(PatchCritic { channels, layers })
    }

    pub fn params(&self) -> Vec<&Var> {
        self.layers.iter().flat_map(Conv2d::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Var> {
        self.layers.iter_mut().flat_map(Conv2d::params_mut).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|v| v.value().len()).sum()
    }

    pub fn digest(&self) -> [u8; 32] {
        digest(self.params())
    }
}

impl Critic for PatchCritic {
    fn score_map(&self, image: &Var) -> Result<Var> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::invalid(format!("critic input must be [3,H,W], got {shape:?}")));
        }
        if shape[1] < RECEPTIVE_FIELD || shape[2] < RECEPTIVE_FIELD {
            return Err(Error::invalid(format!(
                "critic input {}x{} is smaller than the {RECEPTIVE_FIELD}x{RECEPTIVE_FIELD} receptive field",
                shape[1], shape[2]
            )));
        }
        let last = self.layers.len() - 1;
        let mut x = image.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x);
            if i < last {
                x = x.leaky_relu(LEAKY_SLOPE);
            }
        }
        Ok(x)
    }
}

/// Score map of a plain image.
pub fn critic_forward(critic: &dyn Critic, image: &Tensor) -> Result<Tensor> {
    Ok(critic.score_map(&Var::constant(image.clone()))?.value().clone())
}

/// The critic for the next stage starts from the previous stage's weights.
pub fn warm_start_critic(prev: &PatchCritic) -> PatchCritic {
    prev.clone()
}
