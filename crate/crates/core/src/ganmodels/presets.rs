//! Named architectures and hyperparameters.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GanConfig, GanError, LossKind, Mode, Result};
use crate::codec::CHANNELS;
use crate::nn::{Activation, LayerSpec, NetSpec};
use crate::seed::Rng;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const LAMBDA: f64 = 10.0;

/// Dense stem reshaped to `[channels[0], M / 2^L, width]`, then `L`
/// transposed convolutions doubling the time axis (kernel 4, stride 2,
/// padding 1) and keeping the width, with batch normalization and ReLU on
/// every layer but the Tanh head.
pub fn generator_spec(latent: usize, m: usize, width: usize, channels: &[usize]) -> Result<NetSpec> {
    let depth = channels.len();
    if depth == 0 || !m.is_multiple_of(1 << depth) {
        return Err(GanError::Config(format!("M={m} is not divisible by 2^{depth}")));
    }
    let h0 = m >> depth;
    let (kw, pw) = if width == 1 { (1, 0) } else { (3, 1) };
    let mut layers = vec![LayerSpec::dense(channels[0] * h0 * width, Activation::Relu)
        .with_norm(true)
        .with_reshape([channels[0], h0, width])];
    for i in 0..depth {
        let last = i + 1 == depth;
        let out = if last { CHANNELS } else { channels[i + 1] };
        let act = if last { Activation::Tanh } else { Activation::Relu };
        layers.push(LayerSpec::conv_transpose(out, [4, kw], [2, 1], [1, pw], act).with_norm(!last));
    }
    Ok(NetSpec {
        input: vec![latent],
        layers,
        leaky_slope: LEAKY_SLOPE,
    })
}

/// Convolutions halving the time axis (kernel 4, stride 2, padding 1) with
/// LeakyReLU, then a dense scalar head.
pub fn critic_spec(m: usize, width: usize, channels: &[usize]) -> NetSpec {
    let (kw, pw) = if width == 1 { (1, 0) } else { (3, 1) };
    let mut layers: Vec<LayerSpec> = channels
        .iter()
        .map(|&c| LayerSpec::conv(c, [4, kw], [2, 1], [1, pw], Activation::LeakyRelu))
        .collect();
    layers.push(LayerSpec::dense(1, Activation::Identity));
    NetSpec {
        input: vec![CHANNELS, m, width],
        layers,
        leaky_slope: LEAKY_SLOPE,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// One-day windows of 4 households, small stacks, few epochs.
    #[default]
    Desk,
    /// One-week windows of 8 households at full network size.
    Paper,
}

impl Preset {
    pub fn m(self) -> usize {
        match self {
            Preset::Desk => 96,
            Preset::Paper => 672,
        }
    }

    pub fn n(self) -> usize {
        match self {
            Preset::Desk => 4,
            Preset::Paper => 8,
        }
    }

    pub fn gan_config(self, mode: Mode, seed: u64) -> GanConfig {
        let (m, n) = (self.m(), self.n());
        let width = if mode == Mode::Single { 1 } else { n };
        let (latent, g_ch, d_ch): (usize, &[usize], &[usize]) = match self {
            Preset::Desk => (64, &[64, 32, 16, 8], &[8, 16, 32, 64]),
            Preset::Paper => (100, &[256, 128, 64, 32, 16], &[16, 32, 64, 128, 256]),
        };
        let (lr_g, batch, epochs) = match (self, mode) {
            (Preset::Paper, Mode::Multi) => (1.4e-4, 16, 300),
            (Preset::Paper, Mode::Single) => (1.2e-4, 64, 100),
            (Preset::Desk, Mode::Multi) => (1.4e-4, 16, 12),
            (Preset::Desk, Mode::Single) => (1.2e-4, 64, 12),
        };
        GanConfig {
            mode,
            m,
            n,
            generator: generator_spec(latent, m, width, g_ch).expect("preset sizes are powers of two multiples"),
            critic: critic_spec(m, width, d_ch),
            lr_d: 1e-4,
            lr_g,
            lambda: LAMBDA,
            loss: LossKind::WganGp,
            clip: 0.01,
            batch,
            epochs,
            critic_steps: 5,
            checkpoint_every: 0,
            critic_batchnorm: false,
            free_temperature: false,
            permute_columns: false,
            seed,
        }
    }
}

/// Small dense networks over scalar samples in `(-1, 1)`.
///
/// Uses a penalty weight of 0.1: over a 1-D interval of width 2 the
/// Wasserstein gradient cannot overcome a weight-10 penalty barrier, so the
/// critic keeps whatever slope sign it starts with.
pub fn toy_config(seed: u64) -> GanConfig {
    let generator = NetSpec {
        input: vec![8],
        layers: vec![
            LayerSpec::dense(32, Activation::LeakyRelu),
            LayerSpec::dense(32, Activation::LeakyRelu),
            LayerSpec::dense(1, Activation::Tanh),
        ],
        leaky_slope: LEAKY_SLOPE,
    };
    let critic = NetSpec {
        input: vec![1],
        layers: vec![
            LayerSpec::dense(32, Activation::LeakyRelu),
            LayerSpec::dense(32, Activation::LeakyRelu),
            LayerSpec::dense(1, Activation::Identity),
        ],
        leaky_slope: LEAKY_SLOPE,
    };
    GanConfig {
        mode: Mode::Multi,
        m: 1,
        n: 1,
        generator,
        critic,
        lr_d: 1e-4,
        lr_g: 1e-4,
        lambda: 0.1,
        loss: LossKind::WganGp,
        clip: 0.01,
        batch: 64,
        epochs: 0,
        critic_steps: 5,
        checkpoint_every: 0,
        critic_batchnorm: false,
        free_temperature: false,
        permute_columns: false,
        seed,
    }
}

/// Modes and spread of the toy target: an even mixture of two normals.
pub const TOY_MODES: [f64; 2] = [0.2, 0.7];
pub const TOY_SIGMA: f64 = 0.05;

pub fn toy_target_mean() -> f64 {
    (TOY_MODES[0] + TOY_MODES[1]) / 2.0
}

/// One draw from the toy target.
pub fn toy_draw(rng: &mut Rng) -> f64 {
    let centre = TOY_MODES[usize::from(rng.random_bool(0.5))];
    centre + TOY_SIGMA * rng.sample::<f64, _>(StandardNormal)
}
