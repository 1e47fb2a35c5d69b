//! Adversarial generators of single profiles and of whole load groups.
//!
//! Both generators emit 4-channel images (`[4, M, N]` for groups, `[4, M, 1]`
//! for single profiles) through a dense stem and a transposed-convolution
//! stack ending in Tanh; the critics are convolution stacks with a scalar
//! head. Training alternates critic and generator RMSProp steps.

mod loss;
mod presets;
mod sample;
mod train;

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{no_grad, Array, AutodiffError, CheckpointHeader, ParameterStore, Tensor};
use crate::codec::{CodecError, CHANNELS};
use crate::dataio::DataError;
use crate::nn::{Activation, LayerKind, NetSpec, Network, NnError};
use crate::seed::{self, Rng};

pub use loss::{generator_loss, loss_original, loss_wgan_clip, loss_wgan_gp, CriticLoss, LOG_EPS};
pub use presets::{critic_spec, generator_spec, toy_config, toy_draw, toy_target_mean, Preset, TOY_MODES, TOY_SIGMA};
pub use sample::SampleReport;
pub use train::{write_history_csv, EpochLoss, TrainBudget, TrainReport, DIVERGENCE_LIMIT};

#[derive(Debug, thiserror::Error)]
pub enum GanError {
    #[error("invalid GAN configuration: {0}")]
    Config(String),
    #[error("non-finite {term} in the {what} loss")]
    NonFinite { what: &'static str, term: &'static str },
    #[error("{what} loss {value} exceeds the divergence limit")]
    Diverged { what: &'static str, value: f64 },
    #[error("no training samples")]
    EmptyData,
    #[error("checkpoint fingerprint {found:#x} does not match the configured architecture {expected:#x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GanError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One profile per draw; groups are stacks of N independent draws.
    Single,
    /// One whole group per draw.
    Multi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    WganGp,
    WganClip,
    Original,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanConfig {
    pub mode: Mode,
    pub m: usize,
    pub n: usize,
    pub generator: NetSpec,
    pub critic: NetSpec,
    pub lr_d: f64,
    pub lr_g: f64,
    pub lambda: f64,
    pub loss: LossKind,
    /// Weight clip of the clipped Wasserstein loss.
    pub clip: f64,
    pub batch: usize,
    pub epochs: usize,
    pub critic_steps: usize,
    /// Epochs between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Adds batch normalization after every critic convolution but the first.
    pub critic_batchnorm: bool,
    /// Keeps the generated temperature channel instead of a real series.
    pub free_temperature: bool,
    /// Randomly permutes group columns of every real batch.
    pub permute_columns: bool,
    pub seed: u64,
}

impl GanConfig {
    pub fn latent(&self) -> usize {
        self.generator.input.iter().product()
    }

    /// Image width: N for groups, 1 for single profiles.
    pub fn width(&self) -> usize {
        match self.mode {
            Mode::Single => 1,
            Mode::Multi => self.n,
        }
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![CHANNELS, self.m, self.width()]
    }

    /// The critic stack with normalization set by `critic_batchnorm`.
    pub fn critic_net(&self) -> NetSpec {
        let mut spec = self.critic.clone();
        let mut seen_conv = false;
        for layer in &mut spec.layers {
            layer.norm = false;
            if layer.kind == LayerKind::Conv {
                layer.norm = self.critic_batchnorm && seen_conv;
                seen_conv = true;
            }
        }
        spec
    }

    fn validate_common(&self) -> Result<()> {
        let bad = |msg: String| Err(GanError::Config(msg));
        if !(self.lr_d > 0.0 && self.lr_g > 0.0) {
            return bad(format!("learning rates must be positive (lr_d={}, lr_g={})", self.lr_d, self.lr_g));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.loss == LossKind::WganClip && !(self.clip > 0.0) {
            return bad(format!("clip must be positive, got {}", self.clip));
        }
        if self.batch == 0 || self.critic_steps == 0 {
            return bad("batch and critic_steps must be positive".into());
        }
        match self.generator.layers.last() {
            Some(l) if l.activation == Activation::Tanh => {}
            _ => return bad("the generator must end with a Tanh activation".into()),
        }
        let g_out = self.generator.output_shape()?;
        let critic = self.critic_net();
        if g_out != critic.input {
            return bad(format!("generator output {g_out:?} differs from critic input {:?}", critic.input));
        }
        if critic.output_shape()? != [1] {
            return bad(format!("critic output must be [1], got {:?}", critic.output_shape()?));
        }
        if critic.layers.last().is_some_and(|l| l.activation != Activation::Identity) {
            return bad("the critic head must have no activation".into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_common()?;
        let g_out = self.generator.output_shape()?;
        if g_out != self.image_shape() {
            return Err(NnError::Output {
                expected: self.image_shape(),
                actual: g_out,
            }
            .into());
        }
        Ok(())
    }

    fn fingerprints(&self) -> (u64, u64) {
        (self.generator.fingerprint(), self.critic_net().fingerprint())
    }
}

/// A generator/critic pair with its parameters and loss history.
#[derive(Clone, Debug)]
pub struct GanModel {
    pub config: GanConfig,
    generator: Network,
    critic: Network,
    pub gen_params: ParameterStore,
    pub critic_params: ParameterStore,
    pub history: Vec<EpochLoss>,
    pub generator_steps: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: GanConfig,
    history: Vec<EpochLoss>,
    generator_steps: u64,
}

pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const CRITIC_FILE: &str = "critic.ckpt";
pub const META_FILE: &str = "gan.json";

impl GanModel {
    /// Builds and initializes a model producing images of the configured
    /// mode and size.
    pub fn new(config: GanConfig) -> Result<Self> {
        config.validate()?;
        Self::build(config)
    }

    /// Builds a model over arbitrary sample shapes (no image-shape check),
    /// for experiments on raw vectors.
    pub fn new_raw(config: GanConfig) -> Result<Self> {
        config.validate_common()?;
        Self::build(config)
    }

    fn build(config: GanConfig) -> Result<Self> {
        let generator = Network::new(config.generator.clone(), "g")?;
        let critic = Network::new(config.critic_net(), "d")?;
        let mut gen_params = ParameterStore::new();
        let mut critic_params = ParameterStore::new();
        generator.init(&mut gen_params, &mut seed::rng_for(config.seed, "gan/init/generator"));
        critic.init(&mut critic_params, &mut seed::rng_for(config.seed, "gan/init/critic"));
        Ok(Self {
            config,
            generator,
            critic,
            gen_params,
            critic_params,
            history: Vec::new(),
            generator_steps: 0,
        })
    }

    pub fn generator(&self) -> &Network {
        &self.generator
    }

    pub fn critic(&self) -> &Network {
        &self.critic
    }

    pub fn sample_latent(&self, count: usize, rng: &mut Rng) -> Array {
        let latent = self.config.latent();
        let data = (0..count * latent).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        Array::new(vec![count, latent], data).expect("sized to shape")
    }

    /// Generator output for latent rows `z` in inference mode.
    pub fn generate(&self, z: &Array) -> Result<Array> {
        no_grad(|| {
            let params = self.gen_params.bind_frozen();
            let fwd = self.generator.forward(&params, &self.gen_params, &Tensor::constant(z.clone()), false)?;
            Ok(fwd.out.value().clone())
        })
    }

    /// Critic scores of samples `x` (batch-first).
    pub fn critique(&self, x: &Array) -> Result<Array> {
        no_grad(|| {
            let params = self.critic_params.bind_frozen();
            let fwd = self.critic.forward(&params, &self.critic_params, &Tensor::constant(x.clone()), false)?;
            Ok(fwd.out.value().clone())
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (gf, cf) = self.config.fingerprints();
        self.gen_params.save(&dir.join(GENERATOR_FILE), CheckpointHeader::new(gf, self.config.seed))?;
        self.critic_params.save(&dir.join(CRITIC_FILE), CheckpointHeader::new(cf, self.config.seed))?;
        let meta = ModelMeta {
            config: self.config.clone(),
            history: self.history.clone(),
            generator_steps: self.generator_steps,
        };
        std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(META_FILE))?)?;
        meta.config.validate_common()?;
        let mut model = Self::build(meta.config)?;
        let (gf, cf) = model.config.fingerprints();
        for (file, expected, slot) in [(GENERATOR_FILE, gf, &mut model.gen_params), (CRITIC_FILE, cf, &mut model.critic_params)] {
            let (header, store) = ParameterStore::load(&dir.join(file))?;
            if header.fingerprint != expected {
                return Err(GanError::Fingerprint {
                    expected,
                    found: header.fingerprint,
                });
            }
            *slot = store;
        }
        model.history = meta.history;
        model.generator_steps = meta.generator_steps;
        Ok(model)
    }
}
