//! The alternating critic/generator loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{generator_loss, loss_original, loss_wgan_clip, loss_wgan_gp, Critic, CriticLoss};
use super::{GanError, GanModel, LossKind, Result};
use crate::autodiff::{backward, no_grad, Array, AutodiffError, BoundParams, ParameterStore, RmsProp, Tensor};
use crate::codec::{EncodingLevels, CHANNELS};
use crate::dataio::{LoadGroup, SampleSet};
use crate::nn::{apply_running, Network};
use crate::seed::{self, Rng};

/// Losses above this magnitude count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss_d: f64,
    /// Absent when the epoch had no generator step.
    pub loss_g: Option<f64>,
    pub grad_norm: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainBudget {
    Epochs(usize),
    /// Generator updates (each preceded by `critic_steps` critic updates).
    GeneratorSteps(u64),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: usize,
    pub critic_steps: u64,
    pub generator_steps: u64,
    /// Reason training stopped early; the model holds the last good state.
    pub diverged: Option<String>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn write_history_csv(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss_d", "loss_g"])?;
    for h in history {
        let g = h.loss_g.map_or_else(String::new, |v| v.to_string());
        w.write_record([h.epoch.to_string(), h.loss_d.to_string(), g])?;
    }
    w.flush()?;
    Ok(())
}

fn diverged(v: f64) -> bool {
    !v.is_finite() || v.abs() > DIVERGENCE_LIMIT
}

/// Swaps the group columns of a `[4, M, N]` sample.
fn permute_columns(sample: &mut [f64], m: usize, n: usize, rng: &mut Rng) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let src = sample.to_vec();
    for row in 0..CHANNELS * m {
        for (j, &from) in order.iter().enumerate() {
            sample[row * n + j] = src[row * n + from];
        }
    }
}

fn forward_fn<'a>(net: &'a Network, params: &'a BoundParams, store: &'a ParameterStore, sigmoid: bool) -> impl Fn(&Tensor) -> Result<Tensor> + 'a {
    move |x| {
        let out = net.forward(params, store, x, true)?.out;
        Ok(if sigmoid { out.sigmoid() } else { out })
    }
}

impl GanModel {
    /// Encodes `positives` (plus `augment`, mixed uniformly into the real
    /// pool), records their temperatures for sampling, and trains for the
    /// configured number of epochs.
    pub fn train(&mut self, positives: &SampleSet, augment: Option<&SampleSet>, levels: &EncodingLevels, checkpoint_dir: Option<&Path>) -> Result<TrainReport> {
        self.train_epochs(positives, augment, levels, self.config.epochs, checkpoint_dir)
    }

    pub fn train_epochs(
        &mut self,
        positives: &SampleSet,
        augment: Option<&SampleSet>,
        levels: &EncodingLevels,
        epochs: usize,
        checkpoint_dir: Option<&Path>,
    ) -> Result<TrainReport> {
        if positives.is_empty() {
            return Err(GanError::EmptyData);
        }
        self.set_temperature_bank(positives)?;
        let pool = self.encode_pool(positives.iter().map(|(g, _)| g).chain(augment.into_iter().flat_map(|a| a.groups.iter())), levels)?;
        self.fit(&pool, TrainBudget::Epochs(epochs), checkpoint_dir, None)
    }

    /// Training samples for this model's mode: whole groups, or every
    /// column as a separate single-profile image.
    fn encode_pool<'a>(&self, groups: impl Iterator<Item = &'a LoadGroup>, levels: &EncodingLevels) -> Result<Vec<Array>> {
        let want = self.config.image_shape();
        let mut pool = Vec::new();
        for g in groups {
            let img = g.encode(levels)?;
            if want[2] == 1 && g.n != 1 {
                for j in 0..g.n {
                    let data = (0..CHANNELS * g.m).map(|r| img.data[r * g.n + j]).collect();
                    pool.push(Array::new(want.clone(), data)?);
                }
            } else {
                if [CHANNELS, g.m, g.n] != want[..] {
                    return Err(GanError::Config(format!("group {} is {}x{}, model expects {:?}", g.id, g.m, g.n, want)));
                }
                pool.push(Array::new(want.clone(), img.data)?);
            }
        }
        Ok(pool)
    }

    /// Trains on batch-less samples (each of the critic's input shape).
    /// `observer` runs after every generator step.
    pub fn fit(&mut self, pool: &[Array], budget: TrainBudget, checkpoint_dir: Option<&Path>, mut observer: Option<&mut dyn FnMut(&GanModel)>) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        let epochs = match budget {
            TrainBudget::Epochs(0) | TrainBudget::GeneratorSteps(0) => return Ok(report),
            TrainBudget::Epochs(e) => e,
            TrainBudget::GeneratorSteps(_) => usize::MAX,
        };
        if pool.is_empty() {
            return Err(GanError::EmptyData);
        }
        let label = format!("gan/fit/{}/{}", self.history.len(), self.generator_steps);
        let mut rng = seed::rng_for(self.config.seed, &label);
        let step_target = match budget {
            TrainBudget::GeneratorSteps(s) => self.generator_steps + s,
            TrainBudget::Epochs(_) => u64::MAX,
        };
        let mut good = (self.gen_params.clone(), self.critic_params.clone(), self.generator_steps);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut batches_seen = 0u64;
        'epochs: for _ in 0..epochs {
            order.shuffle(&mut rng);
            let (mut d_sum, mut d_count, mut g_sum, mut g_count, mut n_sum, mut n_count) = (0.0, 0, 0.0, 0, 0.0, 0);
            for chunk in order.chunks(self.config.batch) {
                let mut items: Vec<Array> = chunk.iter().map(|&i| pool[i].clone()).collect();
                if self.config.permute_columns {
                    let (m, n) = (self.config.m, self.config.width());
                    for it in &mut items {
                        permute_columns(it.data_mut(), m, n, &mut rng);
                    }
                }
                let real = Array::stack(&items.iter().collect::<Vec<_>>())?;
                let step = self.critic_step(&real, &mut rng).and_then(|c| {
                    if diverged(c.loss.item()) {
                        Err(GanError::Diverged { what: "critic", value: c.loss.item() })
                    } else {
                        Ok(c)
                    }
                });
                let c = match step {
                    Ok(c) => c,
                    Err(e @ (GanError::NonFinite { .. } | GanError::Diverged { .. } | GanError::Autodiff(AutodiffError::NonFinite { .. }))) => {
                        self.restore(good, &mut report, e);
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
                report.critic_steps += 1;
                d_sum += c.loss.item();
                d_count += 1;
                if let Some(g) = c.grad_norm {
                    n_sum += g;
                    n_count += 1;
                }
                batches_seen += 1;
                if batches_seen.is_multiple_of(self.config.critic_steps as u64) {
                    match self.generator_step(chunk.len(), &mut rng) {
                        Ok(l) if !diverged(l) => {
                            g_sum += l;
                            g_count += 1;
                        }
                        Ok(value) => {
                            self.restore(good, &mut report, GanError::Diverged { what: "generator", value });
                            break 'epochs;
                        }
                        Err(e @ (GanError::NonFinite { .. } | GanError::Diverged { .. } | GanError::Autodiff(AutodiffError::NonFinite { .. }))) => {
                            self.restore(good, &mut report, e);
                            break 'epochs;
                        }
                        Err(e) => return Err(e),
                    }
                    self.generator_steps += 1;
                    report.generator_steps += 1;
                    if let Some(obs) = observer.as_deref_mut() {
                        obs(self);
                    }
                    if self.generator_steps >= step_target {
                        break;
                    }
                }
            }
            let epoch = self.history.len() + 1;
            self.history.push(EpochLoss {
                epoch,
                loss_d: d_sum / d_count.max(1) as f64,
                loss_g: (g_count > 0).then(|| g_sum / g_count as f64),
                grad_norm: (n_count > 0).then(|| n_sum / n_count as f64),
            });
            report.epochs += 1;
            good = (self.gen_params.clone(), self.critic_params.clone(), self.generator_steps);
            if let Some(dir) = checkpoint_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && epoch.is_multiple_of(every) {
                    let path = dir.join(format!("epoch{epoch:04}"));
                    self.save(&path)?;
                    report.checkpoints.push(path);
                }
            }
            if self.generator_steps >= step_target {
                break;
            }
        }
        Ok(report)
    }

    fn restore(&mut self, good: (ParameterStore, ParameterStore, u64), report: &mut TrainReport, why: GanError) {
        log::warn!("training diverged: {why}; restoring the last good state");
        (self.gen_params, self.critic_params, self.generator_steps) = good;
        report.diverged = Some(why.to_string());
    }

    /// Fake batch from the generator in training mode (batch statistics),
    /// updating its running statistics.
    fn fake_batch(&mut self, count: usize, rng: &mut Rng) -> Result<Array> {
        let z = self.sample_latent(count, rng);
        let (value, running) = no_grad(|| -> Result<_> {
            let params = self.gen_params.bind_frozen();
            let fwd = self.generator.forward(&params, &self.gen_params, &Tensor::constant(z), true)?;
            Ok((fwd.out.value().clone(), fwd.running))
        })?;
        apply_running(&mut self.gen_params, running);
        Ok(value)
    }

    fn critic_step(&mut self, real: &Array, rng: &mut Rng) -> Result<CriticLoss> {
        let fake = self.fake_batch(real.shape()[0], rng)?;
        let params = self.critic_params.bind();
        let kind = self.config.loss;
        let (real, fake) = (Tensor::constant(real.clone()), Tensor::constant(fake));
        let c = {
            let critic = forward_fn(&self.critic, &params, &self.critic_params, kind == LossKind::Original);
            let critic: &Critic = &critic;
            match kind {
                LossKind::WganGp => loss_wgan_gp(critic, &real, &fake, self.config.lambda, rng)?,
                LossKind::WganClip => loss_wgan_clip(critic, &real, &fake)?,
                LossKind::Original => loss_original(critic, &real, &fake)?,
            }
        };
        let grads = params.collect_grads(&backward(&c.loss, false)?);
        self.critic_params.rmsprop_step(&grads, RmsProp::new(self.config.lr_d))?;
        if kind == LossKind::WganClip {
            self.critic_params.clamp_all(self.config.clip);
        }
        Ok(c)
    }

    fn generator_step(&mut self, count: usize, rng: &mut Rng) -> Result<f64> {
        let z = Tensor::constant(self.sample_latent(count, rng));
        let g_params = self.gen_params.bind();
        let fwd = self.generator.forward(&g_params, &self.gen_params, &z, true)?;
        let d_params = self.critic_params.bind_frozen();
        let kind = self.config.loss;
        let loss = {
            let critic = forward_fn(&self.critic, &d_params, &self.critic_params, kind == LossKind::Original);
            generator_loss(kind, &critic, &fwd.out)?
        };
        let grads = g_params.collect_grads(&backward(&loss, false)?);
        self.gen_params.rmsprop_step(&grads, RmsProp::new(self.config.lr_g))?;
        apply_running(&mut self.gen_params, fwd.running);
        Ok(loss.item())
    }
}
