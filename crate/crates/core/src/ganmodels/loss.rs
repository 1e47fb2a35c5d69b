//! Critic and generator objectives.
//!
//! Critics are passed as closures from a batch to per-sample scores of shape
//! `[B, 1]`. For the original log-loss the closure must return
//! probabilities (a sigmoid head).

use rand::Rng as _;

use super::{GanError, LossKind, Result};
use crate::autodiff::{grad, Array, Tensor};
use crate::seed::Rng;

/// Floor applied inside logarithms.
pub const LOG_EPS: f64 = 1e-12;

pub type Critic<'a> = dyn Fn(&Tensor) -> Result<Tensor> + 'a;

/// A critic objective with its parts.
pub struct CriticLoss {
    pub loss: Tensor,
    /// `mean D(fake) - mean D(real)` for the Wasserstein losses.
    pub wasserstein: f64,
    /// Penalty term including its weight.
    pub penalty: f64,
    /// Mean input-gradient norm over the interpolates, when computed.
    pub grad_norm: Option<f64>,
}

fn check(t: &Tensor, what: &'static str, term: &'static str) -> Result<()> {
    if t.value().is_finite() {
        Ok(())
    } else {
        Err(GanError::NonFinite { what, term })
    }
}

fn wasserstein(critic: &Critic, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    if real.shape() != fake.shape() {
        return Err(GanError::Config(format!("real batch {:?} and fake batch {:?} differ", real.shape(), fake.shape())));
    }
    let w = critic(fake)?.mean().sub(&critic(real)?.mean())?;
    check(&w, "critic", "wasserstein")?;
    Ok(w)
}

/// Wasserstein critic loss with the gradient-norm penalty on random
/// interpolates `eps*x + (1-eps)*x_fake`, `eps ~ U[0,1)` per sample.
/// With `lambda == 0` no interpolates are drawn.
pub fn loss_wgan_gp(critic: &Critic, real: &Tensor, fake: &Tensor, lambda: f64, rng: &mut Rng) -> Result<CriticLoss> {
    if !(lambda >= 0.0) {
        return Err(GanError::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let w = wasserstein(critic, real, fake)?;
    let wv = w.item();
    if lambda == 0.0 {
        return Ok(CriticLoss {
            loss: w,
            wasserstein: wv,
            penalty: 0.0,
            grad_norm: None,
        });
    }
    let batch = real.shape()[0];
    let per = real.numel() / batch.max(1);
    let eps: Vec<f64> = (0..batch).map(|_| rng.random::<f64>()).collect();
    let (r, f) = (real.value().data(), fake.value().data());
    let mixed = (0..real.numel())
        .map(|i| {
            let e = eps[i / per];
            e * r[i] + (1.0 - e) * f[i]
        })
        .collect();
    let x_hat = Tensor::leaf(Array::new(real.shape().to_vec(), mixed)?);
    let scores = critic(&x_hat)?.sum();
    let g = grad(&scores, &[&x_hat], true)?.remove(0);
    let norms = g.square().reshape(&[batch, per])?.sum_to(&[batch, 1])?.sqrt();
    let penalty = norms.add_scalar(-1.0).square().mean().scale(lambda);
    check(&penalty, "critic", "gradient penalty")?;
    let grad_norm = norms.value().data().iter().sum::<f64>() / batch as f64;
    Ok(CriticLoss {
        wasserstein: wv,
        penalty: penalty.item(),
        grad_norm: Some(grad_norm),
        loss: w.add(&penalty)?,
    })
}

/// Wasserstein critic loss without penalty; the caller clamps the critic
/// weights after each step.
pub fn loss_wgan_clip(critic: &Critic, real: &Tensor, fake: &Tensor) -> Result<CriticLoss> {
    let w = wasserstein(critic, real, fake)?;
    Ok(CriticLoss {
        wasserstein: w.item(),
        loss: w,
        penalty: 0.0,
        grad_norm: None,
    })
}

fn log_floor(p: &Tensor) -> Tensor {
    p.clamp_min(LOG_EPS).ln()
}

/// Discriminator log-loss `-mean ln D(x) - mean ln(1 - D(x_fake))`.
pub fn loss_original(prob: &Critic, real: &Tensor, fake: &Tensor) -> Result<CriticLoss> {
    let real_term = log_floor(&prob(real)?).mean();
    let fake_term = log_floor(&prob(fake)?.neg().add_scalar(1.0)).mean();
    let loss = real_term.add(&fake_term)?.neg();
    check(&loss, "discriminator", "log-likelihood")?;
    Ok(CriticLoss {
        wasserstein: f64::NAN,
        penalty: 0.0,
        grad_norm: None,
        loss,
    })
}

/// Generator objective: `-mean D(x_fake)` for the Wasserstein losses and the
/// non-saturating `-mean ln D(x_fake)` for the log-loss.
pub fn generator_loss(kind: LossKind, critic: &Critic, fake: &Tensor) -> Result<Tensor> {
    let scores = critic(fake)?;
    let loss = match kind {
        LossKind::WganGp | LossKind::WganClip => scores.mean().neg(),
        LossKind::Original => log_floor(&scores).mean().neg(),
    };
    check(&loss, "generator", "adversarial")?;
    Ok(loss)
}
