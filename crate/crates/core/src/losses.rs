//! WGAN-GP adversarial terms and the reconstruction objective.

use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Var};
use crate::error::{Error, Result};
use crate::model::{Critic, GrowingGenerator, Noise};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 10.0;
pub const DEFAULT_GP_LAMBDA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the reconstruction term.
    pub alpha: f64,
    /// Weight of the gradient penalty.
    pub gp_lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: DEFAULT_ALPHA,
            gp_lambda: DEFAULT_GP_LAMBDA,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, gp_lambda: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::invalid(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        if !(gp_lambda.is_finite() && gp_lambda >= 0.0) {
            return Err(Error::invalid(format!(
                "gp_lambda must be finite and >= 0, got {gp_lambda}"
            )));
        }
        Ok(LossWeights { alpha, gp_lambda })
    }
}

/// Critic objective and its two parts.
pub struct CriticLoss {
    /// Differentiable total: `distance + gp_lambda * penalty`.
    pub total: Var,
    /// `mean(score(fake)) - mean(score(real))`.
    pub distance: f32,
    pub penalty: f32,
}

/// `(‖∇ₓ Σ score(x)‖₂ − 1)²` at `x`, kept differentiable with respect to
/// the critic's parameters (and `x` when it is a parameter leaf). The score
/// map is summed, not averaged, so every patch score is held near
/// 1-Lipschitz regardless of the map's size.
pub fn gradient_penalty_at(critic: &dyn Critic, x: &Var) -> Result<Var> {
    let score = critic.score_map(x)?.sum();
    let g = grad(&score, &[x], true).remove(0);
    Ok(g.square().sum().sqrt().add_scalar(-1.0).square())
}

/// Gradient penalty at a plain interpolate image.
pub fn gradient_penalty(critic: &dyn Critic, interpolate: &Tensor) -> Result<Var> {
    gradient_penalty_at(critic, &Var::param(interpolate.clone()))
}

/// `mix·real + (1−mix)·fake`.
pub fn interpolate(real: &Tensor, fake: &Tensor, mix: f32) -> Tensor {
    real.zip_map(fake, |r, f| mix * r + (1.0 - mix) * f)
}

/// WGAN-GP critic loss. `mix ∈ [0, 1]` picks the interpolate on the segment
/// between `fake` (0) and `real` (1); callers draw it uniformly.
pub fn critic_loss(critic: &dyn Critic, real: &Tensor, fake: &Tensor, gp_lambda: f64, mix: f32) -> Result<CriticLoss> {
    if real.shape() != fake.shape() {
        return Err(Error::invalid(format!(
            "real {:?} and fake {:?} differ in shape",
            real.shape(),
            fake.shape()
        )));
    }
    let real_score = critic.score_map(&Var::constant(real.clone()))?.mean();
    let fake_score = critic.score_map(&Var::constant(fake.clone()))?.mean();
    let distance = fake_score.sub(&real_score);
    let penalty = gradient_penalty(critic, &interpolate(real, fake, mix))?;
    let total = distance.add(&penalty.scale(gp_lambda as f32));
    Ok(CriticLoss {
        distance: distance.item(),
        penalty: penalty.item(),
        total,
    })
}

/// `−mean(score(fake))`.
pub fn generator_adv_loss(critic: &dyn Critic, fake: &Var) -> Result<Var> {
    Ok(critic.score_map(fake)?.mean().neg())
}

/// Mean squared error against a fixed target.
pub fn mse(output: &Var, target: &Tensor) -> Var {
    output.sub(&Var::constant(target.clone())).square().mean()
}

/// MSE between the noise-free generator output for the stage-0 image `x0`
/// and the current stage's training image `xn`.
pub fn reconstruction_loss(g: &GrowingGenerator, x0: &Tensor, xn: &Tensor) -> Result<Var> {
    let out = g.forward(&Var::constant(x0.clone()), Noise::Zero)?;
    if out.shape() != xn.shape() {
        return Err(Error::Internal(format!(
            "reconstruction of shape {:?} does not match target {:?}",
            out.shape(),
            xn.shape()
        )));
    }
    Ok(mse(&out, xn))
}

/// `adv + alpha·rec` on plain numbers.
pub fn generator_total_loss(adv: f64, rec: f64, w: &LossWeights) -> Result<f64> {
    if !adv.is_finite() || !rec.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite generator loss terms (adv {adv}, rec {rec})"
        )));
    }
    Ok(adv + w.alpha * rec)
}

/// Differentiable form of [`generator_total_loss`].
pub fn generator_objective(adv: &Var, rec: &Var, w: &LossWeights) -> Var {
    adv.add(&rec.scale(w.alpha as f32))
}
