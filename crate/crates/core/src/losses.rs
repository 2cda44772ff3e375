//! Training objectives: WGAN-GP critic and generator terms, reconstruction,
//! cycle consistency and their weighted totals.
//!
//! Every `||.||_2` objective is an RMSE so values do not grow with resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{grad, Tensor};
use crate::error::{Error, Result};
use crate::networks::Critic;

/// Keeps square roots differentiable at zero.
pub const NORM_EPS: f64 = 1e-18;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_recon: f64,
    pub lambda_cycle: f64,
    /// Gradient-penalty coefficient.
    pub lambda_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_recon: 1.0, lambda_cycle: 10.0, lambda_gp: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_recon", self.lambda_recon), ("lambda_cycle", self.lambda_cycle), ("lambda_gp", self.lambda_gp)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scales at which the cycle term is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleScope {
    /// Every scale below `K`.
    #[default]
    All,
    /// Only scale `K - 1`.
    LastOnly,
    None,
}

impl CycleScope {
    pub fn applies(self, n: usize, k: usize) -> bool {
        match self {
            CycleScope::All => n < k,
            CycleScope::LastOnly => k > 0 && n == k - 1,
            CycleScope::None => false,
        }
    }
}

/// How the critic's input-gradient norm is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GpMode {
    /// Differentiate the input gradient itself (second order).
    #[default]
    Exact,
    /// Central difference of the critic along its (detached) gradient
    /// direction; needs first-order gradients only.
    FiniteDifference { step: f64 },
}

pub fn rmse(a: &Tensor, b: &Tensor) -> Tensor {
    a.sub(b).square().mean().add_scalar(NORM_EPS).sqrt()
}

pub fn sample_epsilon(rng: &mut impl Rng) -> f64 {
    rng.random::<f64>()
}

fn interpolate(real: &Tensor, fake: &Tensor, epsilon: f64) -> Result<Tensor> {
    if real.shape() != fake.shape() {
        return Err(Error::InvalidArgument(format!("gradient penalty needs equal shapes, got {:?} and {:?}", real.shape(), fake.shape())));
    }
    Ok(real.detach().scale(epsilon).add(&fake.detach().scale(1.0 - epsilon)).as_input())
}

/// `lambda * (||grad_c mean(D(c))||_2 - 1)^2` at `c = eps * real + (1 - eps) * fake`.
///
/// The result stays on the tape so it can be minimised over the critic's
/// parameters. It is the positive penalty added to the minimised critic loss.
pub fn gradient_penalty(critic: &dyn Critic, real: &Tensor, fake: &Tensor, epsilon: f64, lambda: f64, mode: GpMode) -> Result<Tensor> {
    let c = interpolate(real, fake, epsilon)?;
    let score = critic.score_map(&c)?.mean();
    let norm = match mode {
        GpMode::Exact => {
            let g = grad(&score, &[&c], true)?.remove(0);
            g.square().sum().add_scalar(NORM_EPS).sqrt()
        }
        GpMode::FiniteDifference { step } => {
            let g = grad(&score, &[&c], false)?.remove(0);
            let len = g.values().iter().map(|v| v * v).sum::<f64>().sqrt();
            if len == 0.0 {
                Tensor::scalar(0.0)
            } else {
                let dir = g.scale(step / len);
                let plus = critic.score_map(&c.detach().add(&dir))?.mean();
                let minus = critic.score_map(&c.detach().sub(&dir))?.mean();
                plus.sub(&minus).scale(0.5 / step)
            }
        }
    };
    let penalty = norm.add_scalar(-1.0).square().scale(lambda);
    if !penalty.is_finite() {
        return Err(Error::Backend(crate::backend::BackendError::NonFinite));
    }
    Ok(penalty)
}

/// One critic's terms for a (real, fake) pair.
#[derive(Debug, Clone)]
pub struct CriticTerms {
    /// `E D(real) - E D(fake)`.
    pub wasserstein: f64,
    pub gp: Tensor,
    /// Minimised form: `E D(fake) - E D(real) + GP`.
    pub loss: Tensor,
}

pub fn critic_loss(
    critic: &dyn Critic,
    real: &Tensor,
    fake: &Tensor,
    epsilon: f64,
    weights: &LossWeights,
    mode: GpMode,
) -> Result<CriticTerms> {
    let d_real = critic.score_map(&real.detach())?.mean();
    let d_fake = critic.score_map(&fake.detach())?.mean();
    let gp = gradient_penalty(critic, real, fake, epsilon, weights.lambda_gp, mode)?;
    let loss = d_fake.sub(&d_real).add(&gp);
    Ok(CriticTerms { wasserstein: d_real.item() - d_fake.item(), gp, loss })
}

/// `-E D(fake)`, minimised by the generator.
pub fn generator_adv_loss(critic: &dyn Critic, fake: &Tensor) -> Result<Tensor> {
    Ok(critic.score_map(fake)?.mean().neg())
}

#[derive(Debug, Clone)]
pub struct ReconTerms {
    pub a: Tensor,
    pub b: Tensor,
    pub total: Tensor,
}

/// Reconstruction error of both domains (`recon_a` vs `a`, `recon_b` vs `b`).
pub fn reconstruction_loss(recon_a: &Tensor, a: &Tensor, recon_b: &Tensor, b: &Tensor) -> Result<ReconTerms> {
    for (x, y) in [(recon_a, a), (recon_b, b)] {
        if x.shape() != y.shape() {
            return Err(Error::InvalidArgument(format!("reconstruction shape {:?} vs target {:?}", x.shape(), y.shape())));
        }
    }
    let la = rmse(recon_a, a);
    let lb = rmse(recon_b, b);
    let total = la.add(&lb);
    Ok(ReconTerms { a: la, b: lb, total })
}

/// `||a - aba|| + ||b - bab||`.
pub fn cycle_loss(a: &Tensor, aba: &Tensor, b: &Tensor, bab: &Tensor) -> Tensor {
    rmse(a, aba).add(&rmse(b, bab))
}

/// Generator and critic totals at one scale.
///
/// `gen_adv` are the four `-E D(fake)` terms and `critic` the four minimised
/// critic losses (GP included). The cycle term counts only when `cycle_active`.
pub fn total_losses(
    gen_adv: &[Tensor; 4],
    recon: &Tensor,
    cycle: Option<&Tensor>,
    critic: &[Tensor; 4],
    weights: &LossWeights,
    cycle_active: bool,
) -> (Tensor, Tensor) {
    let mut g = gen_adv[0].add(&gen_adv[1]).add(&gen_adv[2]).add(&gen_adv[3]);
    g = g.add(&recon.scale(weights.lambda_recon));
    if let (true, Some(c)) = (cycle_active, cycle) {
        g = g.add(&c.scale(weights.lambda_cycle));
    }
    let d = critic[0].add(&critic[1]).add(&critic[2]).add(&critic[3]);
    (g, d)
}

/// Per-iteration scalar breakdown written to the loss log.
///
/// `adv_*` are the generator-side terms `-E D(fake)` of the last generator
/// step (`A1`: unconditional A, `B1`: unconditional B, `A2`: B mapped into A,
/// `B2`: A mapped into B). `gp_*` sum the two penalties of each critic in the
/// last critic step.
///
/// `total_g = sum(adv) + lambda_recon * (recon_a + recon_b) + lambda_cycle * cycle`
/// (cycle is 0 where not applied); `total_d` is the minimised critic
/// objective, GP included.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_a1: f64,
    pub adv_b1: f64,
    pub adv_a2: f64,
    pub adv_b2: f64,
    pub gp_a: f64,
    pub gp_b: f64,
    pub recon_a: f64,
    pub recon_b: f64,
    pub cycle: f64,
    pub total_g: f64,
    pub total_d: f64,
    pub iteration: usize,
    pub scale: usize,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "adv_A1,adv_B1,adv_A2,adv_B2,gp_A,gp_B,recon_A,recon_B,cycle,total_G,total_D,iteration,scale";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.adv_a1,
            self.adv_b1,
            self.adv_a2,
            self.adv_b2,
            self.gp_a,
            self.gp_b,
            self.recon_a,
            self.recon_b,
            self.cycle,
            self.total_g,
            self.total_d,
            self.iteration,
            self.scale
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 13 {
            return Err(Error::InvalidArgument(format!("loss row has {} fields", f.len())));
        }
        let x = |i: usize| f[i].parse::<f64>().map_err(|e| Error::InvalidArgument(format!("field {i}: {e}")));
        let u = |i: usize| f[i].parse::<usize>().map_err(|e| Error::InvalidArgument(format!("field {i}: {e}")));
        Ok(Self {
            adv_a1: x(0)?,
            adv_b1: x(1)?,
            adv_a2: x(2)?,
            adv_b2: x(3)?,
            gp_a: x(4)?,
            gp_b: x(5)?,
            recon_a: x(6)?,
            recon_b: x(7)?,
            cycle: x(8)?,
            total_g: x(9)?,
            total_d: x(10)?,
            iteration: u(11)?,
            scale: u(12)?,
        })
    }

    pub fn is_finite(&self) -> bool {
        [
            self.adv_a1,
            self.adv_b1,
            self.adv_a2,
            self.adv_b2,
            self.gp_a,
            self.gp_b,
            self.recon_a,
            self.recon_b,
            self.cycle,
            self.total_g,
            self.total_d,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}
