//! Unconditional and conditional generation chains.
//!
//! Below the switch scale `k` generators work residually (they add detail on
//! top of their input); from `k` on they replace it. Scale 0 always maps
//! noise straight to an image.

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::rng::gaussian;
use crate::backend::Tensor;
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::networks::{Net, ScaleNets};
use crate::pyramid::ScaleSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }
}

impl ScaleNets {
    /// Generator for unconditional generation in `domain`.
    pub fn generator(&self, domain: Domain) -> &Net {
        match domain {
            Domain::A => &self.g_a,
            Domain::B => &self.g_b,
        }
    }

    /// Generator that maps images into `domain`.
    pub fn cond_generator(&self, domain: Domain) -> &Net {
        match domain {
            Domain::A => self.cond_a(),
            Domain::B => self.cond_b(),
        }
    }

    pub fn critic(&self, domain: Domain) -> &Net {
        match domain {
            Domain::A => &self.d_a,
            Domain::B => &self.d_b,
        }
    }
}

/// Which generation steps add their output to their input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualPolicy {
    /// Residual below `K`, replacing from `K` on.
    #[default]
    Standard,
    /// Residual at every scale above 0.
    All,
    /// Never residual.
    None,
}

impl ResidualPolicy {
    /// Effective switch scale handed to the step functions.
    pub fn switch_scale(self, k: usize, n_max: usize) -> usize {
        match self {
            ResidualPolicy::Standard => k,
            ResidualPolicy::All => n_max + 1,
            ResidualPolicy::None => 0,
        }
    }
}

/// Evaluation counts of each generation form, per thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BranchCounts {
    /// `G(z)` at scale 0.
    pub uncond_base: u64,
    /// `G(z + up) + up`.
    pub uncond_residual: u64,
    /// `G(z + up)`.
    pub uncond_plain: u64,
    /// `G(x) + x`.
    pub cond_residual: u64,
    /// `G(x)`.
    pub cond_plain: u64,
}

thread_local! {
    static COUNTS: Cell<BranchCounts> = Cell::new(BranchCounts::default());
}

pub fn branch_counts() -> BranchCounts {
    COUNTS.with(|c| c.get())
}

pub fn reset_branch_counts() {
    COUNTS.with(|c| c.set(BranchCounts::default()));
}

fn bump(f: impl FnOnce(&mut BranchCounts)) {
    COUNTS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

fn hw(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [c, h, w] if *c == CHANNELS => Ok((*h, *w)),
        s => Err(Error::InvalidArgument(format!("expected a [3, H, W] image tensor, got {s:?}"))),
    }
}

/// One unconditional step at scale `n`; `z` fixes the output size.
pub fn uncond_step(g: &Net, prev: Option<&Tensor>, z: &Tensor, n: usize, k: usize) -> Result<Tensor> {
    let (h, w) = hw(z)?;
    match (n, prev) {
        (0, None) => {
            bump(|c| c.uncond_base += 1);
            g.forward(z)
        }
        (0, Some(_)) => Err(Error::InvalidArgument("scale 0 takes no previous image".into())),
        (_, None) => Err(Error::InvalidArgument(format!("scale {n} needs the previous scale's image"))),
        (_, Some(p)) => {
            hw(p)?;
            let up = p.resize(h, w);
            let out = g.forward(&z.add(&up))?;
            if n < k {
                bump(|c| c.uncond_residual += 1);
                Ok(out.add(&up))
            } else {
                bump(|c| c.uncond_plain += 1);
                Ok(out)
            }
        }
    }
}

/// Deterministic conditional map at scale `n` into the generator's domain.
pub fn cond_map(g: &Net, x: &Tensor, n: usize, k: usize) -> Result<Tensor> {
    hw(x)?;
    let out = g.forward(x)?;
    if n < k {
        bump(|c| c.cond_residual += 1);
        Ok(out.add(x))
    } else {
        bump(|c| c.cond_plain += 1);
        Ok(out)
    }
}

/// Conditional map that also sees the upsampled translation from the
/// previous scale (the ablation where the conditional path is chained
/// across scales). The residual, when used, stays on `x`.
pub fn cond_map_with_prev(g: &Net, x: &Tensor, prev_translation: Option<&Tensor>, n: usize, k: usize) -> Result<Tensor> {
    let (h, w) = hw(x)?;
    let input = match prev_translation {
        Some(p) => x.add(&p.resize(h, w)),
        None => x.clone(),
    };
    let out = g.forward(&input)?;
    if n < k {
        bump(|c| c.cond_residual += 1);
        Ok(out.add(x))
    } else {
        bump(|c| c.cond_plain += 1);
        Ok(out)
    }
}

/// `x -> other(x) -> back`, only defined below the switch scale.
pub fn cycle_chain(to_other: &Net, back: &Net, x: &Tensor, n: usize, k: usize) -> Result<(Tensor, Tensor)> {
    if n >= k {
        return Err(Error::InvalidArgument(format!("cycle mapping is only defined below K = {k}, got scale {n}")));
    }
    let ab = cond_map(to_other, x, n, k)?;
    let aba = cond_map(back, &ab, n, k)?;
    Ok((ab, aba))
}

/// Noise level for a scale from the reconstruction residual (RMSE).
pub fn compute_sigma(recon_prev_up: &Image, target: &Image) -> Result<f64> {
    Ok(recon_prev_up.rmse(target)?.max(0.0))
}

/// Per-scale noise levels and the fixed reconstruction noise of each domain.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePlan {
    pub sigmas_a: Vec<f64>,
    pub sigmas_b: Vec<f64>,
    pub z_star_a: Tensor,
    pub z_star_b: Tensor,
    pub seed: u64,
}

pub const SIGMA_0: f64 = 1.0;

impl NoisePlan {
    pub fn new(z_star_a: Tensor, z_star_b: Tensor, seed: u64) -> Self {
        Self { sigmas_a: vec![], sigmas_b: vec![], z_star_a, z_star_b, seed }
    }

    pub fn sigma(&self, domain: Domain, n: usize) -> Result<f64> {
        let s = match domain {
            Domain::A => &self.sigmas_a,
            Domain::B => &self.sigmas_b,
        };
        s.get(n).copied().ok_or(Error::Untrained { requested: n, trained: s.len().checked_sub(1) })
    }

    pub fn z_star(&self, domain: Domain) -> &Tensor {
        match domain {
            Domain::A => &self.z_star_a,
            Domain::B => &self.z_star_b,
        }
    }

    /// Records `sigma` for the next untrained scale `n` of `domain`.
    pub fn set_sigma(&mut self, domain: Domain, n: usize, sigma: f64) -> Result<()> {
        let s = match domain {
            Domain::A => &mut self.sigmas_a,
            Domain::B => &mut self.sigmas_b,
        };
        if n > s.len() {
            return Err(Error::InvalidArgument(format!("sigma for scale {n} set before scale {}", s.len())));
        }
        s.truncate(n);
        s.push(sigma);
        Ok(())
    }
}

/// How the per-scale noise of a chain is produced.
pub enum ChainNoise<'a, R: Rng> {
    /// `z_n ~ N(0, sigma_n^2)`.
    Random(&'a mut R),
    /// `z_0 = z*`, zero above.
    Reconstruction,
    /// Zero noise at every scale (used above an injected image).
    Zero,
}

fn noise_for<R: Rng>(noise: &mut ChainNoise<'_, R>, plan: &NoisePlan, domain: Domain, n: usize, hw: (usize, usize)) -> Result<Tensor> {
    let shape = [CHANNELS, hw.0, hw.1];
    match noise {
        ChainNoise::Random(rng) => Ok(gaussian(*rng, &shape, plan.sigma(domain, n)?)),
        ChainNoise::Reconstruction if n == 0 => {
            let z = plan.z_star(domain);
            if z.shape() != shape {
                return Err(Error::DimensionMismatch { expected: hw, got: (z.shape()[1], z.shape()[2]) });
            }
            Ok(z.clone())
        }
        ChainNoise::Reconstruction | ChainNoise::Zero => Ok(Tensor::zeros(&shape)),
    }
}

/// Runs the unconditional chain of `domain`.
///
/// With `start = Some((s, image))` the chain is seeded with `image` as the
/// scale-`s` output and continues from `s + 1`; otherwise it starts at 0.
/// Returns every scale's output from the start to `stop`, inclusive.
#[allow(clippy::too_many_arguments)]
pub fn run_chain<R: Rng>(
    nets: &[ScaleNets],
    plan: &NoisePlan,
    sched: &ScaleSchedule,
    k: usize,
    domain: Domain,
    start: Option<(usize, Tensor)>,
    stop: usize,
    noise: &mut ChainNoise<'_, R>,
) -> Result<Vec<Tensor>> {
    if stop > sched.n_max {
        return Err(Error::ScaleOutOfRange { scale: stop as i64, max: sched.n_max });
    }
    if nets.len() <= stop {
        return Err(Error::Untrained { requested: stop, trained: nets.len().checked_sub(1) });
    }
    let mut outputs = Vec::new();
    let first = match start {
        Some((s, img)) => {
            if s > stop {
                return Err(Error::InvalidArgument(format!("chain start {s} beyond stop {stop}")));
            }
            let expect = sched.size(s);
            let got = hw(&img)?;
            if got != expect {
                return Err(Error::DimensionMismatch { expected: expect, got });
            }
            outputs.push(img);
            s + 1
        }
        None => 0,
    };
    for n in first..=stop {
        let size = sched.size(n);
        let z = noise_for(noise, plan, domain, n, size)?;
        let next = uncond_step(nets[n].generator(domain), outputs.last(), &z, n, k)?;
        outputs.push(next);
    }
    Ok(outputs)
}

/// Sample (`Random`) or reconstruct (`Reconstruction`) up to `stop`.
pub fn uncond_chain<R: Rng>(
    nets: &[ScaleNets],
    plan: &NoisePlan,
    sched: &ScaleSchedule,
    k: usize,
    domain: Domain,
    stop: usize,
    noise: &mut ChainNoise<'_, R>,
) -> Result<Tensor> {
    let mut outs = run_chain(nets, plan, sched, k, domain, None, stop, noise)?;
    Ok(outs.pop().expect("chain yields at least one scale"))
}
