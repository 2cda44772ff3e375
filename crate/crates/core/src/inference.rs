//! Translation, random analogies and refinement with a trained bundle.
//!
//! Nothing here mutates the bundle; every function runs without a tape.

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::rng::{self, gaussian, Purpose};
use crate::backend::{no_grad, Tensor};
use crate::config::Objective;
use crate::error::{Error, Result};
use crate::generation::{cond_map, cond_map_with_prev, run_chain, uncond_step, ChainNoise, Domain};
use crate::image::{grid, Image, CHANNELS};
use crate::pyramid::resize;
use crate::trainer::{reconstruction_at, ModelBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[serde(rename = "a2b")]
    AToB,
    #[serde(rename = "b2a")]
    BToA,
}

impl Direction {
    pub fn source(self) -> Domain {
        match self {
            Direction::AToB => Domain::A,
            Direction::BToA => Domain::B,
        }
    }

    pub fn target(self) -> Domain {
        self.source().other()
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a2b" | "ab" => Ok(Direction::AToB),
            "b2a" | "ba" => Ok(Direction::BToA),
            _ => Err(Error::InvalidArgument(format!("direction must be a2b or b2a, got {s:?}"))),
        }
    }
}

/// Noise used while super-resolving above the injected image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// `z_n ~ N(0, sigma_n^2)` with the trained levels.
    #[default]
    Random,
    /// Deterministic zero-noise pass.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceRequest {
    pub direction: Direction,
    /// Injection scale; negative values count back from the finest scale.
    pub inject: i64,
    /// Scale of the early conditional map, if any.
    pub early: Option<i64>,
    pub seed: u64,
    pub noise: NoiseMode,
}

impl Default for InferenceRequest {
    fn default() -> Self {
        Self { direction: Direction::AToB, inject: -2, early: None, seed: 0, noise: NoiseMode::Random }
    }
}

fn require_pair(bundle: &ModelBundle) -> Result<()> {
    bundle.require_complete()?;
    if bundle.config.objective != Objective::Pair {
        return Err(Error::InvalidArgument("this bundle has no conditional networks (refinement model)".into()));
    }
    Ok(())
}

fn inference_rng(seed: u64) -> ChaCha8Rng {
    rng::stream(seed, Purpose::Inference, 0)
}

fn to_image(t: &Tensor) -> Result<Image> {
    Ok(Image::from_tensor(t)?.clamped())
}

/// Continues the unconditional chain of `domain` from `x` at scale `from`
/// up to `to`, returning every scale's image (starting with `x`).
fn super_resolve(
    bundle: &ModelBundle,
    domain: Domain,
    x: Tensor,
    from: usize,
    to: usize,
    noise: NoiseMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Tensor>> {
    let k = bundle.switch_scale();
    let mut chain = match noise {
        NoiseMode::Random => ChainNoise::Random(rng),
        NoiseMode::Zero => ChainNoise::Zero,
    };
    run_chain(&bundle.scale_nets, &bundle.plan, &bundle.sched, k, domain, Some((from, x)), to, &mut chain)
}

/// Conditional map into `target` of the last image of `chain` (whose first
/// element sits at scale `first`). The prev-translation variant maps every
/// scale of the chain in turn.
fn map_into(bundle: &ModelBundle, target: Domain, chain: &[Tensor], first: usize) -> Result<Tensor> {
    let k = bundle.switch_scale();
    let last = first + chain.len() - 1;
    if bundle.config.ablation.condition_on_prev_translation {
        let mut t: Option<Tensor> = None;
        for (i, x) in chain.iter().enumerate() {
            let m = first + i;
            t = Some(cond_map_with_prev(bundle.scale_nets[m].cond_generator(target), x, t.as_ref(), m, k)?);
        }
        Ok(t.expect("chain is not empty"))
    } else {
        cond_map(bundle.scale_nets[last].cond_generator(target), chain.last().expect("chain is not empty"), last, k)
    }
}

/// Injects `source` at scale `S`, super-resolves it in its own domain to the
/// finest scale and maps the result into the other domain.
pub fn translate(bundle: &ModelBundle, source: &Image, req: &InferenceRequest) -> Result<Image> {
    require_pair(bundle)?;
    let s = bundle.sched.resolve(req.inject)?;
    let n = bundle.sched.n_max;
    translate_early_inner(bundle, source, req, s, n)
}

/// Like [`translate`] but maps at `S'` and finishes the chain in the target domain.
pub fn translate_early(bundle: &ModelBundle, source: &Image, req: &InferenceRequest, s_prime: i64) -> Result<Image> {
    require_pair(bundle)?;
    let s = bundle.sched.resolve(req.inject)?;
    let sp = bundle.sched.resolve(s_prime)?;
    if sp <= s {
        return Err(Error::InvalidArgument(format!("early mapping scale {sp} must exceed the injection scale {s}")));
    }
    translate_early_inner(bundle, source, req, s, sp)
}

fn translate_early_inner(bundle: &ModelBundle, source: &Image, req: &InferenceRequest, s: usize, sp: usize) -> Result<Image> {
    let n = bundle.sched.n_max;
    let injected = resize(source, bundle.sched.size(s))?.to_tensor();
    no_grad(|| {
        let mut rng = inference_rng(req.seed);
        let chain = super_resolve(bundle, req.direction.source(), injected, s, sp, req.noise, &mut rng)?;
        let mapped = map_into(bundle, req.direction.target(), &chain, s)?;
        let out = if sp == n {
            mapped
        } else {
            let rest = super_resolve(bundle, req.direction.target(), mapped, sp, n, req.noise, &mut rng)?;
            rest.into_iter().last().expect("chain is not empty")
        };
        to_image(&out)
    })
}

/// A random unconditional sample of the source domain and its translation.
pub fn random_analogy(bundle: &ModelBundle, req: &InferenceRequest) -> Result<(Image, Image)> {
    require_pair(bundle)?;
    let n = bundle.sched.n_max;
    no_grad(|| {
        let mut rng = inference_rng(req.seed);
        let chain = run_chain(
            &bundle.scale_nets,
            &bundle.plan,
            &bundle.sched,
            bundle.switch_scale(),
            req.direction.source(),
            None,
            n,
            &mut ChainNoise::Random(&mut rng),
        )?;
        let mapped = map_into(bundle, req.direction.target(), &chain, 0)?;
        Ok((to_image(chain.last().expect("chain is not empty"))?, to_image(&mapped)?))
    })
}

/// One translation per injection scale `0..=N`.
pub fn injection_sweep(bundle: &ModelBundle, source: &Image, req: &InferenceRequest) -> Result<Vec<(usize, Image)>> {
    (0..=bundle.sched.n_max).map(|s| Ok((s, translate(bundle, source, &InferenceRequest { inject: s as i64, ..*req })?))).collect()
}

/// One translation per early mapping scale `S' in S+1..=N`.
pub fn early_sweep(bundle: &ModelBundle, source: &Image, req: &InferenceRequest) -> Result<Vec<(usize, Image)>> {
    let s = bundle.sched.resolve(req.inject)?;
    (s + 1..=bundle.sched.n_max).map(|sp| Ok((sp, translate_early(bundle, source, req, sp as i64)?))).collect()
}

/// Runs `image` through the unconditional chain of a refinement bundle,
/// entering at scale `insert` (as the input of that scale's generator).
pub fn refine(refiner: &ModelBundle, image: &Image, insert: i64, seed: u64, noise: NoiseMode) -> Result<Image> {
    refiner.require_complete()?;
    let s = refiner.sched.resolve(insert)?;
    if s == 0 {
        return Err(Error::InvalidArgument("refinement needs an insertion scale of at least 1".into()));
    }
    let k = refiner.switch_scale();
    let x = resize(image, refiner.sched.size(s))?.to_tensor();
    no_grad(|| {
        let mut rng = inference_rng(seed);
        let mut out = x;
        for m in s..=refiner.sched.n_max {
            let (h, w) = refiner.sched.size(m);
            let z = match noise {
                NoiseMode::Random => gaussian(&mut rng, &[CHANNELS, h, w], refiner.plan.sigma(Domain::A, m)?),
                NoiseMode::Zero => Tensor::zeros(&[CHANNELS, h, w]),
            };
            out = uncond_step(refiner.scale_nets[m].generator(Domain::A), Some(&out), &z, m, k)?;
        }
        to_image(&out)
    })
}

/// Reconstruction of `domain` at scale `n`.
pub fn reconstruction(bundle: &ModelBundle, domain: Domain, n: usize) -> Result<Image> {
    if n >= bundle.scale_nets.len() {
        return Err(Error::Untrained { requested: n, trained: bundle.trained_up_to() });
    }
    to_image(&reconstruction_at(&bundle.scale_nets, &bundle.plan, &bundle.sched, bundle.switch_scale(), domain, n)?)
}

/// Preview of trained scale `n`: per domain (rows A, B) the reconstruction,
/// a random sample and that sample mapped into the other domain.
pub fn preview_grid(bundle: &ModelBundle, n: usize, seed: u64) -> Result<Image> {
    if n >= bundle.scale_nets.len() {
        return Err(Error::Untrained { requested: n, trained: bundle.trained_up_to() });
    }
    let k = bundle.switch_scale();
    let pair = bundle.config.objective == Objective::Pair;
    let mut rows = Vec::new();
    for domain in [Domain::A, Domain::B] {
        if !pair && domain == Domain::B {
            break;
        }
        let row = no_grad(|| -> Result<Vec<Image>> {
            let mut rng = inference_rng(seed);
            let rec = reconstruction(bundle, domain, n)?;
            let chain = run_chain(&bundle.scale_nets, &bundle.plan, &bundle.sched, k, domain, None, n, &mut ChainNoise::Random(&mut rng))?;
            let mut row = vec![rec, to_image(chain.last().expect("chain is not empty"))?];
            if pair {
                row.push(to_image(&map_into(bundle, domain.other(), &chain, 0)?)?);
            }
            Ok(row)
        })?;
        rows.push(row);
    }
    grid(&rows, 2)
}

/// Random samples (top row) above their translations (bottom row).
pub fn sample_grid(bundle: &ModelBundle, direction: Direction, count: usize, seed: u64) -> Result<Image> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let mut top = Vec::with_capacity(count);
    let mut bottom = Vec::with_capacity(count);
    for i in 0..count {
        let req = InferenceRequest { direction, seed: seed.wrapping_add(i as u64), ..Default::default() };
        let (s, m) = random_analogy(bundle, &req)?;
        top.push(s);
        bottom.push(m);
    }
    grid(&[top, bottom], 2)
}
