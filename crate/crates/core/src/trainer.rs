//! Coarse-to-fine training of the coupled per-scale GANs.

use std::path::PathBuf;

use log::{debug, info};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backend::rng::{self, gaussian, Purpose};
use crate::backend::{grad_or_zero, no_grad, Adam, AdamConfig, Tensor};
use crate::checkpoint;
use crate::config::{Objective, TrainConfig};
use crate::error::{Error, Result};
use crate::generation::{cond_map, cond_map_with_prev, run_chain, uncond_step, ChainNoise, Domain, NoisePlan, SIGMA_0};
use crate::image::{Image, CHANNELS};
use crate::losses::{critic_loss, cycle_loss, generator_adv_loss, rmse, sample_epsilon, total_losses, LossReport};
use crate::networks::{init_from_previous, make_scale_nets, Net, ScaleNets};
use crate::pyramid::{build_pyramid, prepare, resize, ScaleSchedule};

/// Everything a trained (or partially trained) model consists of.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    /// Trained scales, `scale_nets[n].scale == n`.
    pub scale_nets: Vec<ScaleNets>,
    pub plan: NoisePlan,
    pub sched: ScaleSchedule,
    pub config: TrainConfig,
}

impl ModelBundle {
    pub fn trained_up_to(&self) -> Option<usize> {
        self.scale_nets.len().checked_sub(1)
    }

    pub fn is_complete(&self) -> bool {
        self.scale_nets.len() == self.sched.num_scales()
    }

    /// Scale from which generators stop adding their input.
    pub fn switch_scale(&self) -> usize {
        self.config.ablation.residual_policy.switch_scale(self.sched.k, self.sched.n_max)
    }

    pub fn fingerprints(&self) -> Vec<String> {
        self.scale_nets.iter().map(ScaleNets::fingerprint).collect()
    }

    pub fn require_complete(&self) -> Result<()> {
        if self.is_complete() {
            Ok(())
        } else {
            Err(Error::Untrained { requested: self.sched.n_max, trained: self.trained_up_to() })
        }
    }
}

/// Pyramids of the training images as tensors.
///
/// Domain A may hold several frames (video training); the first one anchors
/// the reconstruction path and the noise levels.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub sched: ScaleSchedule,
    frames_a: Vec<Vec<Tensor>>,
    pyr_b: Vec<Tensor>,
}

fn to_tensors(pyr: &[Image]) -> Vec<Tensor> {
    pyr.iter().map(Image::to_tensor).collect()
}

impl TrainingData {
    /// The schedule comes from the first A frame; every other image is
    /// resampled to its finest size first.
    pub fn new(frames_a: &[Image], img_b: &Image, config: &TrainConfig) -> Result<Self> {
        let first = frames_a.first().ok_or_else(|| Error::InvalidArgument("no A images given".into()))?;
        if let Some(f) = frames_a.iter().find(|f| f.dims() != first.dims()) {
            return Err(Error::DimensionMismatch { expected: first.dims(), got: f.dims() });
        }
        let s = &config.schedule;
        let (sched, pyr0) = prepare(first, s.r, s.min_size, s.max_size, s.k_offset)?;
        let mut frames = vec![to_tensors(&pyr0)];
        for f in &frames_a[1..] {
            frames.push(to_tensors(&build_pyramid(&resize(f, sched.finest())?, &sched)?));
        }
        let pyr_b = to_tensors(&build_pyramid(&resize(img_b, sched.finest())?, &sched)?);
        Ok(Self { sched, frames_a: frames, pyr_b })
    }

    pub fn num_frames(&self) -> usize {
        self.frames_a.len()
    }

    fn real(&self, domain: Domain, frame: usize, n: usize) -> &Tensor {
        match domain {
            Domain::A => &self.frames_a[frame][n],
            Domain::B => &self.pyr_b[n],
        }
    }
}

/// Progress notifications, in the order they happen.
pub enum TrainEvent<'a> {
    /// Networks of `scale` are initialised; `frozen` holds the trained scales.
    ScaleStart {
        scale: usize,
        nets: &'a ScaleNets,
        frozen: &'a [ScaleNets],
    },
    SigmaSet {
        scale: usize,
        domain: Domain,
        sigma: f64,
    },
    /// Noise is about to be drawn at the scale being trained for the first time.
    FirstNoise {
        scale: usize,
    },
    Iteration(&'a LossReport),
    ScaleEnd {
        scale: usize,
        bundle: &'a ModelBundle,
    },
}

/// Optional side channels of a training run.
#[derive(Default)]
pub struct RunHooks<'a> {
    /// Directory that receives a checkpoint after every scale.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this scale has been trained.
    pub stop_after: Option<usize>,
    pub observer: Option<&'a mut dyn FnMut(&TrainEvent<'_>)>,
}

impl RunHooks<'_> {
    fn emit(&mut self, e: TrainEvent<'_>) {
        if let Some(f) = self.observer.as_mut() {
            f(&e);
        }
    }
}

/// Fresh bundle with no trained scales.
pub fn new_bundle(data: &TrainingData, config: &TrainConfig) -> Result<ModelBundle> {
    config.validate()?;
    let size0 = data.sched.size(0);
    let shape = [CHANNELS, size0.0, size0.1];
    let z_a = gaussian(&mut rng::stream(config.seed, Purpose::FixedNoise, 0), &shape, SIGMA_0);
    let z_b = gaussian(&mut rng::stream(config.seed, Purpose::FixedNoise, 1), &shape, SIGMA_0);
    Ok(ModelBundle { scale_nets: Vec::new(), plan: NoisePlan::new(z_a, z_b, config.seed), sched: data.sched.clone(), config: *config })
}

pub fn train_pair(img_a: &Image, img_b: &Image, config: &TrainConfig) -> Result<ModelBundle> {
    train_pair_with(img_a, img_b, config, &mut RunHooks::default())
}

pub fn train_pair_with(img_a: &Image, img_b: &Image, config: &TrainConfig, hooks: &mut RunHooks<'_>) -> Result<ModelBundle> {
    train_frames_with(std::slice::from_ref(img_a), img_b, config, hooks)
}

/// Trains on A frames drawn uniformly each iteration; one frame is plain
/// pair training.
pub fn train_frames_with(frames_a: &[Image], img_b: &Image, config: &TrainConfig, hooks: &mut RunHooks<'_>) -> Result<ModelBundle> {
    config.validate()?;
    let data = TrainingData::new(frames_a, img_b, config)?;
    let mut bundle = new_bundle(&data, config)?;
    if let Some(dir) = &hooks.checkpoint_dir {
        checkpoint::start_log(dir)?;
    }
    continue_training(&mut bundle, &data, hooks)?;
    Ok(bundle)
}

/// Trains the remaining scales of `bundle` (all of them for a fresh one).
pub fn continue_training(bundle: &mut ModelBundle, data: &TrainingData, hooks: &mut RunHooks<'_>) -> Result<()> {
    if data.sched != bundle.sched {
        return Err(Error::Schedule("training images do not match the bundle's schedule".into()));
    }
    let first = bundle.scale_nets.len();
    for n in first..bundle.sched.num_scales() {
        if hooks.stop_after.is_some_and(|s| n > s) {
            break;
        }
        let reports = train_scale(bundle, data, n, hooks)?;
        if let Some(dir) = &hooks.checkpoint_dir {
            checkpoint::append_log(dir, &reports)?;
            checkpoint::save(bundle, dir)?;
        }
        hooks.emit(TrainEvent::ScaleEnd { scale: n, bundle });
    }
    Ok(())
}

/// Continues an interrupted run from its checkpoint directory. The images
/// must be the ones the run started with.
pub fn resume(dir: &std::path::Path, frames_a: &[Image], img_b: &Image, hooks: &mut RunHooks<'_>) -> Result<ModelBundle> {
    let mut bundle = checkpoint::load(dir)?;
    let data = TrainingData::new(frames_a, img_b, &bundle.config)?;
    if data.sched != bundle.sched {
        return Err(Error::Schedule(format!(
            "images give sizes {:?} but the checkpoint was trained on {:?}",
            data.sched.sizes, bundle.sched.sizes
        )));
    }
    if hooks.checkpoint_dir.is_none() {
        hooks.checkpoint_dir = Some(dir.to_path_buf());
    }
    if let Some(d) = &hooks.checkpoint_dir {
        checkpoint::truncate_log(d, bundle.scale_nets.len())?;
    }
    info!("resuming after scale {:?}", bundle.trained_up_to());
    continue_training(&mut bundle, &data, hooks)?;
    Ok(bundle)
}

fn adam(config: &TrainConfig, net: &Net) -> Adam {
    Adam::new(AdamConfig { lr: config.lr, beta1: config.beta1, beta2: config.beta2, eps: 1e-8 }, net.params())
}

/// Reconstruction output of both domains at scale `n`, from frozen scales only.
pub fn reconstruction_at(
    nets: &[ScaleNets],
    plan: &NoisePlan,
    sched: &ScaleSchedule,
    k: usize,
    domain: Domain,
    n: usize,
) -> Result<Tensor> {
    no_grad(|| {
        let outs = run_chain::<ChaCha8Rng>(nets, plan, sched, k, domain, None, n, &mut ChainNoise::Reconstruction)?;
        Ok(outs.into_iter().last().expect("chain is not empty"))
    })
}

/// What a scale's iterations need besides the networks being trained.
struct ScaleCtx<'a> {
    frozen: &'a [ScaleNets],
    plan: &'a NoisePlan,
    sched: &'a ScaleSchedule,
    config: &'a TrainConfig,
    n: usize,
    k: usize,
    /// Upsampled-from reconstruction inputs of scale `n - 1`.
    rec_prev: [Option<Tensor>; 2],
}

struct Fakes {
    a: Tensor,
    b: Option<Tensor>,
    /// A sample mapped into B.
    ab: Option<Tensor>,
    /// B sample mapped into A.
    ba: Option<Tensor>,
}

fn idx(d: Domain) -> usize {
    match d {
        Domain::A => 0,
        Domain::B => 1,
    }
}

impl ScaleCtx<'_> {
    fn pair(&self) -> bool {
        self.config.objective == Objective::Pair
    }

    /// Frozen random chain to `n - 1`: the last image and, for the
    /// prev-translation variant, its translation into the other domain.
    fn frozen_sample(&self, domain: Domain, rng: &mut ChaCha8Rng) -> Result<(Option<Tensor>, Option<Tensor>)> {
        if self.n == 0 {
            return Ok((None, None));
        }
        no_grad(|| {
            let outs = run_chain(self.frozen, self.plan, self.sched, self.k, domain, None, self.n - 1, &mut ChainNoise::Random(rng))?;
            let mut translation = None;
            if self.config.ablation.condition_on_prev_translation && self.pair() {
                for (m, x) in outs.iter().enumerate() {
                    let g = self.frozen[m].cond_generator(domain.other());
                    translation = Some(cond_map_with_prev(g, x, translation.as_ref(), m, self.k)?);
                }
            }
            Ok((outs.last().cloned(), translation))
        })
    }

    fn translate(&self, cur: &ScaleNets, to: Domain, x: &Tensor, prev_translation: Option<&Tensor>) -> Result<Tensor> {
        let g = cur.cond_generator(to);
        if self.config.ablation.condition_on_prev_translation {
            cond_map_with_prev(g, x, prev_translation, self.n, self.k)
        } else {
            cond_map(g, x, self.n, self.k)
        }
    }

    fn fakes(&self, cur: &ScaleNets, rng: &mut ChaCha8Rng) -> Result<Fakes> {
        let (h, w) = self.sched.size(self.n);
        let mut sample = |domain: Domain| -> Result<(Tensor, Option<Tensor>)> {
            let (prev, translation) = self.frozen_sample(domain, rng)?;
            let z = gaussian(rng, &[CHANNELS, h, w], self.plan.sigma(domain, self.n)?);
            Ok((uncond_step(cur.generator(domain), prev.as_ref(), &z, self.n, self.k)?, translation))
        };
        let (a, ta) = sample(Domain::A)?;
        if !self.pair() {
            return Ok(Fakes { a, b: None, ab: None, ba: None });
        }
        let (b, tb) = sample(Domain::B)?;
        let ab = self.translate(cur, Domain::B, &a, ta.as_ref())?;
        let ba = self.translate(cur, Domain::A, &b, tb.as_ref())?;
        Ok(Fakes { a, b: Some(b), ab: Some(ab), ba: Some(ba) })
    }

    fn reconstruction(&self, cur: &ScaleNets, domain: Domain) -> Result<Tensor> {
        if self.n == 0 {
            uncond_step(cur.generator(domain), None, self.plan.z_star(domain), 0, self.k)
        } else {
            let (h, w) = self.sched.size(self.n);
            uncond_step(cur.generator(domain), self.rec_prev[idx(domain)].as_ref(), &Tensor::zeros(&[CHANNELS, h, w]), self.n, self.k)
        }
    }
}

struct Optimisers {
    g_a: Adam,
    g_b: Adam,
    d_a: Adam,
    d_b: Adam,
    gc_a: Option<Adam>,
    gc_b: Option<Adam>,
}

fn step_nets(total: &Tensor, nets: &mut [(&mut Net, &mut Adam)]) -> Result<()> {
    let grads = {
        let params: Vec<&Tensor> = nets.iter().flat_map(|(n, _)| n.params().tensors()).collect();
        grad_or_zero(total, &params, false)?
    };
    let mut offset = 0;
    for (net, opt) in nets.iter_mut() {
        let len = net.params().len();
        opt.step(net.params_mut(), &grads[offset..offset + len]);
        offset += len;
    }
    Ok(())
}

fn non_finite(what: &str, n: usize, it: usize) -> Error {
    Error::NonFinite { what: what.into(), scale: n, iteration: it }
}

/// Trains scale `n` and appends it to the bundle. Scales below `n` are
/// read-only throughout.
pub fn train_scale(bundle: &mut ModelBundle, data: &TrainingData, n: usize, hooks: &mut RunHooks<'_>) -> Result<Vec<LossReport>> {
    if bundle.scale_nets.len() != n {
        return Err(Error::InvalidArgument(format!(
            "scale {n} can only follow scale {} (trained scales: {})",
            n.saturating_sub(1),
            bundle.scale_nets.len()
        )));
    }
    if n > bundle.sched.n_max {
        return Err(Error::ScaleOutOfRange { scale: n as i64, max: bundle.sched.n_max });
    }
    let config = bundle.config;
    let k = bundle.switch_scale();
    let separate = !config.ablation.shared_cond_uncond;
    let mut cur = match (n, config.ablation.scale_weight_copy) {
        (0, _) | (_, false) => make_scale_nets(config.base_channels, n, config.seed, separate),
        (_, true) => init_from_previous(&bundle.scale_nets[n - 1], n, config.base_channels)?,
    };
    hooks.emit(TrainEvent::ScaleStart { scale: n, nets: &cur, frozen: &bundle.scale_nets });

    let mut rec_prev = [None, None];
    for domain in [Domain::A, Domain::B] {
        let sigma = if n == 0 {
            SIGMA_0
        } else {
            let rec = reconstruction_at(&bundle.scale_nets, &bundle.plan, &bundle.sched, k, domain, n - 1)?;
            let (h, w) = bundle.sched.size(n);
            let up = rec.resize(h, w);
            let s = rmse(&up, data.real(domain, 0, n)).item();
            rec_prev[idx(domain)] = Some(rec);
            s
        };
        bundle.plan.set_sigma(domain, n, sigma)?;
        hooks.emit(TrainEvent::SigmaSet { scale: n, domain, sigma });
    }
    info!("scale {n}: size {:?}, sigma A {:.4}, sigma B {:.4}", bundle.sched.size(n), bundle.plan.sigmas_a[n], bundle.plan.sigmas_b[n]);

    let ctx = ScaleCtx { frozen: &bundle.scale_nets, plan: &bundle.plan, sched: &bundle.sched, config: &config, n, k, rec_prev };
    let mut opt = Optimisers {
        g_a: adam(&config, &cur.g_a),
        g_b: adam(&config, &cur.g_b),
        d_a: adam(&config, &cur.d_a),
        d_b: adam(&config, &cur.d_b),
        gc_a: cur.g_a_cond.as_ref().map(|g| adam(&config, g)),
        gc_b: cur.g_b_cond.as_ref().map(|g| adam(&config, g)),
    };
    let mut noise_rng = rng::stream(config.seed, Purpose::Noise, n as u64);
    let mut eps_rng = rng::stream(config.seed, Purpose::Epsilon, n as u64);
    let mut frame_rng = rng::stream(config.seed, Purpose::FrameDraw, n as u64);
    let pair = ctx.pair();
    let cycle_active = pair && config.ablation.cycle_scope.applies(n, bundle.sched.k);
    let w = config.weights;
    hooks.emit(TrainEvent::FirstNoise { scale: n });

    let mut reports = Vec::with_capacity(config.iters_per_scale);
    for it in 0..config.iters_per_scale {
        let frame = frame_rng.random_range(0..data.num_frames());
        let real_a = data.real(Domain::A, frame, n);
        let real_b = data.real(Domain::B, 0, n);
        let mut report = LossReport { iteration: it, scale: n, ..Default::default() };

        let mut critic_scalars = [Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(0.0)];
        for _ in 0..config.d_steps {
            let f = no_grad(|| ctx.fakes(&cur, &mut noise_rng))?;
            let mode = config.gp_mode;
            let a1 = critic_loss(&cur.d_a, real_a, &f.a, sample_epsilon(&mut eps_rng), &w, mode)?;
            let mut total_a = a1.loss.clone();
            let mut gp_a = a1.gp.item();
            critic_scalars[0] = a1.loss.detach();
            if let Some(ba) = &f.ba {
                let a2 = critic_loss(&cur.d_a, real_a, ba, sample_epsilon(&mut eps_rng), &w, mode)?;
                total_a = total_a.add(&a2.loss);
                gp_a += a2.gp.item();
                critic_scalars[2] = a2.loss.detach();
            }
            if !total_a.is_finite() {
                return halt(bundle, cur, hooks, reports, non_finite("critic loss of domain A", n, it));
            }
            step_nets(&total_a, &mut [(&mut cur.d_a, &mut opt.d_a)])?;
            report.gp_a = gp_a;
            if let (Some(b), Some(ab)) = (&f.b, &f.ab) {
                let b1 = critic_loss(&cur.d_b, real_b, b, sample_epsilon(&mut eps_rng), &w, mode)?;
                let b2 = critic_loss(&cur.d_b, real_b, ab, sample_epsilon(&mut eps_rng), &w, mode)?;
                let total_b = b1.loss.add(&b2.loss);
                if !total_b.is_finite() {
                    return halt(bundle, cur, hooks, reports, non_finite("critic loss of domain B", n, it));
                }
                step_nets(&total_b, &mut [(&mut cur.d_b, &mut opt.d_b)])?;
                report.gp_b = b1.gp.item() + b2.gp.item();
                critic_scalars[1] = b1.loss.detach();
                critic_scalars[3] = b2.loss.detach();
            }
        }

        for _ in 0..config.g_steps {
            let f = ctx.fakes(&cur, &mut noise_rng)?;
            let zero = Tensor::scalar(0.0);
            let adv = [
                generator_adv_loss(&cur.d_a, &f.a)?,
                f.b.as_ref().map_or(Ok(zero.clone()), |b| generator_adv_loss(&cur.d_b, b))?,
                f.ba.as_ref().map_or(Ok(zero.clone()), |ba| generator_adv_loss(&cur.d_a, ba))?,
                f.ab.as_ref().map_or(Ok(zero.clone()), |ab| generator_adv_loss(&cur.d_b, ab))?,
            ];
            let recon_a = rmse(&ctx.reconstruction(&cur, Domain::A)?, data.real(Domain::A, 0, n));
            let recon_b = if pair { rmse(&ctx.reconstruction(&cur, Domain::B)?, real_b) } else { zero.clone() };
            let cycle = match (cycle_active, &f.b, &f.ab, &f.ba) {
                (true, Some(b), Some(ab), Some(ba)) => {
                    let aba = cond_map(cur.cond_generator(Domain::A), ab, n, k)?;
                    let bab = cond_map(cur.cond_generator(Domain::B), ba, n, k)?;
                    Some(cycle_loss(&f.a, &aba, b, &bab))
                }
                _ => None,
            };
            let recon = recon_a.add(&recon_b);
            let (total_g, total_d) = total_losses(&adv, &recon, cycle.as_ref(), &critic_scalars, &w, cycle_active);
            if !total_g.is_finite() {
                return halt(bundle, cur, hooks, reports, non_finite("generator loss", n, it));
            }
            report.adv_a1 = adv[0].item();
            report.adv_b1 = adv[1].item();
            report.adv_a2 = adv[2].item();
            report.adv_b2 = adv[3].item();
            report.recon_a = recon_a.item();
            report.recon_b = recon_b.item();
            report.cycle = cycle.as_ref().map_or(0.0, Tensor::item);
            report.total_g = total_g.item();
            report.total_d = total_d.item();
            let mut targets: Vec<(&mut Net, &mut Adam)> = vec![(&mut cur.g_a, &mut opt.g_a)];
            if pair {
                targets.push((&mut cur.g_b, &mut opt.g_b));
                if let (Some(g), Some(o)) = (cur.g_a_cond.as_mut(), opt.gc_a.as_mut()) {
                    targets.push((g, o));
                }
                if let (Some(g), Some(o)) = (cur.g_b_cond.as_mut(), opt.gc_b.as_mut()) {
                    targets.push((g, o));
                }
            }
            step_nets(&total_g, &mut targets)?;
        }
        if !report.is_finite() {
            return halt(bundle, cur, hooks, reports, non_finite("loss report", n, it));
        }
        if it % 50 == 0 || it + 1 == config.iters_per_scale {
            debug!(
                "scale {n} iter {it}: total_G {:.4} total_D {:.4} recon {:.4}/{:.4}",
                report.total_g, report.total_d, report.recon_a, report.recon_b
            );
        }
        hooks.emit(TrainEvent::Iteration(&report));
        reports.push(report);
    }
    bundle.scale_nets.push(cur);
    Ok(reports)
}

/// Saves what has been trained plus the diverged scale, then reports `err`.
fn halt(bundle: &ModelBundle, cur: ScaleNets, hooks: &RunHooks<'_>, reports: Vec<LossReport>, err: Error) -> Result<Vec<LossReport>> {
    if let Some(dir) = &hooks.checkpoint_dir {
        checkpoint::append_log(dir, &reports)?;
        checkpoint::save(bundle, dir)?;
        checkpoint::save_partial(&cur, dir)?;
    }
    log::error!("{err}; training halted");
    Err(err)
}
