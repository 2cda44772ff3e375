//! Frame-by-frame video translation.
//!
//! Training draws the A image from the frames each iteration. Translation
//! refines every frame with the last two A generators under noise fixed for
//! the whole job, then maps it into B at the finest scale.

use rand::Rng;

use crate::backend::rng::{self, gaussian, Purpose};
use crate::backend::{no_grad, NormStats, Tensor};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::generation::Domain;
use crate::image::{Image, CHANNELS};
use crate::networks::Net;
use crate::pyramid::resize;
use crate::trainer::{train_frames_with, ModelBundle, RunHooks};

/// Trains a bundle whose A image is a uniformly drawn frame each iteration.
pub fn train_video(frames: &[Image], target: &Image, config: &TrainConfig, hooks: &mut RunHooks<'_>) -> Result<ModelBundle> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("video has no frames".into()));
    }
    train_frames_with(frames, target, config, hooks)
}

/// Batch-norm statistics of the three networks a frame passes through.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStats {
    pub coarse: Vec<NormStats>,
    pub fine: Vec<NormStats>,
    pub map: Vec<NormStats>,
}

/// Per-job state shared by all frames.
#[derive(Debug, Clone)]
pub struct VideoJob {
    /// Noise added at the finest scale.
    pub fixed_z_n: Tensor,
    /// Noise added at the scale below the finest.
    pub fixed_z_nm1: Tensor,
    pub quantize_colors: Option<usize>,
    /// Normalisation statistics frozen from the first frame so a frame's
    /// output depends only on nearby pixels; `None` uses each frame's own.
    pub norm: Option<FrameStats>,
    pub seed: u64,
}

impl VideoJob {
    /// Draws the fixed noise with the trained levels of domain A and, when
    /// `freeze_norm` is set, records normalisation statistics on `first_frame`.
    pub fn new(bundle: &ModelBundle, first_frame: &Image, seed: u64, quantize_colors: Option<usize>, freeze_norm: bool) -> Result<Self> {
        bundle.require_complete()?;
        let n = bundle.sched.n_max;
        let mut rng = rng::stream(seed, Purpose::FixedNoise, 2);
        let shape = |m: usize| {
            let (h, w) = bundle.sched.size(m);
            [CHANNELS, h, w]
        };
        let fixed_z_nm1 = gaussian(&mut rng, &shape(n - 1), bundle.plan.sigma(Domain::A, n - 1)?);
        let fixed_z_n = gaussian(&mut rng, &shape(n), bundle.plan.sigma(Domain::A, n)?);
        let mut job = Self { fixed_z_n, fixed_z_nm1, quantize_colors, norm: None, seed };
        if freeze_norm {
            let (_, stats) = run_frame(bundle, first_frame, &job)?;
            job.norm = Some(stats);
        }
        Ok(job)
    }
}

fn stage(g: &Net, input: &Tensor, residual: Option<&Tensor>, fixed: Option<&[NormStats]>) -> Result<(Tensor, Vec<NormStats>)> {
    let (out, stats) = g.forward_with_stats(input, fixed)?;
    Ok((residual.map_or(out.clone(), |r| out.add(r)), stats))
}

fn run_frame(bundle: &ModelBundle, frame: &Image, job: &VideoJob) -> Result<(Image, FrameStats)> {
    let n = bundle.sched.n_max;
    let k = bundle.switch_scale();
    let frame = match job.quantize_colors {
        Some(p) => quantize(frame, p, job.seed)?,
        None => frame.clone(),
    };
    let x = resize(&frame, bundle.sched.size(n - 1))?.to_tensor();
    if x.shape() != job.fixed_z_nm1.shape() {
        return Err(Error::InvalidArgument("job noise does not match the bundle's schedule".into()));
    }
    let fixed = job.norm.as_ref();
    no_grad(|| {
        let g_coarse = bundle.scale_nets[n - 1].generator(Domain::A);
        let (coarse, s1) = stage(g_coarse, &x.add(&job.fixed_z_nm1), (n - 1 < k).then_some(&x), fixed.map(|f| &f.coarse[..]))?;
        let (h, w) = bundle.sched.size(n);
        let up = coarse.resize(h, w);
        let g_fine = bundle.scale_nets[n].generator(Domain::A);
        let (refined, s2) = stage(g_fine, &up.add(&job.fixed_z_n), (n < k).then_some(&up), fixed.map(|f| &f.fine[..]))?;
        let g_map = bundle.scale_nets[n].cond_generator(Domain::B);
        let (mapped, s3) = stage(g_map, &refined, (n < k).then_some(&refined), fixed.map(|f| &f.map[..]))?;
        Ok((Image::from_tensor(&mapped)?.clamped(), FrameStats { coarse: s1, fine: s2, map: s3 }))
    })
}

/// `v_i`: the frame refined in domain A with the job's fixed noise and mapped into B.
pub fn translate_frame(bundle: &ModelBundle, frame: &Image, job: &VideoJob) -> Result<Image> {
    bundle.require_complete()?;
    Ok(run_frame(bundle, frame, job)?.0)
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Snaps every pixel to a k-means palette of at most `palette_size` colours.
pub fn quantize(img: &Image, palette_size: usize, seed: u64) -> Result<Image> {
    if palette_size == 0 {
        return Err(Error::InvalidArgument("palette size must be positive".into()));
    }
    let (h, w) = img.dims();
    let pixels: Vec<[f64; 3]> = (0..h * w).map(|i| img.pixel(i / w, i % w)).collect();
    let mut distinct: Vec<[f64; 3]> = pixels.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("pixels are finite"));
    distinct.dedup();
    if distinct.len() <= palette_size {
        return Ok(img.clone());
    }
    // k-means++ seeding over distinct colours
    let mut rng = rng::stream(seed, Purpose::Quantize, 0);
    let mut centres = vec![distinct[rng.random_range(0..distinct.len())]];
    while centres.len() < palette_size {
        let d: Vec<f64> = distinct.iter().map(|p| centres.iter().map(|c| dist2(*p, *c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = distinct.len() - 1;
        for (i, di) in d.iter().enumerate() {
            if pick < *di {
                chosen = i;
                break;
            }
            pick -= di;
        }
        centres.push(distinct[chosen]);
    }
    let nearest = |p: &[f64; 3], centres: &[[f64; 3]]| {
        (0..centres.len()).min_by(|&i, &j| dist2(*p, centres[i]).total_cmp(&dist2(*p, centres[j]))).expect("palette is not empty")
    };
    let mut assign = vec![usize::MAX; pixels.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in pixels.iter().enumerate() {
            let c = nearest(p, &centres);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0; 3]; centres.len()];
        let mut counts = vec![0usize; centres.len()];
        for (p, &c) in pixels.iter().zip(&assign) {
            for ch in 0..3 {
                sums[c][ch] += p[ch];
            }
            counts[c] += 1;
        }
        for (c, centre) in centres.iter_mut().enumerate() {
            if counts[c] > 0 {
                *centre = sums[c].map(|s| s / counts[c] as f64);
            }
        }
    }
    Ok(Image::from_fn(h, w, |ch, y, x| centres[assign[y * w + x]][ch]))
}

/// Number of distinct colours in `img`.
pub fn count_colors(img: &Image) -> usize {
    let (h, w) = img.dims();
    let mut v: Vec<[u64; 3]> = (0..h * w).map(|i| img.pixel(i / w, i % w).map(f64::to_bits)).collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}
