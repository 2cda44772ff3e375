//! Scale schedule and bilinear resampling shared by training and inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

/// Smallest side any scale may have.
pub const MIN_SIDE: usize = 4;

/// Per-scale image sizes, coarsest (scale 0) to finest (scale `n_max`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    /// Shrink ratio between consecutive scales, `0 < r < 1`.
    pub r: f64,
    /// Index of the finest scale.
    pub n_max: usize,
    /// First scale that uses non-residual generation.
    pub k: usize,
    /// `(height, width)` for each scale.
    pub sizes: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    pub fn num_scales(&self) -> usize {
        self.n_max + 1
    }

    pub fn size(&self, n: usize) -> (usize, usize) {
        self.sizes[n]
    }

    pub fn finest(&self) -> (usize, usize) {
        self.sizes[self.n_max]
    }

    /// Resolves a possibly negative (relative to the finest) scale index.
    pub fn resolve(&self, scale: i64) -> Result<usize> {
        let abs = if scale < 0 { self.n_max as i64 + scale } else { scale };
        if abs < 0 || abs > self.n_max as i64 {
            return Err(Error::ScaleOutOfRange { scale, max: self.n_max });
        }
        Ok(abs as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::Schedule(format!("ratio {} outside (0, 1)", self.r)));
        }
        if self.sizes.len() != self.n_max + 1 || self.n_max == 0 {
            return Err(Error::Schedule("size table does not match the scale count".into()));
        }
        if self.k > self.n_max + 1 {
            return Err(Error::Schedule(format!("K = {} exceeds N + 1 = {}", self.k, self.n_max + 1)));
        }
        for pair in self.sizes.windows(2) {
            if pair[0].0 >= pair[1].0 || pair[0].1 >= pair[1].1 {
                return Err(Error::Schedule(format!("sizes not strictly increasing: {:?} -> {:?}", pair[0], pair[1])));
            }
        }
        Ok(())
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Dimensions after shrinking so the longest side is at most `max_size`.
pub fn fit_dims((h, w): (usize, usize), max_size: usize) -> (usize, usize) {
    let longest = h.max(w);
    if longest <= max_size {
        return (h, w);
    }
    let s = max_size as f64 / longest as f64;
    (round_half_up(h as f64 * s).max(1), round_half_up(w as f64 * s).max(1))
}

/// Builds the size table for a source image.
///
/// The finest scale is the source fitted to `max_size`; `n_max` is the largest
/// count of `r` shrinks that keeps the shorter side at or above `min_size`.
/// `K = N - k_offset`.
pub fn build_schedule(source_hw: (usize, usize), r: f64, min_size: usize, max_size: usize, k_offset: i64) -> Result<ScaleSchedule> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Schedule(format!("ratio {r} outside (0, 1)")));
    }
    if min_size == 0 || min_size >= max_size {
        return Err(Error::Schedule(format!("need 0 < min_size < max_size, got {min_size} and {max_size}")));
    }
    if source_hw.0 == 0 || source_hw.1 == 0 {
        return Err(Error::Schedule("empty source image".into()));
    }
    let finest = fit_dims(source_hw, max_size);
    let shorter = finest.0.min(finest.1) as f64;
    let mut n_max = 0usize;
    while round_half_up(shorter * r.powi(n_max as i32 + 1)) >= min_size {
        n_max += 1;
        if n_max > 64 {
            return Err(Error::Schedule("schedule does not terminate".into()));
        }
    }
    if n_max == 0 {
        return Err(Error::Schedule(format!(
            "a {}x{} image gives a single scale with min_size {min_size}; at least two are required",
            finest.0, finest.1
        )));
    }
    let sizes: Vec<(usize, usize)> = (0..=n_max)
        .map(|n| {
            if n == n_max {
                return finest;
            }
            let f = r.powi((n_max - n) as i32);
            (round_half_up(finest.0 as f64 * f), round_half_up(finest.1 as f64 * f))
        })
        .collect();
    if sizes[0].0.min(sizes[0].1) < MIN_SIDE {
        return Err(Error::Schedule(format!("coarsest scale {:?} is below {MIN_SIDE} px", sizes[0])));
    }
    let k = n_max as i64 - k_offset;
    if k < 0 || k > n_max as i64 + 1 {
        return Err(Error::Schedule(format!("K = N - {k_offset} = {k} outside 0..=N+1")));
    }
    let sched = ScaleSchedule { r, n_max, k: k as usize, sizes };
    sched.validate()?;
    Ok(sched)
}

/// Bilinear resample to `target`, clamped to `[-1, 1]`. Same-size is an exact copy.
pub fn resize(img: &Image, target: (usize, usize)) -> Result<Image> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::InvalidArgument(format!("resize target {target:?}")));
    }
    if img.dims() == target {
        return Ok(img.clone());
    }
    let t = img.to_tensor().resize(target.0, target.1);
    Ok(Image::new(target.0, target.1, t.values().to_vec())?.clamped())
}

/// `pyramid[n]` is `img` resampled to `sched.sizes[n]`; the last level is `img`.
pub fn build_pyramid(img: &Image, sched: &ScaleSchedule) -> Result<Vec<Image>> {
    if img.dims() != sched.finest() {
        return Err(Error::DimensionMismatch { expected: sched.finest(), got: img.dims() });
    }
    sched.sizes.iter().map(|&hw| resize(img, hw)).collect()
}

/// Fits `img` to `max_size` and builds its schedule and pyramid together.
pub fn prepare(img: &Image, r: f64, min_size: usize, max_size: usize, k_offset: i64) -> Result<(ScaleSchedule, Vec<Image>)> {
    let sched = build_schedule(img.dims(), r, min_size, max_size, k_offset)?;
    let fitted = resize(img, sched.finest())?;
    let pyr = build_pyramid(&fitted, &sched)?;
    Ok((sched, pyr))
}

/// Channel-mean of an image; handy for constant-preservation checks.
pub fn mean(img: &Image) -> f64 {
    img.data().iter().sum::<f64>() / (CHANNELS * img.height() * img.width()) as f64
}
