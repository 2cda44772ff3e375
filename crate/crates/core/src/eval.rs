//! Single-image FID between internal feature statistics of two images.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::backend::rng::{self, gaussian, Purpose};
use crate::backend::{no_grad, ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

/// Eigenvalues below `-PSD_TOLERANCE` are reported before being clamped.
pub const PSD_TOLERANCE: f64 = 1e-6;

/// Deterministic map from an image to per-position feature vectors.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    /// `positions x dim` matrix, one row per spatial position.
    fn features(&self, img: &Image) -> Result<DMatrix<f64>>;
}

/// A stack of 3x3 "same" convolutions with leaky ReLUs between them.
#[derive(Debug, Clone)]
pub struct ConvExtractor {
    layers: Vec<(Tensor, Tensor)>,
}

impl ConvExtractor {
    /// Seeded random weights (He scaling), `depth` layers of width `dim`.
    pub fn random(seed: u64, depth: usize, dim: usize) -> Self {
        let mut rng = rng::stream(seed, Purpose::Extractor, 0);
        let mut layers = Vec::with_capacity(depth);
        let mut cin = CHANNELS;
        for _ in 0..depth {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            let w = gaussian(&mut rng, &[dim, cin, 3, 3], std);
            layers.push((w, Tensor::zeros(&[dim])));
            cin = dim;
        }
        Self { layers }
    }

    /// The default extractor: five seeded layers of 32 features.
    pub fn default_random() -> Self {
        Self::random(0, 5, 32)
    }

    /// Adapter for externally trained weights: a parameter file with
    /// `layer{i}.weight` (`[out, in, 3, 3]`) and `layer{i}.bias` (`[out]`),
    /// `in` of the first layer being 3.
    pub fn from_params(params: &ParameterSet) -> Result<Self> {
        let mut layers = Vec::new();
        let mut cin = CHANNELS;
        while let Some(w) = params.get(&format!("layer{}.weight", layers.len())) {
            let i = layers.len();
            let b = params.get(&format!("layer{i}.bias")).ok_or_else(|| Error::InvalidArgument(format!("layer{i}.bias missing")))?;
            match w.shape() {
                [o, c, 3, 3] if *c == cin && b.shape() == [*o] => cin = *o,
                s => return Err(Error::InvalidArgument(format!("layer{i}.weight has shape {s:?} after {cin} channels"))),
            }
            layers.push((w.detach(), b.detach()));
        }
        if layers.is_empty() {
            return Err(Error::InvalidArgument("extractor parameters contain no layer0.weight".into()));
        }
        Ok(Self { layers })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_params(&ParameterSet::read_from(std::io::BufReader::new(f))?)
    }
}

impl FeatureExtractor for ConvExtractor {
    fn dim(&self) -> usize {
        self.layers.last().map_or(0, |(w, _)| w.shape()[0])
    }

    fn features(&self, img: &Image) -> Result<DMatrix<f64>> {
        let (h, w) = img.dims();
        let out = no_grad(|| {
            let mut x = img.to_tensor();
            for (i, (wt, b)) in self.layers.iter().enumerate() {
                x = x.conv3x3(wt).add(&b.broadcast_spatial(h, w));
                if i + 1 < self.layers.len() {
                    x = x.leaky_relu(0.2);
                }
            }
            x
        });
        let d = self.dim();
        let hw = h * w;
        let v = out.values();
        Ok(DMatrix::from_fn(hw, d, |p, c| v[c * hw + p]))
    }
}

/// Mean and population covariance of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub d: usize,
    pub count: usize,
}

impl FeatureStats {
    pub fn from_features(f: &DMatrix<f64>) -> Result<Self> {
        let (count, d) = f.shape();
        if count == 0 || d == 0 {
            return Err(Error::InvalidArgument("empty feature map".into()));
        }
        if count < d {
            warn!("only {count} positions for {d}-dimensional features; covariance is rank deficient");
        }
        let mu = DVector::from_fn(d, |c, _| f.column(c).sum() / count as f64);
        let mut centred = f.clone();
        for c in 0..d {
            centred.column_mut(c).add_scalar_mut(-mu[c]);
        }
        let mut sigma = centred.transpose() * &centred / count as f64;
        // exact symmetry
        sigma = (&sigma + sigma.transpose()) * 0.5;
        Ok(Self { mu, sigma, d, count })
    }
}

pub fn patch_stats(img: &Image, extractor: &dyn FeatureExtractor) -> Result<FeatureStats> {
    FeatureStats::from_features(&extractor.features(img)?)
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
        if min < -PSD_TOLERANCE * scale {
            warn!("{what}: clamping eigenvalue {min:e} to zero");
        }
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`.
///
/// The trace of `(S1 S2)^(1/2)` is taken as that of the symmetric
/// `(S1^(1/2) S2 S1^(1/2))^(1/2)`, which has the same eigenvalues.
pub fn frechet_distance(s1: &FeatureStats, s2: &FeatureStats) -> Result<f64> {
    if s1.d != s2.d {
        return Err(Error::InvalidArgument(format!("feature dimensions differ: {} vs {}", s1.d, s2.d)));
    }
    let diff = &s1.mu - &s2.mu;
    let r1 = psd_sqrt(&s1.sigma, "first covariance");
    let inner = &r1 * &s2.sigma * &r1;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut cross = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -PSD_TOLERANCE * scale {
            warn!("covariance product: clamping eigenvalue {v:e} to zero");
        }
        cross += v.max(0.0).sqrt();
    }
    let d = diff.dot(&diff) + s1.sigma.trace() + s2.sigma.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

pub fn sifid(reference: &Image, candidate: &Image, extractor: &dyn FeatureExtractor) -> Result<f64> {
    frechet_distance(&patch_stats(reference, extractor)?, &patch_stats(candidate, extractor)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub mean: f64,
    pub scores: Vec<(PathBuf, f64)>,
}

impl EvalSummary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("file,sifid\n");
        for (p, v) in &self.scores {
            let _ = writeln!(s, "{},{v}", p.display());
        }
        let _ = writeln!(s, "mean,{}", self.mean);
        s
    }
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("png" | "jpg" | "jpeg"))
}

/// SIFID of every image file in `dir` (sorted by name) against `reference`.
pub fn eval_batch(reference: &Image, dir: &Path, extractor: &dyn FeatureExtractor) -> Result<EvalSummary> {
    let mut files: Vec<PathBuf> =
        std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file() && is_image(p)).collect();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no images in {}", dir.display())));
    }
    files.sort();
    let reference_stats = patch_stats(reference, extractor)?;
    let mut scores = Vec::with_capacity(files.len());
    for f in files {
        let img = Image::load(&f)?;
        scores.push((f, frechet_distance(&reference_stats, &patch_stats(&img, extractor)?)?));
    }
    let mean = scores.iter().map(|(_, v)| v).sum::<f64>() / scores.len() as f64;
    Ok(EvalSummary { mean, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(mu: &[f64], sigma: DMatrix<f64>) -> FeatureStats {
        FeatureStats { mu: DVector::from_column_slice(mu), d: mu.len(), count: 100, sigma }
    }

    fn texture() -> Image {
        Image::from_fn(24, 24, |c, y, x| 0.6 * ((x as f64) * 0.5 + c as f64).sin() * ((y as f64) * 0.35).cos())
    }

    #[test]
    fn two_position_closed_form() {
        let f = DMatrix::from_row_slice(2, 2, &[0.0, 5.0, 2.0, 5.0]);
        let s = FeatureStats::from_features(&f).unwrap();
        assert_eq!(s.mu[0], 1.0);
        assert_eq!(s.sigma[(0, 0)], 1.0);
        assert_eq!(s.sigma[(1, 1)], 0.0);
    }

    #[test]
    fn constant_features_have_zero_covariance() {
        let f = DMatrix::from_element(10, 3, 0.25);
        assert!(FeatureStats::from_features(&f).unwrap().sigma.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frechet_closed_forms() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let s1 = stats(&[0.0, 1.0], a.clone());
        let s2 = stats(&[3.0, -3.0], a);
        assert!((frechet_distance(&s1, &s2).unwrap() - 25.0).abs() < 1e-8);
        assert!(frechet_distance(&s1, &s1).unwrap().abs() < 1e-8);
        let i = stats(&[0.5, 0.5], DMatrix::identity(2, 2));
        let four = stats(&[0.5, 0.5], DMatrix::identity(2, 2) * 4.0);
        assert!((frechet_distance(&i, &four).unwrap() - 2.0).abs() < 1e-8);
        assert!(frechet_distance(&i, &stats(&[0.0], DMatrix::identity(1, 1))).is_err());
    }

    #[test]
    fn sifid_orders_noise_after_identity() {
        let ex = ConvExtractor::default_random();
        let x = texture();
        assert!(sifid(&x, &x, &ex).unwrap().abs() < 1e-8);
        let mut rng = rng::stream(1, Purpose::Noise, 0);
        let noise =
            Image::new(24, 24, gaussian(&mut rng, &[3, 24, 24], 0.6).values().iter().map(|v| v.clamp(-1.0, 1.0)).collect()).unwrap();
        assert!(sifid(&x, &noise, &ex).unwrap() > 1e-3);
    }

    #[test]
    fn extractor_is_deterministic_and_adaptable() {
        let a = ConvExtractor::random(4, 3, 8);
        let b = ConvExtractor::random(4, 3, 8);
        let x = texture();
        assert_eq!(a.features(&x).unwrap(), b.features(&x).unwrap());
        let mut p = ParameterSet::new();
        for (i, (w, bias)) in a.layers.iter().enumerate() {
            p.insert(format!("layer{i}.weight"), w.shape(), w.values().to_vec());
            p.insert(format!("layer{i}.bias"), bias.shape(), bias.values().to_vec());
        }
        let c = ConvExtractor::from_params(&p).unwrap();
        assert_eq!(c.features(&x).unwrap(), a.features(&x).unwrap());
        assert!(ConvExtractor::from_params(&ParameterSet::new()).is_err());
    }

    #[test]
    fn batch_over_directory() {
        let dir = tempfile::tempdir().unwrap();
        let ex = ConvExtractor::random(0, 2, 6);
        assert!(eval_batch(&texture(), dir.path(), &ex).is_err());
        let reference = Image::from_rgb8(&texture().to_rgb8());
        reference.save(dir.path().join("a.png")).unwrap();
        let single = eval_batch(&reference, dir.path(), &ex).unwrap();
        assert_eq!(single.scores.len(), 1);
        assert!(single.mean.abs() < 1e-8);
        reference.save(dir.path().join("b.png")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let both = eval_batch(&reference, dir.path(), &ex).unwrap();
        assert_eq!(both.scores.len(), 2);
        assert!(both.mean.abs() < 1e-8);
        assert!(both.to_csv().starts_with("file,sifid\n"));
    }

    fn random_stats(seed: u64, d: usize) -> FeatureStats {
        let mut rng = rng::stream(seed, Purpose::Noise, 9);
        let f = gaussian(&mut rng, &[3 * d, d], 1.0);
        FeatureStats::from_features(&DMatrix::from_row_slice(3 * d, d, f.values())).unwrap()
    }

    proptest! {
        #[test]
        fn frechet_is_symmetric_and_non_negative(a in 0u64..1000, b in 0u64..1000, d in 1usize..6) {
            let s1 = random_stats(a, d);
            let s2 = random_stats(b, d);
            let x = frechet_distance(&s1, &s2).unwrap();
            let y = frechet_distance(&s2, &s1).unwrap();
            prop_assert!(x >= 0.0);
            prop_assert!((x - y).abs() < 1e-8);
        }

        #[test]
        fn stats_ignore_position_order(seed in 0u64..1000) {
            let mut rng = rng::stream(seed, Purpose::Noise, 2);
            let f = DMatrix::from_row_slice(12, 3, gaussian(&mut rng, &[12, 3], 1.0).values());
            let mut rows: Vec<usize> = (0..12).collect();
            rows.reverse();
            rows.swap(0, 5);
            let g = f.select_rows(rows.iter());
            let (s, t) = (FeatureStats::from_features(&f).unwrap(), FeatureStats::from_features(&g).unwrap());
            prop_assert!((s.mu - t.mu).norm() < 1e-12);
            prop_assert!((s.sigma - t.sigma).norm() < 1e-12);
        }
    }
}
