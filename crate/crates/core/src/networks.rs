//! Five-block fully convolutional generators and patch critics.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backend::rng::{self, Purpose};
use crate::backend::{batch_norm, NormStats, ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::image::CHANNELS;

pub const BLOCKS: usize = 5;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetKind {
    Generator,
    Discriminator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub kind: NetKind,
    pub base_channels: usize,
}

impl NetSpec {
    pub fn generator(base_channels: usize) -> Self {
        Self { kind: NetKind::Generator, base_channels }
    }

    pub fn discriminator(base_channels: usize) -> Self {
        Self { kind: NetKind::Discriminator, base_channels }
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            NetKind::Generator => CHANNELS,
            NetKind::Discriminator => 1,
        }
    }

    /// Side of the square input window one output position sees.
    pub const fn receptive_field() -> usize {
        BLOCKS * 2 + 1
    }

    fn channels(&self, block: usize) -> (usize, usize) {
        let cin = if block == 0 { CHANNELS } else { self.base_channels };
        let cout = if block == BLOCKS - 1 { self.out_channels() } else { self.base_channels };
        (cin, cout)
    }
}

/// A network together with its parameters.
#[derive(Debug, Clone)]
pub struct Net {
    spec: NetSpec,
    params: ParameterSet,
}

fn weight_name(block: usize) -> String {
    format!("conv{block}.weight")
}

fn bias_name(block: usize) -> String {
    format!("conv{block}.bias")
}

impl Net {
    /// `N(0, 0.02)` convs, unit/zero batch-norm affine. A generator's last conv
    /// starts at zero so the generator initially outputs exactly zero.
    pub fn init(spec: NetSpec, rng: &mut impl Rng) -> Self {
        let mut params = ParameterSet::new();
        for b in 0..BLOCKS {
            let (cin, cout) = spec.channels(b);
            let last = b == BLOCKS - 1;
            let zero = last && spec.kind == NetKind::Generator;
            let n = cout * cin * 9;
            let w: Vec<f64> = (0..n).map(|_| if zero { 0.0 } else { INIT_STD * rng.sample::<f64, _>(StandardNormal) }).collect();
            params.insert(weight_name(b), &[cout, cin, 3, 3], w);
            params.insert(bias_name(b), &[cout], vec![0.0; cout]);
            if !last {
                params.insert(format!("bn{b}.gamma"), &[cout], vec![1.0; cout]);
                params.insert(format!("bn{b}.beta"), &[cout], vec![0.0; cout]);
            }
        }
        Self { spec, params }
    }

    /// Wraps loaded parameters, checking they fit `spec`.
    pub fn from_params(spec: NetSpec, params: ParameterSet) -> Result<Self> {
        let reference = Net::init(spec, &mut rng::stream(0, Purpose::Init, 0));
        if !reference.params.same_layout(&params) {
            return Err(Error::InvalidArgument(format!("parameter layout does not match {spec:?}")));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> NetSpec {
        self.spec
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    /// Independent copy (fresh tape leaves, same values).
    pub fn deep_copy(&self) -> Self {
        Self { spec: self.spec, params: self.params.deep_copy() }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        match x.shape() {
            [c, h, w] if *c == CHANNELS && *h > 0 && *w > 0 => Ok(()),
            s => Err(Error::InvalidArgument(format!("network input must be [3, H, W], got {s:?}"))),
        }
    }

    /// Generator: `[3, H, W]` in `(-1, 1)`. Critic: `[1, H, W]` unbounded scores.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.run(x, None).0)
    }

    /// Forward pass that can replay fixed batch-norm statistics.
    pub fn forward_with_stats(&self, x: &Tensor, fixed: Option<&[NormStats]>) -> Result<(Tensor, Vec<NormStats>)> {
        self.check_input(x)?;
        Ok(self.run(x, fixed))
    }

    fn run(&self, x: &Tensor, fixed: Option<&[NormStats]>) -> (Tensor, Vec<NormStats>) {
        let p = &self.params;
        let mut h = x.clone();
        let mut stats = Vec::with_capacity(BLOCKS - 1);
        for b in 0..BLOCKS {
            let bias = p.tensor(&bias_name(b));
            let (_, hh, ww) = (h.shape()[0], h.shape()[1], h.shape()[2]);
            h = h.conv3x3(p.tensor(&weight_name(b))).add(&bias.broadcast_spatial(hh, ww));
            if b < BLOCKS - 1 {
                let (y, s) = batch_norm(&h, p.tensor(&format!("bn{b}.gamma")), p.tensor(&format!("bn{b}.beta")), fixed.map(|f| &f[b]));
                stats.push(s);
                h = y.leaky_relu(LEAKY_SLOPE);
            } else if self.spec.kind == NetKind::Generator {
                h = h.tanh();
            }
        }
        (h, stats)
    }
}

/// Anything that scores an image per spatial position.
pub trait Critic {
    fn score_map(&self, x: &Tensor) -> Result<Tensor>;
}

impl Critic for Net {
    fn score_map(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

/// The four networks of one scale, plus optional separate conditional
/// generators used by the unshared-weights ablation.
#[derive(Debug, Clone)]
pub struct ScaleNets {
    pub scale: usize,
    pub g_a: Net,
    pub g_b: Net,
    pub d_a: Net,
    pub d_b: Net,
    pub g_a_cond: Option<Net>,
    pub g_b_cond: Option<Net>,
}

/// Stable names used for fingerprints and checkpoint files.
pub const NET_NAMES: [&str; 6] = ["G_A", "G_B", "D_A", "D_B", "Gc_A", "Gc_B"];

impl ScaleNets {
    pub fn width(&self) -> usize {
        self.g_a.spec().base_channels
    }

    /// Generator applied in conditional maps into domain A.
    pub fn cond_a(&self) -> &Net {
        self.g_a_cond.as_ref().unwrap_or(&self.g_a)
    }

    pub fn cond_b(&self) -> &Net {
        self.g_b_cond.as_ref().unwrap_or(&self.g_b)
    }

    pub fn named(&self) -> Vec<(&'static str, &Net)> {
        let mut v = vec![("G_A", &self.g_a), ("G_B", &self.g_b), ("D_A", &self.d_a), ("D_B", &self.d_b)];
        if let Some(n) = &self.g_a_cond {
            v.push(("Gc_A", n));
        }
        if let Some(n) = &self.g_b_cond {
            v.push(("Gc_B", n));
        }
        v
    }

    /// Combined fingerprint of every network at this scale.
    pub fn fingerprint(&self) -> String {
        self.named().iter().map(|(n, net)| format!("{n}:{}", net.fingerprint())).collect::<Vec<_>>().join(",")
    }
}

/// Fresh networks for `scale`, deterministic in `seed`.
pub fn make_scale_nets(base_channels: usize, scale: usize, seed: u64, separate_cond: bool) -> ScaleNets {
    let mut rng = rng::stream(seed, Purpose::Init, scale as u64);
    let g = NetSpec::generator(base_channels);
    let d = NetSpec::discriminator(base_channels);
    let g_a = Net::init(g, &mut rng);
    let g_b = Net::init(g, &mut rng);
    let d_a = Net::init(d, &mut rng);
    let d_b = Net::init(d, &mut rng);
    let (g_a_cond, g_b_cond) = if separate_cond { (Some(Net::init(g, &mut rng)), Some(Net::init(g, &mut rng))) } else { (None, None) };
    ScaleNets { scale, g_a, g_b, d_a, d_b, g_a_cond, g_b_cond }
}

/// Deep copy of the previous scale's networks as the starting point of `scale`.
pub fn init_from_previous(prev: &ScaleNets, scale: usize, base_channels: usize) -> Result<ScaleNets> {
    if prev.width() != base_channels {
        return Err(Error::InvalidArgument(format!("cannot copy width-{} networks into width-{base_channels} networks", prev.width())));
    }
    Ok(ScaleNets {
        scale,
        g_a: prev.g_a.deep_copy(),
        g_b: prev.g_b.deep_copy(),
        d_a: prev.d_a.deep_copy(),
        d_b: prev.d_b.deep_copy(),
        g_a_cond: prev.g_a_cond.as_ref().map(Net::deep_copy),
        g_b_cond: prev.g_b_cond.as_ref().map(Net::deep_copy),
    })
}
