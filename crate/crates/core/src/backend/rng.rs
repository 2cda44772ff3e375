use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// Independent random streams split from one root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init,
    Noise,
    Epsilon,
    FrameDraw,
    FixedNoise,
    Inference,
    Extractor,
    Quantize,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x1a17,
            Purpose::Noise => 0x2b05,
            Purpose::Epsilon => 0x3e95,
            Purpose::FrameDraw => 0x4f4a,
            Purpose::FixedNoise => 0x5f1d,
            Purpose::Inference => 0x6e7f,
            Purpose::Extractor => 0x7e47,
            Purpose::Quantize => 0x8a11,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stream for `(root, purpose, index)`; changing one purpose never shifts another.
pub fn stream(root: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let seed = splitmix(splitmix(splitmix(root) ^ purpose.tag()) ^ index);
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::constant(shape, data)
}
