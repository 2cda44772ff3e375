//! Reverse-mode differentiation over the small op set the networks need.
//!
//! Backward rules are written with the same differentiable ops, so a gradient
//! obtained with `create_graph = true` can be differentiated again. The
//! gradient penalty depends on that.

mod kernels;
mod param;
pub mod rng;
mod tensor;

use thiserror::Error;

pub use param::{Adam, AdamConfig, ParameterSet};
pub use tensor::{grad, grad_or_zero, no_grad, Tensor};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("gradient requested of a non-scalar output with shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("gradient target #{index} does not influence the output")]
    Unreachable { index: usize },
    #[error("non-finite gradient")]
    NonFinite,
    #[error("capability probe failed for {0}")]
    Capability(&'static str),
    #[error("malformed parameter data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-channel statistics a batch-norm layer normalised with.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch norm over the spatial positions of one `[C, H, W]` sample.
///
/// With `fixed` the layer becomes the affine map defined by those statistics,
/// which is how the conv stack's spatial receptive field is probed in
/// isolation. Returns the statistics used.
pub fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, fixed: Option<&NormStats>) -> (Tensor, NormStats) {
    let [c, h, w] = x.shape()[..] else {
        panic!("batch_norm expects [C, H, W], got {:?}", x.shape());
    };
    let inv_n = 1.0 / (h * w) as f64;
    match fixed {
        None => {
            let mean = x.sum_spatial().scale(inv_n);
            let centred = x.sub(&mean.broadcast_spatial(h, w));
            let var = centred.square().sum_spatial().scale(inv_n);
            let inv_std = var.add_scalar(BN_EPS).powf(-0.5);
            let y = centred.mul(&inv_std.mul(gamma).broadcast_spatial(h, w)).add(&beta.broadcast_spatial(h, w));
            let stats = NormStats { mean: mean.values().to_vec(), var: var.values().to_vec() };
            (y, stats)
        }
        Some(stats) => {
            assert_eq!(stats.mean.len(), c);
            let mean = Tensor::constant(&[c], stats.mean.clone());
            let inv_std = Tensor::constant(&[c], stats.var.iter().map(|v| (v + BN_EPS).powf(-0.5)).collect());
            let y =
                x.sub(&mean.broadcast_spatial(h, w)).mul(&inv_std.mul(gamma).broadcast_spatial(h, w)).add(&beta.broadcast_spatial(h, w));
            (y, stats.clone())
        }
    }
}

/// Operations every network and loss in this crate is built from.
pub const REQUIRED_OPS: &[&str] = &["conv3x3", "batch_norm", "leaky_relu", "tanh", "add", "scale", "resize", "l2_norm", "mean", "gaussian"];

/// Checks each op in [`REQUIRED_OPS`] and its gradient against central
/// differences on a tiny input. Fails on the first op that disagrees.
pub fn required_ops() -> Result<&'static [&'static str], BackendError> {
    let x0 = vec![0.3, -0.7, 0.9, 0.1, -0.2, 0.5, -0.4, 0.8];
    let shape = [2, 2, 2];
    let w0: Vec<f64> = (0..2 * 2 * 9).map(|i| ((i as f64) * 0.37).sin() * 0.5).collect();
    let probes: Vec<(&'static str, Box<dyn Fn(&Tensor) -> Tensor>)> = vec![
        ("conv3x3", Box::new(move |x| x.conv3x3(&Tensor::constant(&[2, 2, 3, 3], w0.clone())).square().sum())),
        (
            "batch_norm",
            Box::new(|x| {
                let g = Tensor::constant(&[2], vec![1.5, 0.5]);
                let b = Tensor::constant(&[2], vec![0.1, -0.1]);
                batch_norm(x, &g, &b, None).0.tanh().sum()
            }),
        ),
        ("leaky_relu", Box::new(|x| x.leaky_relu(0.2).square().sum())),
        ("tanh", Box::new(|x| x.tanh().sum())),
        ("add", Box::new(|x| x.add(&x.square()).sum())),
        ("scale", Box::new(|x| x.scale(-3.0).square().sum())),
        ("resize", Box::new(|x| x.resize(3, 5).square().sum())),
        ("l2_norm", Box::new(|x| x.square().sum().sqrt())),
        ("mean", Box::new(|x| x.square().mean())),
    ];
    for (name, f) in &probes {
        let x = Tensor::leaf(&shape, x0.clone(), true);
        let g = grad(&f(&x), &[&x], false).map_err(|_| BackendError::Capability(name))?;
        let h = 1e-5;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus[i] += h;
            let mut minus = x0.clone();
            minus[i] -= h;
            let fd = (f(&Tensor::constant(&shape, plus)).item() - f(&Tensor::constant(&shape, minus)).item()) / (2.0 * h);
            if (fd - g[0].values()[i]).abs() > 1e-5 * (1.0 + fd.abs()) {
                return Err(BackendError::Capability(name));
            }
        }
    }
    let a = rng::gaussian(&mut rng::stream(1, rng::Purpose::Noise, 0), &[4], 1.0);
    let b = rng::gaussian(&mut rng::stream(1, rng::Purpose::Noise, 0), &[4], 1.0);
    if a.values() != b.values() {
        return Err(BackendError::Capability("gaussian"));
    }
    Ok(REQUIRED_OPS)
}
