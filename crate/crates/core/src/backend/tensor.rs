use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::BackendError;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static RECORDING: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording switched off. Results are plain values.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = RECORDING.with(|r| r.replace(false));
    let out = f();
    RECORDING.with(|r| r.set(prev));
    out
}

fn recording() -> bool {
    RECORDING.with(|r| r.get())
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Pow(Tensor, f64),
    Tanh(Tensor),
    MulConst(Tensor, Rc<Vec<f64>>),
    Sum(Tensor),
    Expand(Tensor),
    SumSpatial(Tensor),
    BroadcastSpatial(Tensor),
    Conv(Tensor, Tensor),
    ConvInputGrad(Tensor, Tensor),
    ConvWeightGrad(Tensor, Tensor),
    Resize(Tensor),
    ResizeAdjoint(Tensor),
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Reference-counted value on the differentiation tape.
///
/// Activations are channel-major `[C, H, W]`; scalars have shape `[1]`.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.0.shape).field("requires_grad", &self.0.requires_grad).finish()
    }
}

/// Value equality: same shape and bit-identical values.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape() == other.shape() && self.values() == other.values()
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, op: Op, parents_track: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let track = parents_track && recording();
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad: track,
            op: if track { op } else { Op::Leaf },
        }))
    }

    /// Leaf tensor; `requires_grad` makes it a differentiation target.
    pub fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length mismatch");
        Tensor(Rc::new(Node { id: NEXT_ID.fetch_add(1, Ordering::Relaxed), shape: shape.to_vec(), data, requires_grad, op: Op::Leaf }))
    }

    pub fn constant(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::leaf(shape, data, false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::constant(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::constant(&[1], vec![value])
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.0.data
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on a tensor with {} elements", self.len());
        self.0.data[0]
    }

    /// Same values, cut from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(&self.0.shape, self.0.data.clone())
    }

    /// Fresh leaf with the same values that requires a gradient.
    pub fn as_input(&self) -> Tensor {
        Tensor::leaf(&self.0.shape, self.0.data.clone(), true)
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    fn chw(&self) -> (usize, usize, usize) {
        match self.0.shape[..] {
            [c, h, w] => (c, h, w),
            _ => panic!("expected a [C, H, W] tensor, got {:?}", self.0.shape),
        }
    }

    fn assert_same_shape(&self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "elementwise op on mismatched shapes");
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.values().iter().zip(other.values()).map(|(&a, &b)| f(a, b)).collect()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.values().iter().map(|&a| f(a)).collect()
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other);
        let track = self.requires_grad() || other.requires_grad();
        Tensor::build(self.0.shape.clone(), self.zip(other, |a, b| a + b), Op::Add(self.clone(), other.clone()), track)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other);
        let track = self.requires_grad() || other.requires_grad();
        Tensor::build(self.0.shape.clone(), self.zip(other, |a, b| a - b), Op::Sub(self.clone(), other.clone()), track)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other);
        let track = self.requires_grad() || other.requires_grad();
        Tensor::build(self.0.shape.clone(), self.zip(other, |a, b| a * b), Op::Mul(self.clone(), other.clone()), track)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        Tensor::build(self.0.shape.clone(), self.map(|a| a * k), Op::Scale(self.clone(), k), self.requires_grad())
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, k: f64) -> Tensor {
        Tensor::build(self.0.shape.clone(), self.map(|a| a + k), Op::AddScalar(self.clone()), self.requires_grad())
    }

    /// Elementwise power with a constant exponent.
    pub fn powf(&self, p: f64) -> Tensor {
        Tensor::build(self.0.shape.clone(), self.map(|a| a.powf(p)), Op::Pow(self.clone(), p), self.requires_grad())
    }

    pub fn sqrt(&self) -> Tensor {
        self.powf(0.5)
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn tanh(&self) -> Tensor {
        Tensor::build(self.0.shape.clone(), self.map(f64::tanh), Op::Tanh(self.clone()), self.requires_grad())
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let mask: Vec<f64> = self.map(|a| if a > 0.0 { 1.0 } else { slope });
        self.mul_const(Rc::new(mask))
    }

    /// Elementwise product with a constant (non-differentiable) mask.
    pub fn mul_const(&self, mask: Rc<Vec<f64>>) -> Tensor {
        assert_eq!(mask.len(), self.len());
        let data = self.zip_slice(&mask, |a, b| a * b);
        Tensor::build(self.0.shape.clone(), data, Op::MulConst(self.clone(), mask), self.requires_grad())
    }

    fn zip_slice(&self, other: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.values().iter().zip(other).map(|(&a, &b)| f(a, b)).collect()
    }

    pub fn sum(&self) -> Tensor {
        let s = self.values().iter().sum();
        Tensor::build(vec![1], vec![s], Op::Sum(self.clone()), self.requires_grad())
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Broadcast a one-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Tensor {
        let v = self.item();
        let n = shape.iter().product();
        Tensor::build(shape.to_vec(), vec![v; n], Op::Expand(self.clone()), self.requires_grad())
    }

    /// `[C, H, W] -> [C]` sum over spatial positions.
    pub fn sum_spatial(&self) -> Tensor {
        let (c, h, w) = self.chw();
        let hw = h * w;
        let data = (0..c).map(|ch| self.values()[ch * hw..(ch + 1) * hw].iter().sum()).collect();
        Tensor::build(vec![c], data, Op::SumSpatial(self.clone()), self.requires_grad())
    }

    /// `[C] -> [C, H, W]` broadcast over spatial positions.
    pub fn broadcast_spatial(&self, h: usize, w: usize) -> Tensor {
        assert_eq!(self.shape().len(), 1, "broadcast_spatial expects a [C] tensor");
        let c = self.len();
        let mut data = Vec::with_capacity(c * h * w);
        for &v in self.values() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        Tensor::build(vec![c, h, w], data, Op::BroadcastSpatial(self.clone()), self.requires_grad())
    }

    /// 3x3 same-padded convolution with kernel `[Cout, Cin, 3, 3]`.
    pub fn conv3x3(&self, weight: &Tensor) -> Tensor {
        let (cin, h, w) = self.chw();
        let (cout, wcin) = conv_dims(weight);
        assert_eq!(cin, wcin, "conv input has {cin} channels, kernel expects {wcin}");
        let data = kernels::conv_forward(self.values(), cin, h, w, weight.values(), cout);
        let track = self.requires_grad() || weight.requires_grad();
        Tensor::build(vec![cout, h, w], data, Op::Conv(self.clone(), weight.clone()), track)
    }

    fn conv_input_grad(grad: &Tensor, weight: &Tensor) -> Tensor {
        let (cout, h, w) = grad.chw();
        let (_, cin) = conv_dims(weight);
        let data = kernels::conv_input_grad(grad.values(), cout, h, w, weight.values(), cin);
        let track = grad.requires_grad() || weight.requires_grad();
        Tensor::build(vec![cin, h, w], data, Op::ConvInputGrad(grad.clone(), weight.clone()), track)
    }

    fn conv_weight_grad(input: &Tensor, grad: &Tensor) -> Tensor {
        let (cin, h, w) = input.chw();
        let (cout, _, _) = grad.chw();
        let data = kernels::conv_weight_grad(input.values(), cin, h, w, grad.values(), cout);
        let track = input.requires_grad() || grad.requires_grad();
        Tensor::build(vec![cout, cin, kernels::KSIZE, kernels::KSIZE], data, Op::ConvWeightGrad(input.clone(), grad.clone()), track)
    }

    /// Bilinear resample to `(height, width)`.
    pub fn resize(&self, height: usize, width: usize) -> Tensor {
        let (c, h, w) = self.chw();
        let data = kernels::resize(self.values(), c, h, w, height, width);
        Tensor::build(vec![c, height, width], data, Op::Resize(self.clone()), self.requires_grad())
    }

    fn resize_adjoint(&self, height: usize, width: usize) -> Tensor {
        let (c, oh, ow) = self.chw();
        let data = kernels::resize_adjoint(self.values(), c, height, width, oh, ow);
        Tensor::build(vec![c, height, width], data, Op::ResizeAdjoint(self.clone()), self.requires_grad())
    }

    fn parents(&self) -> Vec<&Tensor> {
        match &self.0.op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Conv(a, b) | Op::ConvInputGrad(a, b) | Op::ConvWeightGrad(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Pow(a, _)
            | Op::Tanh(a)
            | Op::MulConst(a, _)
            | Op::Sum(a)
            | Op::Expand(a)
            | Op::SumSpatial(a)
            | Op::BroadcastSpatial(a)
            | Op::Resize(a)
            | Op::ResizeAdjoint(a) => vec![a],
        }
    }

    /// Vector-Jacobian product of this node for each parent flagged in `need`.
    fn backward(&self, g: &Tensor, need: &[bool]) -> Vec<Option<Tensor>> {
        let want = |i: usize| need.get(i).copied().unwrap_or(false);
        match &self.0.op {
            Op::Leaf => vec![],
            Op::Add(_, _) => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
            Op::Sub(_, _) => vec![want(0).then(|| g.clone()), want(1).then(|| g.neg())],
            Op::Mul(a, b) => vec![want(0).then(|| g.mul(b)), want(1).then(|| g.mul(a))],
            Op::Scale(_, k) => vec![Some(g.scale(*k))],
            Op::AddScalar(_) => vec![Some(g.clone())],
            Op::Pow(a, p) => vec![Some(g.mul(&a.powf(p - 1.0).scale(*p)))],
            Op::Tanh(_) => {
                let dy = self.square().neg().add_scalar(1.0);
                vec![Some(g.mul(&dy))]
            }
            Op::MulConst(_, m) => vec![Some(g.mul_const(m.clone()))],
            Op::Sum(a) => vec![Some(g.expand(a.shape()))],
            Op::Expand(_) => vec![Some(g.sum())],
            Op::SumSpatial(a) => {
                let (_, h, w) = a.chw();
                vec![Some(g.broadcast_spatial(h, w))]
            }
            Op::BroadcastSpatial(_) => vec![Some(g.sum_spatial())],
            Op::Conv(x, wt) => vec![want(0).then(|| Tensor::conv_input_grad(g, wt)), want(1).then(|| Tensor::conv_weight_grad(x, g))],
            // parents: (upstream grad of the forward conv, kernel)
            Op::ConvInputGrad(gy, wt) => vec![want(0).then(|| g.conv3x3(wt)), want(1).then(|| Tensor::conv_weight_grad(g, gy))],
            // parents: (forward input, upstream grad of the forward conv)
            Op::ConvWeightGrad(x, gy) => vec![want(0).then(|| Tensor::conv_input_grad(gy, g)), want(1).then(|| x.conv3x3(g))],
            Op::Resize(a) => {
                let (_, h, w) = a.chw();
                vec![Some(g.resize_adjoint(h, w))]
            }
            Op::ResizeAdjoint(a) => {
                let (_, h, w) = a.chw();
                vec![Some(g.resize(h, w))]
            }
        }
    }
}

fn conv_dims(weight: &Tensor) -> (usize, usize) {
    match weight.shape() {
        [o, i, 3, 3] => (*o, *i),
        s => panic!("expected a [Cout, Cin, 3, 3] kernel, got {s:?}"),
    }
}

/// Post-order over the recorded graph below `root`.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in node.parents() {
            if p.requires_grad() && !seen.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Reverse-mode gradients of a one-element `output` with respect to `wrt`.
///
/// With `create_graph`, the returned gradients are themselves on the tape
/// and can be differentiated again.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>, BackendError> {
    let grads = grad_inner(output, wrt, create_graph)?;
    grads.into_iter().enumerate().map(|(i, g)| g.ok_or(BackendError::Unreachable { index: i })).collect()
}

/// Like [`grad`], but targets that do not influence `output` get zeros.
pub fn grad_or_zero(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>, BackendError> {
    let grads = grad_inner(output, wrt, create_graph)?;
    Ok(grads.into_iter().zip(wrt).map(|(g, t)| g.unwrap_or_else(|| Tensor::zeros(t.shape()))).collect())
}

fn grad_inner(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Option<Tensor>>, BackendError> {
    if output.len() != 1 {
        return Err(BackendError::NotScalar { shape: output.shape().to_vec() });
    }
    if !output.requires_grad() {
        return Ok(vec![None; wrt.len()]);
    }
    let targets: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();
    let order = topo_order(output);

    // nodes whose gradient can reach a target
    let mut relevant: HashSet<u64> = HashSet::new();
    for node in &order {
        if targets.contains(&node.id()) || node.parents().iter().any(|p| relevant.contains(&p.id())) {
            relevant.insert(node.id());
        }
    }

    let run = || {
        let mut acc: HashMap<u64, Tensor> = HashMap::new();
        acc.insert(output.id(), Tensor::scalar(1.0));
        for node in order.iter().rev() {
            if !relevant.contains(&node.id()) {
                continue;
            }
            let parents = node.parents();
            if parents.is_empty() {
                continue;
            }
            let Some(g) = (if targets.contains(&node.id()) { acc.get(&node.id()).cloned() } else { acc.remove(&node.id()) }) else {
                continue;
            };
            let need: Vec<bool> = parents.iter().map(|p| relevant.contains(&p.id())).collect();
            for (p, pg) in parents.iter().zip(node.backward(&g, &need)) {
                let Some(pg) = pg else { continue };
                if !relevant.contains(&p.id()) {
                    continue;
                }
                match acc.remove(&p.id()) {
                    Some(prev) => acc.insert(p.id(), prev.add(&pg)),
                    None => acc.insert(p.id(), pg),
                };
            }
        }
        wrt.iter().map(|t| acc.get(&t.id()).cloned()).collect::<Vec<_>>()
    };

    let grads = if create_graph { run() } else { no_grad(run) };
    for g in grads.iter().flatten() {
        if !g.is_finite() {
            return Err(BackendError::NonFinite);
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
    }

    #[test]
    fn linear_map_gradient_is_the_weight() {
        let w = Tensor::constant(&[4], vec![0.5, -1.0, 2.0, 3.0]);
        let x = Tensor::leaf(&[4], vec![1.0, 2.0, 3.0, 4.0], true);
        let s = w.mul(&x).sum();
        let g = grad(&s, &[&x], false).unwrap();
        assert_eq!(g[0].values(), w.values());
    }

    #[test]
    fn squared_norm_gradient_is_twice_input() {
        let x = Tensor::leaf(&[3], vec![1.0, -2.0, 0.25], true);
        let s = x.square().sum();
        let g = grad(&s, &[&x], false).unwrap();
        assert!(vec_close(g[0].values(), &[2.0, -4.0, 0.5], 1e-15));
    }

    #[test]
    fn unreachable_target_is_an_error() {
        let x = Tensor::leaf(&[2], vec![1.0, 2.0], true);
        let y = Tensor::leaf(&[2], vec![1.0, 2.0], true);
        let s = x.sum();
        assert!(matches!(grad(&s, &[&y], false), Err(BackendError::Unreachable { index: 0 })));
        let z = grad_or_zero(&s, &[&y], false).unwrap();
        assert_eq!(z[0].values(), &[0.0, 0.0]);
    }

    #[test]
    fn no_grad_stops_recording() {
        let x = Tensor::leaf(&[2], vec![1.0, 2.0], true);
        let y = no_grad(|| x.scale(2.0));
        assert!(!y.requires_grad());
        assert!(x.scale(2.0).requires_grad());
    }

    #[test]
    fn non_scalar_output_rejected() {
        let x = Tensor::leaf(&[2], vec![1.0, 2.0], true);
        assert!(matches!(grad(&x.scale(1.0), &[&x], false), Err(BackendError::NotScalar { .. })));
    }
}
