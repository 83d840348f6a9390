//! A small define-by-run reverse-mode autodiff engine.
//!
//! Every vector-Jacobian product is itself written in terms of differentiable
//! [`Var`] operations, so gradients can be differentiated again
//! (`create_graph = true`). The gradient penalty needs exactly that: the norm
//! of an input gradient is part of the critic objective.
//!
//! Nodes are immutable and reference counted; a graph lives as long as the
//! last `Var` pointing into it.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::resample::Resampler;
use crate::tensor::{self, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone)]
pub struct Var(Arc<Node>);

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

struct GradFn {
    op: Op,
    inputs: Vec<Var>,
}

enum Op {
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f32),
    AddScalar,
    MulConst(Tensor),
    Square,
    Sqrt,
    SafeRecip,
    Tanh,
    SumAll,
    BroadcastScalar,
    ReduceSpatial,
    BroadcastChannel,
    Conv { pad: usize },
    ConvWeightGrad { pad: usize, k: usize },
    FlipTranspose,
    ReflectPad(usize),
    ReflectPadAdjoint(usize),
    Resample { fwd: Arc<Resampler>, adj: Arc<Resampler> },
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    fn leaf(value: Tensor, requires_grad: bool) -> Var {
        Var(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad_fn: None,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Var {
        Self::leaf(value, false)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(value: Tensor) -> Var {
        Self::leaf(value, true)
    }

    fn from_op(value: Tensor, op: Op, inputs: Vec<Var>) -> Var {
        let requires_grad = inputs.iter().any(|v| v.0.requires_grad);
        Var(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad_fn: requires_grad.then_some(GradFn { op, inputs }),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f32 {
        self.0.value.item()
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn add(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(v, Op::Add, vec![self.clone(), other.clone()])
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(v, Op::Sub, vec![self.clone(), other.clone()])
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a * b);
        Var::from_op(v, Op::Mul, vec![self.clone(), other.clone()])
    }

    pub fn neg(&self) -> Var {
        Var::from_op(self.value().map(|a| -a), Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, c: f32) -> Var {
        Var::from_op(self.value().map(|a| a * c), Op::Scale(c), vec![self.clone()])
    }

    pub fn add_scalar(&self, c: f32) -> Var {
        Var::from_op(self.value().map(|a| a + c), Op::AddScalar, vec![self.clone()])
    }

    /// Elementwise product with a tensor that is treated as constant.
    pub fn mul_const(&self, c: &Tensor) -> Var {
        let v = self.value().zip_map(c, |a, b| a * b);
        Var::from_op(v, Op::MulConst(c.clone()), vec![self.clone()])
    }

    pub fn square(&self) -> Var {
        Var::from_op(self.value().map(|a| a * a), Op::Square, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Var {
        Var::from_op(self.value().map(f32::sqrt), Op::Sqrt, vec![self.clone()])
    }

    /// `1/x`, defined as 0 at `x == 0` so that `sqrt` stays differentiable at
    /// the origin (its derivative is then taken as 0).
    pub fn safe_recip(&self) -> Var {
        let v = self.value().map(|a| if a == 0.0 { 0.0 } else { 1.0 / a });
        Var::from_op(v, Op::SafeRecip, vec![self.clone()])
    }

    pub fn tanh(&self) -> Var {
        Var::from_op(self.value().map(f32::tanh), Op::Tanh, vec![self.clone()])
    }

    pub fn leaky_relu(&self, slope: f32) -> Var {
        let mask = self.value().map(|a| if a > 0.0 { 1.0 } else { slope });
        self.mul_const(&mask)
    }

    pub fn sum(&self) -> Var {
        let s = self.value().sum() as f32;
        Var::from_op(Tensor::scalar(s), Op::SumAll, vec![self.clone()])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f32;
        self.sum().scale(1.0 / n)
    }

    /// Broadcasts a one-element value to `shape`.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Var {
        let v = Tensor::full(shape.to_vec(), self.item());
        Var::from_op(v, Op::BroadcastScalar, vec![self.clone()])
    }

    /// `[C,H,W] -> [C]` per-channel sum.
    pub fn reduce_spatial(&self) -> Var {
        let (c, h, w) = self.value().chw();
        let d = self.value().data();
        let out = (0..c)
            .map(|ch| d[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        Var::from_op(Tensor::new(vec![c], out), Op::ReduceSpatial, vec![self.clone()])
    }

    /// `[C] -> [C,H,W]`.
    pub fn broadcast_channel(&self, h: usize, w: usize) -> Var {
        assert_eq!(self.shape().len(), 1, "broadcast_channel expects [C]");
        let c = self.shape()[0];
        let mut out = Vec::with_capacity(c * h * w);
        for &v in self.value().data() {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        Var::from_op(
            Tensor::new(vec![c, h, w], out),
            Op::BroadcastChannel,
            vec![self.clone()],
        )
    }

    /// Stride-1 zero-padded cross-correlation with weight `w: [Co,Ci,K,K]`.
    pub fn conv2d(&self, w: &Var, pad: usize) -> Var {
        let v = tensor::conv2d(self.value(), w.value(), pad, 1);
        Var::from_op(v, Op::Conv { pad }, vec![self.clone(), w.clone()])
    }

    fn conv_weight_grad(&self, gy: &Var, pad: usize, k: usize) -> Var {
        let v = tensor::conv2d_weight_grad(self.value(), gy.value(), pad, k);
        Var::from_op(v, Op::ConvWeightGrad { pad, k }, vec![self.clone(), gy.clone()])
    }

    fn flip_transpose(&self) -> Var {
        Var::from_op(
            tensor::flip_transpose(self.value()),
            Op::FlipTranspose,
            vec![self.clone()],
        )
    }

    pub fn reflect_pad(&self, pad: usize) -> Var {
        Var::from_op(
            tensor::reflect_pad(self.value(), pad),
            Op::ReflectPad(pad),
            vec![self.clone()],
        )
    }

    fn reflect_pad_adjoint(&self, pad: usize) -> Var {
        Var::from_op(
            tensor::reflect_pad_adjoint(self.value(), pad),
            Op::ReflectPadAdjoint(pad),
            vec![self.clone()],
        )
    }

    /// Resamples the spatial axes to `size` with the shared bicubic operator.
    pub fn resize(&self, size: (usize, usize)) -> Var {
        let (_, h, w) = self.value().chw();
        if (h, w) == size {
            return self.clone();
        }
        let fwd = Resampler::new((h, w), size);
        let adj = fwd.adjoint();
        self.resample(Arc::new(fwd), Arc::new(adj))
    }

    fn resample(&self, fwd: Arc<Resampler>, adj: Arc<Resampler>) -> Var {
        let v = fwd.apply(self.value());
        Var::from_op(v, Op::Resample { fwd, adj }, vec![self.clone()])
    }
}

/// Vector-Jacobian products. `need[i]` says whether input `i` wants a
/// gradient; the returned vector has one slot per input.
fn vjp(op: &Op, inputs: &[Var], out: &Var, g: &Var, need: &[bool]) -> Vec<Option<Var>> {
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    match op {
        Op::Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
        Op::Sub => vec![want(0).then(|| g.clone()), want(1).then(|| g.neg())],
        Op::Mul => vec![want(0).then(|| g.mul(&inputs[1])), want(1).then(|| g.mul(&inputs[0]))],
        Op::Neg => vec![Some(g.neg())],
        Op::Scale(c) => vec![Some(g.scale(*c))],
        Op::AddScalar => vec![Some(g.clone())],
        Op::MulConst(c) => vec![Some(g.mul_const(c))],
        Op::Square => vec![Some(g.mul(&inputs[0]).scale(2.0))],
        Op::Sqrt => vec![Some(g.mul(&out.safe_recip()).scale(0.5))],
        Op::SafeRecip => vec![Some(g.mul(&out.square()).neg())],
        Op::Tanh => vec![Some(g.mul(&out.square().neg().add_scalar(1.0)))],
        Op::SumAll => vec![Some(g.broadcast_scalar(inputs[0].shape()))],
        Op::BroadcastScalar => vec![Some(g.sum())],
        Op::ReduceSpatial => {
            let (_, h, w) = inputs[0].value().chw();
            vec![Some(g.broadcast_channel(h, w))]
        }
        Op::BroadcastChannel => vec![Some(g.reduce_spatial())],
        Op::Conv { pad } => {
            let (x, w) = (&inputs[0], &inputs[1]);
            let k = w.shape()[2];
            vec![
                want(0).then(|| g.conv2d(&w.flip_transpose(), k - 1 - pad)),
                want(1).then(|| x.conv_weight_grad(g, *pad, k)),
            ]
        }
        Op::ConvWeightGrad { pad, k } => {
            // <G, dW(x, gy)> = <gy, conv(x, G)>
            let (x, gy) = (&inputs[0], &inputs[1]);
            vec![
                want(0).then(|| gy.conv2d(&g.flip_transpose(), k - 1 - pad)),
                want(1).then(|| x.conv2d(g, *pad)),
            ]
        }
        Op::FlipTranspose => vec![Some(g.flip_transpose())],
        Op::ReflectPad(p) => vec![Some(g.reflect_pad_adjoint(*p))],
        Op::ReflectPadAdjoint(p) => vec![Some(g.reflect_pad(*p))],
        Op::Resample { fwd, adj } => vec![Some(g.resample(Arc::clone(adj), Arc::clone(fwd)))],
    }
}

/// Gradients of `output` (seeded with ones) with respect to each of `wrt`.
///
/// Only the part of the graph that leads to a requested variable is
/// traversed, so frozen parameters cost nothing in the backward pass. With
/// `create_graph` the returned gradients are themselves differentiable;
/// otherwise they are detached constants.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    // post-order: inputs before the nodes that consume them
    let mut order: Vec<Var> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Var, bool)> = vec![(output.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        if let Some(gf) = &v.0.grad_fn {
            for input in gf.inputs.iter().rev() {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }

    let targets: HashSet<u64> = wrt.iter().map(|v| v.id()).collect();
    let mut needed: HashSet<u64> = HashSet::new();
    for v in &order {
        let reaches = targets.contains(&v.id())
            || v.0
                .grad_fn
                .as_ref()
                .is_some_and(|gf| gf.inputs.iter().any(|i| needed.contains(&i.id())));
        if reaches {
            needed.insert(v.id());
        }
    }

    let mut grads: HashMap<u64, Var> = HashMap::new();
    if needed.contains(&output.id()) {
        grads.insert(output.id(), Var::constant(Tensor::ones(output.shape().to_vec())));
    }

    for v in order.iter().rev() {
        if !needed.contains(&v.id()) {
            continue;
        }
        let Some(gf) = &v.0.grad_fn else { continue };
        let g = if targets.contains(&v.id()) {
            grads.get(&v.id()).cloned()
        } else {
            grads.remove(&v.id())
        };
        let Some(g) = g else { continue };
        let need: Vec<bool> = gf.inputs.iter().map(|i| needed.contains(&i.id())).collect();
        if !need.iter().any(|&n| n) {
            continue;
        }
        let input_grads = if create_graph {
            vjp(&gf.op, &gf.inputs, v, &g, &need)
        } else {
            let inputs: Vec<Var> = gf.inputs.iter().map(Var::detach).collect();
            vjp(&gf.op, &inputs, &v.detach(), &g.detach(), &need)
        };
        for ((input, gi), wanted) in gf.inputs.iter().zip(input_grads).zip(need) {
            let Some(gi) = gi else { continue };
            if !wanted {
                continue;
            }
            let acc = match grads.remove(&input.id()) {
                Some(prev) => prev.add(&gi),
                None => gi,
            };
            grads.insert(input.id(), acc);
        }
    }

    wrt.iter()
        .map(|w| match grads.get(&w.id()) {
            Some(g) if create_graph => g.clone(),
            Some(g) => g.detach(),
            None => Var::constant(Tensor::zeros(w.shape().to_vec())),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, seed: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape,
            (0..n).map(|i| ((i as f32 + 1.0) * 0.713 + seed).sin() * 0.8).collect(),
        )
    }

    /// Central finite differences of a scalar function of one tensor, in f64
    /// accumulation but evaluated through f32 forwards.
    fn finite_diff(f: &dyn Fn(&Tensor) -> f32, x: &Tensor, h: f32) -> Vec<f32> {
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[i] += h;
            minus[i] -= h;
            let fp = f(&Tensor::new(x.shape().to_vec(), plus)) as f64;
            let fm = f(&Tensor::new(x.shape().to_vec(), minus)) as f64;
            out.push(((fp - fm) / (2.0 * h as f64)) as f32);
        }
        out
    }

    fn rel_err(a: &[f32], b: &[f32]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = a
            .iter()
            .map(|x| (*x as f64).powi(2))
            .sum::<f64>()
            .sqrt()
            .max(b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt());
        num / den.max(1e-12)
    }

    fn check_first_order(f: impl Fn(&Var) -> Var, x: Tensor) {
        let xv = Var::param(x.clone());
        let g = grad(&f(&xv), &[&xv], false).remove(0);
        let fd = finite_diff(&|t| f(&Var::constant(t.clone())).item(), &x, 1e-2);
        let e = rel_err(g.value().data(), &fd);
        assert!(e < 1e-2, "relative error {e}");
    }

    #[test]
    fn elementwise_gradients() {
        let x = tensor(vec![2, 3, 4], 0.3);
        let y = Var::constant(tensor(vec![2, 3, 4], 1.7));
        check_first_order(|v| v.mul(&y).tanh().square().sum(), x.clone());
        check_first_order(|v| v.square().add_scalar(0.5).sqrt().safe_recip().mean(), x.clone());
        check_first_order(|v| v.sub(&y).neg().scale(3.0).leaky_relu(0.2).sum(), x);
    }

    #[test]
    fn norm_layers_gradients() {
        let x = tensor(vec![3, 5, 4], 0.1);
        check_first_order(
            |v| {
                let (c, h, w) = v.value().chw();
                let hw = (h * w) as f32;
                let mean = v.reduce_spatial().scale(1.0 / hw).broadcast_channel(h, w);
                let centered = v.sub(&mean);
                let var = centered.square().reduce_spatial().scale(1.0 / hw).add_scalar(1e-5);
                let inv = var.sqrt().safe_recip().broadcast_channel(h, w);
                let _ = c;
                centered.mul(&inv).tanh().sum()
            },
            x,
        );
    }

    #[test]
    fn conv_and_resample_gradients() {
        let x = tensor(vec![2, 6, 7], 0.2);
        let w = Var::constant(tensor(vec![3, 2, 3, 3], 0.9));
        check_first_order(|v| v.conv2d(&w, 1).tanh().sum(), x.clone());
        check_first_order(|v| v.reflect_pad(1).conv2d(&w, 0).square().mean(), x.clone());
        check_first_order(|v| v.resize((9, 4)).square().sum(), x.clone());
        let xc = Var::constant(x);
        check_first_order(|wv| xc.conv2d(wv, 1).tanh().sum(), tensor(vec![3, 2, 3, 3], 0.4));
    }

    #[test]
    fn second_order_through_conv_matches_finite_differences() {
        // f(x) = || d/dx sum(tanh(conv(x, w))) ||^2, differentiated w.r.t. x and w.
        let w0 = tensor(vec![2, 1, 3, 3], 0.5);
        let x0 = tensor(vec![1, 5, 5], 0.8);
        let inner = |x: &Var, w: &Var| -> Var {
            let s = x
                .conv2d(w, 1)
                .tanh()
                .conv2d(&Var::constant(tensor(vec![1, 2, 3, 3], 2.0)), 1)
                .tanh()
                .sum();
            grad(&s, &[x], true).remove(0).square().sum()
        };
        let w = Var::constant(w0.clone());
        let xv = Var::param(x0.clone());
        let g = grad(&inner(&xv, &w), &[&xv], false).remove(0);
        let fd = finite_diff(&|t| inner(&Var::param(t.clone()), &w).item(), &x0, 1e-2);
        assert!(rel_err(g.value().data(), &fd) < 2e-2);

        let x = Var::param(x0);
        let wv = Var::param(w0.clone());
        let gw = grad(&inner(&x, &wv), &[&wv], false).remove(0);
        let fdw = finite_diff(&|t| inner(&x, &Var::param(t.clone())).item(), &w0, 1e-2);
        assert!(rel_err(gw.value().data(), &fdw) < 2e-2);
    }

    #[test]
    fn unreachable_targets_get_zero_gradient() {
        let a = Var::param(Tensor::ones(vec![3]));
        let b = Var::param(Tensor::ones(vec![2]));
        let out = a.square().sum();
        let gs = grad(&out, &[&a, &b], false);
        assert_eq!(gs[0].value().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(gs[1].value().data(), &[0.0, 0.0]);
        assert!(!gs[0].requires_grad());
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let a = Var::param(Tensor::new(vec![1], vec![3.0]));
        let b = a.mul(&a).add(&a);
        let g = grad(&b.sum(), &[&a], false).remove(0);
        assert_eq!(g.item(), 7.0);
    }

    #[test]
    fn sqrt_at_zero_has_zero_gradient() {
        let a = Var::param(Tensor::zeros(vec![4]));
        let g = grad(&a.square().sum().sqrt(), &[&a], false).remove(0);
        assert!(g.value().data().iter().all(|v| *v == 0.0));
    }
}
