//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Forward execution is eager; a node is recorded only when some input
//! requires a gradient. `backward` consumes the graph and returns the
//! gradient of a scalar loss with respect to every grad-requiring leaf.

use crate::error::{Error, Result};
use crate::ops::{self, PadMode};
use crate::tensor::{fmt_shape, Real, Tensor};

/// Handle to a value held by a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Primitive kinds executable by the graph.
#[derive(Clone, Debug)]
pub enum Op<T: Real> {
    Add,
    Sub,
    Mul,
    Div,
    ScalarMul(T),
    Relu,
    Abs,
    Square,
    Sqrt,
    Exp,
    Clamp { lo: T, hi: T },
    Conv2d { stride: usize, padding: usize, mode: PadMode },
    MaxPool2,
    Upsample2,
    ConcatChannels,
    Mean,
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::ScalarMul(_) => "scalar_mul",
            Op::Relu => "relu",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Exp => "exp",
            Op::Clamp { .. } => "clamp",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 => "max_pool2",
            Op::Upsample2 => "upsample2",
            Op::ConcatChannels => "concat_channels",
            Op::Mean => "mean",
        }
    }

    fn arity(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::ConcatChannels => 2..=2,
            Op::Conv2d { .. } => 2..=3,
            _ => 1..=1,
        }
    }
}

enum Ctx<T: Real> {
    None,
    MaxPool { argmax: Vec<u32> },
    Conv { cols: Vec<T> },
}

struct Node<T: Real> {
    op: Op<T>,
    inputs: Vec<Var>,
    output: Var,
    ctx: Ctx<T>,
}

/// Execution tape: values in topological order plus the nodes that link them.
pub struct Graph<T: Real = f32> {
    values: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
    leaves: Vec<Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            nodes: Vec::new(),
            leaves: Vec::new(),
        }
    }

    /// Insert a leaf value; its `requires_grad` flag is honored.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let v = Var(self.values.len());
        self.values.push(t);
        self.leaves.push(v);
        v
    }

    /// Insert a non-differentiated leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t.requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self, v: Var) -> T {
        self.values[v.0].item()
    }

    fn push_value(&mut self, t: Tensor<T>) -> Var {
        let v = Var(self.values.len());
        self.values.push(t);
        v
    }

    // ── Primitive execution ────────────────────────────────────────────

    /// Execute one primitive. The one entry point every convenience method
    /// funnels through; records a node when any input requires a gradient.
    pub fn apply(&mut self, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !op.arity().contains(&inputs.len()) {
            return Err(Error::InvalidArgument(format!(
                "{}: expected {:?} inputs, got {}",
                op.name(),
                op.arity(),
                inputs.len()
            )));
        }
        for v in inputs {
            if v.0 >= self.values.len() {
                return Err(Error::InvalidArgument(format!(
                    "{}: input variable not in graph",
                    op.name()
                )));
            }
        }
        let requires = inputs.iter().any(|v| self.values[v.0].requires_grad_flag());
        let (out, ctx) = self.forward(&op, inputs)?;
        let out_var = self.push_value(out.requires_grad(requires));
        if requires {
            self.nodes.push(Node {
                op,
                inputs: inputs.to_vec(),
                output: out_var,
                ctx,
            });
        }
        Ok(out_var)
    }

    fn forward(&self, op: &Op<T>, inputs: &[Var]) -> Result<(Tensor<T>, Ctx<T>)> {
        let t = |v: &Var| &self.values[v.0];
        let out = match op {
            Op::Add => (self.zip(op.name(), t(&inputs[0]), t(&inputs[1]), |a, b| a + b)?, Ctx::None),
            Op::Sub => (self.zip(op.name(), t(&inputs[0]), t(&inputs[1]), |a, b| a - b)?, Ctx::None),
            Op::Mul => (self.zip(op.name(), t(&inputs[0]), t(&inputs[1]), |a, b| a * b)?, Ctx::None),
            Op::Div => (self.zip(op.name(), t(&inputs[0]), t(&inputs[1]), |a, b| a / b)?, Ctx::None),
            Op::ScalarMul(s) => {
                let s = *s;
                (self.map(t(&inputs[0]), |x| x * s), Ctx::None)
            }
            Op::Relu => (
                self.map(t(&inputs[0]), |x| if x > T::zero() { x } else { T::zero() }),
                Ctx::None,
            ),
            Op::Abs => (self.map(t(&inputs[0]), |x| x.abs()), Ctx::None),
            Op::Square => (self.map(t(&inputs[0]), |x| x * x), Ctx::None),
            Op::Sqrt => (self.map(t(&inputs[0]), |x| x.sqrt()), Ctx::None),
            Op::Exp => (self.map(t(&inputs[0]), |x| x.exp()), Ctx::None),
            Op::Clamp { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                if lo > hi {
                    return Err(Error::InvalidArgument(format!(
                        "clamp: lo {} exceeds hi {}",
                        lo, hi
                    )));
                }
                (
                    self.map(t(&inputs[0]), |x| {
                        if x < lo {
                            lo
                        } else if x > hi {
                            hi
                        } else {
                            x
                        }
                    }),
                    Ctx::None,
                )
            }
            Op::Conv2d { stride, padding, mode } => {
                let bias = inputs.get(2).map(t);
                let dims = ops::conv2d_dims(t(&inputs[0]), t(&inputs[1]), bias, *stride, *padding, *mode)?;
                let r = ops::conv2d_forward_full(t(&inputs[0]), t(&inputs[1]), bias, &dims);
                (r.out, Ctx::Conv { cols: r.cols })
            }
            Op::MaxPool2 => {
                let (out, argmax) = ops::maxpool2_forward(t(&inputs[0]))?;
                (out, Ctx::MaxPool { argmax })
            }
            Op::Upsample2 => (ops::upsample2_forward(t(&inputs[0]))?, Ctx::None),
            Op::ConcatChannels => (
                ops::concat_channels_forward(t(&inputs[0]), t(&inputs[1]))?,
                Ctx::None,
            ),
            Op::Mean => {
                let x = t(&inputs[0]);
                let n = T::from_f64(x.numel() as f64);
                let mut acc = T::zero();
                for &v in x.data() {
                    acc += v;
                }
                (Tensor::scalar(acc / n), Ctx::None)
            }
        };
        Ok(out)
    }

    fn zip(
        &self,
        op: &'static str,
        a: &Tensor<T>,
        b: &Tensor<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op,
                expected: fmt_shape(a.shape()),
                actual: fmt_shape(b.shape()),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    fn map(&self, a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = a.data().iter().map(|&x| f(x)).collect();
        Tensor::new(a.shape().to_vec(), data).expect("map preserves shape")
    }

    // ── Convenience wrappers ───────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn scalar_mul(&mut self, a: Var, s: T) -> Result<Var> {
        self.apply(Op::ScalarMul(s), &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Abs, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Square, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sqrt, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.apply(Op::Clamp { lo, hi }, &[a])
    }
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        mode: PadMode,
    ) -> Result<Var> {
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.apply(Op::Conv2d { stride, padding, mode }, &inputs)
    }
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::MaxPool2, &[a])
    }
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Upsample2, &[a])
    }
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::ConcatChannels, &[a, b])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the graph; returns
    /// gradients for every leaf inserted with `requires_grad`.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.values.len() {
            return Err(Error::InvalidArgument(
                "backward: loss not attached to graph".to_string(),
            ));
        }
        if !self.values[loss.0].is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                expected: "scalar loss".to_string(),
                actual: fmt_shape(self.values[loss.0].shape()),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for node in self.nodes.iter().rev() {
            let g = match grads[node.output.0].as_ref() {
                Some(g) => g.clone(),
                None => continue, // not on the loss path
            };
            self.backward_node(node, &g, &mut grads)?;
        }

        let mut out = Gradients {
            entries: Vec::new(),
        };
        for v in &self.leaves {
            if self.values[v.0].requires_grad_flag() {
                let data = grads[v.0]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); self.values[v.0].numel()]);
                let mut t = Tensor::new(self.values[v.0].shape().to_vec(), data)?;
                t = t.requires_grad(true);
                out.entries.push((*v, t));
            }
        }
        Ok(out)
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let val = |v: Var| &self.values[v.0];
        let needs = |v: Var| self.values[v.0].requires_grad_flag();
        match &node.op {
            Op::Add => {
                if needs(node.inputs[0]) {
                    accumulate(grads, node.inputs[0], g.iter().copied());
                }
                if needs(node.inputs[1]) {
                    accumulate(grads, node.inputs[1], g.iter().copied());
                }
            }
            Op::Sub => {
                if needs(node.inputs[0]) {
                    accumulate(grads, node.inputs[0], g.iter().copied());
                }
                if needs(node.inputs[1]) {
                    accumulate(grads, node.inputs[1], g.iter().map(|&x| -x));
                }
            }
            Op::Mul => {
                let (a, b) = (val(node.inputs[0]), val(node.inputs[1]));
                if needs(node.inputs[0]) {
                    accumulate(
                        grads,
                        node.inputs[0],
                        g.iter().zip(b.data()).map(|(&g, &b)| g * b),
                    );
                }
                if needs(node.inputs[1]) {
                    accumulate(
                        grads,
                        node.inputs[1],
                        g.iter().zip(a.data()).map(|(&g, &a)| g * a),
                    );
                }
            }
            Op::Div => {
                let (b, out) = (val(node.inputs[1]), val(node.output));
                if needs(node.inputs[0]) {
                    accumulate(
                        grads,
                        node.inputs[0],
                        g.iter().zip(b.data()).map(|(&g, &b)| g / b),
                    );
                }
                if needs(node.inputs[1]) {
                    accumulate(
                        grads,
                        node.inputs[1],
                        g.iter()
                            .zip(out.data())
                            .zip(b.data())
                            .map(|((&g, &o), &b)| -g * o / b),
                    );
                }
            }
            Op::ScalarMul(s) => {
                let s = *s;
                if needs(node.inputs[0]) {
                    accumulate(grads, node.inputs[0], g.iter().map(|&x| x * s));
                }
            }
            Op::Relu => {
                if needs(node.inputs[0]) {
                    let x = val(node.inputs[0]);
                    accumulate(
                        grads,
                        node.inputs[0],
                        g.iter()
                            .zip(x.data())
                            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }),
                    );
                }
            }
            Op::Abs => {
                if needs(node.inputs[0]) {
                    let x = val(node.inputs[0]);
                    accumulate(
                        grads,
                        node.inputs[0],
                        g.iter().zip(x.data()).map(|(&g, &x)| {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        }),
                    );
                }
            }
            Op::Square => {
                if needs(node.inputs[0]) {
                    let x = val(node.inputs[0]);
                    let two = T::from_f64(2.0);
                    accumulate(
                        grads,
                        node.inputs[0],
                        g.iter().zip(x.data()).map(move |(&g, &x)| g * two * x),
                    );
                }
            }
            Op::Sqrt => {
                if needs(node.inputs[0]) {
                    let out = val(node.output);
                    let two = T::from_f64(2.0);
                    accumulate(
                        grads,
                        node.inputs[0],
                        g.iter().zip(out.data()).map(move |(&g, &o)| g / (two * o)),
                    );
                }
            }
            Op::Exp => {
                if needs(node.inputs[0]) {
                    let out = val(node.output);
                    accumulate(
                        grads,
                        node.inputs[0],
                        g.iter().zip(out.data()).map(|(&g, &o)| g * o),
                    );
                }
            }
            Op::Clamp { lo, hi } => {
                if needs(node.inputs[0]) {
                    let (lo, hi) = (*lo, *hi);
                    let x = val(node.inputs[0]);
                    accumulate(
                        grads,
                        node.inputs[0],
                        g.iter().zip(x.data()).map(move |(&g, &x)| {
                            if x > lo && x < hi {
                                g
                            } else {
                                T::zero()
                            }
                        }),
                    );
                }
            }
            Op::Conv2d { stride, padding, mode } => {
                let bias = node.inputs.get(2).map(|v| val(*v));
                let dims = ops::conv2d_dims(
                    val(node.inputs[0]),
                    val(node.inputs[1]),
                    bias,
                    *stride,
                    *padding,
                    *mode,
                )?;
                let cols = match &node.ctx {
                    Ctx::Conv { cols } => cols.as_slice(),
                    _ => unreachable!("conv node without saved patches"),
                };
                let needs_dx = needs(node.inputs[0]);
                let needs_db = node.inputs.len() == 3 && needs(node.inputs[2]);
                let r = ops::conv2d_backward(val(node.inputs[1]), cols, g, &dims, needs_dx, needs_db);
                if let Some(dx) = r.dx {
                    accumulate(grads, node.inputs[0], dx.into_iter());
                }
                if needs(node.inputs[1]) {
                    accumulate(grads, node.inputs[1], r.dw.into_iter());
                }
                if let Some(db) = r.db {
                    accumulate(grads, node.inputs[2], db.into_iter());
                }
            }
            Op::MaxPool2 => {
                if needs(node.inputs[0]) {
                    let argmax = match &node.ctx {
                        Ctx::MaxPool { argmax } => argmax,
                        _ => unreachable!("pool node without argmax"),
                    };
                    let dx = ops::maxpool2_backward(g, argmax, val(node.inputs[0]).numel());
                    accumulate(grads, node.inputs[0], dx.into_iter());
                }
            }
            Op::Upsample2 => {
                if needs(node.inputs[0]) {
                    let x = val(node.inputs[0]);
                    let (n, c, h, w) = x.dims4("upsample2")?;
                    let dx = ops::upsample2_backward(g, n, c, h, w);
                    accumulate(grads, node.inputs[0], dx.into_iter());
                }
            }
            Op::ConcatChannels => {
                let a = val(node.inputs[0]);
                let b = val(node.inputs[1]);
                let (n, ca, h, w) = a.dims4("concat_channels")?;
                let cb = b.shape()[1];
                let (da, db) = ops::concat_channels_backward(g, n, ca, cb, h * w);
                if needs(node.inputs[0]) {
                    accumulate(grads, node.inputs[0], da.into_iter());
                }
                if needs(node.inputs[1]) {
                    accumulate(grads, node.inputs[1], db.into_iter());
                }
            }
            Op::Mean => {
                if needs(node.inputs[0]) {
                    let n = val(node.inputs[0]).numel();
                    let scale = g[0] / T::from_f64(n as f64);
                    accumulate(grads, node.inputs[0], std::iter::repeat(scale).take(n));
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, delta: impl Iterator<Item = T>) {
    match &mut grads[v.0] {
        Some(buf) => {
            for (slot, d) in buf.iter_mut().zip(delta) {
                *slot += d;
            }
        }
        slot @ None => {
            *slot = Some(delta.collect());
        }
    }
}

/// Gradient of the loss with respect to each grad-requiring leaf.
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    entries: Vec<(Var, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(var, _)| *var == v).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.entries.iter().map(|(v, t)| (*v, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn relu_matches_definition() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(vec![3], vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_all_ones_interior_nine_corners_four() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(vec![1, 1, 4, 4], 1.0));
        let w = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 1, PadMode::Zero).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 1, 4, 4]);
        let d = out.data();
        assert_eq!(d[0], 4.0); // corner
        assert_eq!(d[3], 4.0);
        assert_eq!(d[5], 9.0); // interior
        assert_eq!(d[1], 6.0); // edge
    }

    #[test]
    fn concat_shape_rule() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![1, 8, 16, 16]));
        let b = g.constant(Tensor::zeros(vec![1, 8, 16, 16]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 16, 16, 16]);
    }

    #[test]
    fn mean_backward_is_uniform() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t(vec![4], vec![1.0, 2.0, 3.0, 4.0]).requires_grad(true));
        let loss = g.mean(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn relu_backward_subgradient_zero_at_negative() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t(vec![2], vec![-1.0, 2.0]).requires_grad(true));
        let r = g.relu(x).unwrap();
        let loss = g.mean(r).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t(vec![2], vec![1.0, 2.0]).requires_grad(true));
        let y = g.relu(x).unwrap();
        let err = g.backward(y).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn constant_loss_yields_zero_gradients() {
        let mut g = Graph::<f32>::new();
        let x = g.input(t(vec![2], vec![1.0, 2.0]).requires_grad(true));
        let c = g.constant(Tensor::scalar(3.0));
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.constant(t(
                vec![1, 2, 4, 4],
                (0..32).map(|i| (i as f32 * 0.37).sin()).collect(),
            ));
            let w = g.constant(t(
                vec![3, 2, 3, 3],
                (0..54).map(|i| (i as f32 * 0.11).cos()).collect(),
            ));
            let c = g.conv2d(x, w, None, 1, 1, PadMode::Reflect).unwrap();
            let r = g.relu(c).unwrap();
            let m = g.mean(r).unwrap();
            (g.value(c).data().to_vec(), g.item(m))
        };
        let (a1, m1) = run();
        let (a2, m2) = run();
        assert_eq!(a1, a2);
        assert_eq!(m1.to_bits(), m2.to_bits());
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![2, 2]));
        let b = g.constant(Tensor::zeros(vec![3]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("2x2"), "{msg}");
    }
}
