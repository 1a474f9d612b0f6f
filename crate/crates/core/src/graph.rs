//! Tape-based reverse-mode differentiation over the layer set used by the
//! network and losses.
//!
//! Every op appends a node holding its output; node order is therefore a
//! topological order, and [`Graph::backward`] walks it in reverse so each
//! node is visited once, after all of its consumers.

use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::ops;
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var },
    AvgPool2 { x: Var },
    Upsample2 { x: Var },
    Relu { x: Var },
    Concat { a: Var, b: Var },
    SliceChannels { x: Var, start: usize },
    Channel { x: Var, c: usize },
    Compose { v: Var, h: Var },
    LocalConv { frame: Var, kernels: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Mean { inputs: Vec<Var> },
    WeightedSum { terms: Vec<(Var, T)> },
    Sum { x: Var },
    MeanSquare { x: Var },
    MeanAbs { x: Var },
    ImageGradient { x: Var },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed operations.
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        value.check_finite("parameter")?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        value.check_finite("constant")?;
        Ok(self.push(value, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let t = &self.nodes[v.0].value;
        t.grad().map(|_| t.grad_tensor())
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::Graph("graph already consumed by backward".into()));
        }
        value.check_finite("op output")?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), self.value(b))?;
        self.record(y, Op::Conv2d { x, w, b }, &[x, w, b])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let y = ops::avg_pool2(self.value(x))?;
        self.record(y, Op::AvgPool2 { x }, &[x])
    }

    pub fn upsample_bilinear2(&mut self, x: Var) -> Result<Var> {
        let y = ops::upsample_bilinear2(self.value(x))?;
        self.record(y, Op::Upsample2 { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.value(x));
        self.record(y, Op::Relu { x }, &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        self.record(y, Op::Concat { a, b }, &[a, b])
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = ops::slice_channels(self.value(x), start, len)?;
        self.record(y, Op::SliceChannels { x, start }, &[x])
    }

    /// Channel `c` of an `[H, W, C]` node as `[H, W]`.
    pub fn channel(&mut self, x: Var, c: usize) -> Result<Var> {
        let y = self.value(x).channel(c)?;
        self.record(y, Op::Channel { x, c }, &[x])
    }

    pub fn compose_2d(&mut self, v: Var, h: Var) -> Result<Var> {
        let y = kernels::compose_2d(self.value(v), self.value(h))?;
        self.record(y, Op::Compose { v, h }, &[v, h])
    }

    pub fn local_conv(&mut self, frame: Var, kernels: Var) -> Result<Var> {
        let y = kernels::local_conv(self.value(frame), self.value(kernels))?;
        self.record(y, Op::LocalConv { frame, kernels }, &[frame, kernels])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.record(y, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.record(y, Op::Sub { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let y = self.value(x).map(|v| v * factor);
        self.record(y, Op::Scale { x, factor }, &[x])
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn mean(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| shape_err!("mean of zero tensors"))?;
        let mut acc = self.value(first).clone();
        acc.zero_grad();
        for &v in &inputs[1..] {
            acc = acc.zip_map(self.value(v), |a, b| a + b)?;
        }
        let k = T::one() / T::from_usize(inputs.len()).unwrap();
        let y = acc.map(|v| v * k);
        self.record(y, Op::Mean { inputs: inputs.to_vec() }, inputs)
    }

    /// `Σ c_k · x_k` over equally shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let &(first, _) = terms
            .first()
            .ok_or_else(|| shape_err!("weighted sum of zero tensors"))?;
        let mut acc = Tensor::zeros(self.value(first).shape());
        for &(v, c) in terms {
            acc = acc.zip_map(self.value(v), |a, b| a + c * b)?;
        }
        let inputs: Vec<_> = terms.iter().map(|t| t.0).collect();
        self.record(acc, Op::WeightedSum { terms: terms.to_vec() }, &inputs)
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.record(y, Op::Sum { x }, &[x])
    }

    /// Scalar `mean(x²)`.
    pub fn mean_square(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let y = Tensor::scalar(t.data().iter().map(|&v| v * v).sum::<T>() / Self::count(t));
        self.record(y, Op::MeanSquare { x }, &[x])
    }

    /// Scalar `mean(|x|)`.
    pub fn mean_abs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let y = Tensor::scalar(t.data().iter().map(|&v| v.abs()).sum::<T>() / Self::count(t));
        self.record(y, Op::MeanAbs { x }, &[x])
    }

    /// Forward differences of an `[H, W]` image as `[H, W, 2]`.
    pub fn image_gradient(&mut self, x: Var) -> Result<Var> {
        let y = crate::loss::grad_image(self.value(x))?;
        self.record(y, Op::ImageGradient { x }, &[x])
    }

    fn count(t: &Tensor<T>) -> T {
        T::from_usize(t.len().max(1)).unwrap()
    }

    /// Sign pattern at every non-differentiable point (ReLU inputs, |x|
    /// inputs). Two evaluations with equal patterns lie on the same smooth
    /// piece, which finite-difference checks rely on.
    pub fn nonsmooth_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            let x = match node.op {
                Op::Relu { x } | Op::MeanAbs { x } => x,
                _ => continue,
            };
            pattern.extend(self.value(x).data().iter().map(|&v| v > T::zero()));
        }
        pattern
    }

    /// Back-propagates from a scalar node, accumulating into the gradient
    /// slot of every reachable node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].value.accumulate_grad(&[T::one()])?;

        for idx in (0..=loss.0).rev() {
            let node = &mut self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            // Intermediate gradients are not kept once propagated.
            let Some(dy) = node.value.take_grad() else {
                continue;
            };
            let op = node.op.clone();
            match op {
                Op::SliceChannels { x, start } => {
                    self.nodes[x.0].value.accumulate_grad_channels(start, &dy)?;
                }
                Op::Channel { x, c } => {
                    let (h, w) = dy.dims2()?;
                    let dy3 = dy.reshape(&[h, w, 1])?;
                    self.nodes[x.0].value.accumulate_grad_channels(c, &dy3)?;
                }
                _ => {
                    for (input, g) in self.local_grads(&op, &dy)? {
                        if self.nodes[input.0].requires_grad {
                            self.nodes[input.0].value.accumulate_grad_owned(g)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, op: &Op<T>, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let grads = match *op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b } => {
                let (dx, dw, db) = ops::conv2d_grads(
                    self.value(x),
                    self.value(w),
                    self.value(b),
                    dy,
                    self.needs_grad(x),
                )?;
                let mut out = vec![(w, dw), (b, db)];
                out.extend(dx.map(|dx| (x, dx)));
                out
            }
            Op::AvgPool2 { x } => vec![(x, ops::avg_pool2_backward(self.value(x).shape(), dy)?)],
            Op::Upsample2 { x } => vec![(
                x,
                ops::upsample_bilinear2_backward(self.value(x).shape(), dy)?,
            )],
            Op::Relu { x } => vec![(x, ops::relu_backward(self.value(x), dy)?)],
            Op::Concat { a, b } => {
                let ca = self.value(a).shape()[2];
                let (da, db) = ops::concat_channels_backward(ca, dy)?;
                vec![(a, da), (b, db)]
            }
            Op::SliceChannels { .. } | Op::Channel { .. } => {
                unreachable!("channel slices are handled in backward")
            }
            Op::Compose { v, h } => {
                let (dv, dh) = kernels::compose_2d_backward(self.value(v), self.value(h), dy)?;
                vec![(v, dv), (h, dh)]
            }
            Op::LocalConv { frame, kernels: k } => {
                let (df, dk) = kernels::local_conv_grads(
                    self.value(frame),
                    self.value(k),
                    dy,
                    self.needs_grad(frame),
                )?;
                let mut out = vec![(k, dk)];
                out.extend(df.map(|df| (frame, df)));
                out
            }
            Op::Add { a, b } => vec![(a, dy.clone()), (b, dy.clone())],
            Op::Sub { a, b } => vec![(a, dy.clone()), (b, dy.map(|g| -g))],
            Op::Scale { x, factor } => vec![(x, dy.map(|g| g * factor))],
            Op::Mean { ref inputs } => {
                let k = T::one() / T::from_usize(inputs.len()).unwrap();
                let g = dy.map(|v| v * k);
                inputs.iter().map(|&v| (v, g.clone())).collect()
            }
            Op::WeightedSum { ref terms } => {
                terms.iter().map(|&(v, c)| (v, dy.map(|g| g * c))).collect()
            }
            Op::Sum { x } => vec![(x, Tensor::full(self.value(x).shape(), dy.data()[0]))],
            Op::MeanSquare { x } => {
                let t = self.value(x);
                let k = (T::one() + T::one()) * dy.data()[0] / Self::count(t);
                vec![(x, t.map(|v| v * k))]
            }
            Op::MeanAbs { x } => {
                let t = self.value(x);
                let k = dy.data()[0] / Self::count(t);
                vec![(x, t.map(|v| if v > T::zero() { k } else if v < T::zero() { -k } else { T::zero() }))]
            }
            Op::ImageGradient { x } => {
                vec![(x, crate::loss::grad_image_backward(self.value(x).shape(), dy)?)]
            }
        };
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5)).unwrap();
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn independent_param_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[3], 2.0)).unwrap();
        let p = g.param(Tensor::full(&[3], 5.0)).unwrap();
        let loss = g.mean_square(x).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(p).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn reuse_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[2], 1.0)).unwrap();
        let y = g.add(x, x).unwrap();
        let loss = g.mean_square(y).unwrap();
        g.backward(loss).unwrap();
        // d/dx mean((2x)^2) = 8x / n
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[2], 1.0)).unwrap();
        assert!(g.backward(x).is_err());
        let loss = g.mean_square(x).unwrap();
        g.backward(loss).unwrap();
        assert!(g.backward(loss).is_err());
        assert!(g.relu(x).is_err());
    }

    #[test]
    fn rejects_non_finite_leaves() {
        let mut g = Graph::<f64>::new();
        let bad = Tensor::from_fn(&[1], |_| f64::NAN);
        assert!(matches!(g.param(bad), Err(Error::NonFinite(_))));
    }
}
