//! Reverse-mode differentiation over the kernel set in [`super::kernels`].

use indexmap::IndexMap;

use super::kernels::{self as k, NormCache};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, stride: [usize; 3], pad: [usize; 3] },
    TransposeConv { x: Var, w: Var, b: Option<Var>, stride: [usize; 3] },
    InstanceNorm { x: Var, gamma: Var, beta: Var, cache: NormCache<T> },
    LeakyRelu { x: Var, slope: f64 },
    UpsampleNearest { x: Var, factors: [usize; 3] },
    UpsampleTrilinear { x: Var, factors: [usize; 3] },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    Softmax { x: Var },
    Dice { p: Var, target: Tensor<T> },
    CrossEntropy { p: Var, labels: Vec<usize> },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of primitive applications. Parameters are leaves registered by
/// name; [`Tape::backward`] returns a gradient for each of them.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
}

/// Gradients keyed by parameter name, in registration order.
pub type Gradients<T = f32> = IndexMap<String, Tensor<T>>;

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: IndexMap::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (input data); it receives no reported gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<Var> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("parameter `{name}` registered twice")));
        }
        let v = self.push(value, Op::Leaf);
        self.params.insert(name, v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let out = k::conv3d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        Ok(self.push(out, Op::Conv { x, w, b, stride, pad }))
    }

    pub fn transpose_conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3]) -> Result<Var> {
        let out = k::transpose_conv3d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        Ok(self.push(out, Op::TransposeConv { x, w, b, stride }))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, cache) = k::instance_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(out, Op::InstanceNorm { x, gamma, beta, cache }))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = k::leaky_relu(self.value(x), slope);
        self.push(out, Op::LeakyRelu { x, slope })
    }

    pub fn upsample_nearest(&mut self, x: Var, factors: [usize; 3]) -> Result<Var> {
        let out = k::upsample_nearest(self.value(x), factors)?;
        Ok(self.push(out, Op::UpsampleNearest { x, factors }))
    }

    pub fn upsample_trilinear(&mut self, x: Var, factors: [usize; 3]) -> Result<Var> {
        let out = k::upsample_trilinear(self.value(x), factors)?;
        Ok(self.push(out, Op::UpsampleTrilinear { x, factors }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let out = self.value(x).map(|v| v * f);
        self.push(out, Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x })
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = k::softmax_channels(self.value(x))?;
        Ok(self.push(out, Op::Softmax { x }))
    }

    pub fn soft_dice_loss(&mut self, p: Var, target: Tensor<T>) -> Result<Var> {
        let out = Tensor::scalar(k::soft_dice_loss(self.value(p), &target)?);
        Ok(self.push(out, Op::Dice { p, target }))
    }

    pub fn cross_entropy(&mut self, p: Var, labels: Vec<usize>) -> Result<Var> {
        let out = Tensor::scalar(k::cross_entropy(self.value(p), &labels)?);
        Ok(self.push(out, Op::CrossEntropy { p, labels }))
    }

    /// Back-propagates from a scalar `loss`. Every registered parameter gets a
    /// gradient of its own shape; unused parameters get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        fn acc<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv { x, w, b, stride, pad } => {
                    let (gx, gw, gb) =
                        k::conv3d_backward(self.value(*x), self.value(*w), b.is_some(), *stride, *pad, &g)?;
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    if let (Some(b), Some(gb)) = (b, gb) {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::TransposeConv { x, w, b, stride } => {
                    let (gx, gw, gb) =
                        k::transpose_conv3d_backward(self.value(*x), self.value(*w), b.is_some(), *stride, &g)?;
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    if let (Some(b), Some(gb)) = (b, gb) {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::InstanceNorm { x, gamma, beta, cache } => {
                    let (gx, gg, gb) = k::instance_norm_backward(&g, self.value(*gamma), cache);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gb);
                }
                Op::LeakyRelu { x, slope } => {
                    let gx = k::leaky_relu_backward(self.value(*x), *slope, &g);
                    acc(&mut grads, *x, gx);
                }
                Op::UpsampleNearest { x, factors } => {
                    acc(&mut grads, *x, k::upsample_nearest_backward(&g, *factors)?);
                }
                Op::UpsampleTrilinear { x, factors } => {
                    let sp = self.value(*x).shape();
                    let gx = k::upsample_trilinear_backward(&g, [sp[2], sp[3], sp[4]], *factors)?;
                    acc(&mut grads, *x, gx);
                }
                Op::Concat { a, b } => {
                    let (ga, gb) = k::split_channels(&g, self.value(*a).shape()[1])?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Mul { a, b } => {
                    let ga = k::mul(&g, self.value(*b))?;
                    let gb = k::mul(&g, self.value(*a))?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale { x, factor } => {
                    let f = T::from_f64(*factor);
                    acc(&mut grads, *x, g.map(|v| v * f));
                }
                Op::Sum { x } => {
                    let gv = g.data()[0];
                    acc(&mut grads, *x, Tensor::full(self.value(*x).shape(), gv));
                }
                Op::Softmax { x } => {
                    let gx = k::softmax_channels_backward(&node.value, &g);
                    acc(&mut grads, *x, gx);
                }
                Op::Dice { p, target } => {
                    let gp = k::soft_dice_loss_backward(self.value(*p), target, g.data()[0])?;
                    acc(&mut grads, *p, gp);
                }
                Op::CrossEntropy { p, labels } => {
                    let gp = k::cross_entropy_backward(self.value(*p), labels, g.data()[0])?;
                    acc(&mut grads, *p, gp);
                }
            }
        }

        Ok(self
            .params
            .iter()
            .map(|(name, &v)| {
                let g = grads[v.0].take().unwrap_or_else(|| self.value(v).zeros_like());
                (name.clone(), g)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_gradient_is_input() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let xv = tape.constant(x.clone());
        let w = tape.param("w", Tensor::full(&[2, 3], 0.3)).unwrap();
        let prod = tape.mul(w, xv).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["w"], x);
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param("a", Tensor::full(&[3], 2.0)).unwrap();
        tape.param("unused", Tensor::full(&[2, 2], 1.0)).unwrap();
        let loss = tape.sum(a);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["unused"], Tensor::zeros(&[2, 2]));
        assert_eq!(grads["a"], Tensor::full(&[3], 1.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param("a", Tensor::full(&[3], 2.0)).unwrap();
        assert!(matches!(tape.backward(a), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_weight_conv_bias_gradient_is_upstream_sum() {
        // d/db sum(c * conv(x)) = c * number of output positions, per channel
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 1, 3, 3, 3], |i| (i % 7) as f64));
        let w = tape.param("w", Tensor::zeros(&[2, 1, 3, 3, 3])).unwrap();
        let b = tape.param("b", Tensor::zeros(&[2])).unwrap();
        let y = tape.conv3d(x, w, Some(b), [1; 3], [1; 3]).unwrap();
        let up = tape.constant(Tensor::from_fn(&[2, 2, 3, 3, 3], |i| 0.01 * i as f64));
        let prod = tape.mul(y, up).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        let upv = tape.value(up);
        for c in 0..2 {
            let expected: f64 = (0..2)
                .flat_map(|n| upv.data()[(n * 2 + c) * 27..(n * 2 + c + 1) * 27].iter().copied())
                .sum();
            assert!((grads["b"].data()[c] - expected).abs() < 1e-12);
        }
    }
}
