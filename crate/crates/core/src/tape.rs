//! Reverse-mode differentiation over recorded tensor operations.

use crate::error::{Error, Result};
use crate::ops::{self, BnCache, Padding, RunningStats, BN_EPSILON};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`GradientTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv { input: Var, weight: Var, stride: usize, padding: Padding },
    BatchNorm { input: Var, gamma: Var, beta: Var, cache: BnCache<T> },
    BatchNormInfer { input: Var, gamma: Var, beta: Var, stats: RunningStats<T> },
    Relu { input: Var },
    MaxPool { input: Var, argmax: Vec<usize> },
    Concat { a: Var, b: Var },
    Dropout { input: Var, mask: Vec<T> },
    Gwap { input: Var, weight: Var },
    Gap { input: Var },
    Reshape { input: Var },
    Linear { input: Var, weight: Var, bias: Var },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
    Add { a: Var, b: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed ops. Single owner; build one per forward pass.
#[derive(Debug, Default)]
pub struct GradientTape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradient of the backward root with respect to every recorded value that
/// requires one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Scalar> GradientTape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is wanted.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<&Node<T>> {
        self.nodes
            .get(var.0)
            .ok_or_else(|| Error::Usage(format!("variable {} is not on this tape", var.0)))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: Padding) -> Result<Var> {
        let y = ops::conv2d(&self.check(input)?.value, &self.check(weight)?.value, stride, padding)?;
        let rg = self.needs(&[input, weight]);
        Ok(self.push(y, Op::Conv { input, weight, stride, padding }, rg))
    }

    /// Training-mode batch norm. Also returns the batch mean, biased batch
    /// variance and element count per channel for the running-stat update.
    pub fn batchnorm_train(&mut self, input: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<T>, Vec<T>, usize)> {
        let x = &self.check(input)?.value;
        let count = x.len() / x.shape().get(1).copied().unwrap_or(1).max(1);
        let (y, cache, mean, var) =
            ops::batchnorm_train(x, self.check(gamma)?.value.data(), self.check(beta)?.value.data())?;
        let rg = self.needs(&[input, gamma, beta]);
        let v = self.push(y, Op::BatchNorm { input, gamma, beta, cache }, rg);
        Ok((v, mean, var, count))
    }

    pub fn batchnorm_infer(&mut self, input: Var, gamma: Var, beta: Var, stats: &RunningStats<T>) -> Result<Var> {
        let y = ops::batchnorm_infer(
            &self.check(input)?.value,
            self.check(gamma)?.value.data(),
            self.check(beta)?.value.data(),
            Some(stats),
        )?;
        let rg = self.needs(&[input, gamma, beta]);
        Ok(self.push(y, Op::BatchNormInfer { input, gamma, beta, stats: stats.clone() }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let y = ops::relu(&self.check(input)?.value);
        let rg = self.needs(&[input]);
        Ok(self.push(y, Op::Relu { input }, rg))
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let (y, argmax) = ops::maxpool2x2(&self.check(input)?.value)?;
        let rg = self.needs(&[input]);
        Ok(self.push(y, Op::MaxPool { input, argmax }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(&self.check(a)?.value, &self.check(b)?.value)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(y, Op::Concat { a, b }, rg))
    }

    /// Multiplies by a fixed mask (see [`ops::dropout_mask`]).
    pub fn dropout_with_mask(&mut self, input: Var, mask: Vec<T>) -> Result<Var> {
        let x = &self.check(input)?.value;
        if mask.len() != x.len() {
            return Err(Error::dim("dropout mask length does not match input"));
        }
        let y = Tensor::new(x.shape(), x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect())?;
        let rg = self.needs(&[input]);
        Ok(self.push(y, Op::Dropout { input, mask }, rg))
    }

    pub fn gwap(&mut self, input: Var, weight: Var) -> Result<Var> {
        let y = ops::gwap(&self.check(input)?.value, &self.check(weight)?.value)?;
        let rg = self.needs(&[input, weight]);
        Ok(self.push(y, Op::Gwap { input, weight }, rg))
    }

    pub fn gap(&mut self, input: Var) -> Result<Var> {
        let y = ops::gap(&self.check(input)?.value)?;
        let rg = self.needs(&[input]);
        Ok(self.push(y, Op::Gap { input }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let y = self.check(input)?.value.clone().reshape(shape)?;
        let rg = self.needs(&[input]);
        Ok(self.push(y, Op::Reshape { input }, rg))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = ops::linear(&self.check(input)?.value, &self.check(weight)?.value, &self.check(bias)?.value)?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(y, Op::Linear { input, weight, bias }, rg))
    }

    /// Mean softmax cross-entropy over the batch, as a one-element tensor.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_xent(&self.check(logits)?.value, labels)?;
        let rg = self.needs(&[logits]);
        let op = Op::SoftmaxXent { logits, labels: labels.to_vec(), probs };
        Ok(self.push(Tensor::new(&[1], vec![loss])?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.check(a)?.value, &self.check(b)?.value);
        vb.expect_shape(va.shape())?;
        let y = Tensor::new(va.shape(), va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect())?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    /// Back-propagates from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_node = self.check(root)?;
        if root_node.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be a scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_node.value.shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut emit = |var: Var, grad: Tensor<T>| -> Result<()> {
                if !self.nodes[var.0].requires_grad {
                    return Ok(());
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot => {
                        *slot = Some(grad);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { input, weight, stride, padding } => {
                    let (gx, gw) = ops::conv2d_backward(
                        &g,
                        self.value(*input),
                        self.value(*weight),
                        *stride,
                        *padding,
                    )?;
                    emit(*input, gx)?;
                    emit(*weight, gw)?;
                }
                Op::BatchNorm { input, gamma, beta, cache } => {
                    let gam = self.value(*gamma);
                    let (gx, gg, gb) = ops::batchnorm_backward(&g, cache, gam.data())?;
                    emit(*input, gx)?;
                    emit(*gamma, Tensor::new(gam.shape(), gg)?)?;
                    emit(*beta, Tensor::new(self.value(*beta).shape(), gb)?)?;
                }
                Op::BatchNormInfer { input, gamma, beta, stats } => {
                    let (gx, gg, gb) = bn_infer_backward(&g, self.value(*input), self.value(*gamma), stats)?;
                    emit(*input, gx)?;
                    emit(*gamma, gg)?;
                    emit(*beta, Tensor::new(self.value(*beta).shape(), gb)?)?;
                }
                Op::Relu { input } => emit(*input, ops::relu_backward(&g, self.value(*input))?)?,
                Op::MaxPool { input, argmax } => {
                    emit(*input, ops::maxpool2x2_backward(&g, self.value(*input).shape(), argmax)?)?
                }
                Op::Concat { a, b } => {
                    let (ga, gb) = ops::split_channels(&g, self.value(*a).dim(1))?;
                    emit(*a, ga)?;
                    emit(*b, gb)?;
                }
                Op::Dropout { input, mask } => {
                    let data = g.data().iter().zip(mask).map(|(&v, &m)| v * m).collect();
                    emit(*input, Tensor::new(g.shape(), data)?)?;
                }
                Op::Gwap { input, weight } => {
                    let (gx, gw) = ops::gwap_backward(&g, self.value(*input), self.value(*weight))?;
                    emit(*input, gx)?;
                    emit(*weight, gw)?;
                }
                Op::Gap { input } => emit(*input, ops::gap_backward(&g, self.value(*input).shape())?)?,
                Op::Reshape { input } => emit(*input, g.reshape(self.value(*input).shape())?)?,
                Op::Linear { input, weight, bias } => {
                    let (gx, gw, gb) = ops::linear_backward(&g, self.value(*input), self.value(*weight))?;
                    emit(*input, gx)?;
                    emit(*weight, gw)?;
                    emit(*bias, gb)?;
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    emit(*logits, ops::softmax_xent_backward(probs, labels, g.data()[0])?)?
                }
                Op::Add { a, b } => {
                    emit(*a, g.clone())?;
                    emit(*b, g)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn bn_infer_backward<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &RunningStats<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let (b, c, h, w) = ops::expect_4d(x, "batchnorm input")?;
    let hw = h * w;
    let eps = T::lit(BN_EPSILON);
    let inv: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut gx = vec![T::zero(); x.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * hw;
            for i in off..off + hw {
                gx[i] = g.data()[i] * gamma.data()[ch] * inv[ch];
                gg[ch] = gg[ch] + g.data()[i] * (x.data()[i] - stats.mean[ch]) * inv[ch];
                gb[ch] = gb[ch] + g.data()[i];
            }
        }
    }
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new(gamma.shape(), gg)?, gb))
}
