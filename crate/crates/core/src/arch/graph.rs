//! Execution backends for the layer functions: a recording tape for
//! training and an eager evaluator for inference.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::RngCore;

use super::params::Parameters;
use crate::error::{Error, Result};
use crate::ops::{self, Mode, Padding, RunningStats};
use crate::tape::{GradientTape, Var};
use crate::tensor::{Scalar, Tensor};

/// Operations the layer functions are written against.
pub trait Graph<T: Scalar> {
    type V;

    fn param(&mut self, name: &str) -> Result<Self::V>;
    fn conv2d(&mut self, x: &Self::V, w: &Self::V, stride: usize, padding: Padding) -> Result<Self::V>;
    /// Batch norm using `{prefix}/bn/{gamma,beta,mean,var}`.
    fn batchnorm(&mut self, x: &Self::V, prefix: &str, mode: Mode) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn maxpool(&mut self, x: &Self::V) -> Result<Self::V>;
    fn concat(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn dropout(&mut self, x: &Self::V, rate: f64, mode: Mode) -> Result<Self::V>;
    fn gwap(&mut self, x: &Self::V, w: &Self::V) -> Result<Self::V>;
    fn gap(&mut self, x: &Self::V) -> Result<Self::V>;
    /// `[B, C, H, W] -> [B, C*H*W]`.
    fn flatten(&mut self, x: &Self::V) -> Result<Self::V>;
    fn linear(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V>;
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

fn running_stats<T: Scalar>(params: &Parameters<T>, prefix: &str) -> Result<RunningStats<T>> {
    Ok(RunningStats {
        mean: params.get(&format!("{prefix}/bn/mean"))?.data().to_vec(),
        var: params.get(&format!("{prefix}/bn/var"))?.data().to_vec(),
    })
}

/// Records onto a [`GradientTape`]. Parameters for which `trainable`
/// returns true become gradient-tracking leaves; the rest are constants.
pub struct TapeGraph<'a, T: Scalar> {
    pub tape: &'a mut GradientTape<T>,
    params: &'a Parameters<T>,
    trainable: &'a dyn Fn(&str) -> bool,
    rng: &'a mut dyn RngCore,
    bound: HashMap<String, Var>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Scalar> TapeGraph<'a, T> {
    pub fn new(
        tape: &'a mut GradientTape<T>,
        params: &'a Parameters<T>,
        trainable: &'a dyn Fn(&str) -> bool,
        rng: &'a mut dyn RngCore,
    ) -> Self {
        Self { tape, params, trainable, rng, bound: HashMap::new(), bn_updates: Vec::new() }
    }

    /// Variables bound so far, by parameter name.
    pub fn bound(&self) -> &HashMap<String, Var> {
        &self.bound
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }
}

impl<T: Scalar> Graph<T> for TapeGraph<'_, T> {
    type V = Var;

    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let v = if (self.trainable)(name) {
            self.tape.variable(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, stride: usize, padding: Padding) -> Result<Var> {
        self.tape.conv2d(*x, *w, stride, padding)
    }

    fn batchnorm(&mut self, x: &Var, prefix: &str, mode: Mode) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}/bn/gamma"))?;
        let beta = self.param(&format!("{prefix}/bn/beta"))?;
        match mode {
            Mode::Train => {
                let (y, mean, var, count) = self.tape.batchnorm_train(*x, gamma, beta)?;
                self.bn_updates.push(BnUpdate { prefix: prefix.to_string(), mean, var, count });
                Ok(y)
            }
            Mode::Infer => {
                let stats = running_stats(self.params, prefix)?;
                self.tape.batchnorm_infer(*x, gamma, beta, &stats)
            }
        }
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        self.tape.relu(*x)
    }

    fn maxpool(&mut self, x: &Var) -> Result<Var> {
        self.tape.maxpool2x2(*x)
    }

    fn concat(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.concat_channels(*a, *b)
    }

    fn dropout(&mut self, x: &Var, rate: f64, mode: Mode) -> Result<Var> {
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(*x);
        }
        let n = self.tape.value(*x).len();
        let mask = ops::dropout_mask(n, rate, &mut *self.rng)?;
        self.tape.dropout_with_mask(*x, mask)
    }

    fn gwap(&mut self, x: &Var, w: &Var) -> Result<Var> {
        self.tape.gwap(*x, *w)
    }

    fn gap(&mut self, x: &Var) -> Result<Var> {
        self.tape.gap(*x)
    }

    fn flatten(&mut self, x: &Var) -> Result<Var> {
        let shape = self.tape.value(*x).shape().to_vec();
        let rest: usize = shape[1..].iter().product();
        self.tape.reshape(*x, &[shape[0], rest])
    }

    fn linear(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        self.tape.linear(*x, *w, *b)
    }
}

/// Evaluates immediately, dropping intermediates as soon as they go out of
/// scope. Inference semantics only.
pub struct EagerGraph<'a, T: Scalar> {
    params: &'a Parameters<T>,
}

impl<'a, T: Scalar> EagerGraph<'a, T> {
    pub fn new(params: &'a Parameters<T>) -> Self {
        Self { params }
    }
}

fn infer_only(mode: Mode, what: &str) -> Result<()> {
    match mode {
        Mode::Infer => Ok(()),
        Mode::Train => Err(Error::Usage(format!("{what} in training mode needs a gradient tape"))),
    }
}

impl<'a, T: Scalar> Graph<T> for EagerGraph<'a, T> {
    type V = Cow<'a, Tensor<T>>;

    fn param(&mut self, name: &str) -> Result<Self::V> {
        Ok(Cow::Borrowed(self.params.get(name)?))
    }

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, stride: usize, padding: Padding) -> Result<Self::V> {
        Ok(Cow::Owned(ops::conv2d(x, w, stride, padding)?))
    }

    fn batchnorm(&mut self, x: &Self::V, prefix: &str, mode: Mode) -> Result<Self::V> {
        infer_only(mode, "batch norm")?;
        let gamma = self.params.get(&format!("{prefix}/bn/gamma"))?;
        let beta = self.params.get(&format!("{prefix}/bn/beta"))?;
        let stats = running_stats(self.params, prefix)?;
        Ok(Cow::Owned(ops::batchnorm_infer(x, gamma.data(), beta.data(), Some(&stats))?))
    }

    fn relu(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(Cow::Owned(ops::relu(x)))
    }

    fn maxpool(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(Cow::Owned(ops::maxpool2x2(x)?.0))
    }

    fn concat(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Cow::Owned(ops::concat_channels(a, b)?))
    }

    fn dropout(&mut self, x: &Self::V, _rate: f64, mode: Mode) -> Result<Self::V> {
        infer_only(mode, "dropout")?;
        Ok(x.clone())
    }

    fn gwap(&mut self, x: &Self::V, w: &Self::V) -> Result<Self::V> {
        Ok(Cow::Owned(ops::gwap(x, w)?))
    }

    fn gap(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(Cow::Owned(ops::gap(x)?))
    }

    fn flatten(&mut self, x: &Self::V) -> Result<Self::V> {
        let shape = x.shape().to_vec();
        let rest: usize = shape[1..].iter().product();
        Ok(Cow::Owned(x.as_ref().clone().reshape(&[shape[0], rest])?))
    }

    fn linear(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Cow::Owned(ops::linear(x, w, b)?))
    }
}
