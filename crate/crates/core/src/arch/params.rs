//! Named parameter store and the per-layer parameter declarations.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::spec::{FeatureShape, FireSpec, HeadKind, HeadSpec, LayerSpec, NetworkSpec, FINAL_HEAD};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
    GwapWeight,
    /// Hidden layer of an FC head.
    HiddenWeight,
    HiddenBias,
    ClassifierWeight,
    ClassifierBias,
}

impl ParamKind {
    pub const ALL: [ParamKind; 10] = [
        ParamKind::ConvWeight,
        ParamKind::BnGamma,
        ParamKind::BnBeta,
        ParamKind::BnMean,
        ParamKind::BnVar,
        ParamKind::GwapWeight,
        ParamKind::HiddenWeight,
        ParamKind::HiddenBias,
        ParamKind::ClassifierWeight,
        ParamKind::ClassifierBias,
    ];

    /// Running statistics are updated by batch norm, not by the optimizer.
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::BnMean | ParamKind::BnVar)
    }

    /// Whether L2 weight decay applies.
    pub fn decays(self) -> bool {
        matches!(
            self,
            ParamKind::ConvWeight
                | ParamKind::BnGamma
                | ParamKind::BnBeta
                | ParamKind::GwapWeight
                | ParamKind::HiddenWeight
                | ParamKind::ClassifierWeight
        )
    }

    pub fn is_batchnorm(self) -> bool {
        matches!(self, ParamKind::BnGamma | ParamKind::BnBeta | ParamKind::BnMean | ParamKind::BnVar)
    }

    pub fn to_byte(self) -> u8 {
        Self::ALL.iter().position(|&k| k == self).unwrap_or(0) as u8
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.get(b as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamDecl {
    pub fn count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Leading path component: `backbone` or the head/branch name.
pub fn scope_of(name: &str) -> &str {
    name.split('/').next().unwrap_or(name)
}

pub const BACKBONE: &str = "backbone";

fn decl(out: &mut Vec<ParamDecl>, name: String, shape: Vec<usize>, kind: ParamKind) {
    out.push(ParamDecl { name, shape, kind });
}

pub fn declare_conv(out: &mut Vec<ParamDecl>, prefix: &str, cin: usize, cout: usize, k: usize) {
    decl(out, format!("{prefix}/w"), vec![cout, cin, k, k], ParamKind::ConvWeight);
    for (suffix, kind) in [
        ("gamma", ParamKind::BnGamma),
        ("beta", ParamKind::BnBeta),
        ("mean", ParamKind::BnMean),
        ("var", ParamKind::BnVar),
    ] {
        decl(out, format!("{prefix}/bn/{suffix}"), vec![cout], kind);
    }
}

pub fn declare_fire(out: &mut Vec<ParamDecl>, prefix: &str, fire: &FireSpec) {
    declare_conv(out, &format!("{prefix}/squeeze"), fire.in_channels, fire.squeeze, 1);
    declare_conv(out, &format!("{prefix}/expand1x1"), fire.squeeze, fire.expand1x1, 1);
    declare_conv(out, &format!("{prefix}/expand3x3"), fire.squeeze, fire.expand3x3, 3);
}

pub fn declare_head(out: &mut Vec<ParamDecl>, prefix: &str, head: &HeadSpec, feat: FeatureShape) {
    let [c, h, w] = feat;
    let pooled = match head.kind {
        HeadKind::Wap => {
            decl(out, format!("{prefix}/gwap/w"), vec![c, h, w], ParamKind::GwapWeight);
            c
        }
        HeadKind::Gap => c,
        HeadKind::Fc { hidden } => {
            decl(out, format!("{prefix}/fc/w"), vec![c * h * w, hidden], ParamKind::HiddenWeight);
            decl(out, format!("{prefix}/fc/b"), vec![hidden], ParamKind::HiddenBias);
            hidden
        }
    };
    decl(out, format!("{prefix}/classifier/w"), vec![pooled, head.num_classes], ParamKind::ClassifierWeight);
    decl(out, format!("{prefix}/classifier/b"), vec![head.num_classes], ParamKind::ClassifierBias);
}

/// Every parameter the spec implies, in stable order: backbone layers,
/// then the final head, then each branch.
pub fn declare(spec: &NetworkSpec) -> Result<Vec<ParamDecl>> {
    let shapes = spec.validate()?;
    let mut out = Vec::new();
    let mut cin = spec.input_channels;
    for (layer, shape) in spec.backbone.iter().zip(&shapes) {
        match layer {
            LayerSpec::Conv { name, out_channels, kernel, .. } => {
                declare_conv(&mut out, &format!("{BACKBONE}/{name}"), cin, *out_channels, *kernel)
            }
            LayerSpec::MaxPool { .. } => {}
            LayerSpec::Fire { name, fire } => declare_fire(&mut out, &format!("{BACKBONE}/{name}"), fire),
        }
        cin = shape[0];
    }
    let last = shapes.last().copied().unwrap_or(spec.input_shape());
    declare_head(&mut out, FINAL_HEAD, &spec.head, last);
    for br in &spec.branches {
        let at = spec.layer_index(&br.attach_after).expect("validated");
        let feat = shapes[at];
        declare_fire(&mut out, &format!("{}/fire", br.name), &br.fire);
        declare_head(&mut out, &br.name, &br.head, [br.fire.out_channels, feat[1], feat[2]]);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Name-to-tensor store with insertion-ordered iteration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters<T = f32> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> Parameters<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    /// Allocates every declared parameter. Conv, hidden and classifier
    /// weights draw from `U(-sqrt(6/fan_in), sqrt(6/fan_in))`; GWAP weights
    /// start at `1/(H*W)` so the head begins as plain average pooling; batch
    /// norm starts at gamma 1, beta 0, mean 0, var 1; biases at 0.
    pub fn initialize<R: Rng + ?Sized>(decls: &[ParamDecl], rng: &mut R) -> Self {
        let mut entries = IndexMap::with_capacity(decls.len());
        for d in decls {
            let n = d.count();
            let data: Vec<T> = match d.kind {
                ParamKind::ConvWeight | ParamKind::HiddenWeight | ParamKind::ClassifierWeight => {
                    let fan_in = match d.kind {
                        ParamKind::ConvWeight => d.shape[1..].iter().product::<usize>(),
                        _ => d.shape[0],
                    };
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()
                }
                ParamKind::GwapWeight => {
                    let hw = (d.shape[1] * d.shape[2]) as f64;
                    vec![T::lit(1.0 / hw); n]
                }
                ParamKind::BnGamma | ParamKind::BnVar => vec![T::one(); n],
                ParamKind::BnBeta | ParamKind::BnMean | ParamKind::HiddenBias | ParamKind::ClassifierBias => {
                    vec![T::zero(); n]
                }
            };
            let value = Tensor::new(&d.shape, data).expect("declared shapes are non-empty");
            entries.insert(d.name.clone(), Param { kind: d.kind, value });
        }
        Self { entries }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) {
        self.entries.insert(name.into(), Param { kind, value });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Usage(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Usage(format!("missing parameter {name}")))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|p| p.kind)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors, running statistics included.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Checks the store holds exactly the declared set with matching shapes and kinds.
    pub fn check_against(&self, decls: &[ParamDecl]) -> Result<()> {
        if decls.len() != self.entries.len() {
            return Err(Error::Usage(format!(
                "spec declares {} parameters, store holds {}",
                decls.len(),
                self.entries.len()
            )));
        }
        for d in decls {
            let p = self
                .entries
                .get(&d.name)
                .ok_or_else(|| Error::Usage(format!("missing parameter {}", d.name)))?;
            if p.kind != d.kind || p.value.shape() != d.shape.as_slice() {
                return Err(Error::Usage(format!(
                    "parameter {} is {:?} {:?}, spec wants {:?} {:?}",
                    d.name,
                    p.kind,
                    p.value.shape(),
                    d.kind,
                    d.shape
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Param { kind: p.kind, value: p.value.cast() }))
                .collect(),
        }
    }
}
