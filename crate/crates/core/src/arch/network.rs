use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{EagerGraph, Graph};
use super::params::{declare, Parameters, BACKBONE};
use super::spec::{HeadKind, HeadSpec, LayerSpec, NetworkSpec, FINAL_HEAD};
use crate::error::{Error, Result};
use crate::ops::{self, Mode, Padding};
use crate::tensor::{Scalar, Tensor};

/// Conv (no bias) + batch norm + ReLU, parameters under `prefix`.
pub fn conv_bn_relu<T: Scalar, G: Graph<T>>(
    g: &mut G,
    x: &G::V,
    prefix: &str,
    stride: usize,
    mode: Mode,
) -> Result<G::V> {
    let w = g.param(&format!("{prefix}/w"))?;
    let y = g.conv2d(x, &w, stride, Padding::Same)?;
    let y = g.batchnorm(&y, prefix, mode)?;
    g.relu(&y)
}

/// Fire module: squeeze 1x1, then expand 1x1 and expand 3x3 in parallel,
/// concatenated as `(expand1x1, expand3x3)`.
pub fn fire_forward<T: Scalar, G: Graph<T>>(g: &mut G, x: &G::V, prefix: &str, mode: Mode) -> Result<G::V> {
    let s = conv_bn_relu(g, x, &format!("{prefix}/squeeze"), 1, mode)?;
    let e1 = conv_bn_relu(g, &s, &format!("{prefix}/expand1x1"), 1, mode)?;
    let e3 = conv_bn_relu(g, &s, &format!("{prefix}/expand3x3"), 1, mode)?;
    g.concat(&e1, &e3)
}

/// Classification head over `[B, C, H, W]` features, returning `[B, classes]` logits.
pub fn head_forward<T: Scalar, G: Graph<T>>(
    g: &mut G,
    x: &G::V,
    prefix: &str,
    head: &HeadSpec,
    mode: Mode,
    dropout: f64,
) -> Result<G::V> {
    let features = match head.kind {
        HeadKind::Wap => {
            let w = g.param(&format!("{prefix}/gwap/w"))?;
            let pooled = g.gwap(x, &w)?;
            g.dropout(&pooled, dropout, mode)?
        }
        HeadKind::Gap => {
            let pooled = g.gap(x)?;
            g.dropout(&pooled, dropout, mode)?
        }
        HeadKind::Fc { .. } => {
            let flat = g.flatten(x)?;
            let flat = g.dropout(&flat, dropout, mode)?;
            let w = g.param(&format!("{prefix}/fc/w"))?;
            let b = g.param(&format!("{prefix}/fc/b"))?;
            let h = g.linear(&flat, &w, &b)?;
            g.relu(&h)?
        }
    };
    let w = g.param(&format!("{prefix}/classifier/w"))?;
    let b = g.param(&format!("{prefix}/classifier/b"))?;
    g.linear(&features, &w, &b)
}

/// One head to evaluate in a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRequest {
    pub name: String,
    /// Mode for the head and, for branches, the branch fire module.
    pub mode: Mode,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPlan {
    pub backbone_mode: Mode,
    pub heads: Vec<HeadRequest>,
}

impl ForwardPlan {
    /// Every head, inference mode.
    pub fn inference(spec: &NetworkSpec) -> Self {
        Self::inference_for(spec, &spec.head_names())
    }

    pub fn inference_for<S: AsRef<str>>(spec: &NetworkSpec, heads: &[S]) -> Self {
        Self {
            backbone_mode: Mode::Infer,
            heads: heads
                .iter()
                .map(|h| HeadRequest {
                    name: h.as_ref().to_string(),
                    mode: Mode::Infer,
                    dropout: spec.head_spec(h.as_ref()).map_or(0.0, |s| s.dropout),
                })
                .collect(),
        }
    }
}

/// A network description together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Scalar = f32> {
    spec: NetworkSpec,
    params: Parameters<T>,
}

/// Validates `spec` and allocates seeded initial parameters.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network<f32>> {
    let decls = declare(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = Parameters::initialize(&decls, &mut rng);
    Ok(Network { spec: spec.clone(), params })
}

impl<T: Scalar> Network<T> {
    /// Pairs a spec with an existing parameter store, checking the two agree.
    pub fn new(spec: NetworkSpec, params: Parameters<T>) -> Result<Self> {
        params.check_against(&declare(&spec)?)?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &Parameters<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters<T> {
        &mut self.params
    }

    pub fn into_parts(self) -> (NetworkSpec, Parameters<T>) {
        (self.spec, self.params)
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network { spec: self.spec.clone(), params: self.params.cast() }
    }

    /// Runs backbone layer `idx` on `x`.
    pub fn backbone_layer<G: Graph<T>>(&self, g: &mut G, idx: usize, x: &G::V, mode: Mode) -> Result<G::V> {
        let layer = self
            .spec
            .backbone
            .get(idx)
            .ok_or_else(|| Error::Usage(format!("no backbone layer {idx}")))?;
        match layer {
            LayerSpec::Conv { name, stride, .. } => conv_bn_relu(g, x, &format!("{BACKBONE}/{name}"), *stride, mode),
            LayerSpec::MaxPool { .. } => g.maxpool(x),
            LayerSpec::Fire { name, .. } => fire_forward(g, x, &format!("{BACKBONE}/{name}"), mode),
        }
    }

    /// Head `name` applied to the backbone features it attaches to. For a
    /// branch this runs the branch fire module first.
    pub fn head<G: Graph<T>>(&self, g: &mut G, name: &str, features: &G::V, mode: Mode, dropout: f64) -> Result<G::V> {
        if name == FINAL_HEAD {
            return head_forward(g, features, FINAL_HEAD, &self.spec.head, mode, dropout);
        }
        let branch = self
            .spec
            .branch(name)
            .ok_or_else(|| Error::Usage(format!("unknown head {name}")))?;
        let y = fire_forward(g, features, &format!("{name}/fire"), mode)?;
        head_forward(g, &y, name, &branch.head, mode, dropout)
    }

    /// Forward pass computing the requested heads' logits, in request order.
    /// Backbone layers past the deepest requested attach point are skipped.
    pub fn forward<G: Graph<T>>(&self, g: &mut G, input: G::V, plan: &ForwardPlan) -> Result<IndexMap<String, G::V>> {
        let mut attach = Vec::with_capacity(plan.heads.len());
        for req in &plan.heads {
            let idx = self
                .spec
                .head_attach_index(&req.name)
                .ok_or_else(|| Error::Usage(format!("unknown head {}", req.name)))?;
            attach.push(idx);
        }
        let Some(&last) = attach.iter().max() else {
            return Ok(IndexMap::new());
        };
        let mut computed: Vec<Option<G::V>> = (0..plan.heads.len()).map(|_| None).collect();
        let mut x = input;
        for idx in 0..=last {
            x = self.backbone_layer(g, idx, &x, plan.backbone_mode)?;
            for (slot, (req, &at)) in plan.heads.iter().zip(&attach).enumerate() {
                if at == idx {
                    computed[slot] = Some(self.head(g, &req.name, &x, req.mode, req.dropout)?);
                }
            }
        }
        Ok(plan
            .heads
            .iter()
            .zip(computed)
            .map(|(req, v)| (req.name.clone(), v.expect("every head computed")))
            .collect())
    }

    /// Inference-mode logits of every head for a `[B, C, H, W]` batch.
    pub fn infer_logits(&self, images: &Tensor<T>) -> Result<IndexMap<String, Tensor<T>>> {
        self.infer_logits_for(images, &self.spec.head_names())
    }

    pub fn infer_logits_for<S: AsRef<str>>(&self, images: &Tensor<T>, heads: &[S]) -> Result<IndexMap<String, Tensor<T>>> {
        let [c, h, w] = self.spec.input_shape();
        match images.shape() {
            [_, ic, ih, iw] if (*ic, *ih, *iw) == (c, h, w) => {}
            s => return Err(Error::dim(format!("network expects [B, {c}, {h}, {w}] input, got {s:?}"))),
        }
        let mut g = EagerGraph::new(&self.params);
        let plan = ForwardPlan::inference_for(&self.spec, heads);
        let out = self.forward(&mut g, std::borrow::Cow::Borrowed(images), &plan)?;
        Ok(out.into_iter().map(|(k, v)| (k, v.into_owned())).collect())
    }

    /// Inference-mode class probabilities of every head.
    pub fn infer_probs(&self, images: &Tensor<T>) -> Result<IndexMap<String, Tensor<T>>> {
        self.infer_logits(images)?
            .into_iter()
            .map(|(k, v)| Ok((k, ops::softmax_rows(&v)?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::params::ParamKind;

    #[test]
    fn default_parameter_totals() {
        let cascaded = build_network(&NetworkSpec::cascaded(3755).unwrap(), 0).unwrap();
        assert_eq!(cascaded.params().scalar_count(), 5_352_705);
        let baseline = build_network(&NetworkSpec::baseline(3755).unwrap(), 0).unwrap();
        assert_eq!(baseline.params().scalar_count(), 2_689_259);
    }

    #[test]
    fn fire2_parameter_count() {
        let net = build_network(&NetworkSpec::baseline(10).unwrap(), 0).unwrap();
        let fire2: usize = net
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with("backbone/fire2/"))
            .map(|(_, p)| p.value.len())
            .sum();
        assert_eq!(fire2, 11_840);
    }

    #[test]
    fn final_gwap_weight_size() {
        let net = build_network(&NetworkSpec::baseline(3755).unwrap(), 0).unwrap();
        assert_eq!(net.params().get("final/gwap/w").unwrap().shape(), &[512, 8, 8]);
        assert_eq!(net.params().get("final/gwap/w").unwrap().len(), 32_768);
    }

    #[test]
    fn builds_are_seed_deterministic() {
        let spec = NetworkSpec::hccr(10, 4, true).unwrap();
        assert_eq!(build_network(&spec, 9).unwrap(), build_network(&spec, 9).unwrap());
        assert_ne!(build_network(&spec, 9).unwrap(), build_network(&spec, 10).unwrap());
    }

    #[test]
    fn declared_names_match_store() {
        let spec = NetworkSpec::cascaded(10).unwrap();
        let net = build_network(&spec, 1).unwrap();
        let decls = declare(&spec).unwrap();
        let names: Vec<&str> = net.params().names().collect();
        let declared: Vec<&str> = decls.iter().map(|d| d.name.as_str()).collect();
        assert_eq!(names, declared);
        assert!(names.contains(&"backbone/fire2/squeeze/w"));
        assert!(names.contains(&"mid_a/gwap/w"));
        assert_eq!(net.params().kind("mid_b/fire/expand3x3/bn/var"), Some(ParamKind::BnVar));
    }

    #[test]
    fn mismatched_store_rejected() {
        let spec = NetworkSpec::hccr(10, 8, true).unwrap();
        let (_, mut params) = build_network(&spec, 0).unwrap().into_parts();
        params.insert("stray/w", ParamKind::ConvWeight, Tensor::zeros(&[1]));
        assert!(Network::new(spec, params).is_err());
    }

    #[test]
    fn scaled_forward_yields_all_heads() {
        let spec = NetworkSpec::hccr(7, 8, true).unwrap();
        let net = build_network(&spec, 3).unwrap();
        let x = Tensor::<f32>::full(&[2, 1, 64, 64], 0.5);
        let out = net.infer_logits(&x).unwrap();
        assert_eq!(out.keys().collect::<Vec<_>>(), vec!["mid_a", "mid_b", "final"]);
        for v in out.values() {
            assert_eq!(v.shape(), &[2, 7]);
            assert!(v.is_finite());
        }
    }

    #[test]
    fn partial_plan_stops_early() {
        let spec = NetworkSpec::hccr(5, 8, true).unwrap();
        let net = build_network(&spec, 3).unwrap();
        let x = Tensor::<f32>::full(&[1, 1, 64, 64], 0.25);
        let mid = net.infer_logits_for(&x, &["mid_a"]).unwrap();
        let all = net.infer_logits(&x).unwrap();
        assert_eq!(mid["mid_a"], all["mid_a"]);
        assert!(net.infer_logits_for(&x, &["mid_z"]).is_err());
    }

    #[test]
    fn wrong_input_size_rejected() {
        let net = build_network(&NetworkSpec::hccr(5, 8, false).unwrap(), 0).unwrap();
        assert!(net.infer_logits(&Tensor::<f32>::zeros(&[1, 1, 32, 32])).is_err());
    }
}
