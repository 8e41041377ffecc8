//! Confidence-gated early exit over a multi-head network.

use std::borrow::Cow;
use std::fmt::Write as _;

use serde::Serialize;

use crate::arch::{EagerGraph, Network, FINAL_HEAD, MID_B};
use crate::cost::network_cost;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ops::{softmax, Mode};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CascadePolicy {
    /// Exit early when the gating head's top probability is at least this.
    pub threshold: f64,
    pub exit_head: String,
    /// Late prediction averages the second branch's and the final head's
    /// probabilities; otherwise the final head alone decides.
    pub fuse_late: bool,
}

impl Default for CascadePolicy {
    fn default() -> Self {
        Self { threshold: 0.98, exit_head: crate::arch::MID_A.to_string(), fuse_late: true }
    }
}

impl CascadePolicy {
    pub fn with_threshold(threshold: f64) -> Self {
        Self { threshold, ..Self::default() }
    }

    /// Thresholds above 1 are accepted and mean "never exit early".
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(Error::Param(format!("threshold {} must be a non-negative probability", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExitPoint {
    Early,
    Late,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CascadeResult {
    pub predicted: usize,
    pub exit: ExitPoint,
    /// Top probability of the distribution that made the decision.
    pub confidence: f64,
    pub macs: u64,
}

/// MAC costs of the two exit paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PathCosts {
    pub early: u64,
    /// Full backbone, final head, the gating branch and (when fused) the
    /// second branch.
    pub late: u64,
}

/// A network prepared for cascaded inference.
pub struct Cascade<'a> {
    net: &'a Network<f32>,
    policy: CascadePolicy,
    gate_at: usize,
    costs: PathCosts,
}

impl<'a> Cascade<'a> {
    pub fn new(net: &'a Network<f32>, policy: CascadePolicy) -> Result<Self> {
        policy.validate()?;
        let spec = net.spec();
        if spec.branch(&policy.exit_head).is_none() {
            return Err(Error::Usage(format!("network has no branch {:?} to gate on", policy.exit_head)));
        }
        if policy.fuse_late && spec.branch(MID_B).is_none() {
            return Err(Error::Usage(format!("late fusion needs a {MID_B} branch")));
        }
        let gate_at = spec.head_attach_index(&policy.exit_head).expect("branch exists");
        let report = network_cost(spec, None)?;
        let early = report.exit(&policy.exit_head).expect("branch exit").macs;
        // Without fusion the second branch is never run, so it is not charged.
        let late = report.total_macs() - if policy.fuse_late { 0 } else { report.scope_macs(MID_B) };
        Ok(Self { net, policy, gate_at, costs: PathCosts { early, late } })
    }

    pub fn policy(&self) -> &CascadePolicy {
        &self.policy
    }

    pub fn costs(&self) -> PathCosts {
        self.costs
    }

    /// Classifies a `[B, C, H, W]` batch sample by sample.
    pub fn infer(&self, images: &Tensor<f32>) -> Result<Vec<CascadeResult>> {
        let [c, h, w] = self.net.spec().input_shape();
        match images.shape() {
            [_, ic, ih, iw] if (*ic, *ih, *iw) == (c, h, w) => {}
            s => return Err(Error::dim(format!("cascade expects [B, {c}, {h}, {w}] input, got {s:?}"))),
        }
        let net = self.net;
        let spec = net.spec();
        let mut g = EagerGraph::new(net.params());
        let mut x = Cow::Borrowed(images);
        for layer in 0..=self.gate_at {
            x = net.backbone_layer(&mut g, layer, &x, Mode::Infer)?;
        }
        let gate = net.head(&mut g, &self.policy.exit_head, &x, Mode::Infer, 0.0)?;
        let k = gate.dim(1);
        let mut results: Vec<Option<CascadeResult>> = vec![None; images.dim(0)];
        let mut late = Vec::new();
        for (i, row) in gate.data().chunks(k).enumerate() {
            // Argmax on logits so ties and rounding match standalone head evaluation.
            let best = argmax(row);
            let conf = softmax(row)?[best] as f64;
            if conf >= self.policy.threshold {
                results[i] = Some(CascadeResult { predicted: best, exit: ExitPoint::Early, confidence: conf, macs: self.costs.early });
            } else {
                late.push(i);
            }
        }
        if !late.is_empty() {
            let mid = x.into_owned();
            let rest = Tensor::stack(&late.iter().map(|&i| mid.item(i)).collect::<Result<Vec<_>>>()?.iter().collect::<Vec<_>>())?;
            // Continue only the undecided samples through the rest of the network.
            let mut y = Cow::Owned(rest);
            let mut probs_b = None;
            let mid_b_at = spec.head_attach_index(MID_B);
            for layer in self.gate_at + 1..spec.backbone.len() {
                y = net.backbone_layer(&mut g, layer, &y, Mode::Infer)?;
                if self.policy.fuse_late && mid_b_at == Some(layer) {
                    probs_b = Some(net.head(&mut g, MID_B, &y, Mode::Infer, 0.0)?.into_owned());
                }
            }
            let fin = net.head(&mut g, FINAL_HEAD, &y, Mode::Infer, 0.0)?;
            for (j, &i) in late.iter().enumerate() {
                let row = &fin.data()[j * k..(j + 1) * k];
                let mut p = softmax(row)?;
                let best = match &probs_b {
                    Some(b) => {
                        let pb = softmax(&b.data()[j * k..(j + 1) * k])?;
                        for (a, &bb) in p.iter_mut().zip(&pb) {
                            *a = (*a + bb) * 0.5;
                        }
                        argmax(&p)
                    }
                    None => argmax(row),
                };
                results[i] = Some(CascadeResult {
                    predicted: best,
                    exit: ExitPoint::Late,
                    confidence: p[best] as f64,
                    macs: self.costs.late,
                });
            }
        }
        Ok(results.into_iter().map(|r| r.expect("every sample decided")).collect())
    }
}

/// Convenience wrapper for a single `[C, H, W]` image.
pub fn cascade_infer(image: &Tensor<f32>, net: &Network<f32>, policy: &CascadePolicy) -> Result<CascadeResult> {
    let batch = Tensor::stack(&[image])?;
    Ok(Cascade::new(net, policy.clone())?.infer(&batch)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CascadeStats {
    pub threshold: f64,
    pub samples: usize,
    pub accuracy: f64,
    pub early_exit_fraction: f64,
    pub early_exits: usize,
    pub early_accuracy: Option<f64>,
    pub late_accuracy: Option<f64>,
    pub total_macs: u128,
    pub mean_macs: f64,
    pub costs: PathCosts,
}

impl CascadeStats {
    /// Mean cost relative to always taking the late path.
    pub fn cost_reduction(&self) -> f64 {
        1.0 - self.mean_macs / self.costs.late as f64
    }
}

const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub sample: String,
    pub exit: ExitPoint,
    pub confidence: f64,
    pub correct: bool,
}

/// Runs the cascade over a labelled dataset.
pub fn cascade_eval(data: &Dataset, net: &Network<f32>, policy: &CascadePolicy) -> Result<(CascadeStats, Vec<TraceRow>)> {
    if data.is_empty() {
        return Err(Error::Param("cascade evaluation needs a non-empty dataset".into()));
    }
    let cascade = Cascade::new(net, policy.clone())?;
    let mut trace = Vec::with_capacity(data.len());
    let (mut correct, mut early, mut early_ok, mut total) = (0usize, 0usize, 0usize, 0u128);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (images, labels) = data.batch(chunk)?;
        for ((r, &label), &i) in cascade.infer(&images)?.iter().zip(&labels).zip(chunk) {
            let ok = r.predicted == label;
            correct += ok as usize;
            total += r.macs as u128;
            if r.exit == ExitPoint::Early {
                early += 1;
                early_ok += ok as usize;
            }
            trace.push(TraceRow {
                sample: data.samples()[i].source_id.clone(),
                exit: r.exit,
                confidence: r.confidence,
                correct: ok,
            });
        }
    }
    let n = data.len();
    let late = n - early;
    let stats = CascadeStats {
        threshold: policy.threshold,
        samples: n,
        accuracy: correct as f64 / n as f64,
        early_exit_fraction: early as f64 / n as f64,
        early_exits: early,
        early_accuracy: (early > 0).then(|| early_ok as f64 / early as f64),
        late_accuracy: (late > 0).then(|| (correct - early_ok) as f64 / late as f64),
        total_macs: total,
        mean_macs: total as f64 / n as f64,
        costs: cascade.costs(),
    };
    Ok((stats, trace))
}

/// Standalone accuracy of one head.
pub fn head_eval(data: &Dataset, net: &Network<f32>, head: &str) -> Result<f64> {
    if net.spec().head_spec(head).is_none() {
        return Err(Error::Usage(format!("unknown head {head:?}")));
    }
    if data.is_empty() {
        return Err(Error::Param("evaluation needs a non-empty dataset".into()));
    }
    Ok(crate::train::accuracy_by_head(net, data, &[head.to_string()])?[0])
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("sample,exit,confidence,correct\n");
    for r in rows {
        let exit = match r.exit {
            ExitPoint::Early => "early",
            ExitPoint::Late => "late",
        };
        let _ = writeln!(out, "{},{},{},{}", r.sample, exit, r.confidence, r.correct as u8);
    }
    out
}

pub fn stats_table(stats: &[CascadeStats]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>9} {:>9} {:>11} {:>12} {:>15} {:>10}",
        "threshold", "accuracy", "early_exit", "early_acc", "mean_macs", "reduction"
    );
    for s in stats {
        let _ = writeln!(
            out,
            "{:>9.4} {:>9.4} {:>11.4} {:>12} {:>15.1} {:>9.1}%",
            s.threshold,
            s.accuracy,
            s.early_exit_fraction,
            s.early_accuracy.map_or("-".to_string(), |a| format!("{a:.4}")),
            s.mean_macs,
            100.0 * s.cost_reduction()
        );
    }
    out
}
