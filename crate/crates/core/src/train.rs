//! Mini-batch SGD with momentum, L2 weight decay and plateau learning-rate
//! decay, for joint (multi-task) or two-phase (separate) training.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{scope_of, EagerGraph, ForwardPlan, HeadRequest, Network, Parameters, TapeGraph, BACKBONE, FINAL_HEAD};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ops::{Mode, RunningStats, BN_MOMENTUM};
use crate::tape::{GradientTape, Var};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    /// Evaluations without improvement before the learning rate decays.
    pub plateau_patience: usize,
    /// Accuracy gain (as a fraction) that counts as improvement.
    pub plateau_min_delta: f64,
    /// Training stops once the learning rate falls below this.
    pub min_lr: f64,
    pub weight_decay: f64,
    /// Overrides the final head's dropout rate from the spec.
    pub dropout_final: Option<f64>,
    /// Overrides the branch heads' dropout rate from the spec.
    pub dropout_mid: Option<f64>,
    pub seed: u64,
    /// Per phase.
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            momentum: 0.9,
            initial_lr: 0.1,
            lr_decay_factor: 0.1,
            plateau_patience: 3,
            plateau_min_delta: 0.001,
            min_lr: 1e-5,
            weight_decay: 1e-5,
            dropout_final: None,
            dropout_mid: None,
            seed: 0,
            max_epochs: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Param(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} not in [0, 1)", self.momentum));
        }
        // lr = 0 is allowed as a frozen dry run.
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("learning rate {} must be non-negative", self.initial_lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad(format!("lr_decay_factor {} not in (0, 1)", self.lr_decay_factor));
        }
        let negative = |v: f64| v.is_nan() || v < 0.0;
        if negative(self.weight_decay) || negative(self.plateau_min_delta) {
            return bad("weight_decay and plateau_min_delta must be non-negative".into());
        }
        for d in [self.dropout_final, self.dropout_mid].into_iter().flatten() {
            if !(0.0..1.0).contains(&d) {
                return bad(format!("dropout {d} not in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Param(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::error::read_file(path)?;
        Self::from_toml(&String::from_utf8(bytes).map_err(|_| Error::Param(format!("{}: not UTF-8", path.display())))?)
    }

    fn dropout_for(&self, net: &Network<f32>, head: &str) -> f64 {
        let spec = net.spec().head_spec(head).map_or(0.0, |h| h.dropout);
        let over = if head == FINAL_HEAD { self.dropout_final } else { self.dropout_mid };
        over.unwrap_or(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStrategy {
    /// All heads at once, minimising the unweighted sum of their losses.
    MultiTask,
    /// Backbone + final head first; then each branch alone on frozen features.
    Separate,
}

impl std::str::FromStr for TrainStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "multitask" => Ok(TrainStrategy::MultiTask),
            "separate" => Ok(TrainStrategy::Separate),
            _ => Err(Error::Param(format!("unknown strategy {s:?} (multitask|separate)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: IndexMap<String, Tensor<f32>>,
    pub lr: f64,
    pub history: Vec<f64>,
    best: Option<f64>,
    stale: usize,
}

impl OptimizerState {
    pub fn new(lr: f64) -> Self {
        Self { velocity: IndexMap::new(), lr, history: Vec::new(), best: None, stale: 0 }
    }
}

/// `v <- m v - lr (g + wd w)`, `w <- w + v` for every gradient. Decay skips
/// biases; running statistics may not receive gradients at all.
pub fn sgd_step(
    params: &mut Parameters<f32>,
    grads: &IndexMap<String, Tensor<f32>>,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    let lr = state.lr as f32;
    let m = config.momentum as f32;
    for (name, g) in grads {
        let kind = params.kind(name).ok_or_else(|| Error::Usage(format!("gradient for unknown parameter {name}")))?;
        if !kind.is_trainable() {
            return Err(Error::Usage(format!("{name} is a running statistic, not trainable")));
        }
        let w = params.get_mut(name)?;
        g.expect_shape(w.shape())
            .map_err(|_| Error::dim(format!("gradient for {name} is {:?}, parameter is {:?}", g.shape(), w.shape())))?;
        let wd = if kind.decays() { config.weight_decay as f32 } else { 0.0 };
        let v = state.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(w.shape()));
        v.expect_shape(w.shape())?;
        for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = m * *vi - lr * (gi + wd * *wi);
            *wi += *vi;
        }
    }
    Ok(())
}

/// Records an evaluation; decays the learning rate after `plateau_patience`
/// consecutive evaluations without a gain above `plateau_min_delta`.
/// Returns whether it decayed.
pub fn lr_on_plateau(state: &mut OptimizerState, accuracy: f64, config: &TrainConfig) -> bool {
    state.history.push(accuracy);
    match state.best {
        Some(best) if accuracy <= best + config.plateau_min_delta => state.stale += 1,
        _ => {
            state.best = Some(accuracy);
            state.stale = 0;
        }
    }
    if state.stale >= config.plateau_patience.max(1) {
        state.lr *= config.lr_decay_factor;
        state.stale = 0;
        true
    } else {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub head: String,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Inference-mode accuracy on the evaluation set (training set if none).
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,head,loss,accuracy,lr\n");
        for m in &self.metrics {
            let _ = writeln!(out, "{},{},{},{},{}", m.epoch, m.head, m.loss, m.accuracy, m.lr);
        }
        out
    }

    /// Metrics of the last epoch recorded for `head`.
    pub fn last(&self, head: &str) -> Option<&EpochMetrics> {
        self.metrics.iter().rev().find(|m| m.head == head)
    }
}

/// Trains `net` in place. Accuracy for plateau detection and metrics comes
/// from `eval` when given, else from the training set; both in inference mode.
pub fn train(
    net: &mut Network<f32>,
    data: &Dataset,
    eval: Option<&Dataset>,
    config: &TrainConfig,
    strategy: TrainStrategy,
) -> Result<TrainReport> {
    config.validate()?;
    check_dataset(net, data)?;
    if let Some(e) = eval {
        check_dataset(net, e)?;
    }
    let eval = eval.filter(|e| !e.is_empty()).unwrap_or(data);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainReport::default();
    match strategy {
        TrainStrategy::MultiTask => {
            let heads = net.spec().head_names();
            run_full_phase(net, data, eval, &heads, &|_| true, config, &mut rng, &mut report)?;
        }
        TrainStrategy::Separate => {
            let trainable = |name: &str| matches!(scope_of(name), BACKBONE | FINAL_HEAD);
            run_full_phase(net, data, eval, &[FINAL_HEAD.to_string()], &trainable, config, &mut rng, &mut report)?;
            let branches: Vec<String> = net.spec().branches.iter().map(|b| b.name.clone()).collect();
            for name in branches {
                run_branch_phase(net, data, eval, &name, config, &mut rng, &mut report)?;
            }
        }
    }
    Ok(report)
}

fn check_dataset(net: &Network<f32>, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Param("training set is empty".into()));
    }
    if data.num_classes() > net.spec().num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, network {}",
            data.num_classes(),
            net.spec().num_classes
        )));
    }
    let [c, h, w] = net.spec().input_shape();
    if data.image_shape() != Some(&[c, h, w][..]) {
        return Err(Error::Data(format!("images are {:?}, network wants [{c}, {h}, {w}]", data.image_shape())));
    }
    Ok(())
}

/// Training input for one step.
enum StepInput<'a> {
    Images(Tensor<f32>),
    /// Frozen features for a single branch.
    Features(&'a str, Tensor<f32>),
}

/// Forward, backward, running-stat update and SGD step on one batch.
/// Returns the per-head losses.
#[allow(clippy::too_many_arguments)]
fn train_step(
    net: &mut Network<f32>,
    input: StepInput<'_>,
    labels: &[usize],
    heads: &[HeadRequest],
    trainable: &dyn Fn(&str) -> bool,
    state: &mut OptimizerState,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut tape = GradientTape::new();
    let (loss_vars, bound, bn_updates) = {
        let mut g = TapeGraph::new(&mut tape, net.params(), trainable, rng);
        let logits: Vec<Var> = match input {
            StepInput::Images(images) => {
                let x = g.input(images);
                let plan = ForwardPlan { backbone_mode: Mode::Train, heads: heads.to_vec() };
                net.forward(&mut g, x, &plan)?.into_values().collect()
            }
            StepInput::Features(name, features) => {
                let x = g.input(features);
                let req = &heads[0];
                vec![net.head(&mut g, name, &x, req.mode, req.dropout)?]
            }
        };
        let losses = logits.into_iter().map(|l| g.tape.softmax_xent(l, labels)).collect::<Result<Vec<_>>>()?;
        (losses, g.bound().clone(), g.take_bn_updates())
    };
    let values: Vec<f64> = loss_vars.iter().map(|&v| tape.value(v).data()[0] as f64).collect();
    let mut total = loss_vars[0];
    for &l in &loss_vars[1..] {
        total = tape.add(total, l)?;
    }
    let mut grads_by_var = tape.backward(total)?;
    let mut grads = IndexMap::new();
    for name in net.params().names() {
        if let Some(&v) = bound.get(name) {
            if trainable(name) && net.params().kind(name).is_some_and(|k| k.is_trainable()) {
                if let Some(g) = grads_by_var.take(v) {
                    grads.insert(name.to_string(), g);
                }
            }
        }
    }
    let params = net.params_mut();
    for upd in bn_updates {
        let mut stats = RunningStats {
            mean: params.get(&format!("{}/bn/mean", upd.prefix))?.data().to_vec(),
            var: params.get(&format!("{}/bn/var", upd.prefix))?.data().to_vec(),
        };
        stats.update(&upd.mean, &upd.var, upd.count, BN_MOMENTUM as f32);
        params.get_mut(&format!("{}/bn/mean", upd.prefix))?.data_mut().copy_from_slice(&stats.mean);
        params.get_mut(&format!("{}/bn/var", upd.prefix))?.data_mut().copy_from_slice(&stats.var);
    }
    sgd_step(params, &grads, state, config)?;
    Ok(values)
}

fn head_requests(net: &Network<f32>, heads: &[String], config: &TrainConfig) -> Vec<HeadRequest> {
    heads
        .iter()
        .map(|h| HeadRequest { name: h.clone(), mode: Mode::Train, dropout: config.dropout_for(net, h) })
        .collect()
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

const EVAL_CHUNK: usize = 64;

/// Inference-mode accuracy of each head over `data`.
pub fn accuracy_by_head(net: &Network<f32>, data: &Dataset, heads: &[String]) -> Result<Vec<f64>> {
    let mut correct = vec![0usize; heads.len()];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (images, labels) = data.batch(chunk)?;
        let logits = net.infer_logits_for(&images, heads)?;
        for (slot, l) in logits.values().enumerate() {
            correct[slot] += count_correct(l, &labels);
        }
    }
    Ok(correct.into_iter().map(|c| c as f64 / data.len().max(1) as f64).collect())
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let k = logits.dim(1);
    logits.data().chunks(k).zip(labels).filter(|(row, &l)| argmax(row) == l).count()
}

#[allow(clippy::too_many_arguments)]
fn run_full_phase(
    net: &mut Network<f32>,
    data: &Dataset,
    eval: &Dataset,
    heads: &[String],
    trainable: &dyn Fn(&str) -> bool,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    report: &mut TrainReport,
) -> Result<()> {
    let requests = head_requests(net, heads, config);
    let mut state = OptimizerState::new(config.initial_lr);
    // Plateau detection follows the final head when it is trained.
    let watch = heads.iter().position(|h| h == FINAL_HEAD).unwrap_or(0);
    for epoch in 1..=config.max_epochs {
        let lr = state.lr;
        let mut sums = vec![0.0; heads.len()];
        for (step, batch) in shuffled(data.len(), rng).chunks(config.batch_size).enumerate() {
            let (images, labels) = data.batch(batch)?;
            let losses = train_step(net, StepInput::Images(images), &labels, &requests, trainable, &mut state, config, rng)?;
            guard(&losses, epoch, step)?;
            for (s, l) in sums.iter_mut().zip(losses) {
                *s += l * batch.len() as f64;
            }
        }
        let acc = accuracy_by_head(net, eval, heads)?;
        for ((h, s), a) in heads.iter().zip(&sums).zip(&acc) {
            report.metrics.push(EpochMetrics { epoch, head: h.clone(), loss: s / data.len() as f64, accuracy: *a, lr });
        }
        lr_on_plateau(&mut state, acc[watch], config);
        if state.lr < config.min_lr {
            break;
        }
    }
    Ok(())
}

/// Features at the input of branch `name`, computed in inference mode, one
/// row per sample.
fn branch_features(net: &Network<f32>, data: &Dataset, name: &str) -> Result<Vec<Tensor<f32>>> {
    let at = net
        .spec()
        .head_attach_index(name)
        .ok_or_else(|| Error::Usage(format!("unknown head {name}")))?;
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (images, _) = data.batch(chunk)?;
        let mut g = EagerGraph::new(net.params());
        let mut x = Cow::Owned(images);
        for layer in 0..=at {
            x = net.backbone_layer(&mut g, layer, &x, Mode::Infer)?;
        }
        let x = x.into_owned();
        for i in 0..chunk.len() {
            out.push(x.item(i)?);
        }
    }
    Ok(out)
}

fn branch_accuracy(net: &Network<f32>, name: &str, features: &[Tensor<f32>], labels: &[usize]) -> Result<f64> {
    let mut correct = 0;
    for (chunk, lab) in features.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let batch = Tensor::stack(&chunk.iter().collect::<Vec<_>>())?;
        let mut g = EagerGraph::new(net.params());
        let logits = net.head(&mut g, name, &Cow::Owned(batch), Mode::Infer, 0.0)?;
        correct += count_correct(&logits, lab);
    }
    Ok(correct as f64 / labels.len().max(1) as f64)
}

fn run_branch_phase(
    net: &mut Network<f32>,
    data: &Dataset,
    eval: &Dataset,
    name: &str,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    report: &mut TrainReport,
) -> Result<()> {
    let train_feats = branch_features(net, data, name)?;
    let train_labels = data.labels();
    let (eval_feats, eval_labels) = if std::ptr::eq(eval, data) {
        (None, train_labels.clone())
    } else {
        (Some(branch_features(net, eval, name)?), eval.labels())
    };
    let requests = head_requests(net, &[name.to_string()], config);
    let prefix = format!("{name}/");
    let trainable = |p: &str| p.starts_with(&prefix);
    let mut state = OptimizerState::new(config.initial_lr);
    for epoch in 1..=config.max_epochs {
        let lr = state.lr;
        let mut sum = 0.0;
        for (step, batch) in shuffled(data.len(), rng).chunks(config.batch_size).enumerate() {
            let feats = Tensor::stack(&batch.iter().map(|&i| &train_feats[i]).collect::<Vec<_>>())?;
            let labels: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let losses = train_step(net, StepInput::Features(name, feats), &labels, &requests, &trainable, &mut state, config, rng)?;
            guard(&losses, epoch, step)?;
            sum += losses[0] * batch.len() as f64;
        }
        let acc = branch_accuracy(net, name, eval_feats.as_deref().unwrap_or(&train_feats), &eval_labels)?;
        report.metrics.push(EpochMetrics { epoch, head: name.to_string(), loss: sum / data.len() as f64, accuracy: acc, lr });
        lr_on_plateau(&mut state, acc, config);
        if state.lr < config.min_lr {
            break;
        }
    }
    Ok(())
}

fn guard(losses: &[f64], epoch: usize, step: usize) -> Result<()> {
    match losses.iter().find(|l| !l.is_finite()) {
        Some(&loss) => Err(Error::Diverged { epoch, step, loss }),
        None => Ok(()),
    }
}
