//! Closed-form parameter and multiply-accumulate accounting.
//!
//! One MAC counts as one op. Only convolutions, GWAP and linear layers cost
//! MACs; pooling, batch norm, activations and softmax are free. Every conv
//! carries four batch-norm values per output channel (gamma, beta, running
//! mean, running variance) and no bias.

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::Serialize;

use crate::arch::{FeatureShape, FireSpec, HeadKind, HeadSpec, LayerSpec, NetworkSpec, ParamKind, BACKBONE, FINAL_HEAD};
use crate::error::Result;
use crate::quant::{QuantScheme, StorageReport};

/// MACs of a `k x k` stride-1 same-padded conv from `m` to `n` channels on a `d x d` map.
pub fn standard_conv_cost(m: u64, n: u64, d: u64, k: u64) -> u64 {
    k * k * m * n * d * d
}

/// Sum of the three constituent conv costs of a fire module.
pub fn fire_spec_cost(fire: &FireSpec, d: u64) -> u64 {
    let (m, s, e1, e3) =
        (fire.in_channels as u64, fire.squeeze as u64, fire.expand1x1 as u64, fire.expand3x3 as u64);
    standard_conv_cost(m, s, d, 1) + standard_conv_cost(s, e1, d, 1) + standard_conv_cost(s, e3, d, 3)
}

/// Fire module MACs under the default sizing (squeeze `N/8`, expands `N/2`):
/// `(M + 5N) N D^2 / 8`. When `N` is not a multiple of 8 the closed form is
/// not integral, so the constituent convs are summed instead with squeeze
/// `max(N/8, 1)` and expands `N/2`, `N - N/2`.
pub fn fire_cost(m: u64, n: u64, d: u64) -> u64 {
    if n.is_multiple_of(8) {
        (m + 5 * n) * n * d * d / 8
    } else {
        let fire = FireSpec {
            in_channels: m as usize,
            out_channels: n as usize,
            squeeze: (n as usize / 8).max(1),
            expand1x1: n as usize / 2,
            expand3x3: n as usize - n as usize / 2,
        };
        fire_spec_cost(&fire, d)
    }
}

/// `fire_cost / standard_conv_cost = 1/72 + 5N/(72M)`; the map size cancels.
pub fn reduction_ratio(m: u64, n: u64) -> Ratio<u64> {
    Ratio::new(1, 72) + Ratio::new(5 * n, 72 * m)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    /// `backbone` or the owning head/branch name.
    pub scope: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExitCost {
    pub name: String,
    /// MACs from the input through this exit's classifier.
    pub macs: u64,
    /// Parameters touched on that path.
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub exits: Vec<ExitCost>,
    pub storage: Option<StorageReport>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn exit(&self, name: &str) -> Option<&ExitCost> {
        self.exits.iter().find(|e| e.name == name)
    }

    /// MACs owned exclusively by a scope (a branch's fire module and head).
    pub fn scope_macs(&self, scope: &str) -> u64 {
        self.layers.iter().filter(|l| l.scope == scope).map(|l| l.macs).sum()
    }

    pub fn scope_params(&self, scope: &str) -> u64 {
        self.layers.iter().filter(|l| l.scope == scope).map(|l| l.params).sum()
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>12} {:>14}", "layer", "params", "macs");
        for l in &self.layers {
            let _ = writeln!(out, "{:<16} {:>12} {:>14}", l.name, group(l.params), group(l.macs));
        }
        let _ = writeln!(out, "{:<16} {:>12} {:>14}", "total", group(self.total_params()), group(self.total_macs()));
        if !self.exits.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<16} {:>12} {:>14} {:>10}", "exit", "params", "macs", "x10^8");
            for e in &self.exits {
                let _ = writeln!(
                    out,
                    "{:<16} {:>12} {:>14} {:>10.3}",
                    e.name,
                    group(e.params),
                    group(e.macs),
                    e.macs as f64 / 1e8
                );
            }
        }
        if let Some(s) = &self.storage {
            let _ = writeln!(out);
            let _ = writeln!(out, "storage ({}): {:.0} bytes = {:.2} MiB", s.scheme, s.total_bytes(), s.mebibytes());
        }
        out
    }

    /// One `layer,params,macs` line per layer, then `exit:<name>,params,macs`
    /// lines and, when present, a `storage_bytes,<n>` line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,params,macs\n");
        for l in &self.layers {
            let _ = writeln!(out, "{},{},{}", l.name, l.params, l.macs);
        }
        for e in &self.exits {
            let _ = writeln!(out, "exit:{},{},{}", e.name, e.params, e.macs);
        }
        if let Some(s) = &self.storage {
            let _ = writeln!(out, "storage_bytes,{}", s.total_bytes());
        }
        out
    }
}

/// Thousands-grouped integer, e.g. `11,534,336`.
pub fn group(v: u64) -> String {
    let digits = v.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Accumulates layer costs and, for storage, per-kind tensor counts.
struct Tally {
    layers: Vec<LayerCost>,
    storage: Option<StorageReport>,
}

impl Tally {
    fn tensor(&mut self, kind: ParamKind, values: u64) {
        if let Some(s) = &mut self.storage {
            s.add(kind, values);
        }
    }

    /// Conv + batch norm; returns (params, macs).
    fn conv(&mut self, cin: u64, cout: u64, k: u64, out_h: u64, out_w: u64) -> (u64, u64) {
        let weights = k * k * cin * cout;
        self.tensor(ParamKind::ConvWeight, weights);
        for kind in [ParamKind::BnGamma, ParamKind::BnBeta, ParamKind::BnMean, ParamKind::BnVar] {
            self.tensor(kind, cout);
        }
        (weights + 4 * cout, weights * out_h * out_w)
    }

    fn fire(&mut self, fire: &FireSpec, d: u64) -> (u64, u64) {
        let (m, s, e1, e3) =
            (fire.in_channels as u64, fire.squeeze as u64, fire.expand1x1 as u64, fire.expand3x3 as u64);
        let a = self.conv(m, s, 1, d, d);
        let b = self.conv(s, e1, 1, d, d);
        let c = self.conv(s, e3, 3, d, d);
        (a.0 + b.0 + c.0, a.1 + b.1 + c.1)
    }

    fn head(&mut self, head: &HeadSpec, feat: FeatureShape) -> (u64, u64) {
        let [c, h, w] = feat.map(|v| v as u64);
        let classes = head.num_classes as u64;
        let (mut params, mut macs, pooled) = match head.kind {
            HeadKind::Wap => {
                self.tensor(ParamKind::GwapWeight, c * h * w);
                (c * h * w, c * h * w, c)
            }
            HeadKind::Gap => (0, 0, c),
            HeadKind::Fc { hidden } => {
                let hidden = hidden as u64;
                self.tensor(ParamKind::HiddenWeight, c * h * w * hidden);
                self.tensor(ParamKind::HiddenBias, hidden);
                (c * h * w * hidden + hidden, c * h * w * hidden, hidden)
            }
        };
        self.tensor(ParamKind::ClassifierWeight, pooled * classes);
        self.tensor(ParamKind::ClassifierBias, classes);
        params += pooled * classes + classes;
        macs += pooled * classes;
        (params, macs)
    }

    fn push(&mut self, name: String, scope: &str, (params, macs): (u64, u64)) {
        self.layers.push(LayerCost { name, scope: scope.to_string(), params, macs });
    }
}

/// Costs for a bare layer sequence starting from `input`. An empty list
/// yields an empty report.
pub fn layers_cost(layers: &[LayerSpec], input: FeatureShape) -> Result<CostReport> {
    let mut tally = Tally { layers: Vec::new(), storage: None };
    let mut cur = input;
    for layer in layers {
        cur = backbone_layer(&mut tally, layer, cur)?;
    }
    Ok(CostReport { layers: tally.layers, exits: Vec::new(), storage: None })
}

fn backbone_layer(tally: &mut Tally, layer: &LayerSpec, cur: FeatureShape) -> Result<FeatureShape> {
    let [c, h, w] = cur;
    Ok(match layer {
        LayerSpec::Conv { name, out_channels, kernel, stride } => {
            let pad = (kernel - 1) / 2;
            let oh = (h + 2 * pad - kernel) / stride + 1;
            let ow = (w + 2 * pad - kernel) / stride + 1;
            let cost = tally.conv(c as u64, *out_channels as u64, *kernel as u64, oh as u64, ow as u64);
            tally.push(name.clone(), BACKBONE, cost);
            [*out_channels, oh, ow]
        }
        LayerSpec::MaxPool { name } => {
            tally.push(name.clone(), BACKBONE, (0, 0));
            [c, h / 2, w / 2]
        }
        LayerSpec::Fire { name, fire } => {
            // Fire modules keep the map square in every spec this crate builds;
            // the constituent sum handles rectangles via h*w below.
            let (params, _) = tally.fire(fire, 1);
            let macs = fire_spec_cost(fire, 1) * (h * w) as u64;
            tally.push(name.clone(), BACKBONE, (params, macs));
            [fire.out_channels, h, w]
        }
    })
}

/// Per-layer costs, per-exit path totals and (optionally) storage for a spec.
pub fn network_cost(spec: &NetworkSpec, quant: Option<&QuantScheme>) -> Result<CostReport> {
    let shapes = spec.validate()?;
    if let Some(q) = quant {
        q.validate()?;
    }
    let mut tally = Tally { layers: Vec::new(), storage: quant.map(|q| StorageReport::new(*q)) };
    let mut cur = spec.input_shape();
    let mut prefix_macs = Vec::with_capacity(spec.backbone.len());
    let mut prefix_params = Vec::with_capacity(spec.backbone.len());
    let (mut macs_acc, mut params_acc) = (0u64, 0u64);
    for layer in &spec.backbone {
        cur = backbone_layer(&mut tally, layer, cur)?;
        let last = tally.layers.last().expect("layer pushed");
        macs_acc += last.macs;
        params_acc += last.params;
        prefix_macs.push(macs_acc);
        prefix_params.push(params_acc);
    }
    let last = shapes.last().copied().unwrap_or(spec.input_shape());
    let final_cost = tally.head(&spec.head, last);
    tally.push(format!("{FINAL_HEAD}/head"), FINAL_HEAD, final_cost);

    let mut exits = Vec::new();
    for br in &spec.branches {
        let at = spec.layer_index(&br.attach_after).expect("validated");
        let [_, h, w] = shapes[at];
        let (fp, _) = tally.fire(&br.fire, 1);
        let fire_macs = fire_spec_cost(&br.fire, 1) * (h * w) as u64;
        tally.push(format!("{}/fire", br.name), &br.name, (fp, fire_macs));
        let head_cost = tally.head(&br.head, [br.fire.out_channels, h, w]);
        tally.push(format!("{}/head", br.name), &br.name, head_cost);
        exits.push(ExitCost {
            name: br.name.clone(),
            macs: prefix_macs[at] + fire_macs + head_cost.1,
            params: prefix_params[at] + fp + head_cost.0,
        });
    }
    exits.push(ExitCost {
        name: FINAL_HEAD.to_string(),
        macs: prefix_macs.last().copied().unwrap_or(0) + final_cost.1,
        params: prefix_params.last().copied().unwrap_or(0) + final_cost.0,
    });
    Ok(CostReport { layers: tally.layers, exits, storage: tally.storage })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_layer_ops() {
        assert_eq!(standard_conv_cost(1, 64, 64, 3), 2_359_296);
        assert_eq!(standard_conv_cost(1, 1, 1, 1), 1);
    }

    #[test]
    fn fire_rows() {
        assert_eq!(fire_cost(64, 128, 32), 11_534_336);
        assert_eq!(fire_cost(256, 384, 8), 6_684_672);
    }

    #[test]
    fn fire_closed_form_matches_constituents() {
        let m = 64;
        let n = 128;
        let d = 32;
        let sum = standard_conv_cost(m, n / 8, d, 1) + standard_conv_cost(n / 8, n / 2, d, 1) + standard_conv_cost(n / 8, n / 2, d, 3);
        assert_eq!(fire_cost(m, n, d), sum);
    }

    #[test]
    fn non_multiple_of_eight_falls_back() {
        let f = FireSpec { in_channels: 5, out_channels: 12, squeeze: 1, expand1x1: 6, expand3x3: 6 };
        assert_eq!(fire_cost(5, 12, 4), fire_spec_cost(&f, 4));
    }

    #[test]
    fn reduction_ratio_values() {
        assert_eq!(reduction_ratio(7, 7), Ratio::new(1, 12));
        assert_eq!(reduction_ratio(10, 20), Ratio::new(11, 72));
        let r = reduction_ratio(10, 20);
        assert!(r > Ratio::new(1, 9) && r < Ratio::new(1, 6));
    }

    #[test]
    fn empty_layer_list() {
        let r = layers_cost(&[], [1, 8, 8]).unwrap();
        assert!(r.layers.is_empty());
        assert_eq!((r.total_params(), r.total_macs()), (0, 0));
    }

    #[test]
    fn grouped_numbers() {
        assert_eq!(group(11_534_336), "11,534,336");
        assert_eq!(group(832), "832");
        assert_eq!(group(0), "0");
    }

    #[test]
    fn csv_lists_every_layer() {
        let r = network_cost(&NetworkSpec::baseline(3755).unwrap(), None).unwrap();
        let csv = r.to_csv();
        assert!(csv.contains("\nfire2,11840,11534336\n"));
        assert!(csv.contains("\nconv1,832,2359296\n"));
        assert!(csv.contains("\nmaxpool1,0,0\n"));
    }
}
