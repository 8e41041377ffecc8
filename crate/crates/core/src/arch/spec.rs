//! Declarative network description: backbone layers, exit branches and heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fire module sizing: a 1x1 squeeze conv feeding parallel 1x1 and 3x3 expand convs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FireSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub squeeze: usize,
    pub expand1x1: usize,
    pub expand3x3: usize,
}

impl FireSpec {
    /// Default sizing: squeeze to `N/8`, expand to `N/2 + N/2`.
    pub fn standard(in_channels: usize, out_channels: usize) -> Result<Self> {
        if out_channels == 0 || !out_channels.is_multiple_of(8) {
            return Err(Error::Spec(format!(
                "standard fire sizing needs output channels divisible by 8, got {out_channels}"
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            squeeze: out_channels / 8,
            expand1x1: out_channels / 2,
            expand3x3: out_channels / 2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.squeeze == 0 || self.expand1x1 == 0 || self.expand3x3 == 0 {
            return Err(Error::Spec(format!("fire module has a zero-width layer: {self:?}")));
        }
        if self.expand1x1 + self.expand3x3 != self.out_channels {
            return Err(Error::Spec(format!(
                "fire expand widths {} + {} do not sum to declared output {}",
                self.expand1x1, self.expand3x3, self.out_channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Bias-free conv with batch norm and ReLU, same padding.
    Conv { name: String, out_channels: usize, kernel: usize, stride: usize },
    MaxPool { name: String },
    Fire { name: String, fire: FireSpec },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv { name, .. } | LayerSpec::MaxPool { name } | LayerSpec::Fire { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    /// Flatten, hidden linear layer with ReLU, then the classifier.
    Fc { hidden: usize },
    /// Global average pooling, then the classifier.
    Gap,
    /// Global weighted average pooling, then the classifier.
    Wap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    #[serde(flatten)]
    pub kind: HeadKind,
    pub num_classes: usize,
    pub dropout: f64,
}

impl HeadSpec {
    pub fn wap(num_classes: usize, dropout: f64) -> Self {
        Self { kind: HeadKind::Wap, num_classes, dropout }
    }
}

/// An auxiliary exit: a fire module and head attached after a backbone layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub name: String,
    pub attach_after: String,
    pub fire: FireSpec,
    pub head: HeadSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_size: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub backbone: Vec<LayerSpec>,
    pub head: HeadSpec,
    #[serde(default)]
    pub branches: Vec<BranchSpec>,
}

/// `[channels, height, width]` of a feature map.
pub type FeatureShape = [usize; 3];

pub const FINAL_HEAD: &str = "final";
pub const MID_A: &str = "mid_a";
pub const MID_B: &str = "mid_b";

impl NetworkSpec {
    /// The 64x64 baseline backbone (conv1, fire2..fire9 with three pools) and a
    /// WAP final head, optionally with the Mid-A (after fire4) and Mid-B
    /// (after fire6) exits. `width_divisor` scales every channel count down.
    pub fn hccr(num_classes: usize, width_divisor: usize, with_branches: bool) -> Result<Self> {
        if width_divisor == 0 {
            return Err(Error::Spec("width divisor must be positive".into()));
        }
        let ch = |c: usize| -> Result<usize> {
            if !c.is_multiple_of(width_divisor) {
                return Err(Error::Spec(format!("{c} channels not divisible by {width_divisor}")));
            }
            Ok(c / width_divisor)
        };
        let fire_widths = [
            ("fire2", 64, 128),
            ("fire3", 128, 128),
            ("fire4", 128, 256),
            ("fire5", 256, 256),
            ("fire6", 256, 384),
            ("fire7", 384, 384),
            ("fire8", 384, 512),
            ("fire9", 512, 512),
        ];
        let fire = |idx: usize| -> Result<LayerSpec> {
            let (name, m, n) = fire_widths[idx];
            Ok(LayerSpec::Fire { name: name.into(), fire: FireSpec::standard(ch(m)?, ch(n)?)? })
        };
        let pool = |name: &str| LayerSpec::MaxPool { name: name.into() };
        let backbone = vec![
            LayerSpec::Conv { name: "conv1".into(), out_channels: ch(64)?, kernel: 3, stride: 1 },
            pool("maxpool1"),
            fire(0)?,
            fire(1)?,
            pool("maxpool2"),
            fire(2)?,
            fire(3)?,
            pool("maxpool3"),
            fire(4)?,
            fire(5)?,
            fire(6)?,
            fire(7)?,
        ];
        let branches = if with_branches {
            vec![
                BranchSpec {
                    name: MID_A.into(),
                    attach_after: "fire4".into(),
                    fire: FireSpec::standard(ch(256)?, ch(256)?)?,
                    head: HeadSpec::wap(num_classes, 0.2),
                },
                BranchSpec {
                    name: MID_B.into(),
                    attach_after: "fire6".into(),
                    fire: FireSpec::standard(ch(384)?, ch(384)?)?,
                    head: HeadSpec::wap(num_classes, 0.2),
                },
            ]
        } else {
            Vec::new()
        };
        let spec = Self {
            input_size: 64,
            input_channels: 1,
            num_classes,
            backbone,
            head: HeadSpec::wap(num_classes, 0.5),
            branches,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Full-width cascaded network with both mid exits.
    pub fn cascaded(num_classes: usize) -> Result<Self> {
        Self::hccr(num_classes, 1, true)
    }

    /// Full-width backbone with only the final head.
    pub fn baseline(num_classes: usize) -> Result<Self> {
        Self::hccr(num_classes, 1, false)
    }

    pub fn input_shape(&self) -> FeatureShape {
        [self.input_channels, self.input_size, self.input_size]
    }

    /// Checks channel flow, names and head sizes. Returns the output shape of
    /// every backbone layer.
    pub fn validate(&self) -> Result<Vec<FeatureShape>> {
        if self.input_size == 0 || self.input_channels == 0 || self.num_classes == 0 {
            return Err(Error::Spec("input size, channels and class count must be positive".into()));
        }
        let mut shapes = Vec::with_capacity(self.backbone.len());
        let mut cur = self.input_shape();
        for (i, layer) in self.backbone.iter().enumerate() {
            if self.backbone[..i].iter().any(|l| l.name() == layer.name()) {
                return Err(Error::Spec(format!("duplicate layer name {}", layer.name())));
            }
            cur = layer_output(layer, cur)?;
            shapes.push(cur);
        }
        let last = shapes.last().copied().unwrap_or(cur);
        check_head(&self.head, last, self.num_classes, FINAL_HEAD)?;
        for (i, br) in self.branches.iter().enumerate() {
            if br.name == FINAL_HEAD || self.branches[..i].iter().any(|b| b.name == br.name) {
                return Err(Error::Spec(format!("branch name {} is reserved or duplicated", br.name)));
            }
            let at = self.layer_index(&br.attach_after).ok_or_else(|| {
                Error::Spec(format!("branch {} attaches after unknown layer {}", br.name, br.attach_after))
            })?;
            let feat = shapes[at];
            let out = fire_output(&br.fire, feat, &br.name)?;
            check_head(&br.head, out, self.num_classes, &br.name)?;
        }
        Ok(shapes)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.backbone.iter().position(|l| l.name() == name)
    }

    pub fn branch(&self, name: &str) -> Option<&BranchSpec> {
        self.branches.iter().find(|b| b.name == name)
    }

    /// Branch names in declaration order followed by the final head.
    pub fn head_names(&self) -> Vec<String> {
        self.branches
            .iter()
            .map(|b| b.name.clone())
            .chain(std::iter::once(FINAL_HEAD.to_string()))
            .collect()
    }

    pub fn head_spec(&self, name: &str) -> Option<&HeadSpec> {
        if name == FINAL_HEAD {
            Some(&self.head)
        } else {
            self.branch(name).map(|b| &b.head)
        }
    }

    /// Backbone layer index after which head `name` reads its features
    /// (the last layer for the final head).
    pub fn head_attach_index(&self, name: &str) -> Option<usize> {
        if name == FINAL_HEAD {
            self.backbone.len().checked_sub(1)
        } else {
            self.layer_index(&self.branch(name)?.attach_after)
        }
    }
}

pub(crate) fn fire_output(fire: &FireSpec, input: FeatureShape, name: &str) -> Result<FeatureShape> {
    fire.validate()?;
    if fire.in_channels != input[0] {
        return Err(Error::Spec(format!(
            "{name}: fire expects {} input channels but receives {}",
            fire.in_channels, input[0]
        )));
    }
    Ok([fire.out_channels, input[1], input[2]])
}

fn layer_output(layer: &LayerSpec, input: FeatureShape) -> Result<FeatureShape> {
    let [c, h, w] = input;
    match layer {
        LayerSpec::Conv { name, out_channels, kernel, stride } => {
            if *out_channels == 0 || *stride == 0 || kernel % 2 == 0 {
                return Err(Error::Spec(format!("{name}: needs positive width, stride and odd kernel")));
            }
            let pad = (kernel - 1) / 2;
            if *kernel > h + 2 * pad || *kernel > w + 2 * pad {
                return Err(Error::Spec(format!("{name}: kernel larger than input")));
            }
            Ok([*out_channels, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1])
        }
        LayerSpec::MaxPool { name } => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Spec(format!("{name}: pooling needs even spatial size, got {h}x{w}")));
            }
            Ok([c, h / 2, w / 2])
        }
        LayerSpec::Fire { name, fire } => fire_output(fire, input, name),
    }
}

fn check_head(head: &HeadSpec, _features: FeatureShape, num_classes: usize, name: &str) -> Result<()> {
    if head.num_classes != num_classes {
        return Err(Error::Spec(format!(
            "head {name} has {} classes but the network has {num_classes}",
            head.num_classes
        )));
    }
    if !(0.0..1.0).contains(&head.dropout) {
        return Err(Error::Spec(format!("head {name}: dropout {} outside [0, 1)", head.dropout)));
    }
    if let HeadKind::Fc { hidden: 0 } = head.kind {
        return Err(Error::Spec(format!("head {name}: FC head needs hidden units")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spatial_and_channel_flow() {
        let spec = NetworkSpec::cascaded(3755).unwrap();
        let shapes = spec.validate().unwrap();
        let channels: Vec<usize> = shapes.iter().map(|s| s[0]).collect();
        assert_eq!(channels, vec![64, 64, 128, 128, 128, 256, 256, 256, 384, 384, 512, 512]);
        let sizes: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
        assert_eq!(sizes, vec![64, 32, 32, 32, 16, 16, 16, 8, 8, 8, 8, 8]);
    }

    #[test]
    fn fire_sizing_rule() {
        let f = FireSpec::standard(64, 128).unwrap();
        assert_eq!((f.squeeze, f.expand1x1, f.expand3x3), (16, 64, 64));
        let bad = FireSpec { expand3x3: 63, ..f };
        assert!(matches!(bad.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn unknown_attach_point_rejected() {
        let mut spec = NetworkSpec::cascaded(10).unwrap();
        spec.branches[0].attach_after = "fire42".into();
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn channel_flow_inconsistency_rejected() {
        let mut spec = NetworkSpec::cascaded(10).unwrap();
        spec.branches[1].fire.in_channels = 256;
        assert!(spec.validate().is_err());
        let mut spec = NetworkSpec::baseline(10).unwrap();
        if let LayerSpec::Fire { fire, .. } = &mut spec.backbone[3] {
            fire.in_channels = 64;
        }
        assert!(spec.validate().is_err());
    }

    #[test]
    fn head_class_mismatch_rejected() {
        let mut spec = NetworkSpec::baseline(10).unwrap();
        spec.head.num_classes = 11;
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn scaled_variant_divides_channels() {
        let spec = NetworkSpec::hccr(10, 4, true).unwrap();
        let shapes = spec.validate().unwrap();
        assert_eq!(shapes.last().unwrap(), &[128, 8, 8]);
        assert!(NetworkSpec::hccr(10, 3, true).is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = NetworkSpec::cascaded(20).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<NetworkSpec>(&text).unwrap(), spec);
    }
}
