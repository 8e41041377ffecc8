//! Symmetric per-tensor fixed-point weight quantization and storage accounting.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arch::{ParamKind, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Storage class a parameter belongs to for quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Conv,
    Classifier,
    Gwap,
    /// Batch-norm gamma, beta and running statistics, always float32.
    BnFloat,
}

impl Bucket {
    pub const ALL: [Bucket; 4] = [Bucket::Conv, Bucket::Classifier, Bucket::Gwap, Bucket::BnFloat];

    pub fn of(kind: ParamKind) -> Bucket {
        match kind {
            ParamKind::ConvWeight => Bucket::Conv,
            ParamKind::GwapWeight => Bucket::Gwap,
            ParamKind::HiddenWeight
            | ParamKind::HiddenBias
            | ParamKind::ClassifierWeight
            | ParamKind::ClassifierBias => Bucket::Classifier,
            ParamKind::BnGamma | ParamKind::BnBeta | ParamKind::BnMean | ParamKind::BnVar => Bucket::BnFloat,
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bucket::Conv => "conv",
            Bucket::Classifier => "classifier",
            Bucket::Gwap => "gwap",
            Bucket::BnFloat => "bn_float",
        })
    }
}

/// Bits per weight for each quantized bucket; 32 means stored as plain float32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub conv_bits: u8,
    pub classifier_bits: u8,
    pub gwap_bits: u8,
}

pub const FLOAT_BITS: u8 = 32;

impl Default for QuantScheme {
    /// 8-bit conv, 4-bit classifier, 8-bit GWAP.
    fn default() -> Self {
        Self { conv_bits: 8, classifier_bits: 4, gwap_bits: 8 }
    }
}

impl QuantScheme {
    pub fn float32() -> Self {
        Self { conv_bits: FLOAT_BITS, classifier_bits: FLOAT_BITS, gwap_bits: FLOAT_BITS }
    }

    pub fn validate(&self) -> Result<()> {
        for bits in [self.conv_bits, self.classifier_bits, self.gwap_bits] {
            if !matches!(bits, 2 | 4 | 8 | 16 | FLOAT_BITS) {
                return Err(Error::Param(format!("unsupported bit width {bits}; use 2, 4, 8, 16 or 32")));
            }
        }
        Ok(())
    }

    pub fn bits_for(&self, bucket: Bucket) -> u8 {
        match bucket {
            Bucket::Conv => self.conv_bits,
            Bucket::Classifier => self.classifier_bits,
            Bucket::Gwap => self.gwap_bits,
            Bucket::BnFloat => FLOAT_BITS,
        }
    }

    /// Parses `conv=8,fc=4[,gwap=8]`. Unmentioned buckets keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut scheme = Self::default();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Param(format!("expected key=bits, got {part:?}")))?;
            let bits: u8 = value
                .trim()
                .parse()
                .map_err(|_| Error::Param(format!("bad bit width {value:?}")))?;
            match key.trim() {
                "conv" => scheme.conv_bits = bits,
                "fc" | "classifier" => scheme.classifier_bits = bits,
                "gwap" | "wap" => scheme.gwap_bits = bits,
                other => return Err(Error::Param(format!("unknown quantization bucket {other:?}"))),
            }
        }
        scheme.validate()?;
        Ok(scheme)
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "conv={},fc={},gwap={}", self.conv_bits, self.classifier_bits, self.gwap_bits)
    }
}

/// Integer codes with one scale: `value = code * scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Vec<i32>,
    pub scale: f32,
    pub bits: u8,
    pub shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn max_code(bits: u8) -> i32 {
        (1i32 << (bits - 1)) - 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bits) {
            return Err(Error::Data(format!("quantized tensor with {} bits", self.bits)));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Data(format!("quantization scale {} is not positive", self.scale)));
        }
        if self.codes.len() != self.shape.iter().product::<usize>() {
            return Err(Error::Data("quantized code count does not match shape".into()));
        }
        let max = Self::max_code(self.bits);
        if self.codes.iter().any(|c| c.abs() > max) {
            return Err(Error::Data(format!("code outside +-{max}")));
        }
        Ok(())
    }
}

/// Symmetric uniform quantization: `scale = max|t| / (2^(bits-1) - 1)`,
/// `code = round(t / scale)`. An all-zero tensor gets scale 1.
pub fn quantize_uniform(t: &Tensor<f32>, bits: u8) -> Result<QuantizedTensor> {
    if !(2..=16).contains(&bits) {
        return Err(Error::Param(format!("quantization needs 2..=16 bits, got {bits}")));
    }
    if t.is_empty() {
        return Err(Error::Data("cannot quantize an empty tensor".into()));
    }
    if !t.is_finite() {
        return Err(Error::Data("cannot quantize non-finite values".into()));
    }
    let max_code = QuantizedTensor::max_code(bits);
    let max_abs = t.max_abs() as f64;
    let scale = if max_abs == 0.0 { 1.0f32 } else { (max_abs / max_code as f64) as f32 };
    // A subnormal-range max can underflow the scale.
    let scale = if scale > 0.0 { scale } else { f32::MIN_POSITIVE };
    let s = scale as f64;
    let codes = t
        .data()
        .iter()
        .map(|&v| ((v as f64 / s).round() as i32).clamp(-max_code, max_code))
        .collect();
    Ok(QuantizedTensor { codes, scale, bits, shape: t.shape().to_vec() })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor<f32> {
    let s = q.scale as f64;
    let data = q.codes.iter().map(|&c| (c as f64 * s) as f32).collect();
    Tensor::new(&q.shape, data).expect("quantized tensor shape matches its codes")
}

/// A parameter as stored: raw float32 or quantized.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    Float(Tensor<f32>),
    Quantized(QuantizedTensor),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::Float(t) => t.shape(),
            StoredTensor::Quantized(q) => &q.shape,
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        match self {
            StoredTensor::Float(t) => t.clone(),
            StoredTensor::Quantized(q) => dequantize(q),
        }
    }

    /// Exact payload size in bits, including the 32-bit scale of quantized tensors.
    pub fn payload_bits(&self) -> u64 {
        match self {
            StoredTensor::Float(t) => t.len() as u64 * 32,
            StoredTensor::Quantized(q) => q.codes.len() as u64 * q.bits as u64 + 32,
        }
    }
}

/// Quantizes each parameter per its bucket's bit width; batch norm stays float.
pub fn quantize_params(params: &Parameters<f32>, scheme: &QuantScheme) -> Result<Vec<(String, ParamKind, StoredTensor)>> {
    scheme.validate()?;
    params
        .iter()
        .map(|(name, p)| {
            let bits = scheme.bits_for(Bucket::of(p.kind));
            let stored = if bits == FLOAT_BITS {
                StoredTensor::Float(p.value.clone())
            } else {
                StoredTensor::Quantized(quantize_uniform(&p.value, bits)?)
            };
            Ok((name.to_string(), p.kind, stored))
        })
        .collect()
}

/// Replaces every quantizable parameter with its dequantized value.
pub fn fake_quantize(params: &Parameters<f32>, scheme: &QuantScheme) -> Result<Parameters<f32>> {
    let mut out = Parameters::new();
    for (name, kind, stored) in quantize_params(params, scheme)? {
        out.insert(name, kind, stored.to_tensor());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct BucketUsage {
    pub values: u64,
    pub tensors: u64,
    pub bits: u8,
}

impl BucketUsage {
    /// Code bits plus a 32-bit scale per quantized tensor.
    pub fn total_bits(&self) -> u64 {
        let scales = if self.bits == FLOAT_BITS { 0 } else { self.tensors * 32 };
        self.values * self.bits as u64 + scales
    }
}

/// Storage of a parameter set under a [`QuantScheme`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StorageReport {
    pub scheme: QuantScheme,
    pub conv: BucketUsage,
    pub classifier: BucketUsage,
    pub gwap: BucketUsage,
    pub bn_float: BucketUsage,
}

impl StorageReport {
    pub fn new(scheme: QuantScheme) -> Self {
        let usage = |b| BucketUsage { bits: scheme.bits_for(b), ..Default::default() };
        Self {
            scheme,
            conv: usage(Bucket::Conv),
            classifier: usage(Bucket::Classifier),
            gwap: usage(Bucket::Gwap),
            bn_float: usage(Bucket::BnFloat),
        }
    }

    pub fn bucket(&self, b: Bucket) -> &BucketUsage {
        match b {
            Bucket::Conv => &self.conv,
            Bucket::Classifier => &self.classifier,
            Bucket::Gwap => &self.gwap,
            Bucket::BnFloat => &self.bn_float,
        }
    }

    fn bucket_mut(&mut self, b: Bucket) -> &mut BucketUsage {
        match b {
            Bucket::Conv => &mut self.conv,
            Bucket::Classifier => &mut self.classifier,
            Bucket::Gwap => &mut self.gwap,
            Bucket::BnFloat => &mut self.bn_float,
        }
    }

    /// Records one tensor of `values` elements.
    pub fn add(&mut self, kind: ParamKind, values: u64) {
        let usage = self.bucket_mut(Bucket::of(kind));
        usage.values += values;
        usage.tensors += 1;
    }

    pub fn total_bits(&self) -> u64 {
        Bucket::ALL.iter().map(|&b| self.bucket(b).total_bits()).sum()
    }

    pub fn total_bytes(&self) -> f64 {
        self.total_bits() as f64 / 8.0
    }

    /// Size in MiB (2^20 bytes).
    pub fn mebibytes(&self) -> f64 {
        self.total_bytes() / (1u64 << 20) as f64
    }

    pub fn total_values(&self) -> u64 {
        Bucket::ALL.iter().map(|&b| self.bucket(b).values).sum()
    }
}

/// Storage of `params` under `scheme`: `count * bits / 8` per bucket, 4 bytes
/// per quantized tensor's scale, batch norm at float32.
pub fn quantized_storage(params: &Parameters<f32>, scheme: &QuantScheme) -> Result<StorageReport> {
    scheme.validate().map_err(|e| Error::Accounting(e.to_string()))?;
    let mut report = StorageReport::new(*scheme);
    for (_, p) in params.iter() {
        report.add(p.kind, p.value.len() as u64);
    }
    Ok(report)
}
