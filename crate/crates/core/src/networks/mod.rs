//! Generator, critic, segmenter and the frozen perceptual feature extractor.

mod critic;
mod features;
mod generator;
mod segmenter;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBudget, AttentionKind};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use critic::Critic;
pub use features::FeatureExtractor;
pub use generator::Generator;
pub use segmenter::Segmenter;

/// Target contrasts, indexed as in the one-hot domain code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contrast {
    T2f,
    T1c,
    T1n,
}

impl Contrast {
    pub const ALL: [Contrast; 3] = [Contrast::T2f, Contrast::T1c, Contrast::T1n];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(k: usize) -> Result<Self> {
        Self::ALL
            .get(k)
            .copied()
            .ok_or_else(|| Error::invalid(format!("contrast index {k} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Contrast::T2f => "t2f",
            Contrast::T1c => "t1c",
            Contrast::T1n => "t1n",
        }
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut c = [0.0; 3];
        c[self.index()] = 1.0;
        c
    }
}

impl std::str::FromStr for Contrast {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t2f" => Ok(Contrast::T2f),
            "t1c" => Ok(Contrast::T1c),
            "t1n" => Ok(Contrast::T1n),
            _ => Err(Error::invalid(format!("unknown contrast `{s}` (expected t2f, t1c or t1n)"))),
        }
    }
}

impl std::fmt::Display for Contrast {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Validates a one-hot code given as raw values.
pub fn validate_code(code: &[f64]) -> Result<Contrast> {
    let ones = code.iter().filter(|&&v| v == 1.0).count();
    let zeros = code.iter().filter(|&&v| v == 0.0).count();
    if code.len() != 3 || ones != 1 || zeros != 2 {
        return Err(Error::invalid(format!("invalid one-hot domain code {:?}", code)));
    }
    Contrast::from_index(code.iter().position(|&v| v == 1.0).unwrap())
}

/// Broadcasts per-sample codes to `[B, 3, D, H, W]`.
pub fn code_volume<T: Scalar>(codes: &[Contrast], dims: [usize; 3]) -> Result<Tensor<T>> {
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(codes.len() * 3 * n);
    for c in codes {
        for v in c.one_hot() {
            data.extend(std::iter::repeat(T::of(v)).take(n));
        }
    }
    Tensor::from_vec(data, &[codes.len(), 3, dims[0], dims[1], dims[2]])
}

/// Concatenates a single-channel volume with its broadcast domain code.
pub fn with_code<T: Scalar>(x: &Tensor<T>, codes: &[Contrast]) -> Result<Tensor<T>> {
    let [b, c, d, h, w] = x.dims5()?;
    if c != 1 || b != codes.len() {
        return Err(Error::shape(
            "with_code",
            format!("expected [{}, 1, D, H, W], got {:?}", codes.len(), x.shape()),
        ));
    }
    Tensor::concat(&[x, &code_volume(codes, [d, h, w])?], 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Channel width per encoder stage; each stage halves the resolution.
    pub widths: Vec<usize>,
    /// Attention after each encoder stage.
    pub encoder_attention: Vec<AttentionKind>,
    /// Attention after each gated decoder stage, deepest first.
    pub decoder_attention: Vec<AttentionKind>,
    pub bottleneck_blocks: usize,
    pub bottleneck_attention: AttentionKind,
    pub groups: usize,
    /// Width of the full-resolution output head.
    pub head_width: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        use AttentionKind::*;
        Self {
            widths: vec![16, 32, 64, 128],
            encoder_attention: vec![Mbha, Mbha, Mbha, Full],
            decoder_attention: vec![Full, Mbha, Mbha],
            bottleneck_blocks: 1,
            bottleneck_attention: Full,
            groups: 8,
            head_width: 8,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 || self.widths.contains(&0) {
            return Err(Error::invalid("generator needs at least one stage of positive width"));
        }
        if self.encoder_attention.len() != n || self.decoder_attention.len() + 1 != n {
            return Err(Error::invalid(format!(
                "{n} stages need {n} encoder and {} decoder attention entries, got {} and {}",
                n - 1,
                self.encoder_attention.len(),
                self.decoder_attention.len()
            )));
        }
        if self.groups == 0 || self.head_width == 0 {
            return Err(Error::invalid("groups and head width must be positive"));
        }
        Ok(())
    }

    /// Input dims must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.widths.len()
    }

    /// Replaces every hybrid attention stage by `kind`.
    pub fn replace_mbha(&mut self, kind: AttentionKind) {
        for k in self.encoder_attention.iter_mut().chain(self.decoder_attention.iter_mut()) {
            if *k == AttentionKind::Mbha {
                *k = kind;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    /// Widths of the strided trunk convolutions.
    pub widths: Vec<usize>,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub base_width: usize,
    pub levels: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self { base_width: 8, levels: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub widths: [usize; 4],
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            widths: [8, 16, 32, 64],
            seed: 20_231_105,
        }
    }
}

/// All architecture settings, as stored in checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
    pub segmenter: SegmenterConfig,
    pub features: FeatureConfig,
    pub budget: AttentionBudget,
}

pub(crate) fn check_divisible(dims: [usize; 3], k: usize, op: &'static str) -> Result<()> {
    if dims.iter().any(|&d| d == 0 || d % k != 0) {
        return Err(Error::shape(op, format!("spatial dims {:?} must be divisible by {k}", dims)));
    }
    Ok(())
}
