//! Ablation variants: each switches off one component of the full model or
//! changes the bottleneck depth.

use std::fmt;
use std::str::FromStr;

use crate::config::ExperimentConfig;
use crate::error::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// Transformer blocks without their convolution sub-layer.
    NoTransformerConv,
    NoMasking,
    NoAugmentation,
    /// Bottleneck keeps only the convolution sub-layers.
    ConvOnly,
    /// Offline model with unmasked attention in every block.
    NoMaskAlternation,
    Blocks(usize),
}

pub const BLOCK_COUNTS: [usize; 5] = [2, 4, 6, 8, 10];

impl Ablation {
    /// The single-component variants plus every block count.
    pub fn all() -> Vec<Ablation> {
        let mut out = vec![
            Ablation::Full,
            Ablation::NoTransformerConv,
            Ablation::NoMasking,
            Ablation::NoAugmentation,
            Ablation::ConvOnly,
            Ablation::NoMaskAlternation,
        ];
        out.extend(BLOCK_COUNTS.iter().map(|&n| Ablation::Blocks(n)));
        out
    }

    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        match self {
            Ablation::Full => {}
            Ablation::NoTransformerConv => c.model.transformer_conv = false,
            Ablation::NoMasking => c.train.masking = false,
            Ablation::NoAugmentation => c.train.augment = false,
            Ablation::ConvOnly => c.model.attention = false,
            Ablation::NoMaskAlternation => c.model.alternate_masks = false,
            Ablation::Blocks(n) => c.model.num_transformer_blocks = n,
        }
        c
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ablation::Full => f.write_str("full"),
            Ablation::NoTransformerConv => f.write_str("no-transformer-conv"),
            Ablation::NoMasking => f.write_str("no-masking"),
            Ablation::NoAugmentation => f.write_str("no-augmentation"),
            Ablation::ConvOnly => f.write_str("conv-only"),
            Ablation::NoMaskAlternation => f.write_str("no-mask-alternation"),
            Ablation::Blocks(n) => write!(f, "blocks-{n}"),
        }
    }
}

impl FromStr for Ablation {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(n) = s.strip_prefix("blocks-") {
            let n = n
                .parse()
                .map_err(|_| HarnessError::Config(format!("bad block count in {s:?}")))?;
            return Ok(Ablation::Blocks(n));
        }
        Ablation::all()
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown ablation {s:?}")))
    }
}
