//! Train-time span masking of bottleneck tokens.
//!
//! Token `s` summarises frames `s·w .. (s+1)·w` (`w` = token width). Tokens
//! whose window contains a phase transition, including one at the window's
//! first frame or at the first frame of the next window, are never masked.

use ndarray::{Array2, ArrayView1};
use rand::Rng;

use crate::error::{Result, TunesError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingConfig {
    /// Fraction of tokens to mask.
    pub coverage: f64,
    pub min_span: usize,
    pub max_span: usize,
    /// Frames per bottleneck token.
    pub token_width: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            coverage: 0.35,
            min_span: 1,
            max_span: 17,
            token_width: 18,
        }
    }
}

/// Masked token spans `(start, length)`, sorted by start.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskPlan {
    num_tokens: usize,
    spans: Vec<(usize, usize)>,
}

impl MaskPlan {
    /// Checks that spans are in range, non-empty and pairwise disjoint.
    pub fn new(num_tokens: usize, mut spans: Vec<(usize, usize)>) -> Result<Self> {
        spans.sort_unstable();
        let mut end = 0;
        for &(start, len) in &spans {
            if len == 0 || start < end || start + len > num_tokens {
                return Err(TunesError::param(format!(
                    "span ({start}, {len}) is empty, overlaps or exceeds {num_tokens} tokens"
                )));
            }
            end = start + len;
        }
        Ok(Self { num_tokens, spans })
    }

    pub fn empty(num_tokens: usize) -> Self {
        Self {
            num_tokens,
            spans: Vec::new(),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn masked_count(&self) -> usize {
        self.spans.iter().map(|s| s.1).sum()
    }

    pub fn coverage(&self) -> f64 {
        self.masked_count() as f64 / self.num_tokens.max(1) as f64
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.num_tokens];
        for &(start, len) in &self.spans {
            flags[start..start + len].fill(true);
        }
        flags
    }

    /// Flags for a sequence of `num_tokens` tokens, which must match the plan.
    pub fn token_flags(&self, num_tokens: usize) -> Result<Vec<bool>> {
        if num_tokens != self.num_tokens {
            return Err(TunesError::shape(format!(
                "mask plan covers {} tokens, sequence has {num_tokens}",
                self.num_tokens
            )));
        }
        Ok(self.flags())
    }
}

/// Tokens that may be masked: their label window, widened by one frame on
/// both sides, is constant.
pub fn maskable_tokens(labels: &[u8], token_width: usize) -> Result<Vec<bool>> {
    if token_width == 0 || labels.is_empty() || labels.len() % token_width != 0 {
        return Err(TunesError::shape(format!(
            "{} labels do not form whole tokens of width {token_width}",
            labels.len()
        )));
    }
    let n = labels.len() / token_width;
    Ok((0..n)
        .map(|s| {
            let lo = (s * token_width).saturating_sub(1);
            let hi = ((s + 1) * token_width + 1).min(labels.len());
            labels[lo..hi].iter().all(|&l| l == labels[lo])
        })
        .collect())
}

/// Draws spans until `round(coverage·S)` tokens are masked or no legal span
/// is left. Spans never touch each other or a transition token.
pub fn plan_span_mask<R: Rng + ?Sized>(labels: &[u8], config: &MaskingConfig, rng: &mut R) -> Result<MaskPlan> {
    if config.min_span == 0 || config.max_span < config.min_span || !(0.0..=1.0).contains(&config.coverage) {
        return Err(TunesError::param(format!("invalid masking configuration {config:?}")));
    }
    let free = maskable_tokens(labels, config.token_width)?;
    let n = free.len();
    let target = (config.coverage * n as f64).round() as usize;
    let mut masked = vec![false; n];
    let mut spans = Vec::new();
    let mut count = 0;
    while count < target {
        let mut len = rng.gen_range(config.min_span..=config.max_span).min(target - count);
        let starts = loop {
            let legal: Vec<usize> = (0..n.saturating_sub(len - 1))
                .filter(|&s| {
                    (s..s + len).all(|i| free[i] && !masked[i])
                        && (s == 0 || !masked[s - 1])
                        && (s + len == n || !masked[s + len])
                })
                .collect();
            if !legal.is_empty() || len == 1 {
                break legal;
            }
            len -= 1;
        };
        if starts.is_empty() {
            break;
        }
        let start = starts[rng.gen_range(0..starts.len())];
        masked[start..start + len].fill(true);
        spans.push((start, len));
        count += len;
    }
    MaskPlan::new(n, spans)
}

/// Replaces masked rows of a token matrix by `embedding`.
pub fn apply_mask(tokens: &Array2<f32>, plan: &MaskPlan, embedding: ArrayView1<'_, f32>) -> Result<Array2<f32>> {
    let flags = plan.token_flags(tokens.nrows())?;
    if embedding.len() != tokens.ncols() {
        return Err(TunesError::shape(format!(
            "mask embedding has {} channels, tokens {}",
            embedding.len(),
            tokens.ncols()
        )));
    }
    let mut out = tokens.clone();
    for (mut row, _) in out.rows_mut().into_iter().zip(flags).filter(|(_, f)| *f) {
        row.assign(&embedding);
    }
    Ok(out)
}
