//! Masked scaled dot-product attention and the normalization-free
//! Transformer block used at the U-Net bottleneck.

use std::rc::Rc;

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{attention_forward, Graph, Var};
use crate::error::{Result, TunesError};
use crate::ops::{Causality, ConvBlock, Linear, SequenceLayer};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    None,
    /// Query `s` may not see keys `t > s`.
    Causal,
    /// Query `s` may not see keys `t < s`.
    Anticausal,
    /// Query `s` may not see keys with `|t - s| > window`.
    Local(usize),
}

impl MaskKind {
    /// Whether query `s` may attend to key `t`. The diagonal is always allowed.
    pub fn allows(self, s: usize, t: usize) -> bool {
        match self {
            MaskKind::None => true,
            MaskKind::Causal => t <= s,
            MaskKind::Anticausal => t >= s,
            MaskKind::Local(w) => s.abs_diff(t) <= w,
        }
    }
}

/// An `S x T` boolean matrix of allowed (query, key) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    allowed: Array2<bool>,
}

impl AttentionMask {
    pub fn new(kind: MaskKind, queries: usize, keys: usize) -> Self {
        Self {
            allowed: Array2::from_shape_fn((queries, keys), |(s, t)| kind.allows(s, t)),
        }
    }

    /// Pairs allowed by both masks.
    pub fn intersect(&self, other: &AttentionMask) -> Result<Self> {
        if self.allowed.dim() != other.allowed.dim() {
            return Err(TunesError::shape(format!(
                "mask {:?} vs {:?}",
                self.allowed.dim(),
                other.allowed.dim()
            )));
        }
        let mut allowed = self.allowed.clone();
        allowed.zip_mut_with(&other.allowed, |a, &b| *a = *a && b);
        Ok(Self { allowed })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.allowed.dim()
    }

    pub fn is_allowed(&self, s: usize, t: usize) -> bool {
        self.allowed[[s, t]]
    }

    pub fn allowed(&self) -> ArrayView2<'_, bool> {
        self.allowed.view()
    }
}

/// Softmax-weighted sum of value rows. Masked pairs get weight exactly zero; a
/// query row with every key masked is an error.
pub fn scaled_dot_attention(
    queries: ArrayView2<'_, f32>,
    keys: ArrayView2<'_, f32>,
    values: ArrayView2<'_, f32>,
    mask: &AttentionMask,
) -> Result<Array2<f32>> {
    if keys.nrows() != values.nrows() {
        return Err(TunesError::shape(format!(
            "{} keys but {} values",
            keys.nrows(),
            values.nrows()
        )));
    }
    if queries.ncols() != keys.ncols() {
        return Err(TunesError::shape(format!(
            "query width {} != key width {}",
            queries.ncols(),
            keys.ncols()
        )));
    }
    // the shared kernel splits value columns per head, so run it once per
    // value width with a single head
    let (out, _) = attention_forward_any_width(queries, keys, values, mask.allowed())?;
    Ok(out)
}

fn attention_forward_any_width(
    q: ArrayView2<'_, f32>,
    k: ArrayView2<'_, f32>,
    v: ArrayView2<'_, f32>,
    allowed: ArrayView2<'_, bool>,
) -> Result<(Array2<f32>, Vec<Array2<f32>>)> {
    if v.ncols() == k.ncols() {
        return attention_forward(q, k, v, 1, allowed);
    }
    // compute weights with V := K, then reuse them on the real values
    let (_, probs) = attention_forward(q, k, k, 1, allowed)?;
    Ok((probs[0].dot(&v), probs))
}

/// Multi-head self-attention: per-head linear maps to `head_dim`-wide Q/K/V,
/// attention, concatenation and a linear map back to `dim`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        if heads == 0 || head_dim == 0 {
            return Err(TunesError::param(format!(
                "{name}: heads ({heads}) and head width ({head_dim}) must be positive"
            )));
        }
        let inner = heads * head_dim;
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), dim, inner, true)?,
            key: Linear::new(store, rng, &format!("{name}.key"), dim, inner, true)?,
            value: Linear::new(store, rng, &format!("{name}.value"), dim, inner, true)?,
            output: Linear::new(store, rng, &format!("{name}.output"), inner, dim, true)?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn projections(&self) -> [&Linear; 4] {
        [&self.query, &self.key, &self.value, &self.output]
    }

    pub fn forward(&self, g: &Graph<'_>, x: Var, kind: MaskKind) -> Result<Var> {
        let (len, _) = g.shape(x);
        let mask = AttentionMask::new(kind, len, len);
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let attended = g.attention(q, k, v, self.heads, Rc::new(mask.allowed))?;
        self.output.forward(g, attended)
    }
}

/// Settings that shape one bottleneck block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerBlockSpec {
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub kernel_size: usize,
    pub conv_mode: Causality,
    pub mask: MaskKind,
    /// Leading convolutional block (local inductive bias).
    pub with_conv: bool,
    /// Attention and feedforward sub-layers.
    pub with_attention: bool,
}

/// Convolutional block followed by residual attention and a residual GELU
/// feedforward network. There is no normalization and no dropout.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    conv: Option<ConvBlock>,
    attention: Option<MultiHeadAttention>,
    ffn_in: Option<Linear>,
    ffn_out: Option<Linear>,
    spec: TransformerBlockSpec,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, spec: TransformerBlockSpec) -> Result<Self> {
        let conv = if spec.with_conv {
            Some(ConvBlock::new(
                store,
                rng,
                &format!("{name}.conv_block"),
                spec.dim,
                spec.kernel_size,
                1,
                spec.conv_mode,
            )?)
        } else {
            None
        };
        let (attention, ffn_in, ffn_out) = if spec.with_attention {
            (
                Some(MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("{name}.attention"),
                    spec.dim,
                    spec.heads,
                    spec.head_dim,
                )?),
                Some(Linear::new(store, rng, &format!("{name}.ffn_in"), spec.dim, spec.ffn_dim, true)?),
                Some(Linear::new(store, rng, &format!("{name}.ffn_out"), spec.ffn_dim, spec.dim, true)?),
            )
        } else {
            (None, None, None)
        };
        Ok(Self {
            conv,
            attention,
            ffn_in,
            ffn_out,
            spec,
        })
    }

    pub fn spec(&self) -> &TransformerBlockSpec {
        &self.spec
    }

    pub fn mask(&self) -> MaskKind {
        self.spec.mask
    }

    pub fn conv_block(&self) -> Option<&ConvBlock> {
        self.conv.as_ref()
    }

    pub fn attention(&self) -> Option<&MultiHeadAttention> {
        self.attention.as_ref()
    }

    pub fn feedforward(&self) -> Option<(&Linear, &Linear)> {
        self.ffn_in.as_ref().zip(self.ffn_out.as_ref())
    }

    /// The residual attention and feedforward sub-layers alone.
    pub fn attend(&self, g: &Graph<'_>, x: Var) -> Result<Var> {
        let (Some(attention), Some(ffn_in), Some(ffn_out)) = (&self.attention, &self.ffn_in, &self.ffn_out) else {
            return Ok(x);
        };
        let a = attention.forward(g, x, self.spec.mask)?;
        let y = g.add(x, a)?;
        let h = g.gelu(ffn_in.forward(g, y)?);
        let f = ffn_out.forward(g, h)?;
        g.add(y, f)
    }
}

impl SequenceLayer for TransformerBlock {
    fn forward(&self, g: &Graph<'_>, x: Var) -> Result<Var> {
        let (_, c) = g.shape(x);
        if c != self.spec.dim {
            return Err(TunesError::param(format!(
                "transformer block expects {} channels, got {c}",
                self.spec.dim
            )));
        }
        let y = match &self.conv {
            Some(conv) => conv.forward(g, x)?,
            None => x,
        };
        self.attend(g, y)
    }

    fn in_channels(&self) -> usize {
        self.spec.dim
    }

    fn output_len(&self, input_len: usize) -> usize {
        input_len
    }

    fn causality(&self) -> Causality {
        let conv_causal = self.conv.as_ref().is_none_or(|c| c.causality().is_causal());
        let attention_causal = self.attention.is_none() || self.spec.mask == MaskKind::Causal;
        if conv_causal && attention_causal {
            Causality::Causal
        } else {
            Causality::Acausal
        }
    }

    fn horizon(&self, out_index: usize) -> usize {
        out_index
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::tests::random;
    use crate::probe::dependency_rows;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn spec(mask: MaskKind, conv_mode: Causality) -> TransformerBlockSpec {
        TransformerBlockSpec {
            dim: 8,
            heads: 2,
            head_dim: 8,
            ffn_dim: 16,
            kernel_size: 3,
            conv_mode,
            mask,
            with_conv: true,
            with_attention: true,
        }
    }

    #[test]
    fn mask_rules() {
        for s in 0..6 {
            for t in 0..6 {
                assert_eq!(MaskKind::Causal.allows(s, t), t <= s);
                assert_eq!(MaskKind::Anticausal.allows(s, t), t >= s);
                assert_eq!(MaskKind::Local(2).allows(s, t), s.abs_diff(t) <= 2);
                assert!(MaskKind::None.allows(s, t));
            }
            for kind in [MaskKind::None, MaskKind::Causal, MaskKind::Anticausal, MaskKind::Local(0)] {
                assert!(kind.allows(s, s));
            }
        }
    }

    #[test]
    fn identical_keys_give_mean_of_values() {
        let q = random(&mut rng(), 3, 4);
        let k = Array2::from_elem((5, 4), 0.3);
        let v = random(&mut rng(), 5, 2);
        let out = scaled_dot_attention(q.view(), k.view(), v.view(), &AttentionMask::new(MaskKind::None, 3, 5)).unwrap();
        let mean = v.mean_axis(ndarray::Axis(0)).unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn causal_first_query_returns_first_value() {
        let mut r = rng();
        let (q, k, v) = (random(&mut r, 4, 3), random(&mut r, 4, 3), random(&mut r, 4, 3));
        let out = scaled_dot_attention(q.view(), k.view(), v.view(), &AttentionMask::new(MaskKind::Causal, 4, 4)).unwrap();
        assert_eq!(out.row(0), v.row(0));
    }

    #[test]
    fn two_key_hand_example() {
        let q = array![[1.0f32, 0.0]];
        let k = array![[1.0f32, 0.0], [0.0, 1.0]];
        let v = array![[1.0f32, 0.0], [0.0, 1.0]];
        let out = scaled_dot_attention(q.view(), k.view(), v.view(), &AttentionMask::new(MaskKind::None, 1, 2)).unwrap();
        // softmax(1/sqrt(2), 0)
        let a = (1.0f64 / 2f64.sqrt()).exp();
        let w1 = a / (a + 1.0);
        assert_abs_diff_eq!(f64::from(out[[0, 0]]), w1, epsilon = 1e-6);
        assert_abs_diff_eq!(f64::from(out[[0, 1]]), 1.0 - w1, epsilon = 1e-6);
        assert_abs_diff_eq!(out[[0, 0]], 0.6698, epsilon = 1e-4);
    }

    #[test]
    fn fully_masked_row_errors_instead_of_nan() {
        let mask = AttentionMask {
            allowed: array![[true, true, true], [false, false, false]],
        };
        let x = Array2::<f32>::ones((3, 2));
        let err = scaled_dot_attention(x.slice(ndarray::s![..2, ..]), x.view(), x.view(), &mask).unwrap_err();
        assert!(matches!(err, TunesError::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn causal_and_anticausal_compose_to_self_only() {
        let mut r = rng();
        let (q, k, v) = (random(&mut r, 5, 3), random(&mut r, 5, 3), random(&mut r, 5, 3));
        let mask = AttentionMask::new(MaskKind::Causal, 5, 5)
            .intersect(&AttentionMask::new(MaskKind::Anticausal, 5, 5))
            .unwrap();
        let out = scaled_dot_attention(q.view(), k.view(), v.view(), &mask).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn single_head_identity_projection_matches_plain_attention() {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng(), "mha", 4, 1, 4).unwrap();
        for lin in mha.projections() {
            *store.get_mut(lin.weight()) = Array2::eye(4);
            store.get_mut(lin.bias().unwrap()).fill(0.0);
        }
        let x = random(&mut rng(), 6, 4);
        let g = Graph::inference(&store);
        let xv = g.input(x.clone());
        let y = mha.forward(&g, xv, MaskKind::Causal).unwrap();
        let reference = scaled_dot_attention(x.view(), x.view(), x.view(), &AttentionMask::new(MaskKind::Causal, 6, 6)).unwrap();
        for (a, b) in g.value(y).iter().zip(reference.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn attention_preserves_length() {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng(), "mha", 4, 3, 4).unwrap();
        for len in [1, 7, 100] {
            let g = Graph::inference(&store);
            let x = g.input(random(&mut rng(), len, 4));
            let y = mha.forward(&g, x, MaskKind::None).unwrap();
            assert_eq!(g.shape(y), (len, 4));
        }
    }

    #[test]
    fn causal_attention_ignores_future_tokens_any_head_count() {
        for heads in [1, 2, 4] {
            let mut store = ParamStore::new();
            let mha = MultiHeadAttention::new(&mut store, &mut rng(), "mha", 4, heads, 4).unwrap();
            for s in 0..8 {
                let deps = dependency_rows(&store, random(&mut rng(), 8, 4), s, |g, x| {
                    mha.forward(g, x, MaskKind::Causal)
                })
                .unwrap();
                assert_eq!(deps, (0..=s).collect::<Vec<_>>(), "heads={heads} s={s}");
            }
        }
    }

    #[test]
    fn zero_residual_branches_reduce_block_to_conv_block() {
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, &mut rng(), "blk", spec(MaskKind::None, Causality::Causal)).unwrap();
        let out_proj = block.attention().unwrap().projections()[3].clone();
        store.get_mut(out_proj.weight()).fill(0.0);
        store.get_mut(out_proj.bias().unwrap()).fill(0.0);
        let (_, ffn_out) = block.feedforward().unwrap();
        let ffn_out = ffn_out.clone();
        store.get_mut(ffn_out.weight()).fill(0.0);
        store.get_mut(ffn_out.bias().unwrap()).fill(0.0);
        let x = random(&mut rng(), 9, 8);
        let g = Graph::inference(&store);
        let xv = g.input(x);
        let full = block.forward(&g, xv).unwrap();
        let conv_only = block.conv_block().unwrap().forward(&g, xv).unwrap();
        assert_eq!(*g.value(full), *g.value(conv_only));
    }

    #[test]
    fn online_block_is_causal() {
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, &mut rng(), "blk", spec(MaskKind::Causal, Causality::Causal)).unwrap();
        assert_eq!(block.causality(), Causality::Causal);
        for s in 0..10 {
            let deps = dependency_rows(&store, random(&mut rng(), 10, 8), s, |g, x| block.forward(g, x)).unwrap();
            assert!(deps.iter().all(|&t| t <= s), "s={s}: {deps:?}");
            assert!(deps.contains(&s));
        }
    }

    #[test]
    fn offline_blocks_separate_past_and_future_in_attention() {
        let mut store = ParamStore::new();
        let past = TransformerBlock::new(&mut store, &mut rng(), "past", spec(MaskKind::Causal, Causality::Acausal)).unwrap();
        let future = TransformerBlock::new(&mut store, &mut rng(), "future", spec(MaskKind::Anticausal, Causality::Acausal)).unwrap();
        for s in 0..7 {
            let p = dependency_rows(&store, random(&mut rng(), 7, 8), s, |g, x| past.attend(g, x)).unwrap();
            assert_eq!(p, (0..=s).collect::<Vec<_>>());
            let f = dependency_rows(&store, random(&mut rng(), 7, 8), s, |g, x| future.attend(g, x)).unwrap();
            assert_eq!(f, (s..7).collect::<Vec<_>>());
        }
        // the acausal conv block in front makes the whole offline block acausal
        assert_eq!(past.causality(), Causality::Acausal);
    }

    #[test]
    fn block_preserves_token_count() {
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, &mut rng(), "blk", spec(MaskKind::Causal, Causality::Causal)).unwrap();
        for tokens in [3, 4, 27] {
            let g = Graph::inference(&store);
            let x = g.input(random(&mut rng(), tokens, 8));
            let y = block.forward(&g, x).unwrap();
            assert_eq!(g.shape(y), (tokens, 8));
        }
        let g = Graph::inference(&store);
        let x = g.input(random(&mut rng(), 4, 5));
        assert!(matches!(block.forward(&g, x), Err(TunesError::Parameter(_))));
    }

    #[test]
    fn rescaling_parameters_changes_output() {
        // no normalization layer absorbs a global rescale of the first FFN layer
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, &mut rng(), "blk", spec(MaskKind::None, Causality::Causal)).unwrap();
        let x = random(&mut rng(), 6, 8);
        let run = |store: &ParamStore| {
            let g = Graph::inference(store);
            let xv = g.input(x.clone());
            let y = block.forward(&g, xv).unwrap();
            g.to_matrix(y)
        };
        let before = run(&store);
        let (ffn_in, _) = block.feedforward().unwrap();
        let (w, b) = (ffn_in.weight(), ffn_in.bias().unwrap());
        store.get_mut(w).mapv_inplace(|v| v * 3.0);
        store.get_mut(b).mapv_inplace(|v| v * 3.0);
        let after = run(&store);
        let diff = (&after - &before).mapv(f32::abs).sum();
        assert!(diff > 1e-3, "rescaling was absorbed: {diff}");
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        assert!(names.iter().all(|n| !n.contains("norm")), "{names:?}");
    }
}
