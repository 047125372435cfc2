//! The full TUNeS model: input projection, convolutional encoder with
//! downsampling, Transformer bottleneck with boundary tokens, convolutional
//! decoder with weighted skip connections, and a linear classifier head at
//! every temporal scale.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{MaskKind, TransformerBlock, TransformerBlockSpec};
use crate::autograd::{Graph, Var};
use crate::data::masking::MaskPlan;
use crate::error::{Result, TunesError};
use crate::kv::KvMap;
use crate::ops::{Causality, ConvBlock, Downsample, Linear, SequenceLayer, Upsample};
use crate::params::{uniform, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Online,
    Offline,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Online => "online",
            Mode::Offline => "offline",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "online" => Ok(Mode::Online),
            "offline" => Ok(Mode::Offline),
            other => Err(format!("unknown mode {other:?} (online|offline)")),
        }
    }
}

fn parse_causality(s: &str) -> std::result::Result<Causality, String> {
    match s {
        "causal" => Ok(Causality::Causal),
        "acausal" => Ok(Causality::Acausal),
        other => Err(format!("unknown causality {other:?} (causal|acausal)")),
    }
}

fn causality_name(c: Causality) -> &'static str {
    match c {
        Causality::Causal => "causal",
        Causality::Acausal => "acausal",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TunesConfig {
    pub input_dim: usize,
    pub dim: usize,
    pub num_classes: usize,
    /// Length reduction of each prediction, finest first.
    pub scales: Vec<usize>,
    pub kernel_size: usize,
    pub encoder_dilation: usize,
    pub decoder_dilation: usize,
    pub blocks_per_stage: usize,
    pub num_transformer_blocks: usize,
    pub mode: Mode,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    /// Explicit causality for convolutions and downsampling; `None` derives it
    /// from `mode`.
    pub operator_causality: Option<Causality>,
    pub transformer_conv: bool,
    pub attention: bool,
    /// Offline only: alternate causal/anticausal masks across the stack.
    pub alternate_masks: bool,
    /// Seed for parameter initialisation.
    pub seed: u64,
}

impl Default for TunesConfig {
    fn default() -> Self {
        Self::online()
    }
}

impl TunesConfig {
    pub fn online() -> Self {
        Self {
            input_dim: 2048,
            dim: 64,
            num_classes: 7,
            scales: vec![1, 3, 9, 18],
            kernel_size: 3,
            encoder_dilation: 1,
            decoder_dilation: 18,
            blocks_per_stage: 2,
            num_transformer_blocks: 2,
            mode: Mode::Online,
            heads: 1,
            head_dim: 64,
            ffn_dim: 256,
            operator_causality: None,
            transformer_conv: true,
            attention: true,
            alternate_masks: true,
            seed: 0,
        }
    }

    pub fn offline() -> Self {
        Self {
            num_transformer_blocks: 8,
            mode: Mode::Offline,
            ..Self::online()
        }
    }

    pub fn with_input_dim(mut self, input_dim: usize) -> Self {
        self.input_dim = input_dim;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Sequence lengths must be a multiple of this.
    pub fn length_multiple(&self) -> usize {
        *self.scales.last().unwrap_or(&1)
    }

    /// Factors of the successive downsampling operators.
    pub fn down_factors(&self) -> Vec<usize> {
        self.scales.windows(2).map(|w| w[1] / w[0]).collect()
    }

    pub fn operator_mode(&self) -> Causality {
        self.operator_causality.unwrap_or(match self.mode {
            Mode::Online => Causality::Causal,
            Mode::Offline => Causality::Acausal,
        })
    }

    /// Mask of bottleneck block `index`.
    pub fn block_mask(&self, index: usize) -> MaskKind {
        match self.mode {
            Mode::Online => MaskKind::Causal,
            Mode::Offline if !self.alternate_masks => MaskKind::None,
            Mode::Offline if index % 2 == 0 => MaskKind::Causal,
            Mode::Offline => MaskKind::Anticausal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("dim", self.dim),
            ("num_classes", self.num_classes),
            ("kernel_size", self.kernel_size),
            ("encoder_dilation", self.encoder_dilation),
            ("decoder_dilation", self.decoder_dilation),
            ("blocks_per_stage", self.blocks_per_stage),
            ("num_transformer_blocks", self.num_transformer_blocks),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(TunesError::config(format!("{name} must be positive")));
        }
        if self.scales.len() < 2 || self.scales[0] != 1 {
            return Err(TunesError::config(format!(
                "scales must start at 1 and have at least two entries, got {:?}",
                self.scales
            )));
        }
        for w in self.scales.windows(2) {
            if w[1] <= w[0] || w[1] % w[0] != 0 {
                return Err(TunesError::config(format!(
                    "scales must be strictly increasing multiples, got {:?}",
                    self.scales
                )));
            }
        }
        if self.num_classes > usize::from(u8::MAX) {
            return Err(TunesError::config("at most 255 classes are supported"));
        }
        if self.mode == Mode::Online && self.operator_causality == Some(Causality::Acausal) {
            return Err(TunesError::config(
                "online mode forbids acausal convolutions and downsampling",
            ));
        }
        if self.operator_mode() == Causality::Acausal && self.kernel_size % 2 == 0 {
            return Err(TunesError::config("acausal convolutions need an odd kernel size"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        let scales: Vec<String> = self.scales.iter().map(ToString::to_string).collect();
        kv.set("input_dim", self.input_dim.to_string());
        kv.set("dim", self.dim.to_string());
        kv.set("num_classes", self.num_classes.to_string());
        kv.set("scales", scales.join(","));
        kv.set("kernel_size", self.kernel_size.to_string());
        kv.set("encoder_dilation", self.encoder_dilation.to_string());
        kv.set("decoder_dilation", self.decoder_dilation.to_string());
        kv.set("blocks_per_stage", self.blocks_per_stage.to_string());
        kv.set("num_transformer_blocks", self.num_transformer_blocks.to_string());
        kv.set("mode", self.mode.to_string());
        kv.set("heads", self.heads.to_string());
        kv.set("head_dim", self.head_dim.to_string());
        kv.set("ffn_dim", self.ffn_dim.to_string());
        kv.set(
            "operator_causality",
            self.operator_causality.map_or("auto", causality_name),
        );
        kv.set("transformer_conv", self.transformer_conv.to_string());
        kv.set("attention", self.attention.to_string());
        kv.set("alternate_masks", self.alternate_masks.to_string());
        kv.set("model_seed", self.seed.to_string());
        kv
    }

    /// Reads model keys from `kv`, starting from the defaults of the mode it
    /// names (online when absent). Unknown keys are ignored so one file can
    /// carry model and training settings.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mode: Mode = kv.get_parsed("mode")?.unwrap_or(Mode::Online);
        let mut c = match mode {
            Mode::Online => Self::online(),
            Mode::Offline => Self::offline(),
        };
        macro_rules! read {
            ($($field:ident => $key:literal),* $(,)?) => {
                $(if let Some(v) = kv.get_parsed($key)? { c.$field = v; })*
            };
        }
        read!(
            input_dim => "input_dim",
            dim => "dim",
            num_classes => "num_classes",
            kernel_size => "kernel_size",
            encoder_dilation => "encoder_dilation",
            decoder_dilation => "decoder_dilation",
            blocks_per_stage => "blocks_per_stage",
            num_transformer_blocks => "num_transformer_blocks",
            heads => "heads",
            head_dim => "head_dim",
            ffn_dim => "ffn_dim",
            transformer_conv => "transformer_conv",
            attention => "attention",
            alternate_masks => "alternate_masks",
            seed => "model_seed",
        );
        if let Some(s) = kv.get("scales") {
            c.scales = s
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| TunesError::config(format!("scales = {s:?}: {e}")))?;
        }
        if let Some(s) = kv.get("operator_causality") {
            c.operator_causality = match s {
                "auto" => None,
                other => Some(parse_causality(other).map_err(TunesError::config)?),
            };
        }
        c.validate()?;
        Ok(c)
    }
}

/// Raw scores (log unnormalized probabilities) at every scale, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScalePredictions {
    pub levels: Vec<Array2<f32>>,
}

impl MultiScalePredictions {
    /// Full-resolution scores.
    pub fn fine(&self) -> &Array2<f32> {
        &self.levels[0]
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.levels.iter().map(Array2::nrows).collect()
    }

    /// Hard full-resolution predictions (1-based phases), truncated to `len`.
    pub fn hard_labels(&self, len: usize) -> Vec<u8> {
        crate::metrics::argmax_labels(self.fine().view())
            .into_iter()
            .take(len)
            .collect()
    }
}

impl SequenceLayer for Linear {
    fn forward(&self, g: &Graph<'_>, x: Var) -> Result<Var> {
        Linear::forward(self, g, x)
    }

    fn in_channels(&self) -> usize {
        self.in_features()
    }

    fn output_len(&self, input_len: usize) -> usize {
        input_len
    }

    fn causality(&self) -> Causality {
        Causality::Causal
    }

    fn horizon(&self, out_index: usize) -> usize {
        out_index
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    blocks: Vec<ConvBlock>,
    down: Downsample,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: Upsample,
    skip_scale: ParamId,
    blocks: Vec<ConvBlock>,
}

/// Graph nodes of one forward pass.
pub struct ForwardOutputs {
    /// Score nodes, finest scale first.
    pub levels: Vec<Var>,
    /// Bottleneck token sequence after the last Transformer block, boundary
    /// tokens included.
    pub tokens: Var,
}

#[derive(Clone, Debug)]
pub struct TunesModel {
    config: TunesConfig,
    params: ParamStore,
    input_proj: Linear,
    encoder: Vec<EncoderStage>,
    start_token: ParamId,
    end_token: ParamId,
    mask_token: ParamId,
    bottleneck: Vec<TransformerBlock>,
    decoder: Vec<DecoderStage>,
    heads: Vec<Linear>,
}

impl TunesModel {
    pub fn new(config: TunesConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let rng = &mut rng;
        let store_ref = &mut store;
        let mode = config.operator_mode();
        let dim = config.dim;
        let factors = config.down_factors();

        let input_proj = Linear::new(store_ref, rng, "input_proj", config.input_dim, dim, true)?;
        let mut encoder = Vec::with_capacity(factors.len());
        for (i, &factor) in factors.iter().enumerate() {
            let blocks = (0..config.blocks_per_stage)
                .map(|j| {
                    ConvBlock::new(
                        store_ref,
                        rng,
                        &format!("encoder.{i}.block.{j}"),
                        dim,
                        config.kernel_size,
                        config.encoder_dilation,
                        mode,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let down = Downsample::new(store_ref, rng, &format!("encoder.{i}.down"), dim, factor, mode)?;
            encoder.push(EncoderStage { blocks, down });
        }

        let token_bound = 0.1;
        let start_token = store_ref.add("bottleneck.start_token", &[dim], uniform(rng, 1, dim, token_bound));
        let end_token = store_ref.add("bottleneck.end_token", &[dim], uniform(rng, 1, dim, token_bound));
        let mask_token = store_ref.add("bottleneck.mask_token", &[dim], uniform(rng, 1, dim, token_bound));
        let bottleneck = (0..config.num_transformer_blocks)
            .map(|i| {
                let spec = TransformerBlockSpec {
                    dim,
                    heads: config.heads,
                    head_dim: config.head_dim,
                    ffn_dim: config.ffn_dim,
                    kernel_size: config.kernel_size,
                    conv_mode: mode,
                    mask: config.block_mask(i),
                    with_conv: config.transformer_conv,
                    with_attention: config.attention,
                };
                TransformerBlock::new(store_ref, rng, &format!("bottleneck.block.{i}"), spec)
            })
            .collect::<Result<Vec<_>>>()?;

        // decoder stages run coarse to fine
        let mut decoder = Vec::with_capacity(factors.len());
        for (i, &factor) in factors.iter().rev().enumerate() {
            let up = Upsample::new(store_ref, rng, &format!("decoder.{i}.up"), dim, factor)?;
            let skip_scale = store_ref.add(
                format!("decoder.{i}.skip_scale"),
                &[1],
                Array2::from_elem((1, 1), 1.0),
            );
            let blocks = (0..config.blocks_per_stage)
                .map(|j| {
                    ConvBlock::new(
                        store_ref,
                        rng,
                        &format!("decoder.{i}.block.{j}"),
                        dim,
                        config.kernel_size,
                        config.decoder_dilation,
                        mode,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            decoder.push(DecoderStage {
                up,
                skip_scale,
                blocks,
            });
        }

        // head i predicts at scales[i]
        let heads = (0..config.scales.len())
            .map(|i| Linear::new(store_ref, rng, &format!("head.{i}"), dim, config.num_classes, true))
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            config,
            params: store,
            input_proj,
            encoder,
            start_token,
            end_token,
            mask_token,
            bottleneck,
            decoder,
            heads,
        })
    }

    pub fn config(&self) -> &TunesConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Exact number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn mask_token(&self) -> ParamId {
        self.mask_token
    }

    pub fn skip_scales(&self) -> Vec<ParamId> {
        self.decoder.iter().map(|d| d.skip_scale).collect()
    }

    pub fn bottleneck_blocks(&self) -> &[TransformerBlock] {
        &self.bottleneck
    }

    pub fn downsample_factors(&self) -> Vec<usize> {
        self.encoder.iter().map(|s| s.down.factor()).collect()
    }

    /// Number of bottleneck tokens (boundary tokens included) for a sequence
    /// of `len` frames.
    pub fn bottleneck_tokens(&self, len: usize) -> usize {
        len / self.config.length_multiple() + 2
    }

    /// Switches one encoder downsampling operator to acausal mode regardless
    /// of the configuration. Used to exercise the causality audit.
    pub fn force_acausal_downsample(&mut self, stage: usize) -> Result<String> {
        let st = self
            .encoder
            .get_mut(stage)
            .ok_or_else(|| TunesError::param(format!("no encoder stage {stage}")))?;
        st.down.set_mode(Causality::Acausal);
        Ok(format!("encoder.{stage}.down"))
    }

    /// Every sequence operator with its parameter path, in execution order.
    pub fn layers(&self) -> Vec<(String, &dyn SequenceLayer)> {
        let mut out: Vec<(String, &dyn SequenceLayer)> = vec![("input_proj".into(), &self.input_proj)];
        for (i, st) in self.encoder.iter().enumerate() {
            for (j, b) in st.blocks.iter().enumerate() {
                out.push((format!("encoder.{i}.block.{j}"), b));
            }
            out.push((format!("encoder.{i}.down"), &st.down));
        }
        for (i, b) in self.bottleneck.iter().enumerate() {
            out.push((format!("bottleneck.block.{i}"), b));
        }
        for (i, st) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{i}.up"), &st.up));
            for (j, b) in st.blocks.iter().enumerate() {
                out.push((format!("decoder.{i}.block.{j}"), b));
            }
        }
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("head.{i}"), h));
        }
        out
    }

    /// Records a forward pass on `g`. `mask_plan` replaces bottleneck tokens by
    /// the learned mask embedding (training only).
    pub fn forward_graph(&self, g: &Graph<'_>, features: Var, mask_plan: Option<&MaskPlan>) -> Result<ForwardOutputs> {
        let (len, feat_dim) = g.shape(features);
        if feat_dim != self.config.input_dim {
            return Err(TunesError::shape(format!(
                "expected {}-dimensional features, got {feat_dim}",
                self.config.input_dim
            )));
        }
        let multiple = self.config.length_multiple();
        if len == 0 || len % multiple != 0 {
            return Err(TunesError::shape(format!(
                "sequence length {len} is not a positive multiple of {multiple}"
            )));
        }
        let mut h = self.input_proj.forward(g, features)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            for block in &stage.blocks {
                h = block.forward(g, h)?;
            }
            skips.push(h);
            h = stage.down.forward(g, h)?;
        }

        let (n, _) = g.shape(h);
        if let Some(plan) = mask_plan {
            let flags = plan.token_flags(n)?;
            if flags.iter().any(|&f| f) {
                h = g.replace_rows(h, g.param(self.mask_token), Rc::new(flags))?;
            }
        }
        let mut tokens = g.concat_rows(&[g.param(self.start_token), h, g.param(self.end_token)])?;
        for block in &self.bottleneck {
            tokens = block.forward(g, tokens)?;
        }
        h = g.slice_rows(tokens, 1, n + 1)?;

        let depth = self.heads.len();
        let mut levels = vec![None; depth];
        levels[depth - 1] = Some(self.heads[depth - 1].forward(g, h)?);
        for (i, stage) in self.decoder.iter().enumerate() {
            let level = depth - 2 - i;
            h = stage.up.forward(g, h)?;
            let skip = g.scale(skips[level], g.param(stage.skip_scale))?;
            h = g.add(h, skip)?;
            for block in &stage.blocks {
                h = block.forward(g, h)?;
            }
            levels[level] = Some(self.heads[level].forward(g, h)?);
        }
        Ok(ForwardOutputs {
            levels: levels.into_iter().map(|v| v.expect("every level set")).collect(),
            tokens,
        })
    }

    /// Inference on one feature sequence whose length is a multiple of the
    /// coarsest scale.
    pub fn forward(&self, features: &Array2<f32>) -> Result<MultiScalePredictions> {
        let g = Graph::inference(&self.params);
        let x = g.input(features.clone());
        let out = self.forward_graph(&g, x, None)?;
        Ok(MultiScalePredictions {
            levels: out.levels.iter().map(|&v| g.to_matrix(v)).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::{nonzero_rows, row_seed};
    use rand::Rng;

    fn small(mode: Mode) -> TunesConfig {
        let base = match mode {
            Mode::Online => TunesConfig::online(),
            Mode::Offline => TunesConfig::offline(),
        };
        TunesConfig {
            input_dim: 16,
            dim: 8,
            head_dim: 8,
            ffn_dim: 16,
            num_classes: 4,
            ..base
        }
    }

    fn features(len: usize, dim: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((len, dim), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_linear_parameter_count() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Linear::new(&mut store, &mut rng, "l", 2048, 64, true).unwrap();
        assert_eq!(store.num_scalars(), 131_136);
    }

    #[test]
    fn default_parameter_counts_in_reported_bands() {
        let online = TunesModel::new(TunesConfig::online()).unwrap().count_parameters();
        let offline = TunesModel::new(TunesConfig::offline()).unwrap().count_parameters();
        assert!((464_000..=696_000).contains(&online), "{online}");
        assert!((904_000..=1_356_000).contains(&offline), "{offline}");
    }

    #[test]
    fn parameter_count_is_additive_in_blocks() {
        let count = |n| {
            TunesModel::new(TunesConfig {
                num_transformer_blocks: n,
                ..TunesConfig::offline()
            })
            .unwrap()
            .count_parameters()
        };
        let per_block = count(3) - count(2);
        assert_eq!(count(8) - count(4), 4 * per_block);
        assert_eq!(count(10) - count(2), 8 * per_block);
    }

    #[test]
    fn downsample_factors_follow_scales() {
        let model = TunesModel::new(small(Mode::Online)).unwrap();
        assert_eq!(model.downsample_factors(), vec![3, 3, 2]);
    }

    #[test]
    fn shapes_for_t36() {
        let model = TunesModel::new(TunesConfig {
            input_dim: 2048,
            ..small(Mode::Online)
        })
        .unwrap();
        let preds = model.forward(&features(36, 2048, 1)).unwrap();
        assert_eq!(preds.lengths(), vec![36, 12, 4, 2]);
        assert!(preds.levels.iter().all(|l| l.ncols() == 4));
        assert_eq!(model.bottleneck_tokens(36), 4);
    }

    #[test]
    fn bottleneck_token_sequence_has_boundary_tokens() {
        let model = TunesModel::new(small(Mode::Offline)).unwrap();
        let g = Graph::inference(model.params());
        let x = g.input(features(72, 16, 2));
        let out = model.forward_graph(&g, x, None).unwrap();
        assert_eq!(g.shape(out.tokens).0, 72 / 18 + 2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = TunesModel::new(small(Mode::Online)).unwrap();
        assert!(matches!(model.forward(&features(36, 15, 0)), Err(TunesError::Shape(_))));
        assert!(matches!(model.forward(&features(35, 16, 0)), Err(TunesError::Shape(_))));
    }

    #[test]
    fn online_with_acausal_operators_is_rejected() {
        let cfg = TunesConfig {
            operator_causality: Some(Causality::Acausal),
            ..TunesConfig::online()
        };
        assert!(matches!(TunesModel::new(cfg), Err(TunesError::Config(_))));
        let offline_causal = TunesConfig {
            operator_causality: Some(Causality::Causal),
            ..small(Mode::Offline)
        };
        assert!(TunesModel::new(offline_causal).is_ok());
    }

    #[test]
    fn invalid_scales_are_rejected() {
        for scales in [vec![1], vec![2, 4], vec![1, 3, 3], vec![1, 3, 8]] {
            let cfg = TunesConfig {
                scales,
                ..TunesConfig::online()
            };
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn offline_masks_alternate_starting_causal() {
        let model = TunesModel::new(small(Mode::Offline)).unwrap();
        let masks: Vec<MaskKind> = model.bottleneck_blocks().iter().map(|b| b.mask()).collect();
        assert_eq!(masks.len(), 8);
        for (i, m) in masks.iter().enumerate() {
            let expected = if i % 2 == 0 { MaskKind::Causal } else { MaskKind::Anticausal };
            assert_eq!(*m, expected);
        }
        let unmasked = TunesModel::new(TunesConfig {
            alternate_masks: false,
            ..small(Mode::Offline)
        })
        .unwrap();
        assert!(unmasked.bottleneck_blocks().iter().all(|b| b.mask() == MaskKind::None));
    }

    #[test]
    fn online_outputs_are_causal_at_every_scale() {
        let cfg = small(Mode::Online);
        let model = TunesModel::new(cfg.clone()).unwrap();
        let len = 36;
        for (level, &scale) in cfg.scales.iter().enumerate() {
            for s in 0..len / scale {
                let g = Graph::new(model.params());
                let x = g.input(features(len, 16, 3));
                let out = model.forward_graph(&g, x, None).unwrap();
                let y = out.levels[level];
                let grads = g.backward(&[(y, row_seed(g.shape(y), s, 1))]).unwrap();
                let deps = nonzero_rows(grads.wrt(x));
                assert!(
                    deps.iter().all(|&t| t <= s * scale),
                    "level {level} row {s} depends on {deps:?}"
                );
            }
        }
    }

    #[test]
    fn zero_skip_scale_cuts_skip_branch() {
        let mut model = TunesModel::new(small(Mode::Online)).unwrap();
        let skips = model.skip_scales();
        // finest decoder stage: its skip carries the full-resolution encoder output
        let finest = *skips.last().unwrap();
        model.params_mut().get_mut(finest).fill(0.0);
        let g = Graph::new(model.params());
        let x = g.input(features(36, 16, 4));
        let out = model.forward_graph(&g, x, None).unwrap();
        let fine = out.levels[0];
        let grads = g.backward(&[(fine, row_seed(g.shape(fine), 20, 2))]).unwrap();
        // without the skip, frame 20 only sees the coarse path: inputs up to 18
        let deps = nonzero_rows(grads.wrt(x));
        assert!(deps.iter().all(|&t| t <= 18), "{deps:?}");
        // the skip scale itself still receives a gradient
        assert!(grads.params().get(finest).is_some());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = TunesModel::new(small(Mode::Offline)).unwrap();
        let x = features(54, 16, 5);
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        assert_eq!(a, b);
        let rebuilt = TunesModel::new(small(Mode::Offline)).unwrap();
        assert_eq!(rebuilt.forward(&x).unwrap(), a);
    }

    #[test]
    fn config_round_trips_through_kv() {
        let cfg = TunesConfig {
            heads: 2,
            operator_causality: Some(Causality::Causal),
            seed: 17,
            ..TunesConfig::offline()
        };
        assert_eq!(TunesConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn layer_paths_cover_every_operator() {
        let model = TunesModel::new(small(Mode::Online)).unwrap();
        let paths: Vec<String> = model.layers().into_iter().map(|(p, _)| p).collect();
        assert!(paths.contains(&"encoder.2.down".to_string()));
        assert!(paths.contains(&"bottleneck.block.1".to_string()));
        assert!(paths.contains(&"decoder.0.up".to_string()));
        assert_eq!(paths.iter().filter(|p| p.starts_with("head.")).count(), 4);
    }
}
