//! Causality-aware temporal operators: dilated convolution, strided
//! downsampling, transposed upsampling and the residual convolutional block.
//!
//! Sequences are time-major (`T x C`). In causal mode every operator shifts
//! its input to the right with zero padding, so output element `t` never
//! reads an input element later than its horizon.

use std::rc::Rc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{GatherPlan, Graph, Var};
use crate::error::{Result, TunesError};
use crate::params::{uniform, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Causality {
    Causal,
    Acausal,
}

impl Causality {
    pub fn is_causal(self) -> bool {
        self == Causality::Causal
    }
}

/// A validated `T x C` sequence of finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceTensor(Array2<f32>);

impl SequenceTensor {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(TunesError::shape(format!(
                "sequence must have T >= 1 and C >= 1, got {:?}",
                data.dim()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TunesError::shape(format!(
                "non-finite value at flat index {i}"
            )));
        }
        Ok(Self(data))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.0.ncols()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.0
    }
}

/// A sequence-to-sequence operator whose dependency structure can be audited.
pub trait SequenceLayer {
    fn forward(&self, g: &Graph<'_>, x: Var) -> Result<Var>;

    fn in_channels(&self) -> usize;

    fn output_len(&self, input_len: usize) -> usize;

    fn causality(&self) -> Causality;

    /// Latest input index that output element `out_index` may depend on
    /// when the operator is causal.
    fn horizon(&self, out_index: usize) -> usize;
}

fn check_channels(g: &Graph<'_>, x: Var, expected: usize, what: &str) -> Result<()> {
    let (_, c) = g.shape(x);
    if c != expected {
        return Err(TunesError::param(format!(
            "{what} expects {expected} channels, got {c}"
        )));
    }
    Ok(())
}

/// Dilated 1-D convolution that preserves sequence length.
#[derive(Clone, Debug)]
pub struct TemporalConv {
    weight: ParamId,
    bias: ParamId,
    in_channels: usize,
    out_channels: usize,
    kernel_size: usize,
    dilation: usize,
    mode: Causality,
}

impl TemporalConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
        mode: Causality,
    ) -> Result<Self> {
        if kernel_size == 0 || dilation == 0 {
            return Err(TunesError::param(format!(
                "{name}: kernel size {kernel_size} and dilation {dilation} must be positive"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(TunesError::param(format!("{name}: channel counts must be positive")));
        }
        if mode == Causality::Acausal && kernel_size % 2 == 0 {
            return Err(TunesError::param(format!(
                "{name}: acausal convolution needs an odd kernel, got {kernel_size}"
            )));
        }
        let fan_in = kernel_size * in_channels;
        let bound = 1.0 / (fan_in as f32).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            &[kernel_size, in_channels, out_channels],
            uniform(rng, fan_in, out_channels, bound),
        );
        let bias = store.add(
            format!("{name}.bias"),
            &[out_channels],
            uniform(rng, 1, out_channels, bound),
        );
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel_size,
            dilation,
            mode,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Number of input elements one output element can see.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_size - 1) * self.dilation
    }

    /// Offset (in elements, relative to `t`) read by tap `j`.
    fn tap_offset(&self, j: usize) -> isize {
        let (j, k, d) = (j as isize, self.kernel_size as isize, self.dilation as isize);
        match self.mode {
            Causality::Causal => (j - (k - 1)) * d,
            Causality::Acausal => (j - (k - 1) / 2) * d,
        }
    }

    fn plan(&self, len: usize) -> GatherPlan {
        GatherPlan::new(len, self.kernel_size, |t, j| {
            let src = t as isize + self.tap_offset(j);
            (0..len as isize).contains(&src).then_some(src as usize)
        })
    }
}

impl SequenceLayer for TemporalConv {
    fn forward(&self, g: &Graph<'_>, x: Var) -> Result<Var> {
        check_channels(g, x, self.in_channels, "temporal convolution")?;
        let (len, _) = g.shape(x);
        let cols = if self.kernel_size == 1 {
            x
        } else {
            g.gather(x, Rc::new(self.plan(len)))?
        };
        g.linear(cols, g.param(self.weight), Some(g.param(self.bias)))
    }

    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn output_len(&self, input_len: usize) -> usize {
        input_len
    }

    fn causality(&self) -> Causality {
        self.mode
    }

    fn horizon(&self, out_index: usize) -> usize {
        out_index
    }
}

/// Per-element affine map `x W + b` (a kernel-size-1 convolution).
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
    in_features: usize,
    out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(TunesError::param(format!("{name}: feature counts must be positive")));
        }
        let bound = 1.0 / (in_features as f32).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            &[in_features, out_features],
            uniform(rng, in_features, out_features, bound),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                &[out_features],
                uniform(rng, 1, out_features, bound),
            )
        });
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn forward(&self, g: &Graph<'_>, x: Var) -> Result<Var> {
        check_channels(g, x, self.in_features, "linear layer")?;
        g.linear(x, g.param(self.weight), self.bias.map(|b| g.param(b)))
    }
}

/// Strided convolution with kernel = stride = `factor`.
#[derive(Clone, Debug)]
pub struct Downsample {
    weight: ParamId,
    bias: ParamId,
    channels: usize,
    factor: usize,
    mode: Causality,
}

impl Downsample {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        factor: usize,
        mode: Causality,
    ) -> Result<Self> {
        if factor < 2 {
            return Err(TunesError::param(format!(
                "{name}: downsampling factor must be at least 2, got {factor}"
            )));
        }
        let fan_in = factor * channels;
        let bound = 1.0 / (fan_in as f32).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            &[factor, channels, channels],
            uniform(rng, fan_in, channels, bound),
        );
        let bias = store.add(format!("{name}.bias"), &[channels], uniform(rng, 1, channels, bound));
        Ok(Self {
            weight,
            bias,
            channels,
            factor,
            mode,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub(crate) fn set_mode(&mut self, mode: Causality) {
        self.mode = mode;
    }

    fn plan(&self, len: usize) -> GatherPlan {
        let f = self.factor;
        let shift = match self.mode {
            Causality::Causal => f - 1,
            Causality::Acausal => 0,
        };
        GatherPlan::new(len.div_ceil(f), f, |s, j| {
            (s * f + j).checked_sub(shift).filter(|&src| src < len)
        })
    }
}

impl SequenceLayer for Downsample {
    fn forward(&self, g: &Graph<'_>, x: Var) -> Result<Var> {
        check_channels(g, x, self.channels, "downsampling")?;
        let (len, _) = g.shape(x);
        let windows = g.gather(x, Rc::new(self.plan(len)))?;
        g.linear(windows, g.param(self.weight), Some(g.param(self.bias)))
    }

    fn in_channels(&self) -> usize {
        self.channels
    }

    fn output_len(&self, input_len: usize) -> usize {
        input_len.div_ceil(self.factor)
    }

    fn causality(&self) -> Causality {
        self.mode
    }

    fn horizon(&self, out_index: usize) -> usize {
        out_index * self.factor
    }
}

/// Transposed convolution with kernel = stride = `factor`. Output element `t`
/// reads only input element `t / factor`, so it never breaks causality.
#[derive(Clone, Debug)]
pub struct Upsample {
    weight: ParamId,
    bias: ParamId,
    channels: usize,
    factor: usize,
}

impl Upsample {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        factor: usize,
    ) -> Result<Self> {
        if factor < 2 {
            return Err(TunesError::param(format!(
                "{name}: upsampling factor must be at least 2, got {factor}"
            )));
        }
        let bound = 1.0 / (factor as f32 * channels as f32).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            &[channels, factor, channels],
            uniform(rng, channels, factor * channels, bound),
        );
        let bias = store.add(format!("{name}.bias"), &[channels], uniform(rng, 1, channels, bound));
        Ok(Self {
            weight,
            bias,
            channels,
            factor,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }
}

impl SequenceLayer for Upsample {
    fn forward(&self, g: &Graph<'_>, x: Var) -> Result<Var> {
        check_channels(g, x, self.channels, "upsampling")?;
        let (len, _) = g.shape(x);
        let y = g.matmul(x, g.param(self.weight))?;
        let y = g.reshape(y, len * self.factor, self.channels)?;
        g.add_row(y, g.param(self.bias))
    }

    fn in_channels(&self) -> usize {
        self.channels
    }

    fn output_len(&self, input_len: usize) -> usize {
        input_len * self.factor
    }

    fn causality(&self) -> Causality {
        Causality::Causal
    }

    fn horizon(&self, out_index: usize) -> usize {
        out_index / self.factor
    }
}

/// `x + pointwise(GELU(dilated_conv(x)))`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    conv: TemporalConv,
    pointwise: TemporalConv,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        kernel_size: usize,
        dilation: usize,
        mode: Causality,
    ) -> Result<Self> {
        let conv = TemporalConv::new(
            store,
            rng,
            &format!("{name}.conv"),
            channels,
            channels,
            kernel_size,
            dilation,
            mode,
        )?;
        let pointwise = TemporalConv::new(
            store,
            rng,
            &format!("{name}.pointwise"),
            channels,
            channels,
            1,
            1,
            mode,
        )?;
        Ok(Self { conv, pointwise })
    }

    pub fn conv(&self) -> &TemporalConv {
        &self.conv
    }

    pub fn pointwise(&self) -> &TemporalConv {
        &self.pointwise
    }

    pub fn receptive_field(&self) -> usize {
        self.conv.receptive_field()
    }
}

impl SequenceLayer for ConvBlock {
    fn forward(&self, g: &Graph<'_>, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, x)?;
        let h = self.pointwise.forward(g, g.gelu(h))?;
        g.add(x, h)
    }

    fn in_channels(&self) -> usize {
        self.conv.in_channels
    }

    fn output_len(&self, input_len: usize) -> usize {
        input_len
    }

    fn causality(&self) -> Causality {
        self.conv.mode
    }

    fn horizon(&self, out_index: usize) -> usize {
        out_index
    }
}
