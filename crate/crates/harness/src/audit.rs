//! Gradient-based causality audit.
//!
//! For every output row of every prediction level, one backward pass with a
//! random channel combination yields the exact set of input frames the row
//! depends on. Any nonzero gradient on a frame later than the row's time is
//! a violation. Violations are then localised by auditing each operator in
//! isolation.

use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tunes::autograd::Graph;
use tunes::model::Mode;
use tunes::ops::SequenceLayer;
use tunes::probe::{nonzero_rows, row_seed};
use tunes::TunesModel;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AuditConfig {
    /// Sequence length; must be a multiple of the coarsest scale.
    pub len: usize,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self { len: 72, seed: 0 }
    }
}

/// Nonzero gradient of an output on a later input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// Prediction level, 0 = full resolution.
    pub level: usize,
    pub output_row: usize,
    /// Frame time of the output row.
    pub output_time: usize,
    pub input_frame: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AuditOutcome {
    Passed,
    Failed {
        violations: Vec<Violation>,
        /// Operators that leak future information when run on their own.
        operators: Vec<String>,
    },
    Skipped(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditReport {
    pub outcome: AuditOutcome,
    /// Number of (output time, later input frame) pairs checked.
    pub pairs_checked: usize,
    pub outputs_checked: usize,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        matches!(self.outcome, AuditOutcome::Passed)
    }

    pub fn failed(&self) -> bool {
        matches!(self.outcome, AuditOutcome::Failed { .. })
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.outcome {
            AuditOutcome::Passed => write!(
                f,
                "causality audit passed: {} outputs, {} future pairs with exactly zero gradient",
                self.outputs_checked, self.pairs_checked
            ),
            AuditOutcome::Skipped(reason) => write!(f, "causality audit skipped: {reason}"),
            AuditOutcome::Failed { violations, operators } => {
                writeln!(
                    f,
                    "causality audit FAILED: {} violations over {} pairs",
                    violations.len(),
                    self.pairs_checked
                )?;
                for v in violations.iter().take(5) {
                    writeln!(
                        f,
                        "  level {} row {} (t={}) depends on frame {}",
                        v.level, v.output_row, v.output_time, v.input_frame
                    )?;
                }
                if operators.is_empty() {
                    write!(f, "  no single operator leaks in isolation")
                } else {
                    write!(f, "  offending operators: {}", operators.join(", "))
                }
            }
        }
    }
}

/// Checks one operator on its own: every output row may only depend on
/// inputs up to the operator's causal horizon.
pub fn audit_layer(model: &TunesModel, layer: &dyn SequenceLayer, len: usize, seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Array2::from_shape_simple_fn((len, layer.in_channels()), || rng.gen_range(-1.0f32..1.0));
    let out_len = layer.output_len(len);
    for row in 0..out_len {
        let g = Graph::new(model.params());
        let x = g.input(input.clone());
        let y = layer.forward(&g, x)?;
        let grads = g.backward(&[(y, row_seed(g.shape(y), row, seed))])?;
        let horizon = layer.horizon(row);
        if nonzero_rows(grads.wrt(x)).iter().any(|&t| t > horizon) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Audits an online model end to end. Offline models are skipped.
pub fn audit_causality(model: &TunesModel, config: &AuditConfig) -> Result<AuditReport> {
    if model.config().mode == Mode::Offline {
        return Ok(AuditReport {
            outcome: AuditOutcome::Skipped("offline mode: the model may use future frames by design".into()),
            pairs_checked: 0,
            outputs_checked: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let input = Array2::from_shape_simple_fn((config.len, model.config().input_dim), || rng.gen_range(-1.0f32..1.0));
    let scales = model.config().scales.clone();
    let mut violations = Vec::new();
    let (mut pairs, mut outputs) = (0, 0);
    for (level, &scale) in scales.iter().enumerate() {
        for row in 0..config.len / scale {
            let g = Graph::new(model.params());
            let x = g.input(input.clone());
            let out = model.forward_graph(&g, x, None)?;
            let y = out.levels[level];
            let seed = config.seed ^ ((level as u64) << 32);
            let grads = g.backward(&[(y, row_seed(g.shape(y), row, seed))])?;
            let time = row * scale;
            outputs += 1;
            pairs += config.len - 1 - time;
            for t in nonzero_rows(grads.wrt(x)).into_iter().filter(|&t| t > time) {
                violations.push(Violation {
                    level,
                    output_row: row,
                    output_time: time,
                    input_frame: t,
                });
            }
        }
    }
    let outcome = if violations.is_empty() {
        AuditOutcome::Passed
    } else {
        let mut operators = Vec::new();
        for (path, layer) in model.layers() {
            if !audit_layer(model, layer, 36, config.seed)? {
                operators.push(path);
            }
        }
        AuditOutcome::Failed { violations, operators }
    };
    Ok(AuditReport {
        outcome,
        pairs_checked: pairs,
        outputs_checked: outputs,
    })
}
