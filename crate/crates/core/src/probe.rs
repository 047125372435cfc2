//! Gradient-support probes: which input rows can influence a given output row.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Matrix, Var};
use crate::error::{Result, TunesError};
use crate::params::ParamStore;

/// Seed vector for one output row. A random combination of channels has a
/// nonzero projection onto every nonzero Jacobian row with probability one,
/// so a single backward pass per output row suffices.
pub fn row_seed(shape: (usize, usize), row: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (row as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut m = Array2::zeros(shape);
    for v in m.row_mut(row).iter_mut() {
        *v = rng.gen_range(0.5f32..1.5) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
    }
    m
}

/// Input rows whose gradient with respect to output row `out_row` is not
/// exactly zero.
pub fn dependency_rows<F>(store: &ParamStore, input: Matrix, out_row: usize, f: F) -> Result<Vec<usize>>
where
    F: Fn(&Graph<'_>, Var) -> Result<Var>,
{
    let g = Graph::new(store);
    let x = g.input(input);
    let y = f(&g, x)?;
    let shape = g.shape(y);
    if out_row >= shape.0 {
        return Err(TunesError::shape(format!(
            "output row {out_row} of {} rows",
            shape.0
        )));
    }
    let grads = g.backward(&[(y, row_seed(shape, out_row, 0x5eed))])?;
    Ok(nonzero_rows(grads.wrt(x)))
}

pub fn nonzero_rows(grad: Option<&Matrix>) -> Vec<usize> {
    grad.map(|g| {
        g.rows()
            .into_iter()
            .enumerate()
            .filter(|(_, r)| r.iter().any(|&v| v != 0.0))
            .map(|(i, _)| i)
            .collect()
    })
    .unwrap_or_default()
}
