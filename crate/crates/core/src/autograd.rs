//! A small reverse-mode automatic differentiation tape over time-major
//! `f32` matrices.
//!
//! Every value in a [`Graph`] is a 2-D matrix with one row per sequence
//! element. Operations append nodes to the tape; [`Graph::backward`] walks the
//! tape in reverse and returns gradients for graph inputs and parameters.
//! Gradients that are structurally independent of a seed come out as exact
//! zeros, which is what the causality audits rely on.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Result, TunesError};
use crate::params::{ParamGrads, ParamId, ParamStore};

pub type Matrix = Array2<f32>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a Matrix,
    pub inputs: Vec<&'a Matrix>,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Matrix>>>;

struct Node {
    value: Value,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// Row-gather plan: output row `o` is the concatenation over taps `j` of input
/// row `index[o * taps + j]`, or zeros where the index is `None` (padding).
#[derive(Debug, Clone)]
pub struct GatherPlan {
    pub out_rows: usize,
    pub taps: usize,
    pub index: Vec<Option<usize>>,
}

impl GatherPlan {
    pub fn new(out_rows: usize, taps: usize, mut source: impl FnMut(usize, usize) -> Option<usize>) -> Self {
        let mut index = Vec::with_capacity(out_rows * taps);
        for o in 0..out_rows {
            for j in 0..taps {
                index.push(source(o, j));
            }
        }
        Self {
            out_rows,
            taps,
            index,
        }
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    track: bool,
    nodes: RefCell<Vec<Node>>,
}

impl<'p> Graph<'p> {
    /// A graph that records backward functions.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            track: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A graph for inference only; [`Graph::backward`] on it returns an error.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(params)
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self, value: Matrix) -> Var {
        self.push_node(Value::Owned(value), Vec::new(), None)
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.push_node(Value::Param(id), Vec::new(), None)
    }

    pub fn value(&self, var: Var) -> ValueRef<'_> {
        let nodes = self.nodes.borrow();
        match nodes[var.0].value {
            Value::Param(id) => ValueRef::Param(self.params.get(id)),
            Value::Owned(_) => ValueRef::Node(Ref::map(nodes, |n| match &n[var.0].value {
                Value::Owned(m) => m,
                Value::Param(_) => unreachable!("checked above"),
            })),
        }
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.value(var).dim()
    }

    /// Takes a copy of a node's value.
    pub fn to_matrix(&self, var: Var) -> Matrix {
        self.value(var).clone()
    }

    fn push_node(&self, value: Value, parents: Vec<Var>, backward: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(nodes.len() - 1)
    }

    fn push<F>(&self, value: Matrix, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Matrix>> + 'static,
    {
        if self.track {
            self.push_node(Value::Owned(value), parents.to_vec(), Some(Box::new(backward)))
        } else {
            self.push_node(Value::Owned(value), Vec::new(), None)
        }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            if av.ncols() != bv.nrows() {
                return Err(TunesError::shape(format!(
                    "matmul {:?} x {:?}",
                    av.dim(),
                    bv.dim()
                )));
            }
            av.dot(&*bv)
        };
        Ok(self.push(out, &[a, b], |ctx| {
            let (av, bv) = (ctx.inputs[0], ctx.inputs[1]);
            vec![Some(ctx.grad.dot(&bv.t())), Some(av.t().dot(ctx.grad))]
        }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            if av.dim() != bv.dim() {
                return Err(TunesError::shape(format!(
                    "add {:?} + {:?}",
                    av.dim(),
                    bv.dim()
                )));
            }
            &*av + &*bv
        };
        Ok(self.push(out, &[a, b], |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
        }))
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = {
            let (av, rv) = (self.value(a), self.value(row));
            if rv.nrows() != 1 || rv.ncols() != av.ncols() {
                return Err(TunesError::shape(format!(
                    "row broadcast {:?} + {:?}",
                    av.dim(),
                    rv.dim()
                )));
            }
            &*av + &*rv
        };
        Ok(self.push(out, &[a, row], |ctx| {
            vec![
                Some(ctx.grad.clone()),
                Some(ctx.grad.sum_axis(Axis(0)).insert_axis(Axis(0))),
            ]
        }))
    }

    /// `x @ weight + bias`.
    pub fn linear(&self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Multiplies `a` by a `1 x 1` scalar node.
    pub fn scale(&self, a: Var, scalar: Var) -> Result<Var> {
        let out = {
            let (av, sv) = (self.value(a), self.value(scalar));
            if sv.dim() != (1, 1) {
                return Err(TunesError::shape(format!("scale by {:?}", sv.dim())));
            }
            &*av * sv[[0, 0]]
        };
        Ok(self.push(out, &[a, scalar], |ctx| {
            let (av, sv) = (ctx.inputs[0], ctx.inputs[1]);
            let ds = (ctx.grad * av).sum();
            vec![
                Some(ctx.grad * sv[[0, 0]]),
                Some(Array2::from_elem((1, 1), ds)),
            ]
        }))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, &[a], |ctx| {
            let mut g = ctx.grad.clone();
            ndarray::Zip::from(&mut g)
                .and(ctx.inputs[0])
                .for_each(|g, &x| *g *= gelu_grad(x));
            vec![Some(g)]
        })
    }

    /// Gathers rows of `x` according to `plan`; output is
    /// `plan.out_rows x (plan.taps * C)`.
    pub fn gather(&self, x: Var, plan: Rc<GatherPlan>) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            gather_rows(xv.view(), &plan)?
        };
        Ok(self.push(out, &[x], move |ctx| {
            let xv = ctx.inputs[0];
            let c = xv.ncols();
            let mut gx = Array2::<f32>::zeros(xv.dim());
            for (slot, src) in plan.index.iter().enumerate() {
                if let Some(src) = *src {
                    let (o, j) = (slot / plan.taps, slot % plan.taps);
                    let g = ctx.grad.slice(s![o, j * c..(j + 1) * c]);
                    let mut dst = gx.row_mut(src);
                    dst += &g;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Row-major reshape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = {
            let av = self.value(a);
            if av.len() != rows * cols {
                return Err(TunesError::shape(format!(
                    "reshape {:?} -> ({rows}, {cols})",
                    av.dim()
                )));
            }
            let data: Vec<f32> = av.iter().copied().collect();
            Array2::from_shape_vec((rows, cols), data).expect("length checked")
        };
        Ok(self.push(out, &[a], |ctx| {
            let shape = ctx.inputs[0].dim();
            let data: Vec<f32> = ctx.grad.iter().copied().collect();
            vec![Some(Array2::from_shape_vec(shape, data).expect("same length"))]
        }))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = values.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(0), &views)
                .map_err(|e| TunesError::shape(format!("concat rows: {e}")))?
        };
        Ok(self.push(out, parts, |ctx| {
            let mut start = 0;
            ctx.inputs
                .iter()
                .map(|inp| {
                    let n = inp.nrows();
                    let g = ctx.grad.slice(s![start..start + n, ..]).to_owned();
                    start += n;
                    Some(g)
                })
                .collect()
        }))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = {
            let av = self.value(a);
            if start >= end || end > av.nrows() {
                return Err(TunesError::shape(format!(
                    "row slice {start}..{end} of {} rows",
                    av.nrows()
                )));
            }
            av.slice(s![start..end, ..]).to_owned()
        };
        Ok(self.push(out, &[a], move |ctx| {
            let mut g = Array2::<f32>::zeros(ctx.inputs[0].dim());
            g.slice_mut(s![start..end, ..]).assign(ctx.grad);
            vec![Some(g)]
        }))
    }

    /// Replaces the rows of `x` flagged in `rows` by the `1 x C` row `embedding`.
    pub fn replace_rows(&self, x: Var, embedding: Var, rows: Rc<Vec<bool>>) -> Result<Var> {
        let out = {
            let (xv, ev) = (self.value(x), self.value(embedding));
            if rows.len() != xv.nrows() || ev.dim() != (1, xv.ncols()) {
                return Err(TunesError::shape(format!(
                    "replace rows: x {:?}, embedding {:?}, flags {}",
                    xv.dim(),
                    ev.dim(),
                    rows.len()
                )));
            }
            let mut out = xv.clone();
            for (r, _) in rows.iter().enumerate().filter(|(_, &m)| m) {
                out.row_mut(r).assign(&ev.row(0));
            }
            out
        };
        Ok(self.push(out, &[x, embedding], move |ctx| {
            let mut gx = ctx.grad.clone();
            let mut ge = Array2::<f32>::zeros((1, gx.ncols()));
            for (r, _) in rows.iter().enumerate().filter(|(_, &m)| m) {
                let mut acc = ge.row_mut(0);
                acc += &gx.row(r);
                gx.row_mut(r).fill(0.0);
            }
            vec![Some(gx), Some(ge)]
        }))
    }

    /// Multi-head scaled dot-product attention with a boolean `allowed`
    /// matrix (`S x T`). `q` is `S x (heads*d)`, `k` and `v` are `T x (heads*d)`.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, allowed: Rc<Array2<bool>>) -> Result<Var> {
        let (out, probs) = {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            attention_forward(qv.view(), kv.view(), vv.view(), heads, allowed.view())?
        };
        Ok(self.push(out, &[q, k, v], move |ctx| {
            let (qv, kv, vv) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
            let d = qv.ncols() / heads;
            let scale = 1.0 / (d as f32).sqrt();
            let mut gq = Array2::<f32>::zeros(qv.dim());
            let mut gk = Array2::<f32>::zeros(kv.dim());
            let mut gv = Array2::<f32>::zeros(vv.dim());
            for (h, p) in probs.iter().enumerate() {
                let cols = s![.., h * d..(h + 1) * d];
                let go = ctx.grad.slice(cols);
                // dP = dO V^T ; dS = P * (dP - rowsum(dP * P))
                let dp = go.dot(&vv.slice(cols).t());
                let mut ds = &dp * p;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f32 = row.sum();
                    row.zip_mut_with(&prow, |x, &pv| *x -= pv * dot);
                }
                ds.mapv_inplace(|x| x * scale);
                gq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                gk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                gv.slice_mut(cols).assign(&p.t().dot(&go));
            }
            vec![Some(gq), Some(gk), Some(gv)]
        }))
    }

    /// Reverse pass from a set of seed gradients. Each seed must match the
    /// shape of its node; seeds for the same node accumulate.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Result<Gradients> {
        if !self.track {
            return Err(TunesError::config("backward on an inference graph"));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        let value_of = |i: usize| -> &Matrix {
            match &nodes[i].value {
                Value::Owned(m) => m,
                Value::Param(id) => self.params.get(*id),
            }
        };
        for (var, seed) in seeds {
            if value_of(var.0).dim() != seed.dim() {
                return Err(TunesError::shape(format!(
                    "seed {:?} for node of shape {:?}",
                    seed.dim(),
                    value_of(var.0).dim()
                )));
            }
            accumulate(&mut grads[var.0], seed.clone());
        }
        let mut param_grads = ParamGrads::zeros_like(self.params);
        for i in (0..nodes.len()).rev() {
            let node = &nodes[i];
            let Some(backward) = &node.backward else {
                if let (Value::Param(id), Some(g)) = (&node.value, &grads[i]) {
                    param_grads.accumulate(*id, g);
                }
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.parents.iter().map(|p| value_of(p.0)).collect(),
            };
            for (parent, g) in node.parents.iter().zip(backward(&ctx)) {
                if let Some(g) = g {
                    accumulate(&mut grads[parent.0], g);
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params: param_grads,
        })
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Gradients of leaf nodes (inputs and parameters) after a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::input`]. `None`
    /// means the seeds do not depend on it at all.
    pub fn wrt(&self, var: Var) -> Option<&Matrix> {
        self.nodes.get(var.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

/// Borrowed node value.
pub enum ValueRef<'a> {
    Node(Ref<'a, Matrix>),
    Param(&'a Matrix),
}

impl std::ops::Deref for ValueRef<'_> {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        match self {
            ValueRef::Node(r) => r,
            ValueRef::Param(m) => m,
        }
    }
}

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f32) -> f32 {
    let cdf = 0.5 * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() * 0.398_942_3;
    cdf + x * pdf
}

pub(crate) fn gather_rows(x: ArrayView2<'_, f32>, plan: &GatherPlan) -> Result<Matrix> {
    let c = x.ncols();
    let mut out = Array2::<f32>::zeros((plan.out_rows, plan.taps * c));
    for (slot, src) in plan.index.iter().enumerate() {
        if let Some(src) = *src {
            if src >= x.nrows() {
                return Err(TunesError::shape(format!(
                    "gather index {src} beyond {} rows",
                    x.nrows()
                )));
            }
            let (o, j) = (slot / plan.taps, slot % plan.taps);
            out.slice_mut(s![o, j * c..(j + 1) * c]).assign(&x.row(src));
        }
    }
    Ok(out)
}

/// Returns the attention output and the per-head probability matrices.
pub(crate) fn attention_forward(
    q: ArrayView2<'_, f32>,
    k: ArrayView2<'_, f32>,
    v: ArrayView2<'_, f32>,
    heads: usize,
    allowed: ArrayView2<'_, bool>,
) -> Result<(Matrix, Vec<Matrix>)> {
    if heads == 0 || q.ncols() % heads != 0 {
        return Err(TunesError::param(format!(
            "{} query channels cannot be split into {heads} heads",
            q.ncols()
        )));
    }
    if q.ncols() != k.ncols() || k.dim() != v.dim() {
        return Err(TunesError::shape(format!(
            "attention q {:?}, k {:?}, v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if allowed.dim() != (q.nrows(), k.nrows()) {
        return Err(TunesError::shape(format!(
            "mask {:?} for {} queries and {} keys",
            allowed.dim(),
            q.nrows(),
            k.nrows()
        )));
    }
    if let Some(row) = allowed
        .rows()
        .into_iter()
        .position(|r| !r.iter().any(|&a| a))
    {
        return Err(TunesError::FullyMaskedRow { row });
    }
    let d = q.ncols() / heads;
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = Array2::<f32>::zeros((q.nrows(), v.ncols()));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * d..(h + 1) * d];
        let mut p = q.slice(cols).dot(&k.slice(cols).t());
        for (mut row, mask) in p.rows_mut().into_iter().zip(allowed.rows()) {
            let max = row
                .iter()
                .zip(mask.iter())
                .filter(|(_, &a)| a)
                .map(|(&x, _)| x * scale)
                .fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f32;
            row.zip_mut_with(&mask, |x, &a| {
                *x = if a { (*x * scale - max).exp() } else { 0.0 };
                total += *x;
            });
            row.mapv_inplace(|x| x / total);
        }
        out.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    Ok((out, probs))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    /// Compares the tape gradient of `<seed, f(x)>` against central differences.
    pub(crate) fn check_input_grad<F>(x: Matrix, f: F)
    where
        F: Fn(&Graph<'_>, Var) -> Var,
    {
        check_grad_with_store(&ParamStore::new(), x, f)
    }

    pub(crate) fn check_grad_with_store<F>(store: &ParamStore, x: Matrix, f: F)
    where
        F: Fn(&Graph<'_>, Var) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let g = Graph::new(store);
        let xv = g.input(x.clone());
        let y = f(&g, xv);
        let seed = random(&mut rng, g.shape(y).0, g.shape(y).1);
        let grads = g.backward(&[(y, seed.clone())]).unwrap();
        let analytic = grads.wrt(xv).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));

        let objective = |m: &Matrix| -> f64 {
            let g = Graph::inference(store);
            let xv = g.input(m.clone());
            let y = f(&g, xv);
            let out = g.value(y);
            out.iter()
                .zip(seed.iter())
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum()
        };
        let h = 1e-2f32;
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut plus = x.clone();
            plus[[r, c]] += h;
            let mut minus = x.clone();
            minus[[r, c]] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * f64::from(h));
            let a = f64::from(analytic[[r, c]]);
            assert!(
                (a - numeric).abs() <= 2e-2 * numeric.abs().max(1.0),
                "grad mismatch at ({r},{c}): tape {a}, numeric {numeric}"
            );
        }
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 4, 3);
        let b = random(&mut rng, 1, 3);
        check_input_grad(random(&mut rng, 5, 4), move |g, x| {
            let w = g.input(w.clone());
            let b = g.input(b.clone());
            g.linear(x, w, Some(b)).unwrap()
        });
    }

    #[test]
    fn gelu_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check_input_grad(random(&mut rng, 6, 3).mapv(|v| v * 3.0), |g, x| g.gelu(x));
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_7).abs() < 1e-6);
        assert!((gelu(-1.0) + 0.158_655_26).abs() < 1e-6);
    }

    #[test]
    fn gather_reshape_slice_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = Rc::new(GatherPlan::new(6, 3, |o, j| (o + j).checked_sub(2)));
        check_input_grad(random(&mut rng, 6, 2), move |g, x| {
            let y = g.gather(x, plan.clone()).unwrap();
            let y = g.reshape(y, 12, 3).unwrap();
            let a = g.slice_rows(y, 2, 9).unwrap();
            let b = g.slice_rows(y, 0, 1).unwrap();
            g.concat_rows(&[b, a, b]).unwrap()
        });
    }

    #[test]
    fn scale_and_replace_rows_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let emb = random(&mut rng, 1, 3);
        let flags = Rc::new(vec![false, true, true, false, true]);
        check_input_grad(random(&mut rng, 5, 3), move |g, x| {
            let s = g.input(Array2::from_elem((1, 1), 0.7));
            let e = g.input(emb.clone());
            let y = g.replace_rows(x, e, flags.clone()).unwrap();
            g.scale(y, s).unwrap()
        });
    }

    #[test]
    fn attention_gradient_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let allowed = Rc::new(Array2::from_shape_fn((4, 4), |(s, t)| t <= s + 1));
        let k = random(&mut rng, 4, 4);
        let v = random(&mut rng, 4, 4);
        let (k2, v2, a2) = (k.clone(), v.clone(), allowed.clone());
        check_input_grad(random(&mut rng, 4, 4), move |g, q| {
            let k = g.input(k2.clone());
            let v = g.input(v2.clone());
            g.attention(q, k, v, 2, a2.clone()).unwrap()
        });
        let q = random(&mut rng, 4, 4);
        let (q2, v2, a2) = (q.clone(), v.clone(), allowed.clone());
        check_input_grad(k.clone(), move |g, k| {
            let q = g.input(q2.clone());
            let v = g.input(v2.clone());
            g.attention(q, k, v, 2, a2.clone()).unwrap()
        });
        check_input_grad(v, move |g, v| {
            let q = g.input(q.clone());
            let k = g.input(k.clone());
            g.attention(q, k, v, 2, allowed.clone()).unwrap()
        });
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let store = ParamStore::new();
        let g = Graph::new(&store);
        let q = g.input(Array2::ones((2, 2)));
        let allowed = Rc::new(Array2::from_shape_vec((2, 2), vec![true, false, false, false]).unwrap());
        let err = g.attention(q, q, q, 1, allowed).unwrap_err();
        assert!(matches!(err, TunesError::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn param_gradients_accumulate_over_reuse() {
        let mut store = ParamStore::new();
        let id = store.add("w", &[1, 1], Array2::from_elem((1, 1), 2.0));
        let g = Graph::new(&store);
        let x = g.input(Array2::from_elem((3, 1), 1.5));
        let w1 = g.param(id);
        let w2 = g.param(id);
        let a = g.matmul(x, w1).unwrap();
        let b = g.matmul(a, w2).unwrap();
        let grads = g.backward(&[(b, Array2::ones((3, 1)))]).unwrap();
        // d/dw sum(x * w * w) = 2 * w * sum(x) = 18
        let dw = grads.params().get(id).unwrap()[[0, 0]];
        assert!((dw - 18.0).abs() < 1e-5);
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let store = ParamStore::new();
        let g = Graph::inference(&store);
        let x = g.input(Array2::ones((1, 1)));
        assert!(g.backward(&[(x, Array2::ones((1, 1)))]).is_err());
    }
}
