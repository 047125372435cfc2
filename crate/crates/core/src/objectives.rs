//! Training losses with analytic gradients.
//!
//! Scores are passed in `f64` so the gradients can be checked by finite
//! differences at tight tolerances; model outputs are widened before use.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Result, TunesError};

/// Default threshold of the smoothing loss.
pub const SMOOTHING_THRESHOLD: f64 = 4.0;
/// Default weight of the smoothing loss.
pub const SMOOTHING_WEIGHT: f64 = 0.15;

/// Per-class weights, all positive.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(TunesError::param("class weights must not be empty"));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(TunesError::param(format!("class weight {w} is not positive and finite")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0; num_classes.max(1)])
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Weight of a 1-based class label.
    pub fn of(&self, label: u8) -> f64 {
        self.0[usize::from(label) - 1]
    }
}

/// Loss value together with its gradient w.r.t. the scores.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grad: Array2<f64>,
}

fn check_labels(labels: &[u8], num_classes: usize) -> Result<()> {
    match labels
        .iter()
        .position(|&l| l == 0 || usize::from(l) > num_classes)
    {
        Some(index) => Err(TunesError::LabelOutOfRange {
            label: labels[index],
            num_classes,
            index,
        }),
        None => Ok(()),
    }
}

/// Median-frequency class balancing: `median(freq) / freq_p`.
pub fn median_frequency_weights<'a, I>(sequences: I, num_classes: usize) -> Result<ClassWeights>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    if num_classes == 0 {
        return Err(TunesError::param("num_classes must be positive"));
    }
    let mut counts = vec![0u64; num_classes];
    for labels in sequences {
        check_labels(labels, num_classes)?;
        for &l in labels {
            counts[usize::from(l) - 1] += 1;
        }
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(TunesError::ZeroFrequencyClass { class: class + 1 });
    }
    let total: u64 = counts.iter().sum();
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mut sorted = freq.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    ClassWeights::new(freq.iter().map(|f| median / f).collect())
}

/// Row-wise log-softmax.
pub fn log_softmax(scores: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = scores.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Backpropagates a gradient on log-softmax outputs of one row to its scores.
fn log_softmax_backward(log_probs: ArrayView1<'_, f64>, grad: ArrayView1<'_, f64>) -> Array1<f64> {
    let total = grad.sum();
    Array1::from_iter(
        grad.iter()
            .zip(log_probs.iter())
            .map(|(g, lp)| g - lp.exp() * total),
    )
}

fn check_scores(scores: ArrayView2<'_, f64>, num_classes: usize, what: &str) -> Result<()> {
    if scores.ncols() != num_classes {
        return Err(TunesError::shape(format!(
            "{what}: scores have {} classes, weights {num_classes}",
            scores.ncols()
        )));
    }
    Ok(())
}

/// Class-weighted cross-entropy averaged over frames.
pub fn cross_entropy(scores: ArrayView2<'_, f64>, labels: &[u8], weights: &ClassWeights) -> Result<LossValue> {
    let (len, classes) = scores.dim();
    check_scores(scores, weights.num_classes(), "cross-entropy")?;
    if labels.len() != len || len == 0 {
        return Err(TunesError::shape(format!(
            "cross-entropy: {len} score rows, {} labels",
            labels.len()
        )));
    }
    check_labels(labels, classes)?;
    let log_probs = log_softmax(scores);
    let inv_len = 1.0 / len as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros((len, classes));
    for (t, &label) in labels.iter().enumerate() {
        let y = usize::from(label) - 1;
        let w = weights.of(label);
        value -= w * log_probs[[t, y]];
        for p in 0..classes {
            let target = if p == y { 1.0 } else { 0.0 };
            grad[[t, p]] = w * inv_len * (log_probs[[t, p]].exp() - target);
        }
    }
    Ok(LossValue {
        value: value * inv_len,
        grad,
    })
}

/// Truncated squared difference of consecutive log-probabilities. The
/// previous step is treated as a constant, so only step `t` receives
/// gradient from each difference.
pub fn smoothing_loss(scores: ArrayView2<'_, f64>, threshold: f64) -> Result<LossValue> {
    let (len, classes) = scores.dim();
    if len < 2 {
        return Err(TunesError::shape(format!("smoothing loss needs at least 2 frames, got {len}")));
    }
    let log_probs = log_softmax(scores);
    let norm = 1.0 / ((len - 1) * classes) as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros((len, classes));
    for t in 1..len {
        let mut g_lp = Array1::zeros(classes);
        for p in 0..classes {
            let diff = log_probs[[t, p]] - log_probs[[t - 1, p]];
            if diff.abs() < threshold {
                value += diff * diff;
                g_lp[p] = 2.0 * diff * norm;
            } else {
                value += threshold * threshold;
            }
        }
        let g = log_softmax_backward(log_probs.row(t), g_lp.view());
        grad.row_mut(t).assign(&g);
    }
    Ok(LossValue {
        value: value * norm,
        grad,
    })
}

/// Multi-hot max pooling of one-hot labels with kernel and stride `factor`.
pub fn downsample_labels(labels: &[u8], num_classes: usize, factor: usize) -> Result<Array2<f64>> {
    if factor == 0 || labels.is_empty() || labels.len() % factor != 0 {
        return Err(TunesError::shape(format!(
            "cannot pool {} labels with factor {factor}",
            labels.len()
        )));
    }
    check_labels(labels, num_classes)?;
    let mut out = Array2::zeros((labels.len() / factor, num_classes));
    for (t, &l) in labels.iter().enumerate() {
        out[[t / factor, usize::from(l) - 1]] = 1.0;
    }
    Ok(out)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy over all entries; class weights scale the positive term.
pub fn bce_loss(scores: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>, weights: &ClassWeights) -> Result<LossValue> {
    check_scores(scores, weights.num_classes(), "bce")?;
    if scores.dim() != targets.dim() || scores.is_empty() {
        return Err(TunesError::shape(format!(
            "bce: scores {:?} vs targets {:?}",
            scores.dim(),
            targets.dim()
        )));
    }
    let (rows, classes) = scores.dim();
    let norm = 1.0 / (rows * classes) as f64;
    let w = weights.as_slice();
    let mut value = 0.0;
    let mut grad = Array2::zeros((rows, classes));
    for ((s, p), &x) in scores.indexed_iter() {
        let y = targets[[s, p]];
        // log σ(x) = -softplus(-x), log(1-σ(x)) = -softplus(x)
        value += w[p] * y * softplus(-x) + (1.0 - y) * softplus(x);
        let sig = sigmoid(x);
        grad[[s, p]] = -norm * (w[p] * y * (1.0 - sig) - (1.0 - y) * sig);
    }
    Ok(LossValue {
        value: value * norm,
        grad,
    })
}

/// Individual terms of the multi-scale objective and the gradient for every
/// prediction level.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub smoothing: f64,
    /// One entry per coarse level.
    pub bce: Vec<f64>,
    /// Gradient per level, finest first.
    pub grads: Vec<Array2<f64>>,
}

/// Cross-entropy plus weighted smoothing at full resolution and BCE against
/// pooled multi-hot labels at every coarser level.
pub fn total_loss(
    levels: &[ArrayView2<'_, f64>],
    scales: &[usize],
    labels: &[u8],
    weights: &ClassWeights,
    smoothing_weight: f64,
) -> Result<LossBreakdown> {
    if levels.is_empty() || levels.len() != scales.len() || scales[0] != 1 {
        return Err(TunesError::shape(format!(
            "{} prediction levels for scales {scales:?}",
            levels.len()
        )));
    }
    let len = labels.len();
    for (level, &scale) in levels.iter().zip(scales) {
        if scale == 0 || len % scale != 0 || level.nrows() != len / scale {
            return Err(TunesError::shape(format!(
                "level at scale {scale} has {} rows for {len} labels",
                level.nrows()
            )));
        }
    }
    let ce = cross_entropy(levels[0], labels, weights)?;
    let sm = smoothing_loss(levels[0], SMOOTHING_THRESHOLD)?;
    let mut grads = vec![ce.grad + &(sm.grad * smoothing_weight)];
    let mut total = ce.value + smoothing_weight * sm.value;
    let mut bce = Vec::with_capacity(levels.len() - 1);
    for (level, &scale) in levels.iter().zip(scales).skip(1) {
        let targets = downsample_labels(labels, weights.num_classes(), scale)?;
        let term = bce_loss(*level, targets.view(), weights)?;
        total += term.value;
        bce.push(term.value);
        grads.push(term.grad);
    }
    Ok(LossBreakdown {
        total,
        cross_entropy: ce.value,
        smoothing: sm.value,
        bce,
        grads,
    })
}

/// Widens `f32` model outputs for the loss functions.
pub fn widen(scores: &Array2<f32>) -> Array2<f64> {
    scores.mapv(f64::from)
}

/// Hard multi-hot check used by tests and data validation: every pooled row
/// has at least one active class.
pub fn active_classes(row: ArrayView1<'_, f64>) -> Vec<usize> {
    row.iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.5)
        .map(|(p, _)| p + 1)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn random_scores(rng: &mut ChaCha8Rng, t: usize, c: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_simple_fn((t, c), || rng.gen_range(-scale..scale))
    }

    fn random_labels(rng: &mut ChaCha8Rng, t: usize, c: usize) -> Vec<u8> {
        (0..t).map(|_| rng.gen_range(1..=c as u8)).collect()
    }

    fn check_fd<F: Fn(&Array2<f64>) -> LossValue>(x: &Array2<f64>, f: F) {
        let analytic = f(x).grad;
        let h = 1e-6;
        for idx in ndarray::indices(x.dim()) {
            let mut plus = x.clone();
            plus[idx] += h;
            let mut minus = x.clone();
            minus[idx] -= h;
            let numeric = (f(&plus).value - f(&minus).value) / (2.0 * h);
            let a = analytic[idx];
            let tol = 1e-4 * a.abs().max(numeric.abs()).max(1e-3);
            assert!((a - numeric).abs() <= tol, "{idx:?}: analytic {a} numeric {numeric}");
        }
    }

    /// Direct evaluation with the earlier step taken from `previous`.
    fn smoothing_reference(current: &Array2<f64>, previous: &Array2<f64>, tau: f64) -> f64 {
        let (t, c) = current.dim();
        let mut sum = 0.0;
        for i in 1..t {
            let now: Vec<f64> = current.row(i).to_vec();
            let before: Vec<f64> = previous.row(i - 1).to_vec();
            let lse = |v: &[f64]| v.iter().map(|x| x.exp()).sum::<f64>().ln();
            let (ln, lb) = (lse(&now), lse(&before));
            for p in 0..c {
                let delta = ((now[p] - ln) - (before[p] - lb)).abs();
                sum += delta.min(tau).powi(2);
            }
        }
        sum / ((t - 1) * c) as f64
    }

    #[test]
    fn median_frequency_examples() {
        let w = median_frequency_weights([&[1u8, 1, 1, 2][..]], 2).unwrap();
        assert_abs_diff_eq!(w.as_slice()[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.as_slice()[1], 2.0, epsilon = 1e-12);
        let w = median_frequency_weights([&[1u8, 1, 2, 2, 3, 3, 3, 3][..]], 3).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 1.0, 0.5]);
        let w = median_frequency_weights([&[1u8, 2, 3][..], &[3, 2, 1][..]], 3).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_frequency_and_out_of_range_are_errors() {
        assert!(matches!(
            median_frequency_weights([&[1u8, 1][..]], 2),
            Err(TunesError::ZeroFrequencyClass { class: 2 })
        ));
        assert!(matches!(
            median_frequency_weights([&[1u8, 3][..]], 2),
            Err(TunesError::LabelOutOfRange { label: 3, index: 1, .. })
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let zeros = Array2::zeros((2, 2));
        let l = cross_entropy(zeros.view(), &[1, 2], &ClassWeights::uniform(2)).unwrap();
        assert_abs_diff_eq!(l.value, LN2, epsilon = 1e-12);
        let w = ClassWeights::new(vec![2.0, 0.5]).unwrap();
        let l = cross_entropy(zeros.view(), &[1, 2], &w).unwrap();
        assert_abs_diff_eq!(l.value, 1.25 * LN2, epsilon = 1e-12);
        assert_abs_diff_eq!(l.value, 0.8664, epsilon = 1e-4);
        let saturated = array![[60.0, -60.0], [-60.0, 60.0]];
        let l = cross_entropy(saturated.view(), &[1, 2], &ClassWeights::uniform(2)).unwrap();
        assert!(l.value < 1e-40);
        assert!(cross_entropy(zeros.view(), &[1, 3], &ClassWeights::uniform(2)).is_err());
    }

    #[test]
    fn smoothing_examples() {
        let s = array![[0.0, 0.0], [3f64.ln(), 0.0]];
        let l = smoothing_loss(s.view(), SMOOTHING_THRESHOLD).unwrap();
        let expected = (1.5f64.ln().powi(2) + 2f64.ln().powi(2)) / 2.0;
        assert_abs_diff_eq!(l.value, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(l.value, 0.3224, epsilon = 1e-4);
        let constant = Array2::from_elem((5, 3), 0.7);
        assert_eq!(smoothing_loss(constant.view(), 4.0).unwrap().value, 0.0);
        assert!(smoothing_loss(Array2::zeros((1, 3)).view(), 4.0).is_err());
    }

    #[test]
    fn smoothing_clips_large_steps() {
        // class 2 log-prob rises by about 19 (>= 4), class 1 moves by ln 2
        let s = array![[20.0, 0.0], [0.0, 0.0]];
        let l = smoothing_loss(s.view(), 4.0).unwrap();
        let lp = log_softmax(s.view());
        let small = (lp[[1, 0]] - lp[[0, 0]]).powi(2);
        assert_abs_diff_eq!(l.value, (16.0 + small) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn smoothing_previous_step_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_scores(&mut rng, 2, 4, 1.0);
        let l = smoothing_loss(s.view(), 4.0).unwrap();
        assert!(l.grad.row(0).iter().all(|&g| g == 0.0));
        assert!(l.grad.row(1).iter().any(|&g| g != 0.0));
    }

    #[test]
    fn downsample_examples() {
        assert_eq!(active_classes(downsample_labels(&[1, 1, 2], 2, 3).unwrap().row(0)), vec![1, 2]);
        assert_eq!(active_classes(downsample_labels(&[1, 1, 1], 2, 3).unwrap().row(0)), vec![1]);
        let pooled = downsample_labels(&[1, 2, 3, 3, 3, 3], 3, 3).unwrap();
        assert_eq!(active_classes(pooled.row(0)), vec![1, 2, 3]);
        assert_eq!(active_classes(pooled.row(1)), vec![3]);
        assert!(downsample_labels(&[1, 1, 1, 1], 2, 3).is_err());
    }

    #[test]
    fn bce_examples() {
        let zeros = Array2::zeros((1, 2));
        let y = array![[1.0, 0.0]];
        let l = bce_loss(zeros.view(), y.view(), &ClassWeights::uniform(2)).unwrap();
        assert_abs_diff_eq!(l.value, LN2, epsilon = 1e-12);
        let w = ClassWeights::new(vec![3.0, 1.0]).unwrap();
        let l = bce_loss(zeros.view(), y.view(), &w).unwrap();
        assert_abs_diff_eq!(l.value, 2.0 * LN2, epsilon = 1e-12);
        let saturated = array![[40.0, -40.0]];
        assert!(bce_loss(saturated.view(), y.view(), &w).unwrap().value < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..6 {
            let t = 2 + trial * 3;
            let c = 2 + trial % 6;
            let labels = random_labels(&mut rng, t, c);
            let w = ClassWeights::new((0..c).map(|_| rng.gen_range(0.3..3.0)).collect()).unwrap();
            let s = random_scores(&mut rng, t, c, 2.0);
            check_fd(&s, |x| cross_entropy(x.view(), &labels, &w).unwrap());
            // the previous step enters as a constant: differentiate with it frozen
            let frozen = s.clone();
            let analytic = smoothing_loss(s.view(), 4.0).unwrap().grad;
            check_fd(&s, |x| LossValue {
                value: smoothing_reference(x, &frozen, 4.0),
                grad: analytic.clone(),
            });
            let y = Array2::from_shape_simple_fn((t, c), || f64::from(rng.gen_bool(0.4) as u8));
            check_fd(&s, |x| bce_loss(x.view(), y.view(), &w).unwrap());
        }
    }

    #[test]
    fn total_loss_is_sum_of_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scales = [1, 3, 9, 18];
        let c = 7;
        let labels: Vec<u8> = (0..18).map(|t| 1 + (t / 5) as u8).collect();
        let w = ClassWeights::new((0..c).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
        let levels: Vec<Array2<f64>> = scales.iter().map(|s| random_scores(&mut rng, 18 / s, c, 3.0)).collect();
        let views: Vec<_> = levels.iter().map(|l| l.view()).collect();
        let out = total_loss(&views, &scales, &labels, &w, 0.15).unwrap();
        let mut expected = cross_entropy(views[0], &labels, &w).unwrap().value
            + 0.15 * smoothing_loss(views[0], 4.0).unwrap().value;
        for k in 1..4 {
            let y = downsample_labels(&labels, c, scales[k]).unwrap();
            expected += bce_loss(views[k], y.view(), &w).unwrap().value;
        }
        assert_abs_diff_eq!(out.total, expected, epsilon = 1e-12);
        let no_smooth = total_loss(&views, &scales, &labels, &w, 0.0).unwrap();
        assert_eq!(
            no_smooth.total,
            no_smooth.cross_entropy + no_smooth.bce.iter().sum::<f64>()
        );
    }

    #[test]
    fn scale_mismatch_is_an_error() {
        let levels = [Array2::zeros((18, 2)), Array2::zeros((5, 2))];
        let views: Vec<_> = levels.iter().map(|l| l.view()).collect();
        let labels = vec![1u8; 18];
        assert!(total_loss(&views, &[1, 3], &labels, &ClassWeights::uniform(2), 0.15).is_err());
    }
}
