//! Single-frame linear classifier used as a reference point: softmax
//! regression on individual feature vectors, no temporal context.

use ndarray::{Array1, Array2, Axis};
use tunes::data::PhaseDatasetEntry;

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug)]
pub struct LinearBaseline {
    weight: Array2<f64>,
    bias: Array1<f64>,
    mean: Array1<f64>,
    scale: Array1<f64>,
}

impl LinearBaseline {
    /// Full-batch Adam on the frame-wise cross-entropy of standardised features.
    pub fn fit(videos: &[PhaseDatasetEntry], num_classes: usize, steps: usize, learning_rate: f64) -> Result<Self> {
        let frames: usize = videos.iter().map(PhaseDatasetEntry::len).sum();
        let dim = videos.first().map_or(0, PhaseDatasetEntry::feature_dim);
        if frames == 0 || dim == 0 {
            return Err(HarnessError::Config("baseline needs training frames".into()));
        }
        let mut x = Array2::<f64>::zeros((frames, dim));
        let mut y = Vec::with_capacity(frames);
        let mut row = 0;
        for v in videos {
            v.check_classes(num_classes)?;
            for (r, &l) in v.features.rows().into_iter().zip(&v.labels) {
                x.row_mut(row).assign(&r.mapv(f64::from));
                y.push(usize::from(l) - 1);
                row += 1;
            }
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { 1.0 / s } else { 1.0 });
        x -= &mean;
        x *= &scale;

        let mut weight = Array2::<f64>::zeros((dim, num_classes));
        let mut bias = Array1::<f64>::zeros(num_classes);
        let (mut mw, mut vw) = (weight.clone(), weight.clone());
        let (mut mb, mut vb) = (bias.clone(), bias.clone());
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        for step in 1..=steps {
            let mut probs = x.dot(&weight) + &bias;
            for mut r in probs.rows_mut() {
                let max = r.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                r.mapv_inplace(|v| (v - max).exp());
                let s = r.sum();
                r /= s;
            }
            for (t, &c) in y.iter().enumerate() {
                probs[[t, c]] -= 1.0;
            }
            probs /= frames as f64;
            let gw = x.t().dot(&probs);
            let gb = probs.sum_axis(Axis(0));
            let c1 = 1.0 - b1.powi(step as i32);
            let c2 = 1.0 - b2.powi(step as i32);
            for (w, (m, (v, g))) in weight.iter_mut().zip(mw.iter_mut().zip(vw.iter_mut().zip(gw.iter()))) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
            for (w, (m, (v, g))) in bias.iter_mut().zip(mb.iter_mut().zip(vb.iter_mut().zip(gb.iter()))) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(Self {
            weight,
            bias,
            mean,
            scale,
        })
    }

    pub fn predict(&self, entry: &PhaseDatasetEntry) -> Vec<u8> {
        let x = (entry.features.mapv(f64::from) - &self.mean) * &self.scale;
        let scores = x.dot(&self.weight) + &self.bias;
        scores
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (i, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = i;
                    }
                }
                (best + 1) as u8
            })
            .collect()
    }

    pub fn accuracy(&self, videos: &[PhaseDatasetEntry]) -> f64 {
        let (mut correct, mut total) = (0usize, 0usize);
        for v in videos {
            correct += self.predict(v).iter().zip(&v.labels).filter(|(a, b)| a == b).count();
            total += v.len();
        }
        correct as f64 / total.max(1) as f64
    }
}
