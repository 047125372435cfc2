//! Training loop: Adam on one sequence at a time, global gradient clipping,
//! sequence augmentation, token masking and schedule-dependent model
//! selection.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tunes::autograd::Graph;
use tunes::data::augment::augment;
use tunes::data::masking::plan_span_mask;
use tunes::data::PhaseDatasetEntry;
use tunes::metrics::video_metrics;
use tunes::objectives::{median_frequency_weights, total_loss, widen, ClassWeights};
use tunes::params::{ParamGrads, ParamStore};
use tunes::TunesModel;

use crate::config::{Schedule, TrainConfig};
use crate::error::{HarnessError, Result};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: Vec<Array2<f32>>,
    second: Vec<Array2<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Array2<f32>> = params.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads, learning_rate: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let step_size = (learning_rate * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (id, grad) in grads.iter() {
            let i = id.index();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let value = params.get_mut(id);
            ndarray::Zip::from(value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= step_size * *m / (v.sqrt() + eps);
                });
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean total loss over the epoch's training sequences.
    pub train_loss: f64,
    /// Largest gradient norm before clipping.
    pub max_grad_norm: f64,
    /// Largest gradient norm after clipping.
    pub max_clipped_norm: f64,
    pub val_macro_jaccard: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub selected_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,learning_rate,train_loss,max_grad_norm,max_clipped_norm,val_macro_jaccard\n");
        for r in &self.epochs {
            let val = r.val_macro_jaccard.map_or(String::new(), |v| v.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.learning_rate, r.train_loss, r.max_grad_norm, r.max_clipped_norm, val
            ));
        }
        out
    }
}

/// Pads to the model's length multiple, runs inference and crops back.
pub fn predict_labels(model: &TunesModel, entry: &PhaseDatasetEntry) -> Result<Vec<u8>> {
    let (padded, len) = entry.pad_to_multiple(model.config().length_multiple());
    let preds = model.forward(&padded.features)?;
    Ok(preds.hard_labels(len))
}

/// Mean video-wise Macro Jaccard.
pub fn mean_macro_jaccard(model: &TunesModel, videos: &[PhaseDatasetEntry]) -> Result<f64> {
    let mut sum = 0.0;
    for v in videos {
        let pred = predict_labels(model, v)?;
        sum += video_metrics(&v.labels, &pred, model.config().num_classes)?.macro_jaccard();
    }
    Ok(sum / videos.len().max(1) as f64)
}

/// Frame accuracy over all frames of `videos`.
pub fn frame_accuracy(model: &TunesModel, videos: &[PhaseDatasetEntry]) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for v in videos {
        let pred = predict_labels(model, v)?;
        correct += pred.iter().zip(&v.labels).filter(|(a, b)| a == b).count();
        total += v.len();
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Outcome of one optimisation step.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// One forward/backward pass on `entry` (already augmented) and an Adam step.
pub fn train_step(
    model: &mut TunesModel,
    adam: &mut Adam,
    entry: &PhaseDatasetEntry,
    weights: &ClassWeights,
    config: &TrainConfig,
    learning_rate: f64,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<StepStats> {
    let scales = model.config().scales.clone();
    let (padded, _) = entry.pad_to_multiple(model.config().length_multiple());
    let plan = if config.masking {
        Some(plan_span_mask(&padded.labels, &config.mask, rng)?)
    } else {
        None
    };
    let (loss, mut grads) = {
        let g = Graph::new(model.params());
        let x = g.input(padded.features.clone());
        let out = model.forward_graph(&g, x, plan.as_ref())?;
        let levels: Vec<Array2<f64>> = out.levels.iter().map(|&v| widen(&g.value(v))).collect();
        let views: Vec<ArrayView2<'_, f64>> = levels.iter().map(|l| l.view()).collect();
        let loss = total_loss(&views, &scales, &padded.labels, weights, config.smoothing_weight)?;
        if !loss.total.is_finite() {
            return Err(HarnessError::Divergence {
                epoch,
                video: entry.video_id.clone(),
                loss: loss.total,
            });
        }
        let seeds: Vec<_> = out
            .levels
            .iter()
            .zip(&loss.grads)
            .map(|(&v, grad)| (v, grad.mapv(|x| x as f32)))
            .collect();
        (loss.total, g.backward(&seeds)?.into_params())
    };
    let grad_norm = grads.clip_global_norm(config.grad_clip_norm);
    if !grad_norm.is_finite() {
        return Err(HarnessError::Divergence {
            epoch,
            video: entry.video_id.clone(),
            loss: grad_norm,
        });
    }
    let clipped_norm = grads.global_norm();
    adam.step(model.params_mut(), &grads, learning_rate);
    Ok(StepStats {
        loss,
        grad_norm,
        clipped_norm,
    })
}

/// Trains `model` in place and returns the per-epoch history. With the
/// constant schedule the weights of the epoch with the best validation
/// Macro Jaccard are restored at the end; with cosine the last epoch's
/// weights are kept.
pub fn train(
    model: &mut TunesModel,
    train_set: &[PhaseDatasetEntry],
    val_set: &[PhaseDatasetEntry],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(HarnessError::Config("training split is empty".into()));
    }
    let selects_on_val = config.schedule == Schedule::ConstantBestVal;
    if selects_on_val && val_set.is_empty() {
        return Err(HarnessError::Config(
            "the constant schedule selects on validation data, but the validation split is empty".into(),
        ));
    }
    let num_classes = model.config().num_classes;
    for v in train_set.iter().chain(val_set) {
        v.check_classes(num_classes)?;
    }
    let weights = median_frequency_weights(train_set.iter().map(|v| v.labels.as_slice()), num_classes)?;
    let mut adam = Adam::new(model.params(), config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ParamStore)> = None;

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut max_norm, mut max_clipped) = (0.0, 0.0f64, 0.0f64);
        for &i in &order {
            let entry = if config.augment {
                augment(&train_set[i], &config.augmentation, &mut rng)
            } else {
                train_set[i].clone()
            };
            let stats = train_step(model, &mut adam, &entry, &weights, config, lr, &mut rng, epoch)?;
            loss_sum += stats.loss;
            max_norm = max_norm.max(stats.grad_norm);
            max_clipped = max_clipped.max(stats.clipped_norm);
        }
        let val = if val_set.is_empty() {
            None
        } else {
            Some(mean_macro_jaccard(model, val_set)?)
        };
        if let (true, Some(score)) = (selects_on_val, val) {
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, model.params().clone()));
                history.selected_epoch = epoch;
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / order.len() as f64,
            max_grad_norm: max_norm,
            max_clipped_norm: max_clipped,
            val_macro_jaccard: val,
        });
    }
    match best {
        Some((_, params)) => *model.params_mut() = params,
        None => history.selected_epoch = config.epochs - 1,
    }
    Ok(history)
}

/// Hard predictions of a model for every video.
pub fn predict_all(model: &TunesModel, videos: &[PhaseDatasetEntry]) -> Result<Vec<Vec<u8>>> {
    videos.iter().map(|v| predict_labels(model, v)).collect()
}
