//! Mini-batch Adam training on MSE, evaluation and per-class metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_state, state_dict, Checkpoint, ModelSpec, NamedTensor, Provenance};
use crate::colearn::CoLearnModel;
use crate::data::{load_samples, DatasetIndex, Sample};
use crate::error::{Error, Result};
use crate::head::RsNet;
use crate::layers::Module;
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::types::{patch_batch, ModelConfig, SpectralProfile, WavelengthAxis};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.epochs < 1 {
            bad.push("epochs >= 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("learning_rate ({}) > 0", self.learning_rate));
        }
        if self.batch_size < 1 {
            bad.push("batch_size >= 1".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ConstraintViolation(bad))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's batches, weighted by batch size.
    pub train_loss: f64,
    /// Inference-mode mean loss over the validation split.
    pub val_loss: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn val_losses(&self) -> Vec<Option<f64>> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }

    /// Equality of everything but wall time.
    pub fn same_losses(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.val_loss.map(f64::to_bits) == b.val_loss.map(f64::to_bits)
            })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "val_loss", "wall_time_s"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_loss.map(|v| v.to_string()).unwrap_or_default(),
                format!("{:.3}", e.wall_time_s),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean squared difference over bins.
pub fn mse_loss(pred: &SpectralProfile, target: &SpectralProfile) -> Result<f64> {
    mse(pred.values(), target.values())
}

pub(crate) fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: b.len(),
            found: a.len(),
        });
    }
    let s: f64 = a.iter().zip(b).map(|(&p, &t)| (p as f64 - t as f64).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// Batch MSE against `[n, bins, 1, 1]` targets and its gradient with respect to `y`.
pub(crate) fn mse_with_grad(y: &Tensor<f32>, batch: &[&Sample]) -> (f64, Tensor<f32>) {
    let bins = y.sample_len();
    let scale = 2.0 / (batch.len() * bins) as f32;
    let mut dy = Tensor::zeros(y.shape());
    let mut s = 0.0f64;
    for (i, smp) in batch.iter().enumerate() {
        let (yi, ti) = (y.sample(i), smp.profile.values());
        let di = dy.sample_mut(i);
        for b in 0..bins {
            let d = yi[b] - ti[b];
            s += (d as f64) * (d as f64);
            di[b] = scale * d;
        }
    }
    (s / (batch.len() * bins) as f64, dy)
}

/// A model the epoch loop can drive.
pub trait Trainable: Module<f32> {
    /// Training-mode forward and backward on one batch; returns the batch loss.
    /// Gradients accumulate into the parameters.
    fn train_batch(&mut self, batch: &[&Sample]) -> Result<f64>;

    /// Inference-mode loss of every sample in `batch`.
    fn eval_losses(&self, batch: &[&Sample]) -> Result<Vec<f64>>;
}

impl Trainable for RsNet<f32> {
    fn train_batch(&mut self, batch: &[&Sample]) -> Result<f64> {
        let x = patch_batch::<f32>(&batch.iter().map(|s| &s.patch).collect::<Vec<_>>())?;
        let y = self.forward_train(&x)?;
        let (loss, dy) = mse_with_grad(&y, batch);
        self.backward(&dy);
        Ok(loss)
    }

    fn eval_losses(&self, batch: &[&Sample]) -> Result<Vec<f64>> {
        let preds = self.predict(&batch.iter().map(|s| &s.patch).collect::<Vec<_>>())?;
        preds.iter().zip(batch).map(|(p, s)| mse_loss(p, &s.profile)).collect()
    }
}

/// Result of the epoch loop.
pub struct Fit {
    pub history: TrainHistory,
    /// Weights after the epoch with the lowest validation loss (the last epoch when
    /// there is no validation split).
    pub best: Vec<NamedTensor>,
    pub best_epoch: usize,
}

/// Mean inference-mode loss over `samples`, evaluated in batches of `batch_size`.
pub fn mean_eval_loss<M: Trainable + ?Sized>(model: &M, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(batch_size.max(1)) {
        total += model.eval_losses(chunk)?.iter().sum::<f64>();
    }
    Ok(total / samples.len() as f64)
}

/// Seeded-shuffle mini-batch Adam over `train`, one validation pass per epoch.
///
/// Aborts with `Divergence` as soon as a batch loss is NaN or infinite.
pub fn fit<M: Trainable>(
    model: &mut M,
    train: &[Sample],
    val: &[Sample],
    tc: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Fit> {
    tc.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = Adam::new(tc.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, Vec<NamedTensor>)> = None;
    model.zero_grad();

    for epoch in 1..=tc.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (step, ids) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<&Sample> = ids.iter().map(|&i| &train[i]).collect();
            let loss = model.train_batch(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            opt.step(model);
            sum += loss * batch.len() as f64;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(mean_eval_loss(model, val, tc.batch_size)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: sum / train.len() as f64,
            val_loss,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, state_dict(model)));
            }
        }
        on_epoch(&record);
        history.epochs.push(record);
    }
    let (best_epoch, best) = match best {
        Some((_, e, s)) => (e, s),
        None => (tc.epochs, state_dict(model)),
    };
    Ok(Fit {
        history,
        best,
        best_epoch,
    })
}

/// Dataset-level facts copied into checkpoints.
#[derive(Clone, Debug, Default)]
pub struct RunInfo {
    /// Class names in id order; sample labels index into it.
    pub classes: Vec<String>,
    pub axis: WavelengthAxis,
    pub provenance: Provenance,
}

impl RunInfo {
    pub fn of(index: &DatasetIndex) -> Self {
        Self {
            classes: index.classes.iter().map(|c| c.name.clone()).collect(),
            axis: index.axis,
            provenance: Provenance::default(),
        }
    }
}

pub struct TrainOutcome {
    pub final_ckpt: Checkpoint,
    pub best_ckpt: Checkpoint,
    pub history: TrainHistory,
    /// Inference-mode loss of the final weights on the training split. For a spectral
    /// model this is the MSE that `evaluate` reports on the same split.
    pub final_train_mse: f64,
}

pub(crate) fn check_lengths(samples: &[Sample], n_bins: usize) -> Result<()> {
    match samples.iter().find(|s| s.profile.len() != n_bins) {
        Some(s) => Err(Error::DataError {
            row: s.row,
            message: format!("profile has {} bins, model expects {n_bins}", s.profile.len()),
        }),
        None => Ok(()),
    }
}

pub(crate) fn census(samples: &[Sample], n_classes: usize) -> Vec<usize> {
    let mut c = vec![0; n_classes];
    for s in samples {
        if let Some(slot) = c.get_mut(s.label) {
            *slot += 1;
        }
    }
    c
}

/// Loads both splits and trains a fresh model.
pub fn train(config: &ModelConfig, train: &DatasetIndex, val: &DatasetIndex, tc: &TrainConfig) -> Result<TrainOutcome> {
    let tr = load_samples(train)?;
    let va = if val.is_empty() { Vec::new() } else { load_samples(val)? };
    train_samples(config, tc, &tr, &va, RunInfo::of(train), &mut |_| {})
}

/// Trains a fresh model on in-memory samples.
pub fn train_samples(
    config: &ModelConfig,
    tc: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    info: RunInfo,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    tc.validate()?;
    train_model(RsNet::<f32>::new(config)?, tc, train, val, info, on_epoch)
}

/// Like [`train_samples`] but starts from an existing model, e.g. one whose
/// backbone was initialized from imported weights.
pub fn train_model(
    mut model: RsNet<f32>,
    tc: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    mut info: RunInfo,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    tc.validate()?;
    let config = model.config().clone();
    model.set_axis(info.axis)?;
    check_lengths(train, config.n_bins)?;
    check_lengths(val, config.n_bins)?;
    info.provenance.train_census = census(train, info.classes.len());

    let fit = fit(&mut model, train, val, tc, on_epoch)?;
    outcome(&model, fit, ModelSpec::RsNet { config }, tc, &info, train)
}

/// Packs the final and best weights of a finished run into checkpoints.
pub(crate) fn outcome<M: Trainable>(
    model: &M,
    fit: Fit,
    spec: ModelSpec,
    tc: &TrainConfig,
    info: &RunInfo,
    train: &[Sample],
) -> Result<TrainOutcome> {
    let final_train_mse = mean_eval_loss(model, train, tc.batch_size)?;
    let make = |tensors: Vec<NamedTensor>, epoch: usize, loss: Option<f64>| {
        let mut metrics = BTreeMap::new();
        if let Some(v) = loss {
            metrics.insert("val_loss".to_string(), serde_json::json!(v));
        }
        Checkpoint {
            model: spec.clone(),
            train_config: Some(tc.clone()),
            classes: info.classes.clone(),
            axis: info.axis,
            provenance: Provenance {
                epoch: Some(epoch),
                ..info.provenance.clone()
            },
            metrics,
            tensors,
        }
    };
    let last = fit.history.epochs.last().expect("epochs >= 1");
    let mut final_ckpt = make(state_dict(model), last.epoch, last.val_loss);
    final_ckpt
        .metrics
        .insert("train_loss".to_string(), serde_json::json!(final_train_mse));
    let best_val = fit.history.epochs[fit.best_epoch - 1].val_loss;
    let best_ckpt = make(fit.best, fit.best_epoch, best_val);
    Ok(TrainOutcome {
        final_ckpt,
        best_ckpt,
        history: fit.history,
        final_train_mse,
    })
}

/// Rebuilds the spectral model stored in `ckpt`.
pub fn rsnet_from_checkpoint(ckpt: &Checkpoint) -> Result<RsNet<f32>> {
    let ModelSpec::RsNet { config } = &ckpt.model else {
        return Err(Error::InvalidArgument(
            "checkpoint does not hold a spectral model".into(),
        ));
    };
    let mut model = RsNet::<f32>::new(config)?;
    model.set_axis(ckpt.axis)?;
    load_state(&mut model, &ckpt.tensors)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMse {
    pub class: String,
    pub n_samples: usize,
    pub mse: f64,
    /// No training sample of this class was seen.
    pub unseen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub mse: f64,
    /// Classes of the evaluated split that have at least one sample.
    pub per_class_mse: Vec<ClassMse>,
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub property_rmse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub row: usize,
    pub label: usize,
    pub profile: SpectralProfile,
    pub mse: f64,
    pub property: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<Prediction>,
}

/// Aggregates per-sample predictions. `classes` names the labels of `samples`;
/// `seen` lists classes present in training.
pub fn summarize(samples: &[Sample], predictions: Vec<Prediction>, classes: &[String], seen: &[String]) -> Evaluation {
    let n = predictions.len();
    let mut per: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for p in &predictions {
        let e = per.entry(p.label).or_default();
        e.0 += 1;
        e.1 += p.mse;
    }
    let per_class_mse = per
        .into_iter()
        .map(|(id, (count, sum))| {
            let class = classes.get(id).cloned().unwrap_or_else(|| format!("class{id}"));
            ClassMse {
                unseen: !seen.contains(&class),
                class,
                n_samples: count,
                mse: sum / count as f64,
            }
        })
        .collect();
    let mut sq = 0.0;
    let mut n_prop = 0;
    for (p, s) in predictions.iter().zip(samples) {
        if let (Some(a), Some(b)) = (p.property, s.property) {
            sq += (a - b).powi(2);
            n_prop += 1;
        }
    }
    Evaluation {
        metrics: Metrics {
            mse: predictions.iter().map(|p| p.mse).sum::<f64>() / n.max(1) as f64,
            per_class_mse,
            n_samples: n,
            property_rmse: (n_prop > 0).then(|| (sq / n_prop as f64).sqrt()),
        },
        predictions,
    }
}

/// Inference-mode predictions of `model` for every sample.
pub fn predict_samples(model: &RsNet<f32>, samples: &[Sample], batch_size: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let profiles = model.predict(&chunk.iter().map(|s| &s.patch).collect::<Vec<_>>())?;
        for (profile, s) in profiles.into_iter().zip(chunk) {
            out.push(Prediction {
                row: s.row,
                label: s.label,
                mse: mse_loss(&profile, &s.profile)?,
                profile,
                property: None,
            });
        }
    }
    Ok(out)
}

/// Names of classes with at least one training sample.
pub fn seen_classes(ckpt: &Checkpoint) -> Vec<String> {
    ckpt.classes
        .iter()
        .zip(&ckpt.provenance.train_census)
        .filter(|(_, &n)| n > 0)
        .map(|(c, _)| c.clone())
        .collect()
}

/// Evaluates a spectral or co-learning checkpoint on `split`.
pub fn evaluate(ckpt: &Checkpoint, split: &DatasetIndex) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let samples = load_samples(split)?;
    evaluate_samples(ckpt, &samples, &RunInfo::of(split).classes)
}

pub fn evaluate_samples(ckpt: &Checkpoint, samples: &[Sample], classes: &[String]) -> Result<Evaluation> {
    let batch = ckpt.train_config.as_ref().map_or(16, |t| t.batch_size);
    let predictions = match &ckpt.model {
        ModelSpec::RsNet { config } => {
            check_lengths(samples, config.n_bins)?;
            predict_samples(&rsnet_from_checkpoint(ckpt)?, samples, batch)?
        }
        ModelSpec::CoLearn { config, .. } => {
            check_lengths(samples, config.n_bins)?;
            CoLearnModel::from_checkpoint(ckpt)?.predict_samples(samples, batch)?
        }
        ModelSpec::Classifier { .. } => {
            return Err(Error::InvalidArgument(
                "cannot evaluate a classifier checkpoint as a regressor".into(),
            ))
        }
    };
    Ok(summarize(samples, predictions, classes, &seen_classes(ckpt)))
}

/// Writes each prediction as a spectrum file named after its manifest row.
pub fn write_predictions(dir: &Path, eval: &Evaluation, axis: &WavelengthAxis) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = std::io::BufWriter::new(std::fs::File::create(dir.join("index.csv"))?);
    writeln!(index, "row,label,mse,file")?;
    for p in &eval.predictions {
        let name = format!("pred_{:05}.csv", p.row);
        crate::data::write_spectrum(&dir.join(&name), axis, p.profile.values())?;
        writeln!(index, "{},{},{},{name}", p.row, p.label, p.mse)?;
    }
    index.flush()?;
    Ok(())
}
