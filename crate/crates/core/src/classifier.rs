//! Fully connected material classifier on spectral profiles and the
//! confusion-matrix metrics used to score it.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_state, state_dict, Checkpoint, ModelSpec, Provenance};
use crate::error::{Error, Result};
use crate::layers::{Act, Layer, Linear, Module, Param, Sequential};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::types::{SpectralProfile, WavelengthAxis};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub n_bins: usize,
    pub n_classes: usize,
    /// Widths of the three hidden layers.
    pub hidden: [usize; 3],
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            n_bins: 1550,
            n_classes: 6,
            hidden: [512, 128, 32],
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Four affine layers with ReLU between them; outputs unnormalized class scores.
pub struct Classifier {
    config: ClassifierConfig,
    layers: Sequential<f32>,
}

impl Classifier {
    pub fn new(config: &ClassifierConfig) -> Result<Self> {
        if config.n_bins == 0 || config.n_classes == 0 || config.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "classifier widths must be positive: {config:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let [h1, h2, h3] = config.hidden;
        let layers = Sequential::new()
            .with(Linear::new("fc1", config.n_bins, h1, &mut rng))
            .with(Act::relu())
            .with(Linear::new("fc2", h1, h2, &mut rng))
            .with(Act::relu())
            .with(Linear::new("fc3", h2, h3, &mut rng))
            .with(Act::relu())
            .with(Linear::new("fc4", h3, config.n_classes, &mut rng));
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    fn batch(&self, profiles: &[&[f32]]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(profiles.len() * self.config.n_bins);
        for p in profiles {
            if p.len() != self.config.n_bins {
                return Err(Error::LengthMismatch {
                    expected: self.config.n_bins,
                    found: p.len(),
                });
            }
            data.extend_from_slice(p);
        }
        Ok(Tensor::from_vec([profiles.len(), self.config.n_bins, 1, 1], data))
    }

    /// Scores for each profile, `n_classes` per row.
    pub fn scores(&self, profiles: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        let y = self.layers.forward(&self.batch(profiles)?);
        Ok((0..y.batch()).map(|i| y.sample(i).to_vec()).collect())
    }

    pub fn predict(&self, profiles: &[&[f32]]) -> Result<Vec<usize>> {
        Ok(self.scores(profiles)?.iter().map(|s| argmax(s)).collect())
    }

    pub fn to_checkpoint(&self, classes: &[String], axis: WavelengthAxis) -> Checkpoint {
        Checkpoint {
            model: ModelSpec::Classifier {
                config: self.config.clone(),
            },
            train_config: None,
            classes: classes.to_vec(),
            axis,
            provenance: Provenance::default(),
            metrics: Default::default(),
            tensors: state_dict(self),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let ModelSpec::Classifier { config } = &ckpt.model else {
            return Err(Error::InvalidArgument("checkpoint does not hold a classifier".into()));
        };
        let mut c = Self::new(config)?;
        load_state(&mut c, &ckpt.tensors)?;
        Ok(c)
    }
}

impl Module<f32> for Classifier {
    fn visit(&self, f: &mut dyn FnMut(&Param<f32>)) {
        self.layers.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
        self.layers.visit_mut(f)
    }
}

/// Index of the largest score; the first one on ties.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn classifier_forward(profile: &SpectralProfile, params: &Classifier) -> Result<Vec<f32>> {
    Ok(params.scores(&[profile.values()])?.remove(0))
}

/// Softmax cross-entropy averaged over the batch, and its gradient.
fn cross_entropy(scores: &Tensor<f32>, labels: &[usize]) -> (f64, Tensor<f32>) {
    let n = labels.len();
    let mut grad = Tensor::zeros(scores.shape());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let s = scores.sample(i);
        let max = s.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = s.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (s[y] as f64 - max);
        for (k, g) in grad.sample_mut(i).iter_mut().enumerate() {
            let p = exps[k] / z;
            *g = ((p - f64::from(u8::from(k == y))) / n as f64) as f32;
        }
    }
    (loss / n as f64, grad)
}

/// Trains a fresh classifier with Adam on cross-entropy.
pub fn train_classifier(profiles: &[&[f32]], labels: &[usize], config: &ClassifierConfig) -> Result<Classifier> {
    if profiles.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: profiles.len(),
            found: labels.len(),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= config.n_classes) {
        return Err(Error::LabelOutOfRange {
            label: l,
            classes: config.n_classes,
        });
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::SingleClass(present.first().copied().unwrap_or(0)));
    }
    if config.epochs == 0
        || config.batch_size == 0
        || config.learning_rate.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
    {
        return Err(Error::InvalidArgument(
            "classifier epochs, batch_size and learning_rate must be positive".into(),
        ));
    }

    let mut model = Classifier::new(config)?;
    let mut opt = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for (step, ids) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&[f32]> = ids.iter().map(|&i| profiles[i]).collect();
            let y: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
            let scores = model.layers.forward_train(&model.batch(&batch)?);
            let (loss, grad) = cross_entropy(&scores, &y);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            model.layers.backward(&grad);
            opt.step(&mut model);
        }
    }
    Ok(model)
}

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn write_csv(&self, path: &Path, names: &[String]) -> Result<()> {
        if names.len() != self.n_classes() {
            return Err(Error::LengthMismatch {
                expected: self.n_classes(),
                found: names.len(),
            });
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(std::iter::once("true\\pred").chain(names.iter().map(String::as_str)))?;
        for (name, row) in names.iter().zip(&self.counts) {
            w.write_record(std::iter::once(name.clone()).chain(row.iter().map(u64::to_string)))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn confusion_matrix(pred: &[usize], truth: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            found: pred.len(),
        });
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        for l in [p, t] {
            if l >= k {
                return Err(Error::LabelOutOfRange { label: l, classes: k });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    /// Recall: diagonal over row sum, 0 for an empty row.
    pub per_class_accuracy: Vec<f64>,
    pub per_class_precision: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    /// Mean F1 over classes that occur as a true or predicted label.
    pub macro_f1: f64,
    /// Same as `macro_f1`.
    pub overall_f: f64,
    pub accuracy: f64,
}

pub fn metrics_from_matrix(cm: &ConfusionMatrix) -> Result<ClassificationMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    let k = cm.n_classes();
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut recall = Vec::with_capacity(k);
    let mut precision = Vec::with_capacity(k);
    let mut f1 = Vec::with_capacity(k);
    let mut present = Vec::new();
    for c in 0..k {
        let tp = cm.counts[c][c];
        let row: u64 = cm.counts[c].iter().sum();
        let col: u64 = cm.counts.iter().map(|r| r[c]).sum();
        let (p, r) = (ratio(tp, col), ratio(tp, row));
        recall.push(r);
        precision.push(p);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        f1.push(f);
        if row + col > 0 {
            present.push(f);
        }
    }
    let macro_f1 = present.iter().sum::<f64>() / present.len() as f64;
    let diag: u64 = (0..k).map(|c| cm.counts[c][c]).sum();
    Ok(ClassificationMetrics {
        per_class_accuracy: recall,
        per_class_precision: precision,
        per_class_f1: f1,
        macro_f1,
        overall_f: macro_f1,
        accuracy: diag as f64 / total as f64,
    })
}
