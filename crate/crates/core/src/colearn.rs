//! Shared backbone with two heads: the spectral head and a scalar terrain-property head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::checkpoint::{load_state, Checkpoint, ModelSpec};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::head::SpectralHead;
use crate::layers::{Act, AdaptiveAvgPool2d, Conv2d, Layer, Linear, Module, Param, Sequential};
use crate::tensor::Tensor;
use crate::training::{
    census, check_lengths, fit, mse, mse_loss, mse_with_grad, outcome, EpochRecord, Prediction, RunInfo, TrainConfig,
    TrainOutcome, Trainable,
};
use crate::types::{patch_batch, ImagePatch, ModelConfig, SpectralProfile, WavelengthAxis};

pub const PROPERTY_CONV_CHANNELS: usize = 32;
pub const PROPERTY_HIDDEN: usize = 64;

/// conv (fused→32, 3×3) → relu → adaptive pool to the head grid → fc (→64) → relu → fc (→1).
pub struct PropertyHead {
    layers: Sequential<f32>,
    in_channels: usize,
}

impl PropertyHead {
    pub fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (gh, gw) = config.head_pool_grid;
        let c = PROPERTY_CONV_CHANNELS;
        let layers = Sequential::new()
            .with(Conv2d::new(
                "property.conv",
                config.fused_channels,
                c,
                3,
                1,
                1,
                true,
                rng,
            ))
            .with(Act::relu())
            .with(AdaptiveAvgPool2d::new(gh, gw))
            .with(Linear::new("property.fc1", c * gh * gw, PROPERTY_HIDDEN, rng))
            .with(Act::relu())
            .with(Linear::new("property.fc2", PROPERTY_HIDDEN, 1, rng));
        Self {
            layers,
            in_channels: config.fused_channels,
        }
    }

    fn check(&self, x: &Tensor<f32>) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels,
                found: x.channels(),
            });
        }
        Ok(())
    }
}

impl Module<f32> for PropertyHead {
    fn visit(&self, f: &mut dyn FnMut(&Param<f32>)) {
        self.layers.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
        self.layers.visit_mut(f)
    }
}

/// Which head a fused map is being handed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Spectral,
    Property,
}

pub struct CoLearnModel {
    config: ModelConfig,
    lambda: f64,
    axis: WavelengthAxis,
    backbone: Backbone<f32>,
    spectral: SpectralHead<f32>,
    property: PropertyHead,
}

impl CoLearnModel {
    /// Initialisation draws the backbone, then the spectral head, then the property
    /// head from one generator seeded by `config.seed`; the first two therefore match
    /// a plain spectral model with the same seed.
    pub fn new(config: &ModelConfig, lambda: f64) -> Result<Self> {
        config.validate()?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = Backbone::new(config, &mut rng)?;
        let spectral = SpectralHead::new(config, &mut rng);
        let property = PropertyHead::new(config, &mut rng);
        Ok(Self {
            config: config.clone(),
            lambda,
            axis: WavelengthAxis {
                n_bins: config.n_bins,
                ..WavelengthAxis::default()
            },
            backbone,
            spectral,
            property,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let ModelSpec::CoLearn { config, lambda } = &ckpt.model else {
            return Err(Error::InvalidArgument(
                "checkpoint does not hold a co-learning model".into(),
            ));
        };
        let mut m = Self::new(config, *lambda)?;
        m.set_axis(ckpt.axis)?;
        load_state(&mut m, &ckpt.tensors)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_axis(&mut self, axis: WavelengthAxis) -> Result<()> {
        if axis.n_bins != self.config.n_bins {
            return Err(Error::LengthMismatch {
                expected: self.config.n_bins,
                found: axis.n_bins,
            });
        }
        self.axis = axis;
        Ok(())
    }

    /// Inference forward. `observe` sees the fused map exactly as each head receives it.
    pub fn forward_observed(
        &self,
        x: &Tensor<f32>,
        observe: &mut dyn FnMut(HeadKind, &Tensor<f32>),
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let fused = self.backbone.forward(x)?;
        self.spectral_and_property(&fused, observe)
    }

    fn spectral_and_property(
        &self,
        fused: &Tensor<f32>,
        observe: &mut dyn FnMut(HeadKind, &Tensor<f32>),
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        observe(HeadKind::Spectral, fused);
        let y = self.spectral.forward(fused)?;
        self.property.check(fused)?;
        observe(HeadKind::Property, fused);
        let p = self.property.layers.forward(fused);
        Ok((y, p))
    }

    /// `[n, 3, H, W]` → (`[n, n_bins, 1, 1]`, `[n, 1, 1, 1]`).
    pub fn forward(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.forward_observed(x, &mut |_, _| {})
    }

    pub fn predict(&self, patches: &[&ImagePatch]) -> Result<Vec<(SpectralProfile, f64)>> {
        let (y, p) = self.forward(&patch_batch(patches)?)?;
        (0..y.batch())
            .map(|i| {
                Ok((
                    SpectralProfile::new(y.sample(i).to_vec(), self.axis)?,
                    p.sample(i)[0] as f64,
                ))
            })
            .collect()
    }

    pub fn predict_samples(&self, samples: &[Sample], batch_size: usize) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch_size.max(1)) {
            let preds = self.predict(&chunk.iter().map(|s| &s.patch).collect::<Vec<_>>())?;
            for ((profile, property), s) in preds.into_iter().zip(chunk) {
                out.push(Prediction {
                    row: s.row,
                    label: s.label,
                    mse: mse_loss(&profile, &s.profile)?,
                    profile,
                    property: Some(property),
                });
            }
        }
        Ok(out)
    }
}

impl Module<f32> for CoLearnModel {
    fn visit(&self, f: &mut dyn FnMut(&Param<f32>)) {
        self.backbone.visit(f);
        self.spectral.visit(f);
        self.property.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
        self.backbone.visit_mut(f);
        self.spectral.visit_mut(f);
        self.property.visit_mut(f);
    }
}

fn property_target(s: &Sample) -> Result<f64> {
    s.property.ok_or_else(|| Error::MissingProperty(vec![s.row]))
}

impl Trainable for CoLearnModel {
    fn train_batch(&mut self, batch: &[&Sample]) -> Result<f64> {
        let x = patch_batch::<f32>(&batch.iter().map(|s| &s.patch).collect::<Vec<_>>())?;
        let fused = self.backbone.forward_train(&x)?;
        let y = self.spectral.forward_train(&fused)?;
        self.property.check(&fused)?;
        let p = self.property.layers.forward_train(&fused);

        let (spec_loss, dy) = mse_with_grad(&y, batch);
        let n = batch.len() as f64;
        let mut dp = Tensor::zeros(p.shape());
        let mut prop_loss = 0.0;
        for (i, s) in batch.iter().enumerate() {
            let e = p.sample(i)[0] as f64 - property_target(s)?;
            prop_loss += e * e / n;
            dp.sample_mut(i)[0] = (2.0 * self.lambda * e / n) as f32;
        }

        let mut d_fused = self.spectral.backward(&dy);
        d_fused.add_assign(&self.property.layers.backward(&dp));
        self.backbone.backward(&d_fused);
        Ok(spec_loss + self.lambda * prop_loss)
    }

    fn eval_losses(&self, batch: &[&Sample]) -> Result<Vec<f64>> {
        let x = patch_batch::<f32>(&batch.iter().map(|s| &s.patch).collect::<Vec<_>>())?;
        let (y, p) = self.forward(&x)?;
        batch
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let spec = mse(y.sample(i), s.profile.values())?;
                Ok(spec + self.lambda * (p.sample(i)[0] as f64 - property_target(s)?).powi(2))
            })
            .collect()
    }
}

/// `mse(spectral) + lambda · (property error)²`.
pub fn joint_loss(pred: (&SpectralProfile, f64), target: (&SpectralProfile, f64), lambda: f64) -> Result<f64> {
    Ok(mse_loss(pred.0, target.0)? + lambda * (pred.1 - target.1).powi(2))
}

/// Trains a fresh two-headed model; every sample needs a property value.
pub fn train_colearn(
    config: &ModelConfig,
    lambda: f64,
    tc: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    mut info: RunInfo,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    tc.validate()?;
    let missing: Vec<usize> = train
        .iter()
        .chain(val)
        .filter(|s| s.property.is_none())
        .map(|s| s.row)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingProperty(missing));
    }
    let mut model = CoLearnModel::new(config, lambda)?;
    model.set_axis(info.axis)?;
    check_lengths(train, config.n_bins)?;
    check_lengths(val, config.n_bins)?;
    info.provenance.train_census = census(train, info.classes.len());
    let fit = fit(&mut model, train, val, tc, on_epoch)?;
    let spec = ModelSpec::CoLearn {
        config: config.clone(),
        lambda,
    };
    outcome(&model, fit, spec, tc, &info, train)
}
