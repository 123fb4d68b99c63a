//! Spectral regression head and the assembled RGB → spectrum network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::layers::{Act, Activation, AdaptiveAvgPool2d, Conv2d, Dropout, Layer, Linear, Module, Param, Sequential};
use crate::tensor::{Scalar, Tensor};
use crate::types::{
    patch_batch, ImagePatch, ModelConfig, SpectralProfile, WavelengthAxis, HEAD_CONV1_CHANNELS, HEAD_CONV2_CHANNELS,
};

/// conv1 (fused→64, 3×3) → act → conv2 (64→9, 3×3) → act → adaptive pool to the head
/// grid → flatten → fc1 → act → [dropout] → fc2. The output layer is linear.
pub struct SpectralHead<T> {
    layers: Sequential<T>,
    in_channels: usize,
    n_bins: usize,
}

impl<T: Scalar> SpectralHead<T> {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self::with_activation(config, Activation::Relu, rng)
    }

    /// `Activation::Identity` turns the head into an affine map (wiring probes).
    pub fn with_activation(config: &ModelConfig, activation: Activation, rng: &mut impl Rng) -> Self {
        let (gh, gw) = config.head_pool_grid;
        let dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let layers = Sequential::new()
            .with(Conv2d::new(
                "head.conv1",
                config.fused_channels,
                HEAD_CONV1_CHANNELS,
                3,
                1,
                1,
                true,
                rng,
            ))
            .with(Act::new(activation))
            .with(Conv2d::new(
                "head.conv2",
                HEAD_CONV1_CHANNELS,
                HEAD_CONV2_CHANNELS,
                3,
                1,
                1,
                true,
                rng,
            ))
            .with(Act::new(activation))
            .with(AdaptiveAvgPool2d::new(gh, gw))
            .with(Linear::new("head.fc1", config.flatten_width(), config.n_bins, rng))
            .with(Act::new(activation))
            .with(Dropout::new(config.head_dropout, dropout_rng))
            .with(Linear::new("head.fc2", config.n_bins, config.n_bins, rng));
        Self {
            layers,
            in_channels: config.fused_channels,
            n_bins: config.n_bins,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels,
                found: x.channels(),
            });
        }
        Ok(())
    }

    /// `[n, fused, h, w]` → `[n, n_bins, 1, 1]`.
    pub fn forward(&self, x_f: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x_f)?;
        Ok(self.layers.forward(x_f))
    }

    pub fn forward_train(&mut self, x_f: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x_f)?;
        Ok(self.layers.forward_train(x_f))
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        self.layers.backward(dy)
    }
}

impl<T: Scalar> Module<T> for SpectralHead<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.layers.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.visit_mut(f)
    }
}

/// Backbone plus spectral head.
pub struct RsNet<T> {
    config: ModelConfig,
    axis: WavelengthAxis,
    backbone: Backbone<T>,
    head: SpectralHead<T>,
}

impl<T: Scalar> RsNet<T> {
    /// Randomly initialised model; initialisation is a pure function of `config.seed`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = Backbone::new(config, &mut rng)?;
        let head = SpectralHead::new(config, &mut rng);
        let axis = WavelengthAxis {
            n_bins: config.n_bins,
            ..WavelengthAxis::default()
        };
        Ok(Self {
            config: config.clone(),
            axis,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn axis(&self) -> &WavelengthAxis {
        &self.axis
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

    pub fn backbone(&self) -> &Backbone<T> {
        &self.backbone
    }

    pub fn head(&self) -> &SpectralHead<T> {
        &self.head
    }

    /// Inference-mode forward over a `[n, 3, H, W]` batch; returns `[n, n_bins, 1, 1]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let fused = self.backbone.forward(x)?;
        self.head.forward(&fused)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let fused = self.backbone.forward_train(x)?;
        self.head.forward_train(&fused)
    }

    pub fn backward(&mut self, d_out: &Tensor<T>) {
        let d_fused = self.head.backward(d_out);
        self.backbone.backward(&d_fused);
    }

    /// Predicted profile for each patch, in order.
    pub fn predict(&self, patches: &[&ImagePatch]) -> Result<Vec<SpectralProfile>> {
        let x = patch_batch::<T>(patches)?;
        let y = self.forward(&x)?;
        (0..y.batch())
            .map(|i| {
                let v = y.sample(i).iter().map(|v| v.as_f64() as f32).collect();
                SpectralProfile::new(v, self.axis)
            })
            .collect()
    }

    pub fn param_manifest(&self) -> ParamManifest {
        ParamManifest::of(self)
    }
}

impl<T: Scalar> Module<T> for RsNet<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.backbone.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.backbone.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Single-patch inference.
pub fn rsnet_forward<T: Scalar>(patch: &ImagePatch, model: &RsNet<T>) -> Result<SpectralProfile> {
    Ok(model.predict(&[patch])?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerEntry {
    /// Layer path, e.g. `head.fc1`.
    pub name: String,
    /// Shape of the layer's weight (its first learnable tensor).
    pub shape: Vec<usize>,
    /// Learnable elements including bias.
    pub count: usize,
    pub tensors: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamManifest {
    pub layers: Vec<LayerEntry>,
    pub total: usize,
}

impl ParamManifest {
    pub fn of<T: Scalar>(model: &(impl Module<T> + ?Sized)) -> Self {
        let mut layers: Vec<LayerEntry> = Vec::new();
        model.visit(&mut |p| {
            if !p.trainable {
                return;
            }
            let layer = p.name.rsplit_once('.').map_or(p.name.as_str(), |(l, _)| l);
            match layers.last_mut() {
                Some(e) if e.name == layer => {
                    e.count += p.len();
                    e.tensors.push((p.name.clone(), p.shape.clone()));
                }
                _ => layers.push(LayerEntry {
                    name: layer.to_string(),
                    shape: p.shape.clone(),
                    count: p.len(),
                    tensors: vec![(p.name.clone(), p.shape.clone())],
                }),
            }
        });
        let total = layers.iter().map(|l| l.count).sum();
        Self { layers, total }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerEntry> {
        self.layers.iter().find(|l| l.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn head_emits_n_bins_for_any_fused_size() {
        let config = ModelConfig::default();
        let head = SpectralHead::<f32>::new(&config, &mut ChaCha8Rng::seed_from_u64(1));
        let y = head.forward(&Tensor::zeros([1, 160, 12, 18])).unwrap();
        assert_eq!(y.shape(), [1, 1550, 1, 1]);
        let y = head.forward(&Tensor::zeros([2, 160, 28, 28])).unwrap();
        assert_eq!(y.shape(), [2, 1550, 1, 1]);
        assert!(matches!(
            head.forward(&Tensor::zeros([1, 64, 12, 18])),
            Err(Error::ChannelMismatch {
                expected: 160,
                found: 64
            })
        ));
    }

    #[test]
    fn manifest_reports_layer_sizes() {
        let model = RsNet::<f32>::new(&ModelConfig::default()).unwrap();
        let m = model.param_manifest();
        let fc1 = m.layer("head.fc1").unwrap();
        assert_eq!((fc1.shape.clone(), fc1.count), (vec![1550, 1944], 3_014_750));
        let fc2 = m.layer("head.fc2").unwrap();
        assert_eq!((fc2.shape.clone(), fc2.count), (vec![1550, 1550], 2_404_050));
        let conv2 = m.layer("head.conv2").unwrap();
        assert_eq!((conv2.shape.clone(), conv2.count), (vec![9, 64, 3, 3], 5_193));
        assert_eq!(m.layer("head.conv1").unwrap().shape, vec![64, 160, 3, 3]);
        assert_eq!(m.total, model.num_trainable());
    }

    #[test]
    fn identity_head_is_affine() {
        let config = ModelConfig {
            fused_channels: 12,
            head_pool_grid: (3, 4),
            n_bins: 20,
            ..ModelConfig::default()
        };
        let head =
            SpectralHead::<f64>::with_activation(&config, Activation::Identity, &mut ChaCha8Rng::seed_from_u64(5));
        let a = uniform([1, 12, 5, 7], 1);
        let b = uniform([1, 12, 5, 7], 2);
        let mut ab = a.clone();
        ab.add_assign(&b);
        let f = |x: &Tensor<f64>| head.forward(x).unwrap();
        let (fab, fa, fb, f0) = (f(&ab), f(&a), f(&b), f(&Tensor::zeros([1, 12, 5, 7])));
        for i in 0..20 {
            let r = fab.data()[i] - fa.data()[i] - fb.data()[i] + f0.data()[i];
            assert!(r.abs() < 1e-4, "bin {i}: {r}");
        }
    }

    #[test]
    fn forward_is_deterministic_and_seeded() {
        let config = ModelConfig {
            seed: 9,
            ..ModelConfig::default()
        };
        let a = RsNet::<f32>::new(&config).unwrap();
        let b = RsNet::<f32>::new(&config).unwrap();
        let x = uniform([1, 3, 32, 48], 3).cast::<f32>();
        let ya = a.forward(&x).unwrap();
        assert_eq!(ya, a.forward(&x).unwrap());
        assert_eq!(ya, b.forward(&x).unwrap());
        assert!(ya.is_finite());
    }
}
