//! Dense-block feature extractor: stem, dense block 1, transition, dense block 2, and
//! the fused representation `x_8 ⊕ x_21`.
//!
//! Tensor names follow the usual DenseNet state-dict layout (`features.conv0.weight`,
//! `features.denseblock1.denselayer1.norm1.weight`, ...), so that reference weights
//! converted to the checkpoint format load into `pretrained-projected` models directly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Act, BatchNorm2d, Conv2d, Layer, Module, Param, Pool2d, PoolKind, Sequential};
use crate::tensor::{Scalar, Tensor};
use crate::types::{BackboneMode, ModelConfig, BOTTLENECK_FACTOR, MIN_PATCH_SIDE};

/// `7×7/2` convolution, normalization, rectification and `3×3/2` max pooling.
pub struct Stem<T> {
    layers: Sequential<T>,
    channels: usize,
}

impl<T: Scalar> Stem<T> {
    pub fn new(prefix: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let layers = Sequential::new()
            .with(Conv2d::new(
                &format!("{prefix}.conv0"),
                3,
                channels,
                7,
                2,
                3,
                false,
                rng,
            ))
            .with(BatchNorm2d::new(&format!("{prefix}.norm0"), channels))
            .with(Act::relu())
            .with(Pool2d::new(PoolKind::Max, 3, 2, 1));
        Self { layers, channels }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn check(x: &Tensor<T>) -> Result<()> {
        let (h, w) = x.spatial();
        if h < MIN_PATCH_SIDE || w < MIN_PATCH_SIDE {
            return Err(Error::TooSmallInput { height: h, width: w });
        }
        if x.channels() != 3 {
            return Err(Error::ChannelMismatch {
                expected: 3,
                found: x.channels(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Self::check(x)?;
        Ok(self.layers.forward(x))
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Self::check(x)?;
        Ok(self.layers.forward_train(x))
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        self.layers.backward(dy)
    }
}

impl<T: Scalar> Module<T> for Stem<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.layers.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.visit_mut(f)
    }
}

/// One dense layer: produces `growth` new channels and appends them to its input.
pub struct DenseLayer<T> {
    layers: Sequential<T>,
    in_channels: usize,
    growth: usize,
}

impl<T: Scalar> DenseLayer<T> {
    /// Normalize → rectify → `3×3` conv (with bias).
    pub fn compact(prefix: &str, in_channels: usize, growth: usize, rng: &mut impl Rng) -> Self {
        let layers = Sequential::new()
            .with(BatchNorm2d::new(&format!("{prefix}.norm"), in_channels))
            .with(Act::relu())
            .with(Conv2d::new(
                &format!("{prefix}.conv"),
                in_channels,
                growth,
                3,
                1,
                1,
                true,
                rng,
            ));
        Self {
            layers,
            in_channels,
            growth,
        }
    }

    /// Reference bottleneck layer: norm → rectify → `1×1` conv to `4·growth` → norm →
    /// rectify → `3×3` conv, both without bias.
    pub fn bottleneck(prefix: &str, in_channels: usize, growth: usize, rng: &mut impl Rng) -> Self {
        let inner = BOTTLENECK_FACTOR * growth;
        let layers = Sequential::new()
            .with(BatchNorm2d::new(&format!("{prefix}.norm1"), in_channels))
            .with(Act::relu())
            .with(Conv2d::new(
                &format!("{prefix}.conv1"),
                in_channels,
                inner,
                1,
                1,
                0,
                false,
                rng,
            ))
            .with(BatchNorm2d::new(&format!("{prefix}.norm2"), inner))
            .with(Act::relu())
            .with(Conv2d::new(
                &format!("{prefix}.conv2"),
                inner,
                growth,
                3,
                1,
                1,
                false,
                rng,
            ));
        Self {
            layers,
            in_channels,
            growth,
        }
    }

    pub fn growth(&self) -> usize {
        self.growth
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Only the `growth` new channels.
    pub fn new_features(&self, x: &Tensor<T>) -> Tensor<T> {
        self.layers.forward(x)
    }

    pub fn new_features_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.layers.forward_train(x)
    }

    /// Gradient w.r.t. the layer input from the gradient of its new channels only.
    pub fn backward_new(&mut self, d_new: &Tensor<T>) -> Tensor<T> {
        self.layers.backward(d_new)
    }

    /// `concat(x, new_features(x))`.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        Tensor::concat_channels(x, &self.new_features(x))
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let new = self.new_features_train(x);
        Tensor::concat_channels(x, &new)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (mut d_prefix, d_new) = dy.split_channels(self.in_channels);
        d_prefix.add_assign(&self.backward_new(&d_new));
        d_prefix
    }
}

impl<T: Scalar> Module<T> for DenseLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.layers.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.visit_mut(f)
    }
}

pub struct DenseBlock<T> {
    layers: Vec<DenseLayer<T>>,
    in_channels: usize,
}

impl<T: Scalar> DenseBlock<T> {
    pub fn new(
        prefix: &str,
        mode: BackboneMode,
        in_channels: usize,
        n_layers: usize,
        growth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::InvalidArgument("dense block needs at least one layer".into()));
        }
        let layers = (0..n_layers)
            .map(|i| {
                let name = format!("{prefix}.denselayer{}", i + 1);
                let c = in_channels + i * growth;
                match mode {
                    BackboneMode::Compact => DenseLayer::compact(&name, c, growth, rng),
                    BackboneMode::PretrainedProjected => DenseLayer::bottleneck(&name, c, growth, rng),
                }
            })
            .collect();
        Ok(Self { layers, in_channels })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.iter().map(|l| l.growth).sum::<usize>()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h);
        }
        h
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward_train(&h);
        }
        h
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = dy.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }
}

impl<T: Scalar> Module<T> for DenseBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for l in &self.layers {
            l.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

/// Normalize → rectify → `1×1` channel compression → `2×2` pooling.
pub struct Transition<T> {
    layers: Sequential<T>,
    out_channels: usize,
}

impl<T: Scalar> Transition<T> {
    pub fn new(
        prefix: &str,
        in_channels: usize,
        compression: f64,
        pool: PoolKind,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let out_channels = (compression * in_channels as f64).floor() as usize;
        if out_channels < 1 || compression > 1.0 {
            return Err(Error::DegenerateChannels {
                channels: in_channels,
                compression,
            });
        }
        let layers = Sequential::new()
            .with(BatchNorm2d::new(&format!("{prefix}.norm"), in_channels))
            .with(Act::relu())
            .with(Conv2d::new(
                &format!("{prefix}.conv"),
                in_channels,
                out_channels,
                1,
                1,
                0,
                bias,
                rng,
            ))
            .with(Pool2d::new(pool, 2, 2, 0));
        Ok(Self { layers, out_channels })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.layers.forward(x)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.layers.forward_train(x)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        self.layers.backward(dy)
    }
}

impl<T: Scalar> Module<T> for Transition<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.layers.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.visit_mut(f)
    }
}

/// Channel concatenation `x8 ⊕ x21`, x8 first.
pub fn fuse<T: Scalar>(x8: &Tensor<T>, x21: &Tensor<T>) -> Result<Tensor<T>> {
    if x8.spatial() != x21.spatial() {
        return Err(Error::SpatialMismatch {
            left: x8.spatial(),
            right: x21.spatial(),
        });
    }
    if x8.batch() != x21.batch() {
        return Err(Error::InvalidArgument(format!(
            "batch mismatch: {} vs {}",
            x8.batch(),
            x21.batch()
        )));
    }
    Ok(Tensor::concat_channels(x8, x21))
}

pub struct Backbone<T> {
    stem: Stem<T>,
    block1: DenseBlock<T>,
    transition: Transition<T>,
    block2: DenseBlock<T>,
    projection: Option<Conv2d<T>>,
    x8_channels: usize,
    fused_channels: usize,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let p = "features";
        let mode = config.backbone_mode;
        let stem = Stem::new(p, config.stem_channels, rng);
        let block1 = DenseBlock::new(
            &format!("{p}.denseblock1"),
            mode,
            config.stem_channels,
            config.block1_layers,
            config.growth_rate,
            rng,
        )?;
        let transition = Transition::new(
            &format!("{p}.transition1"),
            block1.out_channels(),
            config.compression,
            config.transition_pool,
            mode == BackboneMode::Compact,
            rng,
        )?;
        let block2 = DenseBlock::new(
            &format!("{p}.denseblock2"),
            mode,
            transition.out_channels(),
            config.block2_layers,
            config.growth_rate,
            rng,
        )?;
        let native = transition.out_channels() + block2.out_channels();
        let projection = match mode {
            BackboneMode::Compact => None,
            BackboneMode::PretrainedProjected => Some(Conv2d::new(
                &format!("{p}.projection"),
                native,
                config.fused_channels,
                1,
                1,
                0,
                true,
                rng,
            )),
        };
        let fused_channels = projection.as_ref().map_or(native, |c| c.out_channels());
        debug_assert_eq!(fused_channels, config.fused_channels);
        Ok(Self {
            x8_channels: transition.out_channels(),
            stem,
            block1,
            transition,
            block2,
            projection,
            fused_channels,
        })
    }

    pub fn fused_channels(&self) -> usize {
        self.fused_channels
    }

    /// Output spatial size for an `h×w` input.
    pub fn output_hw(h: usize, w: usize) -> (usize, usize) {
        let conv = |n: usize| (n - 1) / 2 + 1;
        let pool = |n: usize| (n - 1) / 2 + 1;
        (pool(conv(h)) / 2, pool(conv(w)) / 2)
    }

    pub fn stem(&self) -> &Stem<T> {
        &self.stem
    }

    pub fn block1(&self) -> &DenseBlock<T> {
        &self.block1
    }

    pub fn transition(&self) -> &Transition<T> {
        &self.transition
    }

    pub fn block2(&self) -> &DenseBlock<T> {
        &self.block2
    }

    /// Returns `(x_8, x_21)` without fusing.
    pub fn features(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let x1 = self.stem.forward(x)?;
        let x7 = self.block1.forward(&x1);
        let x8 = self.transition.forward(&x7);
        let x21 = self.block2.forward(&x8);
        Ok((x8, x21))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (x8, x21) = self.features(x)?;
        let fused = fuse(&x8, &x21)?;
        Ok(match &self.projection {
            Some(p) => p.forward(&fused),
            None => fused,
        })
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x1 = self.stem.forward_train(x)?;
        let x7 = self.block1.forward_train(&x1);
        let x8 = self.transition.forward_train(&x7);
        let x21 = self.block2.forward_train(&x8);
        let fused = fuse(&x8, &x21)?;
        Ok(match &mut self.projection {
            Some(p) => p.forward_train(&fused),
            None => fused,
        })
    }

    /// Backpropagates the gradient of the fused map. Input gradients are discarded.
    pub fn backward(&mut self, d_fused: &Tensor<T>) {
        let d_cat = match &mut self.projection {
            Some(p) => p.backward(d_fused),
            None => d_fused.clone(),
        };
        let (mut d_x8, d_x21) = d_cat.split_channels(self.x8_channels);
        d_x8.add_assign(&self.block2.backward(&d_x21));
        let d_x7 = self.transition.backward(&d_x8);
        let d_x1 = self.block1.backward(&d_x7);
        self.stem.backward(&d_x1);
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stem.visit(f);
        self.block1.visit(f);
        self.transition.visit(f);
        self.block2.visit(f);
        if let Some(p) = &self.projection {
            p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_mut(f);
        self.block1.visit_mut(f);
        self.transition.visit_mut(f);
        self.block2.visit_mut(f);
        if let Some(p) = &mut self.projection {
            p.visit_mut(f);
        }
    }
}
