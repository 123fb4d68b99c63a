//! Domain types and model configuration shared across the crate.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::PoolKind;
use crate::tensor::{Scalar, Tensor};

/// Output channels of the first head convolution.
pub const HEAD_CONV1_CHANNELS: usize = 64;
/// Output channels of the second head convolution; fixes the flatten width at `9·h·w`.
pub const HEAD_CONV2_CHANNELS: usize = 9;
/// Bottleneck multiplier of reference dense layers (`1×1` conv to `4·growth`).
pub const BOTTLENECK_FACTOR: usize = 4;
/// Smallest accepted patch side: the backbone downsamples three times.
pub const MIN_PATCH_SIDE: usize = 32;

/// Linear wavelength grid. Metadata only; the network never looks at it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WavelengthAxis {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub n_bins: usize,
}

impl Default for WavelengthAxis {
    /// 350–1000 nm over 1550 bins: a typical VIS–NIR spectrometer span, used as a
    /// placeholder because the source dataset's axis is not published.
    fn default() -> Self {
        Self {
            lambda_min: 350.0,
            lambda_max: 1000.0,
            n_bins: 1550,
        }
    }
}

impl WavelengthAxis {
    pub fn new(lambda_min: f64, lambda_max: f64, n_bins: usize) -> Result<Self> {
        let mut bad = Vec::new();
        if !(lambda_min.is_finite() && lambda_max.is_finite()) || lambda_min >= lambda_max {
            bad.push(format!("lambda_min ({lambda_min}) < lambda_max ({lambda_max})"));
        }
        if n_bins < 2 {
            bad.push(format!("n_bins ({n_bins}) >= 2"));
        }
        if bad.is_empty() {
            Ok(Self {
                lambda_min,
                lambda_max,
                n_bins,
            })
        } else {
            Err(Error::ConstraintViolation(bad))
        }
    }

    pub fn spacing(&self) -> f64 {
        (self.lambda_max - self.lambda_min) / (self.n_bins - 1) as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lambda_min + i as f64 * self.spacing()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_bins).map(|i| self.center(i)).collect()
    }
}

/// Normalized photon counts over a wavelength axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralProfile {
    values: Vec<f32>,
    axis: WavelengthAxis,
}

impl SpectralProfile {
    /// Any finite vector matching the axis; predictions are unconstrained.
    pub fn new(values: Vec<f32>, axis: WavelengthAxis) -> Result<Self> {
        if values.len() != axis.n_bins {
            return Err(Error::LengthMismatch {
                expected: axis.n_bins,
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite profile value at bin {i}")));
        }
        Ok(Self { values, axis })
    }

    /// Ground truth must additionally lie in `[0, 1]`.
    pub fn ground_truth(values: Vec<f32>, axis: WavelengthAxis) -> Result<Self> {
        let p = Self::new(values, axis)?;
        if let Some(i) = p.values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "ground-truth value {} at bin {i} outside [0, 1]",
                p.values[i]
            )));
        }
        Ok(p)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn axis(&self) -> &WavelengthAxis {
        &self.axis
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// RGB patch with channel values in `[0, 1]`, stored row-major as `H×W×3`.
///
/// Size is not checked here; the backbone rejects patches below 32×32.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImagePatch {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::LengthMismatch {
                expected: height * width * 3,
                found: pixels.len(),
            });
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("empty patch".into()));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let pixels = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            pixels,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("patch buffer size")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Channel-first `[1, 3, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let hw = self.height * self.width;
        let mut data = vec![T::zero(); 3 * hw];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * hw + p] = T::lit(px[c] as f64);
            }
        }
        Tensor::from_vec([1, 3, self.height, self.width], data)
    }
}

/// Stacks equally sized patches into one `[n, 3, H, W]` batch.
pub fn patch_batch<T: Scalar>(patches: &[&ImagePatch]) -> Result<Tensor<T>> {
    let first = patches
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    if let Some(p) = patches
        .iter()
        .find(|p| (p.height, p.width) != (first.height, first.width))
    {
        return Err(Error::SpatialMismatch {
            left: (first.height, first.width),
            right: (p.height, p.width),
        });
    }
    let parts: Vec<Tensor<T>> = patches.iter().map(|p| p.to_tensor()).collect();
    Ok(Tensor::stack(&parts))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MaterialClass {
    pub id: usize,
    pub name: String,
}

impl MaterialClass {
    /// Classes seen in training in the reference experiment.
    pub const DEFAULT_TRAINED: [&'static str; 6] = ["asphalt", "brick", "grass", "ice", "sand", "tile"];

    /// Assigns contiguous ids in the given order.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Vec<MaterialClass> {
        names
            .iter()
            .enumerate()
            .map(|(id, n)| MaterialClass {
                id,
                name: n.as_ref().to_string(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Zero-based data row in the originating manifest.
    pub row: usize,
    pub image_path: PathBuf,
    pub spectrum_path: PathBuf,
    pub label: MaterialClass,
    pub condition: String,
    /// Scalar terrain property (e.g. friction coefficient); only in co-learning datasets.
    pub property_value: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneMode {
    /// From-scratch dense blocks whose widths reproduce the 160-channel fusion exactly.
    #[default]
    Compact,
    /// Reference DenseNet front end (bottleneck layers) plus a learned 1×1 projection
    /// from its native fused width down to `fused_channels`.
    PretrainedProjected,
}

impl std::str::FromStr for BackboneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compact" => Ok(Self::Compact),
            "pretrained-projected" => Ok(Self::PretrainedProjected),
            other => Err(Error::InvalidArgument(format!(
                "unknown backbone mode `{other}` (expected compact or pretrained-projected)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone_mode: BackboneMode,
    pub stem_channels: usize,
    pub growth_rate: usize,
    pub block1_layers: usize,
    pub block2_layers: usize,
    pub compression: f64,
    pub fused_channels: usize,
    pub head_pool_grid: (usize, usize),
    pub n_bins: usize,
    pub seed: u64,
    pub transition_pool: PoolKind,
    pub head_dropout: f64,
    /// Enforce the 6/12 dense-layer counts.
    pub paper_faithful: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_mode: BackboneMode::Compact,
            stem_channels: 16,
            growth_rate: 8,
            block1_layers: 6,
            block2_layers: 12,
            compression: 0.5,
            fused_channels: 160,
            head_pool_grid: (12, 18),
            n_bins: 1550,
            seed: 0,
            transition_pool: PoolKind::Average,
            head_dropout: 0.0,
            paper_faithful: true,
        }
    }
}

fn compress(channels: usize, ratio: f64) -> usize {
    (ratio * channels as f64).floor() as usize
}

impl ModelConfig {
    /// DenseNet-169 front end (stem 64, growth 32) projected to 160 fused channels.
    pub fn pretrained_projected() -> Self {
        Self {
            backbone_mode: BackboneMode::PretrainedProjected,
            stem_channels: 64,
            growth_rate: 32,
            ..Self::default()
        }
    }

    pub fn block1_out(&self) -> usize {
        self.stem_channels + self.block1_layers * self.growth_rate
    }

    /// Channels of the first transition output (`x_8`).
    pub fn transition_channels(&self) -> usize {
        compress(self.block1_out(), self.compression)
    }

    /// Channels of the second dense block output (`x_21`).
    pub fn block2_out(&self) -> usize {
        self.transition_channels() + self.block2_layers * self.growth_rate
    }

    /// Width of `x_8 ⊕ x_21` before any projection.
    pub fn native_fused_channels(&self) -> usize {
        self.transition_channels() + self.block2_out()
    }

    pub fn flatten_width(&self) -> usize {
        HEAD_CONV2_CHANNELS * self.head_pool_grid.0 * self.head_pool_grid.1
    }

    /// Every violated constraint, in a stable order. Never panics, whatever the values.
    pub fn violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("stem_channels", self.stem_channels),
            ("growth_rate", self.growth_rate),
            ("block1_layers", self.block1_layers),
            ("block2_layers", self.block2_layers),
            ("fused_channels", self.fused_channels),
            ("head_pool_grid.h", self.head_pool_grid.0),
            ("head_pool_grid.w", self.head_pool_grid.1),
        ] {
            if v == 0 {
                bad.push(format!("{name} >= 1"));
            }
        }
        if self.n_bins < 2 {
            bad.push(format!("n_bins ({}) >= 2", self.n_bins));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            bad.push(format!("compression ({}) in (0, 1]", self.compression));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            bad.push(format!("head_dropout ({}) in [0, 1)", self.head_dropout));
        }
        if self.paper_faithful && (self.block1_layers, self.block2_layers) != (6, 12) {
            bad.push(format!(
                "block1_layers == 6 and block2_layers == 12 (got {} and {})",
                self.block1_layers, self.block2_layers
            ));
        }

        let (gh, gw) = self.head_pool_grid;
        let overflow = gh
            .checked_mul(gw)
            .and_then(|a| a.checked_mul(HEAD_CONV2_CHANNELS))
            .and_then(|a| a.checked_mul(self.n_bins))
            .is_none();
        if overflow {
            bad.push("head_pool_grid.h * head_pool_grid.w * 9 * n_bins overflows".into());
        }

        let widths = self
            .block1_layers
            .checked_mul(self.growth_rate)
            .and_then(|g| g.checked_add(self.stem_channels))
            .and_then(|b1| {
                let t = compress(b1, self.compression);
                let b2 = self
                    .block2_layers
                    .checked_mul(self.growth_rate)
                    .and_then(|g| g.checked_add(t))?;
                Some((b1, t, b2, t.checked_add(b2)?))
            });
        match widths {
            None => bad.push("dense block channel arithmetic overflows".into()),
            Some((b1, t, b2, fused)) => {
                if self.compression > 0.0 && t == 0 {
                    bad.push(format!(
                        "floor({} * {b1}) >= 1 (transition keeps no channel)",
                        self.compression
                    ));
                }
                if self.backbone_mode == BackboneMode::Compact && fused != self.fused_channels {
                    bad.push(format!(
                        "compress({} + {}·{}) + [compress(..) + {}·{}] == fused_channels: {t} + {b2} = {fused} != {}",
                        self.stem_channels,
                        self.block1_layers,
                        self.growth_rate,
                        self.block2_layers,
                        self.growth_rate,
                        self.fused_channels
                    ));
                }
            }
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.violations();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ConstraintViolation(bad))
        }
    }
}

/// Returns the configuration unchanged if all its invariants hold.
pub fn validate_config(config: ModelConfig) -> Result<ModelConfig> {
    config.validate()?;
    Ok(config)
}
