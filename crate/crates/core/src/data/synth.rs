//! Synthetic oracle dataset.
//!
//! Every class owns a fixed spectral template, a sum of Gaussians scaled to peak 1.
//! A sample scales its template by a brightness `b`, adds per-bin noise and clips to
//! `[0, 1]`. Its patch color is the mean of `b·T` over three box responses
//! (blue 400–500 nm, green 500–600 nm, red 600–700 nm) plus a little per-pixel texture.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{load_manifest, write_manifest, write_spectrum, DatasetIndex};
use crate::error::{Error, Result};
use crate::types::{ImagePatch, MaterialClass, SampleRecord, SpectralProfile, WavelengthAxis};

/// Box response edges in nm as `[lo, hi)`, listed in R, G, B order.
pub const BOXES: [(f64, f64); 3] = [(600.0, 700.0), (500.0, 600.0), (400.0, 500.0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub n_gaussians_per_template: usize,
    pub brightness_range: (f64, f64),
    pub noise_sigma: f64,
    /// `(H, W)`.
    pub patch_size: (usize, usize),
    pub seed: u64,
    /// Per-pixel texture noise added to the rendered color.
    pub texture_sigma: f64,
    /// Adds an extra class with template `0.5·(T_a + T_b)` and `samples_per_class` samples.
    pub blend: Option<(usize, usize)>,
    /// Writes the friction oracle `0.2 + 0.1·m + N(0, 0.01)` into the property column.
    pub with_property: bool,
    pub axis: WavelengthAxis,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 6,
            samples_per_class: 200,
            n_gaussians_per_template: 3,
            brightness_range: (0.6, 1.0),
            noise_sigma: 0.02,
            patch_size: (32, 48),
            seed: 0,
            texture_sigma: 0.02,
            blend: None,
            with_property: false,
            axis: WavelengthAxis::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let (lo, hi) = self.brightness_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            bad.push(format!("0 < lo <= hi <= 1 for brightness_range ({lo}, {hi})"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            bad.push(format!("noise_sigma ({}) >= 0", self.noise_sigma));
        }
        if !(self.texture_sigma >= 0.0 && self.texture_sigma.is_finite()) {
            bad.push(format!("texture_sigma ({}) >= 0", self.texture_sigma));
        }
        if self.n_classes < 1 || self.samples_per_class < 1 || self.n_gaussians_per_template < 1 {
            bad.push("n_classes, samples_per_class and n_gaussians_per_template >= 1".into());
        }
        if self.patch_size.0 == 0 || self.patch_size.1 == 0 {
            bad.push(format!("patch_size {:?} non-empty", self.patch_size));
        }
        if let Some((a, b)) = self.blend {
            if a == b || a >= self.n_classes || b >= self.n_classes {
                bad.push(format!("blend pair ({a}, {b}) must name two distinct classes"));
            }
        }
        if box_bins(&self.axis).iter().any(|r| r.is_empty()) {
            bad.push("axis must place at least one bin in each of 400-500, 500-600, 600-700 nm".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ConstraintViolation(bad))
        }
    }

    /// Classes written, including the blend class.
    pub fn total_classes(&self) -> usize {
        self.n_classes + usize::from(self.blend.is_some())
    }
}

/// Bin index ranges covered by each box, in R, G, B order.
pub fn box_bins(axis: &WavelengthAxis) -> [Range<usize>; 3] {
    BOXES.map(|(lo, hi)| {
        let inside: Vec<usize> = (0..axis.n_bins)
            .filter(|&i| (lo..hi).contains(&axis.center(i)))
            .collect();
        match (inside.first(), inside.last()) {
            (Some(&a), Some(&b)) => a..b + 1,
            _ => 0..0,
        }
    })
}

/// Oracle friction coefficient of class `m`, noise-free.
pub fn friction(class: usize) -> f64 {
    0.2 + 0.1 * class as f64
}

/// One rendered sample.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub class: usize,
    pub brightness: f64,
    pub patch: ImagePatch,
    pub profile: SpectralProfile,
    pub property: f64,
}

/// Class templates and colors derived from a config; renders samples on demand.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    config: SynthConfig,
    templates: Vec<Vec<f64>>,
    colors: Vec<[f64; 3]>,
    names: Vec<String>,
}

impl Synthesizer {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let axis = config.axis;
        let boxes = box_bins(&axis);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // Minimum chromaticity separation; tightens as classes crowd the simplex.
        let gap = (0.25 / (config.n_classes as f64).sqrt()).min(0.1);

        let mut templates: Vec<Vec<f64>> = Vec::with_capacity(config.total_classes());
        let mut colors: Vec<[f64; 3]> = Vec::with_capacity(config.total_classes());
        for m in 0..config.n_classes {
            let mut placed = false;
            for _ in 0..10_000 {
                let t = draw_template(&mut rng, &axis, config.n_gaussians_per_template);
                let c = box_color(&t, &boxes);
                if c.iter().cloned().fold(0.0, f64::max) < 0.2 {
                    continue;
                }
                let ch = chroma(&c);
                if colors.iter().all(|o| l1(&chroma(o), &ch) >= gap) {
                    templates.push(t);
                    colors.push(c);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::InvalidArgument(format!(
                    "could not place class {m} of {} with distinct color",
                    config.n_classes
                )));
            }
        }
        if let Some((a, b)) = config.blend {
            let t: Vec<f64> = templates[a]
                .iter()
                .zip(&templates[b])
                .map(|(x, y)| 0.5 * (x + y))
                .collect();
            colors.push(box_color(&t, &boxes));
            templates.push(t);
        }
        for i in 0..colors.len() {
            for j in 0..i {
                if l1(&colors[i], &colors[j]) <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "classes {j} and {i} render to the same color"
                    )));
                }
            }
        }

        let width = config.total_classes().to_string().len().max(2);
        let mut names: Vec<String> = (0..config.n_classes).map(|m| format!("synth{m:0width$}")).collect();
        if config.blend.is_some() {
            names.push(format!("synth{:0width$}_blend", config.n_classes));
        }
        Ok(Self {
            config,
            templates,
            colors,
            names,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    /// Peak-normalized templates at the axis bins; the blend class comes last.
    pub fn templates(&self) -> &[Vec<f64>] {
        &self.templates
    }

    /// Mean template value over each box, in R, G, B order, at brightness 1.
    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    /// Class names in id order. They sort alphabetically in the same order.
    pub fn class_names(&self) -> &[String] {
        &self.names
    }

    /// Pair of trained classes whose templates are nearest in L2.
    pub fn closest_pair(&self) -> (usize, usize) {
        let mut best = (0, 1, f64::INFINITY);
        for i in 0..self.config.n_classes {
            for j in i + 1..self.config.n_classes {
                let d = l2(&self.templates[i], &self.templates[j]);
                if d < best.2 {
                    best = (i, j, d);
                }
            }
        }
        (best.0, best.1)
    }

    /// Renders sample `index` of `class`. `brightness_scale` multiplies the drawn
    /// brightness and leaves every other draw unchanged.
    pub fn sample(&self, class: usize, index: usize, brightness_scale: f64) -> Result<SynthSample> {
        if class >= self.templates.len() {
            return Err(Error::LabelOutOfRange {
                label: class,
                classes: self.templates.len(),
            });
        }
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 + ((class as u64) << 32 | index as u64));

        let (lo, hi) = cfg.brightness_range;
        let b = rng.gen_range(lo..=hi) * brightness_scale;
        let template = &self.templates[class];
        let mut values: Vec<f32> = template.iter().map(|t| b * t).map(|v| v as f32).collect();
        if cfg.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
            for (v, t) in values.iter_mut().zip(template) {
                *v = (b * t + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }

        let (h, w) = cfg.patch_size;
        let color = self.colors[class].map(|c| b * c);
        let mut pixels = Vec::with_capacity(h * w * 3);
        let texture = Normal::new(0.0, cfg.texture_sigma.max(f64::MIN_POSITIVE)).expect("validated sigma");
        for _ in 0..h * w {
            for c in color {
                let v = if cfg.texture_sigma > 0.0 {
                    c + texture.sample(&mut rng)
                } else {
                    c
                };
                // Quantize now so in-memory samples match what a PNG reload yields.
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0);
            }
        }
        let property = friction(class) + Normal::new(0.0, 0.01).expect("fixed sigma").sample(&mut rng);

        Ok(SynthSample {
            class,
            brightness: b,
            patch: ImagePatch::new(h, w, pixels)?,
            profile: SpectralProfile::ground_truth(values, cfg.axis)?,
            property,
        })
    }
}

fn draw_template(rng: &mut ChaCha8Rng, axis: &WavelengthAxis, k: usize) -> Vec<f64> {
    let params: Vec<(f64, f64, f64)> = (0..k)
        .map(|_| {
            (
                rng.gen_range(0.2..1.0),
                rng.gen_range(axis.lambda_min..axis.lambda_max),
                rng.gen_range(25.0..200.0),
            )
        })
        .collect();
    let t: Vec<f64> = axis
        .centers()
        .into_iter()
        .map(|l| {
            params
                .iter()
                .map(|(a, mu, s)| a * (-0.5 * ((l - mu) / s).powi(2)).exp())
                .sum()
        })
        .collect();
    let peak = t.iter().cloned().fold(0.0, f64::max);
    t.into_iter().map(|v| v / peak).collect()
}

fn box_color(t: &[f64], boxes: &[Range<usize>; 3]) -> [f64; 3] {
    [0, 1, 2].map(|c| {
        let r = boxes[c].clone();
        t[r.clone()].iter().sum::<f64>() / r.len() as f64
    })
}

fn chroma(c: &[f64; 3]) -> [f64; 3] {
    let s: f64 = c.iter().sum();
    c.map(|v| v / s)
}

fn l1(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Writes `images/`, `spectra/` and `manifest.csv` under `out_dir` and returns the
/// reloaded index. Output depends only on `config`.
pub fn synth_generate(config: SynthConfig, out_dir: &Path) -> Result<DatasetIndex> {
    let synth = Synthesizer::new(config)?;
    let cfg = synth.config();
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("spectra"))?;

    let classes = MaterialClass::from_names(synth.class_names());
    let mut records = Vec::with_capacity(cfg.total_classes() * cfg.samples_per_class);
    for (m, class) in classes.iter().enumerate() {
        for i in 0..cfg.samples_per_class {
            let s = synth.sample(m, i, 1.0)?;
            let row = records.len();
            let image_path = out_dir.join(format!("images/{row:05}.png"));
            let spectrum_path = out_dir.join(format!("spectra/{row:05}.csv"));
            s.patch.to_rgb8().save(&image_path)?;
            write_spectrum(&spectrum_path, &cfg.axis, s.profile.values())?;
            records.push(SampleRecord {
                row,
                image_path,
                spectrum_path,
                label: class.clone(),
                condition: format!("b{:.3}", s.brightness),
                property_value: cfg.with_property.then_some(s.property),
            });
        }
    }
    let index = DatasetIndex {
        records,
        classes,
        axis: cfg.axis,
        norm_constant: 1.0,
    };
    let manifest = out_dir.join("manifest.csv");
    write_manifest(&manifest, &index)?;
    load_manifest(&manifest)
}
