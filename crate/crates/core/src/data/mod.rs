//! Dataset ingestion, preprocessing, deterministic splits and the synthetic oracle
//! generator.

mod manifest;
mod preprocess;
mod split;
pub mod synth;

pub use manifest::{load_manifest, write_manifest, DatasetIndex};
pub use preprocess::{extract_patch, normalize_profile, read_spectrum, write_spectrum, NormalizedProfile};
pub use split::{split, SplitRatios};
pub use synth::{synth_generate, SynthConfig, Synthesizer};

use crate::error::{Error, Result};
use crate::types::{ImagePatch, SpectralProfile};

/// A sample loaded into memory.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Row of the originating manifest.
    pub row: usize,
    pub patch: ImagePatch,
    pub profile: SpectralProfile,
    pub label: usize,
    pub property: Option<f64>,
}

/// Loads every record of `index`, failing on the first unreadable row.
pub fn load_samples(index: &DatasetIndex) -> Result<Vec<Sample>> {
    index
        .records
        .iter()
        .map(|r| {
            let data_err = |message: String| Error::DataError { row: r.row, message };
            let img = image::open(&r.image_path)
                .map_err(|e| data_err(format!("{}: {e}", r.image_path.display())))?
                .to_rgb8();
            let raw = read_spectrum(&r.spectrum_path).map_err(|e| data_err(e.to_string()))?;
            let profile = normalize_profile(&raw, index.norm_constant, index.axis)
                .map_err(|e| data_err(format!("{}: {e}", r.spectrum_path.display())))?
                .profile;
            Ok(Sample {
                row: r.row,
                patch: ImagePatch::from_rgb8(&img),
                profile,
                label: r.label.id,
                property: r.property_value,
            })
        })
        .collect()
}
