use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::types::{ImagePatch, SpectralProfile, WavelengthAxis};

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedProfile {
    pub profile: SpectralProfile,
    /// Bins that exceeded the normalization constant and were clipped to 1.
    pub clipped: usize,
}

/// Divides raw photon counts by `norm_constant` and clips the result to `[0, 1]`.
pub fn normalize_profile(raw: &[f64], norm_constant: f64, axis: WavelengthAxis) -> Result<NormalizedProfile> {
    if raw.len() != axis.n_bins {
        return Err(Error::LengthMismatch {
            expected: axis.n_bins,
            found: raw.len(),
        });
    }
    if !(norm_constant > 0.0 && norm_constant.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "normalization constant must be positive, got {norm_constant}"
        )));
    }
    let mut clipped = 0;
    let mut values = Vec::with_capacity(raw.len());
    for (i, &v) in raw.iter().enumerate() {
        if v.is_nan() || v < 0.0 {
            return Err(Error::NegativeCount { index: i, value: v });
        }
        let x = v / norm_constant;
        if x > 1.0 {
            clipped += 1;
        }
        values.push(x.min(1.0) as f32);
    }
    Ok(NormalizedProfile {
        profile: SpectralProfile::ground_truth(values, axis)?,
        clipped,
    })
}

/// Cuts an `H×W` window centered on `(row, col)` out of an 8-bit frame.
/// The window's top-left corner is `(row - H/2, col - W/2)`.
pub fn extract_patch(frame: &RgbImage, center: (usize, usize), size: (usize, usize)) -> Result<ImagePatch> {
    let (fh, fw) = (frame.height() as usize, frame.width() as usize);
    let (h, w) = size;
    let oob = || Error::OutOfBounds {
        center,
        size,
        frame: (fh, fw),
    };
    if h == 0 || w == 0 {
        return Err(oob());
    }
    let top = center.0.checked_sub(h / 2).ok_or_else(oob)?;
    let left = center.1.checked_sub(w / 2).ok_or_else(oob)?;
    if top + h > fh || left + w > fw {
        return Err(oob());
    }
    let mut pixels = Vec::with_capacity(h * w * 3);
    for r in top..top + h {
        for c in left..left + w {
            let p = frame.get_pixel(c as u32, r as u32);
            pixels.extend(p.0.iter().map(|&v| v as f32 / 255.0));
        }
    }
    ImagePatch::new(h, w, pixels)
}

/// Reads the count column of a `wavelength_nm,normalized_count` spectrum file.
pub fn read_spectrum(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut values = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = rec.get(1).ok_or_else(|| Error::SchemaError {
            line: i + 2,
            message: format!("{}: expected two columns", path.display()),
        })?;
        values.push(field.trim().parse::<f64>().map_err(|e| Error::SchemaError {
            line: i + 2,
            message: format!("{}: {e}", path.display()),
        })?);
    }
    Ok(values)
}

pub fn write_spectrum(path: &Path, axis: &WavelengthAxis, values: &[f32]) -> Result<()> {
    if values.len() != axis.n_bins {
        return Err(Error::LengthMismatch {
            expected: axis.n_bins,
            found: values.len(),
        });
    }
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "wavelength_nm,normalized_count")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(out, "{:.4},{}", axis.center(i), v)?;
    }
    out.flush()?;
    Ok(())
}
