use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::{MaterialClass, SampleRecord, WavelengthAxis};

const COLUMNS: [&str; 5] = ["image_path", "spectrum_path", "label", "condition", "property"];

/// Parsed manifest: resolved sample records plus dataset-level metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub records: Vec<SampleRecord>,
    /// Sorted by name; ids are positions in this list.
    pub classes: Vec<MaterialClass>,
    pub axis: WavelengthAxis,
    /// Raw photon-count divisor.
    pub norm_constant: f64,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_by_name(&self, name: &str) -> Option<&MaterialClass> {
        self.classes.iter().find(|c| c.name == name)
    }

    /// Record count per class id.
    pub fn class_census(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in &self.records {
            counts[r.label.id] += 1;
        }
        counts
    }

    pub fn has_property(&self) -> bool {
        self.records.iter().all(|r| r.property_value.is_some())
    }

    /// A copy holding only `records`, with the same classes and metadata.
    pub fn with_records(&self, records: Vec<SampleRecord>) -> Self {
        Self {
            records,
            classes: self.classes.clone(),
            axis: self.axis,
            norm_constant: self.norm_constant,
        }
    }
}

fn schema(line: usize, message: impl Into<String>) -> Error {
    Error::SchemaError {
        line,
        message: message.into(),
    }
}

/// Reads a manifest:
///
/// ```text
/// # axis: <lambda_min>,<lambda_max>,<n_bins>
/// # norm: <value>
/// image_path,spectrum_path,label,condition,property
/// images/00000.png,spectra/00000.csv,grass,dry,0.35
/// ```
///
/// Paths are relative to the manifest's directory; `property` may be empty.
pub fn load_manifest(path: &Path) -> Result<DatasetIndex> {
    let text = fs::read_to_string(path)?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();

    let mut axis = None;
    let mut norm = None;
    let mut body_start = 0;
    let mut header_lines = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            break;
        }
        body_start += line.len();
        header_lines += 1;
        let Some(meta) = t.strip_prefix('#') else { continue };
        let Some((key, value)) = meta.split_once(':') else {
            continue;
        };
        match key.trim() {
            "axis" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(schema(i + 1, "axis header needs <lo>,<hi>,<n_bins>"));
                }
                let lo = parts[0].parse::<f64>().map_err(|e| schema(i + 1, e.to_string()))?;
                let hi = parts[1].parse::<f64>().map_err(|e| schema(i + 1, e.to_string()))?;
                let n = parts[2].parse::<usize>().map_err(|e| schema(i + 1, e.to_string()))?;
                axis = Some(WavelengthAxis::new(lo, hi, n).map_err(|e| schema(i + 1, e.to_string()))?);
            }
            "norm" => {
                let v = value.trim().parse::<f64>().map_err(|e| schema(i + 1, e.to_string()))?;
                if !(v > 0.0 && v.is_finite()) {
                    return Err(schema(i + 1, format!("norm must be positive, got {v}")));
                }
                norm = Some(v);
            }
            _ => {}
        }
    }
    let axis = axis.ok_or_else(|| schema(1, "missing `# axis:` header"))?;
    let norm_constant = norm.ok_or_else(|| schema(1, "missing `# norm:` header"))?;

    let body = text.get(body_start.min(text.len())..).unwrap_or("");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(body.as_bytes());
    let header_line = header_lines + 1;
    let headers = reader.headers()?.clone();
    if headers.iter().map(str::trim).ne(COLUMNS) {
        return Err(schema(header_line, format!("expected columns {}", COLUMNS.join(","))));
    }

    struct Row {
        image: PathBuf,
        spectrum: PathBuf,
        label: String,
        condition: String,
        property: Option<f64>,
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = header_line + 1 + i;
        if rec.len() != COLUMNS.len() {
            return Err(schema(
                line,
                format!("expected {} columns, found {}", COLUMNS.len(), rec.len()),
            ));
        }
        let property = match rec[4].trim() {
            "" => None,
            v => Some(v.parse::<f64>().map_err(|e| schema(line, format!("property: {e}")))?),
        };
        let label = rec[2].trim();
        if label.is_empty() {
            return Err(schema(line, "empty label"));
        }
        rows.push(Row {
            image: root.join(rec[0].trim()),
            spectrum: root.join(rec[1].trim()),
            label: label.to_string(),
            condition: rec[3].trim().to_string(),
            property,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyManifest);
    }

    let names: BTreeSet<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    let classes = MaterialClass::from_names(&names.into_iter().collect::<Vec<_>>());
    let mut records = Vec::with_capacity(rows.len());
    for (row, r) in rows.into_iter().enumerate() {
        for p in [&r.image, &r.spectrum] {
            if !p.is_file() {
                return Err(Error::MissingFile { row, path: p.clone() });
            }
        }
        let label = classes
            .iter()
            .find(|c| c.name == r.label)
            .cloned()
            .expect("label collected above");
        records.push(SampleRecord {
            row,
            image_path: r.image,
            spectrum_path: r.spectrum,
            label,
            condition: r.condition,
            property_value: r.property,
        });
    }
    Ok(DatasetIndex {
        records,
        classes,
        axis,
        norm_constant,
    })
}

/// Writes `index` as a manifest at `path`, with record paths made relative to the
/// manifest's directory where possible.
pub fn write_manifest(path: &Path, index: &DatasetIndex) -> Result<()> {
    let root = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| -> String { p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/") };
    let mut out = Vec::new();
    let a = index.axis;
    writeln!(out, "# axis: {},{},{}", a.lambda_min, a.lambda_max, a.n_bins)?;
    writeln!(out, "# norm: {}", index.norm_constant)?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(COLUMNS)?;
        for r in &index.records {
            let property = r.property_value.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                rel(&r.image_path).as_str(),
                rel(&r.spectrum_path).as_str(),
                r.label.name.as_str(),
                r.condition.as_str(),
                property.as_str(),
            ])?;
        }
        w.flush()?;
    }
    fs::write(path, out)?;
    Ok(())
}
