//! Named-tensor checkpoints stored as zip archives.
//!
//! Layout:
//!
//! ```text
//! manifest.json           format version, model spec, configs, metrics, tensor table
//! tensors/<name>.bin      little-endian f32, one file per tensor
//! ```
//!
//! Each tensor-table entry records `offset`, the running byte position the tensor would
//! occupy if all tensor files were concatenated in table order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use crate::classifier::ClassifierConfig;
use crate::data::SplitRatios;
use crate::error::{Error, Result};
use crate::layers::Module;
use crate::tensor::Scalar;
use crate::training::TrainConfig;
use crate::types::{ModelConfig, WavelengthAxis};

pub const FORMAT_VERSION: u32 = 1;

/// Which network the tensors belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    RsNet { config: ModelConfig },
    CoLearn { config: ModelConfig, lambda: f64 },
    Classifier { config: ClassifierConfig },
}

/// How the training data was chosen.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: Option<String>,
    pub holdout: Vec<String>,
    pub split_seed: Option<u64>,
    pub ratios: Option<SplitRatios>,
    /// Training-split record count per entry of `Checkpoint::classes`.
    pub train_census: Vec<usize>,
    /// Epoch whose weights these are (1-based); `None` for non-epoch models.
    pub epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct ArchiveManifest {
    format_version: u32,
    model: ModelSpec,
    train_config: Option<TrainConfig>,
    classes: Vec<String>,
    axis: WavelengthAxis,
    provenance: Provenance,
    metrics: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub train_config: Option<TrainConfig>,
    /// Class names in id order.
    pub classes: Vec<String>,
    pub axis: WavelengthAxis,
    pub provenance: Provenance,
    pub metrics: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies every stored tensor into `model`, which must have exactly the same
    /// parameter and buffer names and shapes.
    pub fn load_into<T: Scalar>(&self, model: &mut (impl Module<T> + ?Sized)) -> Result<()> {
        load_state(model, &self.tensors)
    }
}

/// All parameters and buffers of `model`, in visit order.
pub fn state_dict<T: Scalar>(model: &(impl Module<T> + ?Sized)) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    model.visit(&mut |p| {
        out.push(NamedTensor {
            name: p.name.clone(),
            shape: p.shape.clone(),
            data: p.value.iter().map(|v| v.as_f64() as f32).collect(),
        })
    });
    out
}

/// Strict load: every model tensor must be present with the same shape and no
/// tensor may be left over.
pub fn load_state<T: Scalar>(model: &mut (impl Module<T> + ?Sized), tensors: &[NamedTensor]) -> Result<()> {
    let by_name: BTreeMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut used = 0;
    let mut err = None;
    model.visit_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match by_name.get(p.name.as_str()) {
            None => err = Some(Error::CorruptArchive(format!("tensor {} missing", p.name))),
            Some(t) if t.shape != p.shape => {
                err = Some(Error::CorruptArchive(format!(
                    "tensor {}: shape {:?} does not match model shape {:?}",
                    p.name, t.shape, p.shape
                )))
            }
            Some(t) => {
                for (dst, &src) in p.value.iter_mut().zip(&t.data) {
                    *dst = T::lit(src as f64);
                }
                used += 1;
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if used != by_name.len() {
        let mut names = Vec::new();
        model.visit(&mut |p| names.push(p.name.clone()));
        let extra: Vec<&str> = by_name
            .keys()
            .copied()
            .filter(|n| !names.iter().any(|m| m == n))
            .collect();
        return Err(Error::CorruptArchive(format!("unexpected tensors {extra:?}")));
    }
    Ok(())
}

/// Loads the tensors whose names and shapes match a model tensor and skips the rest.
/// Returns the names that were loaded.
pub fn load_matching<T: Scalar>(model: &mut (impl Module<T> + ?Sized), tensors: &[NamedTensor]) -> Vec<String> {
    let by_name: BTreeMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut loaded = Vec::new();
    model.visit_mut(&mut |p| {
        if let Some(t) = by_name.get(p.name.as_str()).filter(|t| t.shape == p.shape) {
            for (dst, &src) in p.value.iter_mut().zip(&t.data) {
                *dst = T::lit(src as f64);
            }
            loaded.push(p.name.clone());
        }
    });
    loaded
}

fn zip_err(e: zip::result::ZipError) -> Error {
    Error::CorruptArchive(e.to_string())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    let mut offset = 0u64;
    for t in &ckpt.tensors {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor {} has {} values for shape {:?}",
                t.name,
                t.data.len(),
                t.shape
            )));
        }
        let nbytes = 4 * t.data.len() as u64;
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: "f32le".into(),
            file: format!("tensors/{}.bin", t.name),
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let manifest = ArchiveManifest {
        format_version: FORMAT_VERSION,
        model: ckpt.model.clone(),
        train_config: ckpt.train_config.clone(),
        classes: ckpt.classes.clone(),
        axis: ckpt.axis,
        provenance: ckpt.provenance.clone(),
        metrics: ckpt.metrics.clone(),
        tensors: entries,
    };

    let options = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Stored)
        .last_modified_time(zip::DateTime::default())
        .large_file(false);
    let mut zip = ZipWriter::new(BufWriter::new(File::create(path)?));
    zip.start_file("manifest.json", options).map_err(zip_err)?;
    zip.write_all(&serde_json::to_vec_pretty(&manifest)?)?;
    for (t, e) in ckpt.tensors.iter().zip(&manifest.tensors) {
        zip.start_file(e.file.as_str(), options).map_err(zip_err)?;
        let mut bytes = Vec::with_capacity(e.nbytes as usize);
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        zip.write_all(&bytes)?;
    }
    zip.finish().map_err(zip_err)?.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut zip = ZipArchive::new(File::open(path)?).map_err(zip_err)?;
    let mut text = Vec::new();
    zip.by_name("manifest.json")
        .map_err(zip_err)?
        .read_to_end(&mut text)
        .map_err(|e| Error::CorruptArchive(format!("manifest.json: {e}")))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&text).map_err(|e| Error::CorruptArchive(format!("manifest.json: {e}")))?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::CorruptArchive("manifest.json: no format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: found.min(u32::MAX as u64) as u32,
        });
    }
    let manifest: ArchiveManifest =
        serde_json::from_value(raw).map_err(|e| Error::CorruptArchive(format!("manifest.json: {e}")))?;

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut offset = 0u64;
    for e in &manifest.tensors {
        let corrupt = |msg: String| Error::CorruptArchive(format!("tensor {}: {msg}", e.name));
        if e.dtype != "f32le" {
            return Err(corrupt(format!("unsupported dtype {}", e.dtype)));
        }
        let count = e.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if count.map(|c| 4 * c as u64) != Some(e.nbytes) {
            return Err(corrupt(format!(
                "shape {:?} disagrees with {} bytes",
                e.shape, e.nbytes
            )));
        }
        if e.offset != offset {
            return Err(corrupt(format!("offset {} where {offset} was expected", e.offset)));
        }
        offset += e.nbytes;
        let mut file = zip.by_name(&e.file).map_err(|err| corrupt(err.to_string()))?;
        let mut bytes = Vec::with_capacity(e.nbytes as usize);
        file.read_to_end(&mut bytes).map_err(|err| corrupt(err.to_string()))?;
        if bytes.len() as u64 != e.nbytes {
            return Err(corrupt(format!("{} bytes stored, {} declared", bytes.len(), e.nbytes)));
        }
        tensors.push(NamedTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        });
    }
    Ok(Checkpoint {
        model: manifest.model,
        train_config: manifest.train_config,
        classes: manifest.classes,
        axis: manifest.axis,
        provenance: manifest.provenance,
        metrics: manifest.metrics,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::RsNet;
    use crate::tensor::Tensor;

    fn tiny() -> ModelConfig {
        ModelConfig {
            stem_channels: 4,
            growth_rate: 2,
            fused_channels: 40,
            head_pool_grid: (2, 3),
            n_bins: 16,
            paper_faithful: false,
            ..ModelConfig::default()
        }
    }

    fn ckpt(model: &RsNet<f32>) -> Checkpoint {
        Checkpoint {
            model: ModelSpec::RsNet {
                config: model.config().clone(),
            },
            train_config: Some(TrainConfig::default()),
            classes: vec!["a".into(), "b".into()],
            axis: *model.axis(),
            provenance: Provenance::default(),
            metrics: BTreeMap::from([("mse".to_string(), serde_json::json!(0.5))]),
            tensors: state_dict(model),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.zip");
        let model = RsNet::<f32>::new(&tiny()).unwrap();
        let c = ckpt(&model);
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, c);

        let mut fresh = RsNet::<f32>::new(&ModelConfig { seed: 9, ..tiny() }).unwrap();
        back.load_into(&mut fresh).unwrap();
        let x = Tensor::from_vec(
            [2, 3, 32, 32],
            (0..2 * 3 * 32 * 32).map(|i| (i % 11) as f32 / 11.0).collect(),
        );
        let a = model.forward(&x).unwrap();
        let b = fresh.forward(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn saving_twice_gives_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let c = ckpt(&RsNet::<f32>::new(&tiny()).unwrap());
        save_checkpoint(&c, &dir.path().join("a.zip")).unwrap();
        save_checkpoint(&c, &dir.path().join("b.zip")).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("a.zip")).unwrap(),
            std::fs::read(dir.path().join("b.zip")).unwrap()
        );
    }

    #[test]
    fn offsets_accumulate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.zip");
        save_checkpoint(&ckpt(&RsNet::<f32>::new(&tiny()).unwrap()), &path).unwrap();
        let mut zip = ZipArchive::new(File::open(&path).unwrap()).unwrap();
        let mut text = String::new();
        zip.by_name("manifest.json").unwrap().read_to_string(&mut text).unwrap();
        let m: ArchiveManifest = serde_json::from_str(&text).unwrap();
        let mut expect = 0;
        for e in &m.tensors {
            assert_eq!(e.offset, expect);
            expect += e.nbytes;
        }
        assert_eq!(m.tensors[0].name, "features.conv0.weight");
    }

    #[test]
    fn truncated_archive_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.zip");
        save_checkpoint(&ckpt(&RsNet::<f32>::new(&tiny()).unwrap()), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptArchive(_))));
    }

    fn rewrite_manifest(path: &Path, edit: impl FnOnce(&mut serde_json::Value)) {
        let mut zip = ZipArchive::new(File::open(path).unwrap()).unwrap();
        let mut files = Vec::new();
        for i in 0..zip.len() {
            let mut f = zip.by_index(i).unwrap();
            let mut b = Vec::new();
            f.read_to_end(&mut b).unwrap();
            files.push((f.name().unwrap().to_string(), b));
        }
        drop(zip);
        let mut edit = Some(edit);
        let mut w = ZipWriter::new(File::create(path).unwrap());
        for (name, mut bytes) in files {
            if name == "manifest.json" {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                (edit.take().unwrap())(&mut v);
                bytes = serde_json::to_vec(&v).unwrap();
            }
            w.start_file(
                name,
                SimpleFileOptions::default().compression_method(CompressionMethod::Stored),
            )
            .unwrap();
            w.write_all(&bytes).unwrap();
        }
        w.finish().unwrap();
    }

    #[test]
    fn edited_shape_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.zip");
        let model = RsNet::<f32>::new(&tiny()).unwrap();
        save_checkpoint(&ckpt(&model), &path).unwrap();
        rewrite_manifest(&path, |v| {
            let t = v["tensors"]
                .as_array_mut()
                .unwrap()
                .iter_mut()
                .find(|t| t["name"] == "head.fc1.weight")
                .unwrap();
            t["shape"] = serde_json::json!([1, 2]);
        });
        match load_checkpoint(&path) {
            Err(Error::CorruptArchive(msg)) => assert!(msg.contains("head.fc1.weight"), "{msg}"),
            other => panic!("expected CorruptArchive, got {other:?}"),
        }
    }

    #[test]
    fn same_size_shape_swap_fails_on_load_into() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.zip");
        let mut model = RsNet::<f32>::new(&tiny()).unwrap();
        save_checkpoint(&ckpt(&model), &path).unwrap();
        rewrite_manifest(&path, |v| {
            let t = v["tensors"]
                .as_array_mut()
                .unwrap()
                .iter_mut()
                .find(|t| t["name"] == "head.fc2.weight")
                .unwrap();
            t["shape"] = serde_json::json!([1, 256]);
        });
        let c = load_checkpoint(&path).unwrap();
        match c.load_into(&mut model) {
            Err(Error::CorruptArchive(msg)) => assert!(msg.contains("head.fc2.weight"), "{msg}"),
            other => panic!("expected CorruptArchive, got {other:?}"),
        }
    }

    #[test]
    fn version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.zip");
        save_checkpoint(&ckpt(&RsNet::<f32>::new(&tiny()).unwrap()), &path).unwrap();
        rewrite_manifest(&path, |v| v["format_version"] = serde_json::json!(7));
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::VersionMismatch { expected: 1, found: 7 })
        ));
    }

    #[test]
    fn load_matching_skips_unknown_and_misshapen() {
        let mut model = RsNet::<f32>::new(&tiny()).unwrap();
        let tensors = vec![
            NamedTensor {
                name: "features.norm0.weight".into(),
                shape: vec![4],
                data: vec![2.0; 4],
            },
            NamedTensor {
                name: "features.norm0.bias".into(),
                shape: vec![5],
                data: vec![2.0; 5],
            },
            NamedTensor {
                name: "classifier.weight".into(),
                shape: vec![1],
                data: vec![0.0],
            },
        ];
        assert_eq!(
            load_matching(&mut model, &tensors),
            vec!["features.norm0.weight".to_string()]
        );
        assert!(matches!(
            load_state(&mut model, &tensors),
            Err(Error::CorruptArchive(_))
        ));
    }
}
