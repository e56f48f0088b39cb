//! JSON dataset manifests pointing at DVGT files.
//!
//! ```json
//! {"version": 1, "records": [{"id": "a", "signal": "signals/a.dvgt",
//!   "image": "images/a.dvgt", "split": "train", "family": "geometric-shapes"}]}
//! ```
//! Paths are relative to the manifest. Signals are `[d_x]` f32 tensors,
//! images `[C, H, W]` f32 tensors in `[0, 1]`. An optional `mask` names a
//! `[d_x]` tensor of 0/1 values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{dvgt, PairedDataset, Provenance, Record, Split};
use crate::error::{Error, Result};
use crate::model::{CognitiveSignal, StimulusImage};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub signal: String,
    pub image: String,
    pub split: Split,
    #[serde(default = "imported")]
    pub family: String,
}

fn imported() -> String {
    "imported".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    #[serde(default)]
    pub d_x: Option<usize>,
    #[serde(default)]
    pub image_shape: Option<[usize; 3]>,
    #[serde(default)]
    pub mask: Option<String>,
    #[serde(default = "imported_provenance")]
    pub provenance: Provenance,
    pub records: Vec<ManifestRecord>,
}

fn imported_provenance() -> Provenance {
    Provenance::Imported
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}

fn read_at<T: crate::tensor::Scalar>(root: &Path, rel: &str) -> Result<Tensor<T>> {
    let path = root.join(rel);
    if !path.is_file() {
        return invalid(format!("missing file {}", path.display()));
    }
    dvgt::read_tensor(&path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

/// Writes the manifest and one DVGT file per signal and image under `dir`.
pub fn save_manifest(ds: &PairedDataset, dir: &Path) -> Result<PathBuf> {
    ds.validate()?;
    fs::create_dir_all(dir.join("signals"))?;
    fs::create_dir_all(dir.join("images"))?;
    let mut split = vec![None; ds.records.len()];
    ds.train.iter().for_each(|&i| split[i] = Some(Split::Train));
    ds.test.iter().for_each(|&i| split[i] = Some(Split::Test));
    let mut records = Vec::new();
    for (r, s) in ds.records.iter().zip(split) {
        let Some(s) = s else { continue };
        let (sig, img) = (format!("signals/{}.dvgt", r.image.id), format!("images/{}.dvgt", r.image.id));
        dvgt::write_tensor(&dir.join(&sig), &Tensor::vector(r.signal.values.clone())?)?;
        dvgt::write_tensor(&dir.join(&img), &Tensor::new(r.image.shape.to_vec(), r.image.pixels.clone())?)?;
        records.push(ManifestRecord { id: r.image.id.clone(), signal: sig, image: img, split: s, family: r.family.clone() });
    }
    let mask = match ds.mask() {
        Some(m) => {
            dvgt::write_tensor(&dir.join("mask.dvgt"), &Tensor::vector(m.iter().map(|&b| b as u8 as f32).collect())?)?;
            Some("mask.dvgt".to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        d_x: Some(ds.d_x),
        image_shape: Some(ds.image_shape),
        mask,
        provenance: ds.provenance.clone(),
        records,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

/// Loads and fully validates a dataset. `path` may name the manifest or its directory.
pub fn load_manifest(path: &Path) -> Result<PairedDataset> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Error::Validation(format!("{}: {e}", file.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return invalid(format!("manifest version {} is not supported", manifest.version));
    }
    if manifest.records.is_empty() {
        return invalid("no records");
    }
    let root = file.parent().unwrap_or(Path::new("."));
    let mask = match &manifest.mask {
        Some(rel) => {
            let t: Tensor = read_at(root, rel)?;
            if t.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
                return invalid("mask entries must be 0 or 1");
            }
            Some(t.data().iter().map(|v| *v == 1.0).collect::<Vec<bool>>())
        }
        None => None,
    };
    let mut records = Vec::with_capacity(manifest.records.len());
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, r) in manifest.records.iter().enumerate() {
        let sig: Tensor = read_at(root, &r.signal)?;
        let img: Tensor = read_at(root, &r.image)?;
        if sig.shape().len() != 1 {
            return invalid(format!("signal of record {} has shape {:?}, expected [d_x]", r.id, sig.shape()));
        }
        let shape: [usize; 3] = img
            .shape()
            .try_into()
            .map_err(|_| Error::Validation(format!("image of record {} has shape {:?}, expected [C, H, W]", r.id, img.shape())))?;
        let mut signal = CognitiveSignal::new(sig.into_data())?;
        if let Some(m) = &mask {
            signal = signal.with_mask(m.clone()).map_err(|e| Error::Validation(format!("record {}: {e}", r.id)))?;
        }
        let image = StimulusImage::new(r.id.clone(), shape, img.into_data())
            .map_err(|e| Error::Validation(format!("record {}: {e}", r.id)))?;
        records.push(Record { signal, image, family: r.family.clone() });
        match r.split {
            Split::Train => train.push(i),
            Split::Test => test.push(i),
        }
    }
    let ds = PairedDataset {
        d_x: manifest.d_x.unwrap_or(records[0].signal.values.len()),
        image_shape: manifest.image_shape.unwrap_or(records[0].image.shape),
        records,
        train,
        test,
        provenance: manifest.provenance,
    };
    ds.validate()?;
    Ok(ds)
}
