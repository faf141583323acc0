//! In-memory samples and their on-disk form.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{BinaryTensor, Manifest, ManifestRecord, TensorData};
use crate::tensor::Tensor;

/// Label value excluded from every loss and metric.
pub const IGNORE_LABEL: u16 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `H×W×3`, values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major `H·W` class map.
    pub mask: Option<Vec<u16>>,
    pub dataset: String,
    pub split: String,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.shape()[0]
    }
}

pub fn image_path(id: &str) -> String {
    format!("images/{id}.s5t")
}

pub fn mask_path(id: &str) -> String {
    format!("masks/{id}.s5t")
}

pub fn write_sample(root: &Path, sample: &Sample) -> Result<ManifestRecord> {
    let image = image_path(&sample.id);
    BinaryTensor::from_tensor_f32(&sample.image).write(&root.join(&image))?;
    let mask = match &sample.mask {
        Some(m) => {
            let rel = mask_path(&sample.id);
            let s = sample.size();
            BinaryTensor::new(vec![s, s], TensorData::U16(m.clone()))?.write(&root.join(&rel))?;
            Some(rel)
        }
        None => None,
    };
    Ok(ManifestRecord {
        id: sample.id.clone(),
        image,
        mask,
        dataset: sample.dataset.clone(),
        split: sample.split.clone(),
    })
}

pub fn read_sample(manifest: &Manifest, record: &ManifestRecord) -> Result<Sample> {
    let image_file = manifest.resolve(&record.image);
    if !image_file.exists() {
        return Err(Error::Ingestion {
            patch_id: record.id.clone(),
            path: image_file,
        });
    }
    let img = BinaryTensor::read(&image_file)?;
    if img.dims.len() != 3 || img.dims[2] != 3 || img.dims[0] != img.dims[1] {
        return Err(Error::format(&image_file, format!("expected S×S×3 image, got {:?}", img.dims)));
    }
    let mask = match &record.mask {
        Some(rel) => {
            let path = manifest.resolve(rel);
            if !path.exists() {
                return Err(Error::Ingestion {
                    patch_id: record.id.clone(),
                    path,
                });
            }
            let m = BinaryTensor::read(&path)?;
            match m.data {
                TensorData::U16(v) if m.dims == img.dims[..2] => Some(v),
                _ => return Err(Error::format(&path, "expected u16 mask matching the image")),
            }
        }
        None => None,
    };
    Ok(Sample {
        id: record.id.clone(),
        image: img.to_tensor(),
        mask,
        dataset: record.dataset.clone(),
        split: record.split.clone(),
    })
}

/// Load every record of `manifest`, in manifest order.
pub fn load_samples(manifest: &Manifest) -> Result<Vec<Sample>> {
    manifest
        .records
        .par_iter()
        .map(|r| read_sample(manifest, r))
        .collect()
}

pub fn load_manifest_samples(path: &Path) -> Result<Vec<Sample>> {
    load_samples(&Manifest::read(path)?)
}

/// Run `f` on a pool of `workers` threads (0 = rayon default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
