//! On-disk datasets: PPM images, PGM ground truth and saliency, and a JSON
//! manifest.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json
//! images/00000.ppm      3-channel image
//! gt/00000.pgm          0 background, 1..=M classes
//! saliency/00000.pgm    saliency × 255, rounded
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgan_core::seeds::{ImageLabels, SeedMask};
use sgan_core::synth::{DatasetConfig, Layout, Sample, Split};

use crate::error::{PipelineError, Result};
use crate::netpbm::Image;
use crate::pipeline::Dataset;

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub num_classes: usize,
    /// Generator settings, when the dataset was synthesised.
    pub config: Option<DatasetConfig>,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub split: Split,
    pub width: usize,
    pub height: usize,
    /// `+1` when the class is present, `-1` otherwise.
    pub labels: Vec<i8>,
    /// Paths relative to the dataset directory.
    pub image: String,
    pub gt: Option<String>,
    pub saliency: String,
    pub layout: Option<Layout>,
}

impl Manifest {
    /// Every file the manifest references, relative to the dataset root.
    pub fn files(&self) -> Vec<String> {
        self.samples
            .iter()
            .flat_map(|e| [Some(e.image.clone()), e.gt.clone(), Some(e.saliency.clone())])
            .flatten()
            .collect()
    }
}

fn saliency_to_bytes(s: &[f32]) -> Vec<u8> {
    s.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn saliency_from_bytes(b: &[u8]) -> Vec<f32> {
    b.iter().map(|&v| v as f32 / 255.0).collect()
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(PipelineError::io(path))
}

/// Writes `samples` under `root`, creating it as needed.
pub fn write_dataset(root: &Path, samples: &[Sample], num_classes: usize, config: Option<&DatasetConfig>) -> Result<Manifest> {
    for sub in ["images", "gt", "saliency"] {
        create_dir(&root.join(sub))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let stem = format!("{:05}", s.index);
        let image = format!("images/{stem}.ppm");
        let saliency = format!("saliency/{stem}.pgm");
        Image::from_planar_rgb(s.width, s.height, &s.image).write(&root.join(&image))?;
        Image::gray(s.width, s.height, saliency_to_bytes(&s.saliency)).write(&root.join(&saliency))?;
        let gt = match &s.gt {
            Some(g) => {
                let name = format!("gt/{stem}.pgm");
                Image::gray(s.width, s.height, g.clone()).write(&root.join(&name))?;
                Some(name)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            index: s.index,
            split: s.split,
            width: s.width,
            height: s.height,
            labels: s.labels.present().iter().map(|&p| if p { 1 } else { -1 }).collect(),
            image,
            gt,
            saliency,
            layout: s.layout,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        num_classes,
        config: config.cloned(),
        samples: entries,
    };
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(PipelineError::io(&path))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    if !path.exists() {
        return Err(PipelineError::Missing(path));
    }
    let text = fs::read_to_string(&path).map_err(PipelineError::io(&path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(PipelineError::json(&path))?;
    if m.version != MANIFEST_VERSION {
        return Err(PipelineError::Format {
            path,
            kind: "manifest",
            offset: 0,
            reason: format!("unsupported version {}", m.version),
        });
    }
    Ok(m)
}

fn entry_error(path: PathBuf, reason: String) -> PipelineError {
    PipelineError::Format {
        path,
        kind: "manifest entry",
        offset: 0,
        reason,
    }
}

/// Loads every sample listed in `root/manifest.json`.
pub fn load_samples(root: &Path) -> Result<(Manifest, Vec<Sample>)> {
    let manifest = read_manifest(root)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let (w, h) = (e.width, e.height);
        let image = Image::read_expecting(&root.join(&e.image), 3, w, h)?.to_planar();
        let saliency = saliency_from_bytes(&Image::read_expecting(&root.join(&e.saliency), 1, w, h)?.data);
        let gt = match &e.gt {
            Some(name) => {
                let path = root.join(name);
                let data = Image::read_expecting(&path, 1, w, h)?.data;
                SeedMask::from_labels(h, w, data.clone(), manifest.num_classes)
                    .map_err(|err| entry_error(path.clone(), err.to_string()))?;
                Some(data)
            }
            None => None,
        };
        if e.labels.len() != manifest.num_classes {
            return Err(entry_error(
                root.join(MANIFEST),
                format!("sample {} lists {} labels for {} classes", e.index, e.labels.len(), manifest.num_classes),
            ));
        }
        let labels = ImageLabels::from_signs(&e.labels).map_err(|err| entry_error(root.join(MANIFEST), err.to_string()))?;
        samples.push(Sample {
            index: e.index,
            split: e.split,
            height: h,
            width: w,
            image,
            labels,
            gt,
            saliency,
            layout: e.layout,
        });
    }
    Ok((manifest, samples))
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let (manifest, samples) = load_samples(root)?;
    Ok(Dataset::from_samples(samples, manifest.num_classes))
}

/// Writes one seed mask per training image as `dir/<index>.pgm`.
pub fn write_seed_masks(dir: &Path, data: &Dataset, seeds: &[SeedMask]) -> Result<()> {
    create_dir(dir)?;
    for (s, m) in data.train.iter().zip(seeds) {
        Image::gray(m.width(), m.height(), m.labels().to_vec()).write(&dir.join(format!("{:05}.pgm", s.index)))?;
    }
    Ok(())
}

/// Reads the masks written by [`write_seed_masks`].
pub fn read_seed_masks(dir: &Path, data: &Dataset) -> Result<Vec<SeedMask>> {
    data.train
        .iter()
        .map(|s| {
            let path = dir.join(format!("{:05}.pgm", s.index));
            if !path.exists() {
                return Err(PipelineError::Missing(path));
            }
            let img = Image::read_expecting(&path, 1, s.width, s.height)?;
            SeedMask::from_labels(s.height, s.width, img.data, data.num_classes).map_err(|e| entry_error(path, e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use sgan_core::synth::generate_dataset;

    fn small() -> DatasetConfig {
        DatasetConfig {
            image_size: 32,
            train: 6,
            val: 4,
            saliency_corruption: sgan_core::synth::SaliencyCorruption {
                dilate_px: 1,
                hole_prob: 0.2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let samples = generate_dataset(&cfg).unwrap();
        write_dataset(dir.path(), &samples, cfg.num_classes, Some(&cfg)).unwrap();
        let (manifest, back) = load_samples(dir.path()).unwrap();
        assert_eq!(back, samples);
        assert_eq!(manifest.config, Some(cfg));
    }

    #[test]
    fn manifest_lists_exactly_the_written_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let manifest = write_dataset(dir.path(), &generate_dataset(&cfg).unwrap(), cfg.num_classes, None).unwrap();
        let mut listed = manifest.files();
        listed.sort();
        let mut on_disk = Vec::new();
        for sub in ["images", "gt", "saliency"] {
            for e in fs::read_dir(dir.path().join(sub)).unwrap() {
                on_disk.push(format!("{sub}/{}", e.unwrap().file_name().to_string_lossy()));
            }
        }
        on_disk.sort();
        assert_eq!(listed, on_disk);
        assert_eq!(listed.len(), 30);
    }

    #[test]
    fn truncated_image_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let manifest = write_dataset(dir.path(), &generate_dataset(&cfg).unwrap(), cfg.num_classes, None).unwrap();
        let victim = dir.path().join(&manifest.samples[2].image);
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, PipelineError::Format { ref path, .. } if *path == victim));
        assert!(err.to_string().contains("00002.ppm"));
    }

    #[test]
    fn seed_masks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let data = Dataset::generate(&cfg).unwrap();
        let seeds: Vec<SeedMask> = data.train.iter().map(|s| s.gt_mask().unwrap()).collect();
        write_seed_masks(dir.path(), &data, &seeds).unwrap();
        assert_eq!(read_seed_masks(dir.path(), &data).unwrap(), seeds);
    }
}
