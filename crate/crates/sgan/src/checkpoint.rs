//! Checkpoints: a flat little-endian `f32` blob plus a JSON sidecar that
//! names each tensor, its shape and its byte offset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgan_core::model::{ClassifierModel, SegModel, Variant};
use sgan_core::nn::{BackboneConfig, ParamStore};
use sgan_core::Tensor;

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Classifier,
    Segmentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: ModelKind,
    pub variant: Option<Variant>,
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Paths of the blob and sidecar for checkpoint `stem`.
pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

fn write_params(stem: &Path, params: &ParamStore<f32>, mut sidecar: Sidecar) -> Result<()> {
    let (bin, json) = paths(stem);
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    let mut blob = Vec::new();
    for (name, t) in params.iter() {
        sidecar.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(&bin, blob).map_err(PipelineError::io(&bin))?;
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&json, text).map_err(PipelineError::io(&json))
}

fn read_params(stem: &Path) -> Result<(Sidecar, ParamStore<f32>)> {
    let (bin, json) = paths(stem);
    for p in [&bin, &json] {
        if !p.exists() {
            return Err(PipelineError::Missing(p.clone()));
        }
    }
    let text = fs::read_to_string(&json).map_err(PipelineError::io(&json))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(PipelineError::json(&json))?;
    let blob = fs::read(&bin).map_err(PipelineError::io(&bin))?;
    let fail = |offset: usize, reason: String| PipelineError::Format {
        path: bin.clone(),
        kind: "checkpoint",
        offset,
        reason,
    };
    let mut params = ParamStore::new();
    let mut expected = 0;
    for e in &sidecar.tensors {
        if e.dtype != "f32" {
            return Err(fail(e.offset, format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset != expected {
            return Err(fail(e.offset, format!("{}: expected offset {expected}", e.name)));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        let bytes = blob
            .get(e.offset..end)
            .ok_or_else(|| fail(blob.len(), format!("{}: blob ends before byte {end}", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(&e.name, Tensor::new(&e.shape, data)?);
        expected = end;
    }
    if expected != blob.len() {
        return Err(fail(expected, format!("{} unreferenced trailing bytes", blob.len() - expected)));
    }
    Ok((sidecar, params))
}

fn expect_kind(stem: &Path, sidecar: &Sidecar, kind: ModelKind) -> Result<()> {
    if sidecar.kind != kind {
        return Err(PipelineError::Format {
            path: paths(stem).1,
            kind: "checkpoint",
            offset: 0,
            reason: format!("expected a {kind:?} checkpoint, found {:?}", sidecar.kind),
        });
    }
    Ok(())
}

pub fn save_classifier(stem: &Path, model: &ClassifierModel<f32>) -> Result<()> {
    write_params(
        stem,
        &model.params,
        Sidecar {
            kind: ModelKind::Classifier,
            variant: Some(model.variant),
            num_classes: model.num_classes,
            backbone: model.backbone.clone(),
            tensors: Vec::new(),
        },
    )
}

pub fn load_classifier(stem: &Path) -> Result<ClassifierModel<f32>> {
    let (sc, params) = read_params(stem)?;
    expect_kind(stem, &sc, ModelKind::Classifier)?;
    let variant = sc.variant.unwrap_or(Variant::Baseline);
    Ok(ClassifierModel::from_params(params, sc.backbone, sc.num_classes, variant)?)
}

pub fn save_seg(stem: &Path, model: &SegModel<f32>) -> Result<()> {
    write_params(
        stem,
        &model.params,
        Sidecar {
            kind: ModelKind::Segmentation,
            variant: None,
            num_classes: model.num_classes,
            backbone: model.backbone.clone(),
            tensors: Vec::new(),
        },
    )
}

pub fn load_seg(stem: &Path) -> Result<SegModel<f32>> {
    let (sc, params) = read_params(stem)?;
    expect_kind(stem, &sc, ModelKind::Segmentation)?;
    Ok(SegModel::from_params(params, sc.backbone, sc.num_classes)?)
}
