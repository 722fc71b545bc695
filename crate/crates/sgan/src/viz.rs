//! Heatmaps of class activation maps and attention columns as PGM images.

use sgan_core::attention::SaliencyMask;
use sgan_core::model::ClassifierModel;
use sgan_core::nn::CamSource;
use sgan_core::real::Real;
use sgan_core::seeds::ImageLabels;
use sgan_core::Tensor;

use crate::error::{PipelineError, Result};
use crate::netpbm::{min_max_scale, Image};

/// One min-max scaled feature-resolution heatmap per present class, as
/// `(zero-based class, image)`.
pub fn cam_heatmaps(
    model: &ClassifierModel<f32>,
    image: Tensor<f32>,
    labels: &ImageLabels,
    mask: Option<&SaliencyMask>,
    source: CamSource,
) -> Result<Vec<(usize, Image)>> {
    let cams = model.cams(image, labels, mask, source)?;
    Ok(labels
        .classes()
        .map(|z| {
            let values: Vec<f64> = cams.map(z).iter().map(|v| v.as_f64()).collect();
            (z, Image::gray(cams.width(), cams.height(), min_max_scale(&values)))
        })
        .collect())
}

/// Column `j = row·w + col` of the context attention: how strongly every
/// feature position attends to `(row, col)`, reshaped to the feature grid.
pub fn attention_column(model: &ClassifierModel<f32>, image: Tensor<f32>, mask: Option<&SaliencyMask>, row: usize, col: usize) -> Result<Image> {
    let stride = model.backbone.stride();
    let (h, w) = (image.shape()[1] / stride, image.shape()[2] / stride);
    if row >= h || col >= w {
        return Err(PipelineError::Config(format!(
            "pixel ({row}, {col}) lies outside the {h}x{w} feature grid"
        )));
    }
    let d = model.context_attention(image, mask)?;
    let n = h * w;
    let j = row * w + col;
    let column: Vec<f64> = (0..n).map(|i| d.data()[i * n + j].as_f64()).collect();
    Ok(Image::gray(w, h, min_max_scale(&column)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use sgan_core::model::Variant;
    use sgan_core::nn::BackboneConfig;

    fn model() -> ClassifierModel<f32> {
        let bb = BackboneConfig {
            block_channels: vec![4, 6],
            pool_after: vec![0],
            ..Default::default()
        };
        ClassifierModel::new(&mut ChaCha8Rng::seed_from_u64(9), bb, 3, Variant::Full).unwrap()
    }

    fn image() -> Tensor<f32> {
        Tensor::from_fn(&[3, 8, 8], |i| ((i * 37 % 17) as f32 / 8.0) - 1.0)
    }

    #[test]
    fn masked_entries_of_a_column_are_zero() {
        let m = model();
        let bits: Vec<bool> = (0..16).map(|u| u % 4 < 2).collect();
        let mask = SaliencyMask::from_bits(bits.clone(), 4, 4).unwrap();
        let img = attention_column(&m, image(), Some(&mask), 1, 1).unwrap();
        assert_eq!(img.data.len(), 16);
        for (u, &b) in bits.iter().enumerate() {
            if !b {
                assert_eq!(img.data[u], 0);
            }
        }
        let back = Image::decode(&img.encode(), std::path::Path::new("a.pgm")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn out_of_range_pixel_is_an_error() {
        let m = model();
        let mask = SaliencyMask::all_salient(4, 4);
        assert!(attention_column(&m, image(), Some(&mask), 4, 0).is_err());
        assert!(attention_column(&m, image(), Some(&mask), 0, 4).is_err());
    }

    #[test]
    fn one_heatmap_per_present_class() {
        let m = model();
        let labels = ImageLabels::new(vec![true, false, true]);
        let mask = SaliencyMask::all_salient(4, 4);
        let maps = cam_heatmaps(&m, image(), &labels, Some(&mask), CamSource::Ensemble).unwrap();
        assert_eq!(maps.iter().map(|(z, _)| *z).collect::<Vec<_>>(), vec![0, 2]);
    }
}
