//! Seed masks and the rules that mine them from activation maps and
//! saliency.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{max_normalize, CamSource, CamStack};
use crate::real::Real;

/// Image-level labels: `present[m]` is `y_m = +1`, otherwise `y_m = −1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageLabels {
    present: Vec<bool>,
}

impl ImageLabels {
    pub fn new(present: Vec<bool>) -> Self {
        Self { present }
    }

    /// From `±1` entries.
    pub fn from_signs(signs: &[i8]) -> Result<Self> {
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::Config("image labels must be +1 or -1".into()));
        }
        Ok(Self::new(signs.iter().map(|&s| s == 1).collect()))
    }

    pub fn num_classes(&self) -> usize {
        self.present.len()
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.present[class]
    }

    pub fn sign(&self, class: usize) -> f64 {
        if self.present[class] {
            1.0
        } else {
            -1.0
        }
    }

    /// Zero-based indices of the present classes.
    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.present.iter().enumerate().filter(|(_, &p)| p).map(|(i, _)| i)
    }

    pub fn count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }
}

/// Per-pixel seed labels: `0` background, `1..=M` foreground class,
/// [`SeedMask::UNLABELED`] otherwise. The encoding doubles as the on-disk
/// PGM palette.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SeedMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SeedMask {
    pub const BACKGROUND: u8 = 0;
    pub const UNLABELED: u8 = 255;

    pub fn unlabeled(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![Self::UNLABELED; height * width],
        }
    }

    /// Validates that every label is background, unlabeled or in `1..=num_classes`.
    pub fn from_labels(height: usize, width: usize, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "seed_mask",
                lhs: vec![height, width],
                rhs: vec![labels.len()],
            });
        }
        if let Some((index, &label)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l != Self::UNLABELED && l as usize > num_classes)
        {
            return Err(Error::LabelRange {
                label,
                classes: num_classes,
                index,
            });
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, index: usize) -> u8 {
        self.labels[index]
    }

    pub fn set(&mut self, index: usize, label: u8) {
        self.labels[index] = label;
    }

    /// `Λ_z` for a one-based foreground class `z`.
    pub fn class_pixels(&self, class: u8) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(move |(_, &l)| l == class).map(|(i, _)| i)
    }

    pub fn background_pixels(&self) -> impl Iterator<Item = usize> + '_ {
        self.class_pixels(Self::BACKGROUND)
    }

    /// One-based classes with at least one seed (`Z`).
    pub fn present_classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..255u8).filter(|&z| seen[z as usize]).collect()
    }

    pub fn count_foreground(&self) -> usize {
        self.labels
            .iter()
            .filter(|&&l| l != Self::BACKGROUND && l != Self::UNLABELED)
            .count()
    }

    pub fn count_background(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Self::BACKGROUND).count()
    }

    /// Nearest-neighbour downsampling: each `stride×stride` block takes the
    /// label of its centre pixel.
    pub fn downsample(&self, stride: usize) -> Result<Self> {
        if stride == 0 || self.height % stride != 0 || self.width % stride != 0 {
            return Err(Error::IndivisibleSize {
                height: self.height,
                width: self.width,
                stride,
            });
        }
        let (h, w) = (self.height / stride, self.width / stride);
        let c = stride / 2;
        let labels = (0..h * w)
            .map(|i| self.labels[((i / w) * stride + c) * self.width + (i % w) * stride + c])
            .collect();
        Ok(Self {
            height: h,
            width: w,
            labels,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let labels = (0..self.labels.len())
            .map(|i| {
                let (r, c) = (i / self.width, i % self.width);
                self.labels[r * self.width + self.width - 1 - c]
            })
            .collect();
        Self {
            height: self.height,
            width: self.width,
            labels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedThresholds {
    /// Threshold on baseline CAMs for the initial foreground seeds.
    pub initial: f64,
    /// Threshold on the final CAMs for foreground seeds.
    pub alpha: f64,
    /// Saliency below this becomes a background seed.
    pub beta: f64,
}

impl Default for SeedThresholds {
    fn default() -> Self {
        Self {
            initial: 0.3,
            alpha: 0.2,
            beta: 0.06,
        }
    }
}

impl SeedThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("initial", self.initial), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(alloc::format!("threshold {name}={v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Foreground-only seeds: pixel `u` takes the present class with the largest
/// map value among those exceeding `threshold`. Everything else is
/// unlabeled.
pub fn initial_seeds<T: Real>(cams: &CamStack<T>, labels: &ImageLabels, threshold: f64) -> Result<SeedMask> {
    if cams.num_classes() != labels.num_classes() {
        return Err(Error::ShapeMismatch {
            op: "initial_seeds",
            lhs: cams.maps.shape().to_vec(),
            rhs: vec![labels.num_classes()],
        });
    }
    let (h, w) = (cams.height(), cams.width());
    let mut mask = SeedMask::unlabeled(h, w);
    let t = T::of(threshold);
    for u in 0..h * w {
        let mut best: Option<(usize, T)> = None;
        for z in labels.classes() {
            let v = cams.map(z)[u];
            if v > t && best.map_or(true, |(_, b)| v > b) {
                best = Some((z, v));
            }
        }
        if let Some((z, _)) = best {
            mask.set(u, (z + 1) as u8);
        }
    }
    Ok(mask)
}

/// Per-class sum of two CAM stacks, renormalised so each map peaks at 1.
pub fn ensemble_cams<T: Real>(cls: &CamStack<T>, seg: &CamStack<T>) -> Result<CamStack<T>> {
    if cls.maps.shape() != seg.maps.shape() {
        return Err(Error::ShapeMismatch {
            op: "ensemble_cams",
            lhs: cls.maps.shape().to_vec(),
            rhs: seg.maps.shape().to_vec(),
        });
    }
    let mut maps = cls.maps.clone();
    maps.axpy(T::one(), &seg.maps);
    max_normalize(&mut maps);
    Ok(CamStack {
        maps,
        source: CamSource::Ensemble,
    })
}

/// Final seeds at saliency resolution: foreground by `alpha` on `cams`
/// (nearest-upsampled if coarser), background where `saliency < beta`, and
/// unlabeled where both rules fire.
pub fn final_seeds<T: Real>(
    cams: &CamStack<T>,
    saliency: &[f32],
    height: usize,
    width: usize,
    labels: &ImageLabels,
    alpha: f64,
    beta: f64,
) -> Result<SeedMask> {
    let cams = fit_resolution(cams, height, width)?;
    if saliency.len() != height * width {
        return Err(Error::ShapeMismatch {
            op: "final_seeds",
            lhs: vec![height, width],
            rhs: vec![saliency.len()],
        });
    }
    let mut mask = initial_seeds(&cams, labels, alpha)?;
    for (u, &s) in saliency.iter().enumerate() {
        if (s as f64) < beta {
            let fg = mask.get(u) != SeedMask::UNLABELED;
            mask.set(u, if fg { SeedMask::UNLABELED } else { SeedMask::BACKGROUND });
        }
    }
    Ok(mask)
}

/// Nearest-neighbour upsampling of `cams` to `height×width` when needed.
pub fn fit_resolution<T: Real>(cams: &CamStack<T>, height: usize, width: usize) -> Result<CamStack<T>> {
    let (h, w) = (cams.height(), cams.width());
    if (h, w) == (height, width) {
        return Ok(cams.clone());
    }
    if height % h != 0 || width % w != 0 || height / h != width / w {
        return Err(Error::ShapeMismatch {
            op: "fit_resolution",
            lhs: cams.maps.shape().to_vec(),
            rhs: vec![height, width],
        });
    }
    Ok(cams.upsample(height / h))
}

/// Strong-annotation override: the binary foreground mask of `gt` replaces
/// the saliency map and `gt` itself becomes the seed mask.
pub fn semi_substitute(gt: &[u8], height: usize, width: usize, num_classes: usize) -> Result<(Vec<f32>, SeedMask)> {
    let seeds = SeedMask::from_labels(height, width, gt.to_vec(), num_classes)?;
    if let Some(index) = gt.iter().position(|&l| l == SeedMask::UNLABELED) {
        return Err(Error::LabelRange {
            label: SeedMask::UNLABELED,
            classes: num_classes,
            index,
        });
    }
    let saliency = gt.iter().map(|&l| if l == SeedMask::BACKGROUND { 0.0 } else { 1.0 }).collect();
    Ok((saliency, seeds))
}
