use alloc::vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Which network output a [`CamStack`] was read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamSource {
    /// Classifier-weighted features.
    Cls,
    /// Seed segmentation branch probabilities.
    Seg,
    /// Sum of the two, renormalised.
    Ensemble,
}

/// `M×H×W` class activation maps, each max-normalised into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CamStack<T> {
    pub maps: Tensor<T>,
    pub source: CamSource,
}

impl<T: Real> CamStack<T> {
    pub fn num_classes(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn map(&self, class: usize) -> &[T] {
        self.maps.channel(class)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> Self {
        let (m, h, w) = (self.num_classes(), self.height(), self.width());
        let (oh, ow) = (h * factor, w * factor);
        let src = self.maps.data();
        let maps = Tensor::from_fn(&[m, oh, ow], |i| {
            let c = i / (oh * ow);
            let r = (i / ow) % oh;
            let col = i % ow;
            src[(c * h + r / factor) * w + col / factor]
        });
        Self {
            maps,
            source: self.source,
        }
    }
}

/// Clamps at zero and divides each channel by its maximum; channels that are
/// non-positive everywhere become all-zero.
pub fn max_normalize<T: Real>(maps: &mut Tensor<T>) {
    let plane = maps.shape()[1] * maps.shape()[2];
    for ch in maps.data_mut().chunks_mut(plane) {
        ch.iter_mut().for_each(|v| *v = v.max(T::zero()));
        let mx = ch.iter().copied().fold(T::zero(), T::max);
        if mx > T::zero() {
            ch.iter_mut().for_each(|v| *v /= mx);
        }
    }
}

/// Class activation maps `Σ_c W_{c,z} · features_c(u)`, clamped and
/// max-normalised. Classes with `present[z] == false` get all-zero maps.
pub fn compute_cam<T: Real>(features: &Tensor<T>, weight: &Tensor<T>, present: &[bool]) -> Result<CamStack<T>> {
    if features.ndim() != 3 || weight.ndim() != 2 || weight.shape()[0] != features.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "compute_cam",
            lhs: features.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let (c, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let m = weight.shape()[1];
    if present.len() != m {
        return Err(Error::ShapeMismatch {
            op: "compute_cam",
            lhs: weight.shape().to_vec(),
            rhs: vec![present.len()],
        });
    }
    let plane = h * w;
    let mut maps = Tensor::zeros(&[m, h, w]);
    {
        let out = maps.data_mut();
        let fd = features.data();
        let wd = weight.data();
        for z in (0..m).filter(|&z| present[z]) {
            let dst = &mut out[z * plane..(z + 1) * plane];
            for ch in 0..c {
                let coef = wd[ch * m + z];
                for (o, &f) in dst.iter_mut().zip(&fd[ch * plane..(ch + 1) * plane]) {
                    *o += coef * f;
                }
            }
        }
    }
    max_normalize(&mut maps);
    Ok(CamStack {
        maps,
        source: CamSource::Cls,
    })
}
