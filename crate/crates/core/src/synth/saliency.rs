//! Saliency corruption: disk dilation, disk erosion, tile holes, then an
//! optional Gaussian blur that turns the binary map into a soft one.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencyCorruption {
    pub dilate_px: usize,
    pub erode_px: usize,
    /// Probability that a `hole_tile×hole_tile` tile holding foreground is
    /// cleared.
    pub hole_prob: f64,
    pub hole_tile: usize,
    /// Standard deviation in pixels of the final blur; 0 keeps the map
    /// binary.
    pub blur_sigma: f64,
}

impl Default for SaliencyCorruption {
    fn default() -> Self {
        Self {
            dilate_px: 0,
            erode_px: 0,
            hole_prob: 0.0,
            hole_tile: 4,
            blur_sigma: 0.0,
        }
    }
}

impl SaliencyCorruption {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hole_prob) {
            return Err(Error::Config("hole_prob must lie in [0, 1]".into()));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::Config("blur_sigma must be finite and non-negative".into()));
        }
        if self.hole_tile == 0 {
            return Err(Error::Config("hole_tile must be positive".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.dilate_px == 0 && self.erode_px == 0 && self.hole_prob == 0.0 && self.blur_sigma == 0.0
    }
}

fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Binary morphology with a disk. Dilation sets a pixel if any in-bounds
/// neighbour is set; erosion keeps it only if every in-bounds neighbour is.
fn morph(src: &[bool], h: usize, w: usize, radius: usize, dilate: bool) -> Vec<bool> {
    if radius == 0 {
        return src.to_vec();
    }
    let offs = disk(radius);
    (0..h * w)
        .map(|u| {
            let (y, x) = ((u / w) as isize, (u % w) as isize);
            let mut hits = offs.iter().filter_map(|&(dx, dy)| {
                let (yy, xx) = (y + dy, x + dx);
                (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w).then(|| src[yy as usize * w + xx as usize])
            });
            if dilate {
                hits.any(|b| b)
            } else {
                hits.all(|b| b)
            }
        })
        .collect()
}

/// Separable Gaussian blur truncated at three standard deviations, with
/// the kernel renormalised at the borders.
fn blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = libm::ceil(3.0 * sigma) as isize;
    let kernel: Vec<f64> = (-r..=r).map(|d| libm::exp(-((d * d) as f64) / (2.0 * sigma * sigma))).collect();
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        (0..h * w)
            .map(|u| {
                let (y, x) = ((u / w) as isize, (u % w) as isize);
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, d) in (-r..=r).enumerate() {
                    let (yy, xx) = if along_x { (y, x + d) } else { (y + d, x) };
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += kernel[k] * src[yy as usize * w + xx as usize];
                        norm += kernel[k];
                    }
                }
                acc / norm
            })
            .collect()
    };
    pass(&pass(src, true), false)
}

/// Applies dilation, erosion, random tile holes and blur to a binary
/// saliency map. Values `≥ 0.5` count as salient. Outputs are multiples of
/// `1/255`, so they survive an 8-bit round trip exactly.
pub fn corrupt_saliency<R: Rng + ?Sized>(clean: &[f32], h: usize, w: usize, cfg: &SaliencyCorruption, rng: &mut R) -> Vec<f32> {
    if cfg.is_identity() {
        return clean.to_vec();
    }
    let mut bits: Vec<bool> = clean.iter().map(|&v| v >= 0.5).collect();
    bits = morph(&bits, h, w, cfg.dilate_px, true);
    bits = morph(&bits, h, w, cfg.erode_px, false);
    if cfg.hole_prob > 0.0 {
        let t = cfg.hole_tile;
        for ty in (0..h).step_by(t) {
            for tx in (0..w).step_by(t) {
                let cells = || (ty..(ty + t).min(h)).flat_map(move |y| (tx..(tx + t).min(w)).map(move |x| y * w + x));
                if cells().any(|u| bits[u]) && rng.random_bool(cfg.hole_prob) {
                    for u in cells() {
                        bits[u] = false;
                    }
                }
            }
        }
    }
    let mut soft: Vec<f64> = bits.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
    if cfg.blur_sigma > 0.0 {
        soft = blur(&soft, h, w, cfg.blur_sigma);
    }
    soft.into_iter().map(|v| libm::round(v * 255.0) as u8 as f32 / 255.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square(size: usize, lo: usize, hi: usize) -> Vec<f32> {
        (0..size * size)
            .map(|u| {
                let (y, x) = (u / size, u % size);
                if (lo..hi).contains(&y) && (lo..hi).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn zero_corruption_is_identity() {
        let s = square(16, 4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(corrupt_saliency(&s, 16, 16, &SaliencyCorruption::default(), &mut rng), s);
    }

    #[test]
    fn closing_keeps_square_away_from_corners() {
        let s = square(32, 8, 24);
        let cfg = SaliencyCorruption {
            dilate_px: 2,
            erode_px: 2,
            ..Default::default()
        };
        let out = corrupt_saliency(&s, 32, 32, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(out, s);
    }

    #[test]
    fn dilation_grows_and_erosion_shrinks() {
        let s = square(32, 8, 24);
        let grow = SaliencyCorruption {
            dilate_px: 3,
            ..Default::default()
        };
        let shrink = SaliencyCorruption {
            erode_px: 3,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let area = |v: &[f32]| v.iter().filter(|&&x| x == 1.0).count();
        assert!(area(&corrupt_saliency(&s, 32, 32, &grow, &mut rng)) > area(&s));
        assert!(area(&corrupt_saliency(&s, 32, 32, &shrink, &mut rng)) < area(&s));
    }

    #[test]
    fn blur_softens_edges_and_preserves_the_half_level_set() {
        let s = square(32, 8, 24);
        let cfg = SaliencyCorruption {
            blur_sigma: 2.0,
            ..Default::default()
        };
        let out = corrupt_saliency(&s, 32, 32, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(out.iter().any(|&v| v > 0.06 && v < 0.5));
        assert!(out[16 * 32 + 16] > 0.99);
        assert!(out[0] < 0.01);
        for (u, (&a, &b)) in s.iter().zip(&out).enumerate() {
            let (y, x) = (u / 32, u % 32);
            let far = |c: usize| c < 6 || c > 25 || (10..=21).contains(&c);
            if far(y) && far(x) {
                assert_eq!(a >= 0.5, b >= 0.5, "pixel {u}");
            }
        }
        for v in &out {
            assert_eq!((v * 255.0).round() as u8 as f32 / 255.0, *v);
        }
    }
}
