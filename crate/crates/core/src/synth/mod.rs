//! Deterministic synthetic segmentation data: coloured shapes on textured
//! backgrounds, with image labels, ground-truth masks and a corruptible
//! saliency oracle.
//!
//! Every sample draws from its own ChaCha8 stream: the generator is seeded
//! with `rng_seed` and the stream number is the sample's global index
//! (training samples first, then validation). Samples are therefore
//! independent of each other and of generation order.

mod render;
mod saliency;

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use render::{Placement, Shape, Texture};
pub use saliency::{corrupt_saliency, SaliencyCorruption};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::seeds::{ImageLabels, SeedMask};
use crate::tensor::Tensor;

/// Fraction of each shape's area that must stay unoccluded.
pub const MIN_VISIBLE: f64 = 0.3;

/// Colour that shaded shapes fade towards.
pub const NEUTRAL: [f64; 3] = [128.0, 128.0, 128.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape radius range as a fraction of `image_size`.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Per-channel uniform noise amplitude on shapes; backgrounds get half.
    pub color_noise: f64,
    /// Fade of the class colour towards [`NEUTRAL`] with distance from the
    /// shape centre: the colour weight is `max(0, 1 − shading·d)` for `d`
    /// the distance in radii. 0 draws flat shapes.
    pub shading: f64,
    /// When set, `biased_class` is only ever drawn inside a
    /// [`Texture::Waves`] region, and that texture appears only in images
    /// containing it.
    pub co_occurrence_bias: bool,
    /// One-based class index.
    pub biased_class: usize,
    pub saliency_corruption: SaliencyCorruption,
    pub rng_seed: u64,
    pub train: usize,
    pub val: usize,
    /// Placement retries per shape.
    pub max_attempts: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 5,
            min_shapes: 1,
            max_shapes: 3,
            min_radius: 0.12,
            max_radius: 0.22,
            color_noise: 20.0,
            shading: 0.0,
            co_occurrence_bias: false,
            biased_class: 1,
            saliency_corruption: SaliencyCorruption::default(),
            rng_seed: 0,
            train: 200,
            val: 50,
            max_attempts: 200,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.num_classes == 0 || self.num_classes > Shape::ALL.len() {
            return fail("num_classes must be between 1 and 5");
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes || self.max_shapes > self.num_classes {
            return fail("need 1 <= min_shapes <= max_shapes <= num_classes");
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius && self.max_radius < 0.5) {
            return fail("need 0 < min_radius <= max_radius < 0.5");
        }
        if !(0.0..=4.0).contains(&self.shading) {
            return fail("shading must lie in [0, 4]");
        }
        if self.image_size < 8 {
            return fail("image_size must be at least 8");
        }
        if self.co_occurrence_bias && !(1..=self.num_classes).contains(&self.biased_class) {
            return fail("biased_class must be a valid one-based class index");
        }
        if self.color_noise < 0.0 || !self.color_noise.is_finite() {
            return fail("color_noise must be non-negative");
        }
        self.saliency_corruption.validate()
    }
}

/// Two-region background split along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    /// Split along x (left/right) when true, along y otherwise.
    pub vertical: bool,
    /// Extent of the first region along the split axis.
    pub split: usize,
    /// Whether region A is the low-coordinate side.
    pub a_first: bool,
    pub textures: [Texture; 2],
    pub phase: f64,
}

impl Layout {
    /// Region index (0 = A, 1 = B) of a pixel in a `size×size` image.
    pub fn region(&self, x: usize, y: usize, size: usize) -> usize {
        let coord = if self.vertical { x } else { y };
        let in_a = if self.a_first { coord < self.split } else { coord >= size - self.split };
        if in_a {
            0
        } else {
            1
        }
    }

    pub fn texture_at(&self, x: usize, y: usize, size: usize) -> Texture {
        self.textures[self.region(x, y, size)]
    }

    /// Coordinate interval `[lo, hi)` of region A along the split axis.
    fn a_interval(&self, size: usize) -> (usize, usize) {
        if self.a_first {
            (0, self.split)
        } else {
            (size - self.split, size)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    /// Planar `3×H×W` RGB.
    pub image: Vec<u8>,
    pub labels: ImageLabels,
    /// `0` background, `1..=M` classes.
    pub gt: Option<Vec<u8>>,
    /// Possibly corrupted saliency in `[0, 1]`.
    pub saliency: Vec<f32>,
    pub layout: Option<Layout>,
}

impl Sample {
    /// `3×H×W` tensor on the `[0, 255]` scale.
    pub fn image_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[3, self.height, self.width], |i| T::of(self.image[i] as f64))
    }

    /// `3×H×W` tensor scaled into `[-1, 1]`, as fed to the networks.
    pub fn network_input<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[3, self.height, self.width], |i| T::of(self.image[i] as f64 / 127.5 - 1.0))
    }

    /// Binary saliency derived from the ground truth.
    pub fn clean_saliency(&self) -> Result<Vec<f32>> {
        let gt = self.gt.as_ref().ok_or(Error::MissingGroundTruth(self.index))?;
        Ok(clean_saliency(gt))
    }

    pub fn gt_mask(&self) -> Result<SeedMask> {
        let gt = self.gt.as_ref().ok_or(Error::MissingGroundTruth(self.index))?;
        SeedMask::from_labels(self.height, self.width, gt.clone(), self.labels.num_classes())
    }
}

/// `1` on foreground, `0` on background.
pub fn clean_saliency(gt: &[u8]) -> Vec<f32> {
    gt.iter().map(|&l| if l == SeedMask::BACKGROUND { 0.0 } else { 1.0 }).collect()
}

/// Generates `cfg.train + cfg.val` samples.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.train + cfg.val)
        .map(|i| {
            let split = if i < cfg.train { Split::Train } else { Split::Val };
            generate_sample(cfg, i, split)
        })
        .collect()
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn generate_sample(cfg: &DatasetConfig, index: usize, split: Split) -> Result<Sample> {
    let size = cfg.image_size;
    let m = cfg.num_classes;
    let mut rng = sample_rng(cfg.rng_seed, index);

    let k = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut classes: Vec<usize> = sample_indices(&mut rng, m, k).into_iter().collect();
    classes.sort_unstable();
    let biased = cfg.co_occurrence_bias.then(|| cfg.biased_class - 1);
    let has_biased = biased.is_some_and(|b| classes.contains(&b));
    if let Some(b) = biased.filter(|_| has_biased) {
        // The constrained shape is placed first.
        classes.retain(|&c| c != b);
        classes.insert(0, b);
    }

    let plain = [Texture::Grass, Texture::Bricks];
    let pick_any = |rng: &mut ChaCha8Rng| Texture::ALL[rng.random_range(0..Texture::ALL.len())];
    let pick_plain = |rng: &mut ChaCha8Rng| plain[rng.random_range(0..plain.len())];
    let vertical = rng.random_bool(0.5);
    let a_first = rng.random_bool(0.5);
    let split_at = ((rng.random_range(0.5..0.7) * size as f64) as usize).clamp(1, size - 1);
    let textures = match (cfg.co_occurrence_bias, has_biased) {
        (true, true) => [Texture::Waves, pick_plain(&mut rng)],
        (true, false) => [pick_plain(&mut rng), pick_plain(&mut rng)],
        (false, _) => [pick_any(&mut rng), pick_any(&mut rng)],
    };
    let phase = rng.random_range(0.0..6.0);
    let layout = Layout {
        vertical,
        split: split_at,
        a_first,
        textures,
        phase,
    };

    let mut owner = vec![0u8; size * size];
    let mut placed: Vec<(u8, usize)> = Vec::new();
    let mut placements: Vec<Placement> = Vec::new();
    for &class in &classes {
        let shape = Shape::ALL[class];
        let constrain = Some(class) == biased;
        let mut ok = false;
        for _ in 0..cfg.max_attempts {
            let r = rng.random_range(cfg.min_radius..=cfg.max_radius) * size as f64;
            let (mut lo_x, mut hi_x) = (r, size as f64 - r);
            let (mut lo_y, mut hi_y) = (r, size as f64 - r);
            if constrain {
                let (a0, a1) = layout.a_interval(size);
                let (lo, hi) = if vertical { (&mut lo_x, &mut hi_x) } else { (&mut lo_y, &mut hi_y) };
                *lo = lo.max(a0 as f64 + r);
                *hi = hi.min(a1 as f64 - r);
            }
            if lo_x >= hi_x || lo_y >= hi_y {
                continue;
            }
            let p = Placement {
                shape,
                cx: rng.random_range(lo_x..hi_x),
                cy: rng.random_range(lo_y..hi_y),
                radius: r,
            };
            let label = (class + 1) as u8;
            if let Some(next) = try_place(&owner, &placed, &p, label, size) {
                owner = next;
                let area = owner.iter().filter(|&&o| o == label).count();
                placed.push((label, area));
                placements.push(p);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Placement {
                sample: index,
                shapes: classes.len(),
                attempts: cfg.max_attempts,
            });
        }
    }

    let mut image = vec![0u8; 3 * size * size];
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let u = y * size + x;
            let (base, amp) = match owner[u] {
                0 => (layout.texture_at(x, y, size).color(x, y, phase), cfg.color_noise / 2.0),
                o => {
                    let p = placements.iter().find(|p| p.shape == Shape::ALL[o as usize - 1]).expect("owner was placed");
                    (shaded_color(p, x, y, cfg.shading), cfg.color_noise)
                }
            };
            for c in 0..3 {
                let v = base[c] + render::jitter(&mut rng, amp);
                image[c * plane + u] = v.clamp(0.0, 255.0).round() as u8;
            }
        }
    }

    let mut present = vec![false; m];
    for &o in &owner {
        if o > 0 {
            present[o as usize - 1] = true;
        }
    }
    let clean = clean_saliency(&owner);
    let saliency = corrupt_saliency(&clean, size, size, &cfg.saliency_corruption, &mut rng);
    Ok(Sample {
        index,
        split,
        height: size,
        width: size,
        image,
        labels: ImageLabels::new(present),
        gt: Some(owner),
        saliency,
        layout: Some(layout),
    })
}

fn shaded_color(p: &Placement, x: usize, y: usize, shading: f64) -> [f64; 3] {
    let base = p.shape.color();
    if shading == 0.0 {
        return base;
    }
    let (dx, dy) = (x as f64 + 0.5 - p.cx, y as f64 + 0.5 - p.cy);
    let d = libm::sqrt(dx * dx + dy * dy) / p.radius;
    let w = (1.0 - shading * d).max(0.0);
    core::array::from_fn(|c| NEUTRAL[c] + (base[c] - NEUTRAL[c]) * w)
}

/// Draws `p` over `owner` and returns the new ownership map, or `None` if
/// the new shape or any earlier one would keep less than 30% of its area.
fn try_place(owner: &[u8], placed: &[(u8, usize)], p: &Placement, label: u8, size: usize) -> Option<Vec<u8>> {
    let mut next = owner.to_vec();
    let (x0, y0, x1, y1) = p.bounds(size);
    let mut area = 0;
    for y in y0..y1 {
        for x in x0..x1 {
            if p.covers(x, y) {
                next[y * size + x] = label;
                area += 1;
            }
        }
    }
    if area == 0 {
        return None;
    }
    for &(prev, full) in placed {
        let visible = next.iter().filter(|&&o| o == prev).count();
        if (visible as f64) < MIN_VISIBLE * full as f64 {
            return None;
        }
    }
    Some(next)
}
