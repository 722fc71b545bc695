//! Procedural background textures and class shapes.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Background textures. `Waves` is the one paired with the biased class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Waves,
    Grass,
    Bricks,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Waves, Texture::Grass, Texture::Bricks];

    /// RGB before per-pixel noise, with a per-image `phase`.
    pub fn color(self, x: usize, y: usize, phase: f64) -> [f64; 3] {
        let (xf, yf) = (x as f64, y as f64);
        match self {
            Texture::Waves => {
                let s = libm::sin(yf * 0.9 + phase + 0.8 * libm::sin(xf * 0.35 + phase));
                [40.0 + 15.0 * s, 90.0 + 25.0 * s, 160.0 + 30.0 * s]
            }
            Texture::Grass => {
                let s = libm::sin(xf * 1.7 + phase) * libm::cos(yf * 0.45 + 0.3 * xf);
                [70.0 + 12.0 * s, 125.0 + 30.0 * s, 55.0 + 10.0 * s]
            }
            Texture::Bricks => {
                let row = (y + (phase as usize % 4)) / 6;
                let shift = if row % 2 == 0 { 0 } else { 5 };
                let mortar = (y + (phase as usize % 4)) % 6 == 0 || (x + shift) % 10 == 0;
                if mortar {
                    [200.0, 195.0, 185.0]
                } else {
                    [165.0, 120.0, 90.0]
                }
            }
        }
    }
}

/// One shape per class, in class order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Plus,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Plus, Shape::Ring];

    /// Base RGB of the class drawn with this shape.
    pub fn color(self) -> [f64; 3] {
        match self {
            Shape::Circle => [215.0, 45.0, 40.0],
            Shape::Square => [230.0, 205.0, 45.0],
            Shape::Triangle => [195.0, 60.0, 195.0],
            Shape::Plus => [240.0, 140.0, 30.0],
            Shape::Ring => [60.0, 215.0, 210.0],
        }
    }

    /// Whether the offset `(dx, dy)` from the centre lies inside a shape of
    /// radius `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Triangle => dy <= 0.7 * r && dy >= -r && dx.abs() <= (dy + r) / 1.7,
            Shape::Plus => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
        }
    }
}

/// A placed shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Placement {
    pub fn covers(&self, x: usize, y: usize) -> bool {
        self.shape.contains(x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy, self.radius)
    }

    /// Pixel-space bounding box `(x0, y0, x1, y1)`, exclusive upper ends,
    /// clipped to `size`.
    pub fn bounds(&self, size: usize) -> (usize, usize, usize, usize) {
        let lo = |c: f64| (c - self.radius - 1.0).max(0.0) as usize;
        let hi = |c: f64| ((c + self.radius + 1.0).max(0.0) as usize).min(size);
        (lo(self.cx), lo(self.cy), hi(self.cx), hi(self.cy))
    }
}

/// Uniform noise in `[-amp, amp]`.
pub fn jitter<R: Rng + ?Sized>(rng: &mut R, amp: f64) -> f64 {
    if amp == 0.0 {
        0.0
    } else {
        rng.random_range(-amp..=amp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_contain_their_centre_except_ring() {
        for s in Shape::ALL {
            assert_eq!(s.contains(0.0, 0.0, 10.0), s != Shape::Ring, "{s:?}");
            assert!(!s.contains(11.0, 11.0, 10.0));
        }
        assert!(Shape::Ring.contains(9.0, 0.0, 10.0));
    }

    #[test]
    fn shape_colors_are_distinct() {
        for (i, a) in Shape::ALL.iter().enumerate() {
            for b in &Shape::ALL[i + 1..] {
                assert_ne!(a.color(), b.color());
            }
        }
    }
}
