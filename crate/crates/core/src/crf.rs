//! Fully-connected CRF mean-field inference, evaluated naively in `O(N²)`.
//!
//! Unaries are `−log Φ`. The pairwise term is a Potts model over the kernel
//! `k(i,j) = w_s·exp(−|p_i−p_j|²/2θ_γ²) + w_b·exp(−|p_i−p_j|²/2θ_α² − |I_i−I_j|²/2θ_β²)`.
//! Each round computes `m_l(i) = Σ_{j≠i} k(i,j) Q_l(j)` and sets
//! `Q_i(l) ∝ exp(−U_i(l) − Σ_{l'≠l} m_{l'}(i))`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LOG_FLOOR;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfParams {
    pub w_spatial: f64,
    pub w_bilateral: f64,
    /// Spatial kernel stddev, in pixels.
    pub theta_gamma: f64,
    /// Bilateral kernel spatial stddev, in pixels.
    pub theta_alpha: f64,
    /// Bilateral kernel colour stddev, in `[0, 255]` intensity units.
    pub theta_beta: f64,
    pub iterations: usize,
    /// Distance in pixels between neighbouring grid positions. Set to the
    /// network stride when running on a downsampled grid.
    pub spacing: f64,
    /// Wrap distances around the grid edges (torus).
    pub periodic: bool,
    pub max_positions: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            w_spatial: 3.0,
            w_bilateral: 5.0,
            theta_gamma: 3.0,
            theta_alpha: 30.0,
            theta_beta: 10.0,
            iterations: 5,
            spacing: 1.0,
            periodic: false,
            max_positions: 4096,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if self.w_spatial < 0.0 || self.w_bilateral < 0.0 {
            return Err(Error::Config("CRF kernel weights must be non-negative".into()));
        }
        if !(self.theta_gamma > 0.0 && self.theta_alpha > 0.0 && self.theta_beta > 0.0 && self.spacing > 0.0) {
            return Err(Error::Config("CRF standard deviations and spacing must be positive".into()));
        }
        Ok(())
    }
}

/// Dense pairwise kernel with a zero diagonal.
fn kernel_matrix<T: Real>(image: &Tensor<T>, params: &CrfParams) -> Vec<f64> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let n = h * w;
    let channels = image.shape()[0];
    let img = image.data();
    let axis_delta = |a: usize, b: usize, extent: usize| -> f64 {
        let d = a.abs_diff(b);
        let d = if params.periodic { d.min(extent - d) } else { d };
        d as f64 * params.spacing
    };
    let s_den = 2.0 * params.theta_gamma * params.theta_gamma;
    let a_den = 2.0 * params.theta_alpha * params.theta_alpha;
    let b_den = 2.0 * params.theta_beta * params.theta_beta;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dy = axis_delta(i / w, j / w, h);
            let dx = axis_delta(i % w, j % w, w);
            let d2 = dy * dy + dx * dx;
            let c2: f64 = (0..channels)
                .map(|c| {
                    let diff = img[c * n + i].as_f64() - img[c * n + j].as_f64();
                    diff * diff
                })
                .sum();
            let v = params.w_spatial * libm::exp(-d2 / s_den) + params.w_bilateral * libm::exp(-d2 / a_den - c2 / b_den);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

/// Mean-field inference. `image` is `3×H×W` on a `[0, 255]` scale and `phi`
/// holds an `L×H×W` per-position distribution. Returns `R` of the same
/// shape as `phi`.
pub fn mean_field<T: Real>(image: &Tensor<T>, phi: &Tensor<T>, params: &CrfParams) -> Result<Tensor<T>> {
    params.validate()?;
    if image.ndim() != 3 || phi.ndim() != 3 || image.shape()[1..] != phi.shape()[1..] {
        return Err(Error::ShapeMismatch {
            op: "mean_field",
            lhs: image.shape().to_vec(),
            rhs: phi.shape().to_vec(),
        });
    }
    let (l, h, w) = (phi.shape()[0], phi.shape()[1], phi.shape()[2]);
    let n = h * w;
    if n > params.max_positions {
        return Err(Error::CrfTooLarge {
            positions: n,
            cap: params.max_positions,
        });
    }
    let unary: Vec<f64> = phi.data().iter().map(|&p| -libm::log(p.as_f64().max(LOG_FLOOR))).collect();
    let mut q = vec![0.0; l * n];
    let mut logits = vec![0.0; l];
    let normalize = |u: usize, logits: &mut [f64], q: &mut [f64]| {
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in logits.iter_mut() {
            *v = libm::exp(*v - mx);
            total += *v;
        }
        for (c, v) in logits.iter().enumerate() {
            q[c * n + u] = v / total;
        }
    };
    for u in 0..n {
        for c in 0..l {
            logits[c] = -unary[c * n + u];
        }
        normalize(u, &mut logits, &mut q);
    }
    if params.iterations > 0 && (params.w_spatial > 0.0 || params.w_bilateral > 0.0) {
        let k = kernel_matrix(image, params);
        let mut msg = vec![0.0; l * n];
        for _ in 0..params.iterations {
            msg.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..l {
                let qc = &q[c * n..(c + 1) * n];
                for i in 0..n {
                    msg[c * n + i] = k[i * n..(i + 1) * n].iter().zip(qc).map(|(a, b)| a * b).sum();
                }
            }
            for u in 0..n {
                let total: f64 = (0..l).map(|c| msg[c * n + u]).sum();
                for c in 0..l {
                    let potts = total - msg[c * n + u];
                    logits[c] = -unary[c * n + u] - potts;
                }
                normalize(u, &mut logits, &mut q);
            }
        }
    }
    Tensor::new(phi.shape(), q.into_iter().map(T::of).collect())
}

/// Averages a `C×H×W` image over `stride×stride` blocks.
pub fn downsample_image<T: Real>(image: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::IndivisibleSize {
            height: h,
            width: w,
            stride,
        });
    }
    let (oh, ow) = (h / stride, w / stride);
    let inv = T::one() / T::of((stride * stride) as f64);
    let src = image.data();
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let ch = i / (oh * ow);
        let (r, col) = ((i / ow) % oh, i % ow);
        let mut total = T::zero();
        for y in r * stride..(r + 1) * stride {
            for x in col * stride..(col + 1) * stride {
                total += src[(ch * h + y) * w + x];
            }
        }
        total * inv
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_phi(rng: &mut ChaCha8Rng, l: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut t = Tensor::from_fn(&[l, h, w], |_| rng.random::<f64>() + 0.05);
        let n = h * w;
        for u in 0..n {
            let s: f64 = (0..l).map(|c| t.data()[c * n + u]).sum();
            for c in 0..l {
                t.data_mut()[c * n + u] /= s;
            }
        }
        t
    }

    #[test]
    fn no_pairwise_or_no_iterations_returns_phi() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::from_fn(&[3, 4, 5], |_| rng.random::<f64>() * 255.0);
        let phi = random_phi(&mut rng, 3, 4, 5);
        let zero = CrfParams {
            w_spatial: 0.0,
            w_bilateral: 0.0,
            ..CrfParams::default()
        };
        assert!(mean_field(&img, &phi, &zero).unwrap().max_abs_diff(&phi) < 1e-6);
        let t0 = CrfParams {
            iterations: 0,
            ..CrfParams::default()
        };
        assert!(mean_field(&img, &phi, &t0).unwrap().max_abs_diff(&phi) < 1e-6);
    }

    #[test]
    fn two_pixel_single_round_matches_closed_form() {
        // Pixels at (0,0) and (0,1) with colours differing by 10 in one channel.
        let img = Tensor::<f64>::from_f64(&[3, 1, 2], &[100.0, 110.0, 50.0, 50.0, 0.0, 0.0]).unwrap();
        let phi = Tensor::<f64>::from_f64(&[2, 1, 2], &[0.8, 0.3, 0.2, 0.7]).unwrap();
        let p = CrfParams {
            iterations: 1,
            ..CrfParams::default()
        };
        let r = mean_field(&img, &phi, &p).unwrap();
        let k = 3.0 * (-1.0f64 / 18.0).exp() + 5.0 * (-1.0f64 / 1800.0 - 100.0 / 200.0).exp();
        // Pixel 0 receives m_l = k·Q_l(1); Potts energy for label l is k·Q_{¬l}(1).
        let e0 = [k * 0.7, k * 0.3];
        let a = [0.8f64.ln() - e0[0], 0.2f64.ln() - e0[1]];
        let r0 = a[0].exp() / (a[0].exp() + a[1].exp());
        let e1 = [k * 0.2, k * 0.8];
        let b = [0.3f64.ln() - e1[0], 0.7f64.ln() - e1[1]];
        let r1 = b[0].exp() / (b[0].exp() + b[1].exp());
        assert!((r.data()[0] - r0).abs() < 1e-9);
        assert!((r.data()[1] - r1).abs() < 1e-9);
        assert!((r.data()[2] - (1.0 - r0)).abs() < 1e-9);
        assert!((r.data()[3] - (1.0 - r1)).abs() < 1e-9);
    }

    #[test]
    fn output_is_simplex_valued() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Tensor::from_fn(&[3, 6, 6], |_| rng.random::<f64>() * 255.0);
        let phi = random_phi(&mut rng, 4, 6, 6);
        let r = mean_field(&img, &phi, &CrfParams::default()).unwrap();
        for u in 0..36 {
            let s: f64 = (0..4).map(|c| r.data()[c * 36 + u]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(r.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn too_many_positions_is_an_error() {
        let p = CrfParams {
            max_positions: 10,
            ..CrfParams::default()
        };
        let img = Tensor::<f64>::zeros(&[3, 4, 4]);
        let phi = Tensor::full(&[2, 4, 4], 0.5);
        assert_eq!(
            mean_field(&img, &phi, &p).unwrap_err(),
            Error::CrfTooLarge {
                positions: 16,
                cap: 10
            }
        );
    }

    #[test]
    fn translation_equivariant_on_periodic_uniform_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w) = (5, 6);
        let img = Tensor::full(&[3, h, w], 128.0);
        let phi = random_phi(&mut rng, 3, h, w);
        let shift = |t: &Tensor<f64>| {
            Tensor::from_fn(t.shape(), |i| {
                let c = i / (h * w);
                let (r, col) = ((i / w) % h, i % w);
                t.data()[(c * h + r) * w + (col + w - 1) % w]
            })
        };
        let p = CrfParams {
            periodic: true,
            ..CrfParams::default()
        };
        let r = mean_field(&img, &phi, &p).unwrap();
        let rs = mean_field(&img, &shift(&phi), &p).unwrap();
        assert!(rs.max_abs_diff(&shift(&r)) < 1e-12);
    }

    #[test]
    fn smooths_noise_on_piecewise_constant_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w) = (12, 12);
        let truth: Vec<usize> = (0..h * w).map(|i| usize::from(i % w >= 6)).collect();
        let img = Tensor::from_fn(&[3, h, w], |i| if truth[i % (h * w)] == 1 { 200.0 } else { 40.0 });
        let mut phi = Tensor::zeros(&[2, h, w]);
        for u in 0..h * w {
            let p_true = if rng.random::<f64>() < 0.3 { 0.35 } else { 0.75 };
            phi.data_mut()[truth[u] * h * w + u] = p_true;
            phi.data_mut()[(1 - truth[u]) * h * w + u] = 1.0 - p_true;
        }
        let agree = |t: &Tensor<f64>| {
            (0..h * w)
                .filter(|&u| usize::from(t.data()[h * w + u] > t.data()[u]) == truth[u])
                .count()
        };
        let r = mean_field(&img, &phi, &CrfParams::default()).unwrap();
        assert!(agree(&r) >= agree(&phi));
    }

    #[test]
    fn block_average_downsampling() {
        let img = Tensor::<f64>::from_f64(&[1, 2, 4], &[0.0, 2.0, 4.0, 4.0, 2.0, 0.0, 4.0, 4.0]).unwrap();
        assert_eq!(downsample_image(&img, 2).unwrap().data(), &[1.0, 4.0]);
    }
}
