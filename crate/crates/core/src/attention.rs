//! Saliency-guided self-attention.
//!
//! Given features `X ∈ R^{C×H×W}` and a binary saliency mask `B` over the
//! `N = H·W` positions:
//!
//! * `P_ij = K_iᵀ Q_j` with `K`, `Q` from two `1×1` convolutions of `X`,
//! * `S_ij = 1(B_i == B_j)`,
//! * `D_ij = [P_ij]₊·S_ij / max(Σ_j [P_ij]₊·S_ij, ε)`,
//! * `E_i = γ Σ_j D_ij X_j + X_i`, with `γ` a learned scalar starting at 0.
//!
//! Negative similarities are clamped before normalization so every row of
//! `D` is a convex combination (or all-zero when its masked support is
//! empty). `S` is never materialized outside of [`saliency_attention`].

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Conv2dAttrs, Graph, Var};
use crate::nn::{he_conv, ParamStore, Session};
use crate::real::Real;
use crate::tensor::Tensor;

pub const KEY_WEIGHT: &str = "attention.key.weight";
pub const KEY_BIAS: &str = "attention.key.bias";
pub const QUERY_WEIGHT: &str = "attention.query.weight";
pub const QUERY_BIAS: &str = "attention.query.bias";
pub const GAMMA: &str = "attention.gamma";

/// Denominator floor of the row normalization.
pub const ROW_EPS: f64 = 1e-8;

/// Default binarization threshold of the saliency map.
pub const DEFAULT_SALIENCY_THRESHOLD: f64 = 0.5;

/// Inserts key/query embeddings (`C→C`) and `γ = 0`.
pub fn init_attention_params<T: Real, R: Rng + ?Sized>(rng: &mut R, channels: usize, params: &mut ParamStore<T>) {
    params.insert(KEY_WEIGHT, he_conv(rng, channels, channels, 1));
    params.insert(KEY_BIAS, Tensor::zeros(&[channels]));
    params.insert(QUERY_WEIGHT, he_conv(rng, channels, channels, 1));
    params.insert(QUERY_BIAS, Tensor::zeros(&[channels]));
    params.insert(GAMMA, Tensor::scalar(T::zero()));
}

/// Binary salient/non-salient flag per feature position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaliencyMask {
    bits: Vec<bool>,
    height: usize,
    width: usize,
}

impl SaliencyMask {
    /// Every position salient; equivalent to unguided self-attention.
    pub fn all_salient(height: usize, width: usize) -> Self {
        Self {
            bits: alloc::vec![true; height * width],
            height,
            width,
        }
    }

    pub fn from_bits(bits: Vec<bool>, height: usize, width: usize) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "saliency_mask",
                lhs: alloc::vec![height, width],
                rhs: alloc::vec![bits.len()],
            });
        }
        Ok(Self { bits, height, width })
    }

    /// Accepts only exact 0/1 values.
    pub fn from_binary(values: &[f64], height: usize, width: usize) -> Result<Self> {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinaryMask { index, value });
        }
        Self::from_bits(values.iter().map(|&v| v == 1.0).collect(), height, width)
    }

    /// Averages an image-resolution saliency map over `stride×stride` blocks
    /// and marks blocks whose mean reaches `threshold` as salient.
    pub fn from_saliency(saliency: &[f32], height: usize, width: usize, stride: usize, threshold: f64) -> Result<Self> {
        if saliency.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "saliency_mask",
                lhs: alloc::vec![height, width],
                rhs: alloc::vec![saliency.len()],
            });
        }
        if stride == 0 || height % stride != 0 || width % stride != 0 {
            return Err(Error::IndivisibleSize { height, width, stride });
        }
        let (h, w) = (height / stride, width / stride);
        let area = (stride * stride) as f64;
        let bits = (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                let mut total = 0.0;
                for y in r * stride..(r + 1) * stride {
                    for x in c * stride..(c + 1) * stride {
                        total += saliency[y * width + x] as f64;
                    }
                }
                total / area >= threshold
            })
            .collect();
        Self::from_bits(bits, h, w)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn flip_horizontal(&self) -> Self {
        let bits = (0..self.bits.len())
            .map(|i| {
                let (r, c) = (i / self.width, i % self.width);
                self.bits[r * self.width + (self.width - 1 - c)]
            })
            .collect();
        Self {
            bits,
            height: self.height,
            width: self.width,
        }
    }
}

/// `P = Kᵀ Q` over flattened positions of `x: C×H×W`.
pub fn spatial_attention<T: Real>(sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
    let kw = sess.p(KEY_WEIGHT)?;
    let kb = sess.p(KEY_BIAS)?;
    let qw = sess.p(QUERY_WEIGHT)?;
    let qb = sess.p(QUERY_BIAS)?;
    let g = &mut sess.graph;
    let shape = g.value(x).shape().to_vec();
    let (c, n) = (shape[0], shape[1] * shape[2]);
    let k = g.conv2d(x, kw, Some(kb), Conv2dAttrs::POINTWISE)?;
    let q = g.conv2d(x, qw, Some(qb), Conv2dAttrs::POINTWISE)?;
    let k = g.reshape(k, &[c, n])?;
    let q = g.reshape(q, &[c, n])?;
    let kt = g.transpose(k)?;
    g.matmul(kt, q)
}

/// Materialized `S_ij = 1(B_i == B_j)`; for tests and inspection only.
pub fn saliency_attention<T: Real>(mask: &SaliencyMask) -> Tensor<T> {
    let n = mask.len();
    let b = mask.bits();
    Tensor::from_fn(&[n, n], |i| if b[i / n] == b[i % n] { T::one() } else { T::zero() })
}

/// Masked, clamped, row-normalized context attention `D`.
pub fn context_attention<T: Real>(g: &mut Graph<T>, p: Var, mask: Option<&SaliencyMask>) -> Result<Var> {
    g.masked_row_normalize(p, mask.map(|m| m.bits().to_vec()), T::of(ROW_EPS))
}

/// `E_i = γ Σ_j D_ij X_j + X_i`.
pub fn enhance<T: Real>(g: &mut Graph<T>, x: Var, d: Var, gamma: Var) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let (c, n) = (shape[0], shape[1] * shape[2]);
    let xr = g.reshape(x, &[c, n])?;
    let dt = g.transpose(d)?;
    let ctx = g.matmul(xr, dt)?;
    let scaled = g.scalar_mul(gamma, ctx)?;
    let e = g.add(xr, scaled)?;
    g.reshape(e, &shape)
}

/// Intermediate results of one attention pass.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub spatial: Var,
    pub context: Var,
    pub enhanced: Var,
}

/// Full attention block. `mask = None` disables saliency guidance.
pub fn sgan_forward<T: Real>(sess: &mut Session<'_, T>, x: Var, mask: Option<&SaliencyMask>) -> Result<AttentionOutput> {
    if let Some(m) = mask {
        let shape = sess.graph.value(x).shape();
        if shape.len() != 3 || m.height() != shape[1] || m.width() != shape[2] {
            return Err(Error::ShapeMismatch {
                op: "sgan_forward",
                lhs: shape.to_vec(),
                rhs: alloc::vec![m.height(), m.width()],
            });
        }
    }
    let spatial = spatial_attention(sess, x)?;
    let gamma = sess.p(GAMMA)?;
    let context = context_attention(&mut sess.graph, spatial, mask)?;
    let enhanced = enhance(&mut sess.graph, x, context, gamma)?;
    Ok(AttentionOutput {
        spatial,
        context,
        enhanced,
    })
}
