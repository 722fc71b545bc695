use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{he_conv, ParamStore, Session};
use crate::error::{Error, Result};
use crate::graph::{Conv2dAttrs, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Stack of `3×3 conv → ReLU` blocks with optional `2×2` max-pooling after
/// selected blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub block_channels: Vec<usize>,
    /// Zero-based block indices followed by a stride-2 pool.
    pub pool_after: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            block_channels: vec![16, 32, 64, 64],
            pool_after: vec![0, 1],
        }
    }
}

impl BackboneConfig {
    pub fn feature_channels(&self) -> usize {
        *self.block_channels.last().unwrap_or(&self.in_channels)
    }

    pub fn stride(&self) -> usize {
        1 << self.pool_after.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() || self.block_channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("backbone needs at least one block with positive channels".into()));
        }
        let mut seen = self.pool_after.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.pool_after.len() || seen.iter().any(|&i| i >= self.block_channels.len()) {
            return Err(Error::Config("pool_after must list distinct block indices".into()));
        }
        Ok(())
    }

    pub fn weight_name(block: usize) -> alloc::string::String {
        format!("backbone.conv{block}.weight")
    }

    pub fn bias_name(block: usize) -> alloc::string::String {
        format!("backbone.conv{block}.bias")
    }

    /// Inserts freshly initialised backbone parameters into `params`.
    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, rng: &mut R, params: &mut ParamStore<T>) {
        let mut cin = self.in_channels;
        for (i, &cout) in self.block_channels.iter().enumerate() {
            params.insert(&Self::weight_name(i), he_conv(rng, cout, cin, 3));
            params.insert(&Self::bias_name(i), Tensor::zeros(&[cout]));
            cin = cout;
        }
    }
}

/// Runs the backbone on a `3×H×W` image variable, producing
/// `C×(H/stride)×(W/stride)` features.
pub fn forward_features<T: Real>(sess: &mut Session<'_, T>, image: Var, cfg: &BackboneConfig) -> Result<Var> {
    let shape = sess.graph.value(image).shape().to_vec();
    if shape.len() != 3 || shape[0] != cfg.in_channels {
        return Err(Error::InvalidShape {
            op: "forward_features",
            shape,
            reason: "expected in_channels×H×W",
        });
    }
    let stride = cfg.stride();
    if shape[1] % stride != 0 || shape[2] % stride != 0 {
        return Err(Error::IndivisibleSize {
            height: shape[1],
            width: shape[2],
            stride,
        });
    }
    let mut x = image;
    for i in 0..cfg.block_channels.len() {
        let w = sess.p(&BackboneConfig::weight_name(i))?;
        let b = sess.p(&BackboneConfig::bias_name(i))?;
        x = sess.graph.conv2d(x, w, Some(b), Conv2dAttrs::SAME_3X3)?;
        x = sess.graph.relu(x)?;
        if cfg.pool_after.contains(&i) {
            x = sess.graph.max_pool2d(x, 2, 2)?;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn features(params: &ParamStore<f32>, cfg: &BackboneConfig, image: Tensor<f32>) -> Result<Tensor<f32>> {
        let mut s = Session::inference(params);
        let x = s.graph.constant(image);
        let f = forward_features(&mut s, x, cfg)?;
        Ok(s.graph.value(f).clone())
    }

    #[test]
    fn default_config_has_stride_four() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.stride(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::new();
        cfg.init_params(&mut rng, &mut p);
        let img = Tensor::from_fn(&[3, 64, 64], |i| ((i % 17) as f32) / 17.0);
        let f = features(&p, &cfg, img.clone()).unwrap();
        assert_eq!(f.shape(), &[64, 16, 16]);
        // Determinism.
        assert_eq!(features(&p, &cfg, img).unwrap(), f);
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let cfg = BackboneConfig {
            block_channels: vec![4, 4],
            ..BackboneConfig::default()
        };
        let mut p = ParamStore::new();
        cfg.init_params(&mut ChaCha8Rng::seed_from_u64(0), &mut p);
        for (_, t) in p.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let f = features(&p, &cfg, Tensor::zeros(&[3, 8, 8])).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_input_is_an_error() {
        let cfg = BackboneConfig::default();
        let mut p = ParamStore::new();
        cfg.init_params(&mut ChaCha8Rng::seed_from_u64(0), &mut p);
        assert_eq!(
            features(&p, &cfg, Tensor::zeros(&[3, 10, 12])).unwrap_err(),
            Error::IndivisibleSize {
                height: 10,
                width: 12,
                stride: 4
            }
        );
    }
}
