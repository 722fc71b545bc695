//! SGD with momentum, weight decay and a step learning-rate schedule.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Grads, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Applied to parameters whose names end in `.weight`.
    pub weight_decay: f64,
    /// Multiplier applied at each milestone.
    pub decay_factor: f64,
    /// Milestones as fractions of the total iteration count.
    pub decay_at: Vec<f64>,
    /// Per-parameter learning-rate multipliers by exact name.
    pub lr_multipliers: Vec<(String, f64)>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_factor: 0.3,
            decay_at: alloc::vec![0.5, 0.75],
            lr_multipliers: Vec::new(),
        }
    }
}

impl SgdConfig {
    /// Values used for the full-scale networks: batch 15, lr 0.001.
    pub fn reference() -> Self {
        Self {
            lr: 0.001,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.decay_factor <= 0.0 {
            return bad("weight_decay must be non-negative and decay_factor positive");
        }
        if self.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("decay_at entries must lie in [0, 1]");
        }
        if self.lr_multipliers.iter().any(|(_, m)| *m < 0.0 || !m.is_finite()) {
            return bad("lr multipliers must be finite and non-negative");
        }
        Ok(())
    }

    /// Learning rate at zero-based `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let passed = self
            .decay_at
            .iter()
            .filter(|&&f| step as f64 >= f * total as f64)
            .count();
        let mut lr = self.lr;
        for _ in 0..passed {
            lr *= self.decay_factor;
        }
        lr
    }

    fn multiplier(&self, name: &str) -> f64 {
        self.lr_multipliers
            .iter()
            .find(|(n, _)| n == name)
            .map_or(1.0, |(_, m)| *m)
    }
}

/// Momentum SGD: `v ← μv + (g + λw)`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    cfg: SgdConfig,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    /// One update with an explicit learning rate. Parameters without a
    /// gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        self.velocity.resize(params.len(), None);
        let mu = T::of(self.cfg.momentum);
        for (i, (name, w)) in params.iter_mut().enumerate() {
            let Some(g) = grads.get(i) else { continue };
            let decay = if name.ends_with(".weight") { self.cfg.weight_decay } else { 0.0 };
            let decay = T::of(decay);
            let rate = T::of(lr * self.cfg.multiplier(name));
            let v = self.velocity[i].get_or_insert_with(|| Tensor::zeros(w.shape()));
            for ((vi, &gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut()) {
                *vi = mu * *vi + gi + decay * *wi;
                *wi -= rate * *vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::nn::Session;

    #[test]
    fn schedule_decays_twice() {
        let c = SgdConfig::default();
        assert_eq!(c.lr_at(0, 100), 0.01);
        assert!((c.lr_at(50, 100) - 0.003).abs() < 1e-15);
        assert!((c.lr_at(99, 100) - 0.0009).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = ParamStore::<f64>::new();
        p.insert("a.weight", Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap());
        let before = p.clone();
        let mut sess = Session::with_graph(&p, Graph::new(), true);
        let a = sess.p("a.weight").unwrap();
        let sq = sess.graph.mul(a, a).unwrap();
        let loss = sess.graph.sum(sq).unwrap();
        let g = sess.backward(loss).unwrap();
        let mut opt = Sgd::new(SgdConfig::default()).unwrap();
        opt.step(&mut p, &g, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_update_matches_hand_values() {
        let mut p = ParamStore::<f64>::new();
        p.insert("b", Tensor::scalar(1.0));
        let g = {
            let mut sess = Session::with_graph(&p, Graph::new(), true);
            let b = sess.p("b").unwrap();
            sess.backward(b).unwrap()
        };
        let mut opt = Sgd::new(SgdConfig {
            momentum: 0.5,
            ..Default::default()
        })
        .unwrap();
        opt.step(&mut p, &g, 0.1);
        assert!((p.get("b").unwrap().item() - 0.9).abs() < 1e-15);
        opt.step(&mut p, &g, 0.1);
        // v = 0.5·1 + 1 = 1.5
        assert!((p.get("b").unwrap().item() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn multiplier_and_decay_apply_by_name() {
        let c = SgdConfig {
            lr_multipliers: alloc::vec![("attention.gamma".into(), 10.0)],
            ..Default::default()
        };
        assert_eq!(c.multiplier("attention.gamma"), 10.0);
        assert_eq!(c.multiplier("x.weight"), 1.0);
    }
}
