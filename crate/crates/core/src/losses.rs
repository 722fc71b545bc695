//! Training objectives, built from graph primitives so their gradients come
//! from the same reverse-mode machinery as the networks.

use alloc::vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::seeds::{ImageLabels, SeedMask};
use crate::tensor::Tensor;

/// Floor applied before every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Default weight of the seed loss in the joint objective.
pub const DEFAULT_LAMBDA: f64 = 0.15;

/// Sigmoid cross entropy written as
/// `−(1/M) Σ_m log(y_m·(τ_m − ½) + ½)` with `y ∈ {+1, −1}`.
pub fn classification_loss<T: Real>(g: &mut Graph<T>, tau: Var, labels: &ImageLabels) -> Result<Var> {
    let m = labels.num_classes();
    if g.value(tau).shape() != [m] {
        return Err(Error::ShapeMismatch {
            op: "classification_loss",
            lhs: g.value(tau).shape().to_vec(),
            rhs: vec![m],
        });
    }
    let y = g.constant(Tensor::from_fn(&[m], |i| T::of(labels.sign(i))));
    let offset = g.constant(Tensor::from_fn(&[m], |i| T::of((1.0 - labels.sign(i)) / 2.0)));
    let arg = g.mul(tau, y)?;
    let arg = g.add(arg, offset)?;
    let arg = g.clamp_min(arg, T::of(LOG_FLOOR))?;
    let logs = g.log(arg)?;
    let mean = g.mean(logs)?;
    g.scale(mean, -T::one())
}

/// Seed loss value plus whether every `Λ_z` was empty (loss then is 0).
#[derive(Debug, Clone, Copy)]
pub struct SeedLoss {
    pub loss: Var,
    pub no_seeds: bool,
}

fn masked_log_mean<T: Real>(g: &mut Graph<T>, phi: Var, mask: Tensor<T>, count: usize) -> Result<Var> {
    let mask = g.constant(mask);
    let clamped = g.clamp_min(phi, T::of(LOG_FLOOR))?;
    let logs = g.log(clamped)?;
    let picked = g.mul(logs, mask)?;
    let total = g.sum(picked)?;
    g.scale(total, -T::one() / T::of(count as f64))
}

fn check_phi<T: Real>(op: &'static str, g: &Graph<T>, phi: Var, channels: usize, seeds: &SeedMask) -> Result<()> {
    let shape = g.value(phi).shape();
    if shape != [channels, seeds.height(), seeds.width()] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![channels, seeds.height(), seeds.width()],
        });
    }
    Ok(())
}

/// Foreground-only seed loss over an `M`-channel probability map:
/// `−(1/Σ_z|Λ_z|) Σ_z Σ_{u∈Λ_z} log Φ_{z,u}`. Background seeds are ignored.
pub fn seed_loss<T: Real>(g: &mut Graph<T>, phi: Var, seeds: &SeedMask, num_classes: usize) -> Result<SeedLoss> {
    check_phi("seed_loss", g, phi, num_classes, seeds)?;
    let plane = seeds.height() * seeds.width();
    let mut mask = Tensor::zeros(&[num_classes, seeds.height(), seeds.width()]);
    let mut count = 0;
    for (u, &l) in seeds.labels().iter().enumerate() {
        if l != SeedMask::BACKGROUND && l != SeedMask::UNLABELED {
            mask.data_mut()[(l as usize - 1) * plane + u] = T::one();
            count += 1;
        }
    }
    if count == 0 {
        return Ok(SeedLoss {
            loss: g.constant(Tensor::scalar(T::zero())),
            no_seeds: true,
        });
    }
    Ok(SeedLoss {
        loss: masked_log_mean(g, phi, mask, count)?,
        no_seeds: false,
    })
}

/// `L_cls + λ·L_seed`.
pub fn sgan_total<T: Real>(g: &mut Graph<T>, cls: Var, seed: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Config("lambda must be non-negative".into()));
    }
    let weighted = g.scale(seed, T::of(lambda))?;
    g.add(cls, weighted)
}

/// Balanced seed loss over an `(M+1)`-channel map whose channel 0 is
/// background: the foreground and background terms are each normalised by
/// their own seed counts; an empty side contributes 0.
pub fn balanced_seed_loss<T: Real>(g: &mut Graph<T>, phi: Var, seeds: &SeedMask, num_classes: usize) -> Result<Var> {
    check_phi("balanced_seed_loss", g, phi, num_classes + 1, seeds)?;
    let shape = [num_classes + 1, seeds.height(), seeds.width()];
    let plane = seeds.height() * seeds.width();
    let mut fg = Tensor::zeros(&shape);
    let mut bg = Tensor::zeros(&shape);
    let (mut nf, mut nb) = (0, 0);
    for (u, &l) in seeds.labels().iter().enumerate() {
        match l {
            SeedMask::UNLABELED => {}
            SeedMask::BACKGROUND => {
                bg.data_mut()[u] = T::one();
                nb += 1;
            }
            z => {
                fg.data_mut()[z as usize * plane + u] = T::one();
                nf += 1;
            }
        }
    }
    let mut total = g.constant(Tensor::scalar(T::zero()));
    if nf > 0 {
        let t = masked_log_mean(g, phi, fg, nf)?;
        total = g.add(total, t)?;
    }
    if nb > 0 {
        let t = masked_log_mean(g, phi, bg, nb)?;
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Mean KL divergence `(1/N) Σ_u Σ_z R log(R/Φ)` against a constant target
/// `r`; `0·log 0 := 0`.
pub fn boundary_loss<T: Real>(g: &mut Graph<T>, phi: Var, r: &Tensor<T>) -> Result<Var> {
    let shape = g.value(phi).shape().to_vec();
    if shape != r.shape() || shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "boundary_loss",
            lhs: shape,
            rhs: r.shape().to_vec(),
        });
    }
    let n = T::of((shape[1] * shape[2]) as f64);
    let entropy_term: T = r
        .data()
        .iter()
        .filter(|&&v| v > T::zero())
        .map(|&v| v * v.ln())
        .sum();
    let rv = g.constant(r.clone());
    let clamped = g.clamp_min(phi, T::of(LOG_FLOOR))?;
    let logs = g.log(clamped)?;
    let cross = g.mul(logs, rv)?;
    let cross = g.sum(cross)?;
    let cross = g.scale(cross, -T::one() / n)?;
    let constant = g.constant(Tensor::scalar(entropy_term / n));
    g.add(constant, cross)
}
