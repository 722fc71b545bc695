//! The networks of each stage: the classifier family (baseline and the
//! attention variants) and the segmentation network.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{init_attention_params, sgan_forward, AttentionOutput, SaliencyMask};
use crate::crf::{downsample_image, mean_field, CrfParams};
use crate::error::{Error, Result};
use crate::graph::{Conv2dAttrs, Var};
use crate::losses::{balanced_seed_loss, boundary_loss, classification_loss, seed_loss, sgan_total};
use crate::nn::{classify, compute_cam, forward_features, max_normalize, normal_tensor, BackboneConfig, CamSource, CamStack, Grads, ParamStore, Session};
use crate::real::Real;
use crate::seeds::{ensemble_cams, ImageLabels, SeedMask};
use crate::tensor::Tensor;

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const SEED_BRANCH_WEIGHT: &str = "seed_branch.weight";
pub const SEED_BRANCH_BIAS: &str = "seed_branch.bias";
pub const SEG_HEAD_WEIGHT: &str = "seg_head.weight";
pub const SEG_HEAD_BIAS: &str = "seg_head.bias";

/// Classifier wirings compared in the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Backbone, GAP and linear classifier; no attention.
    #[serde(rename = "baseline")]
    Baseline,
    /// Attention without saliency guidance, no seed loss.
    #[serde(rename = "sgan-sal-seed")]
    SalSeed,
    /// Saliency-guided attention, no seed loss.
    #[serde(rename = "sgan-seed")]
    Seed,
    /// Full model, seeds read from the classification branch only.
    #[serde(rename = "sgan_cls")]
    Cls,
    /// Full model, seeds read from the seed segmentation branch only.
    #[serde(rename = "sgan_seg")]
    Seg,
    /// Full model, seeds from the ensemble of both branches.
    #[serde(rename = "sgan")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::SalSeed,
        Variant::Seed,
        Variant::Cls,
        Variant::Seg,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::SalSeed => "sgan-sal-seed",
            Variant::Seed => "sgan-seed",
            Variant::Cls => "sgan_cls",
            Variant::Seg => "sgan_seg",
            Variant::Full => "sgan",
        }
    }

    pub fn has_attention(self) -> bool {
        self != Variant::Baseline
    }

    pub fn saliency_guided(self) -> bool {
        !matches!(self, Variant::Baseline | Variant::SalSeed)
    }

    pub fn has_seed_branch(self) -> bool {
        matches!(self, Variant::Cls | Variant::Seg | Variant::Full)
    }

    pub fn cam_source(self) -> CamSource {
        match self {
            Variant::Seg => CamSource::Seg,
            Variant::Full => CamSource::Ensemble,
            _ => CamSource::Cls,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(alloc::format!("unknown variant `{s}`")))
    }
}

/// Horizontal mirror of a `C×H×W` tensor.
pub fn flip_horizontal<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let w = t.shape()[t.ndim() - 1];
    let src = t.data();
    Tensor::from_fn(t.shape(), |i| {
        let c = i % w;
        src[i - c + (w - 1 - c)]
    })
}

/// Values recorded for one classifier training sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassifierLoss {
    pub cls: f64,
    pub seed: f64,
    pub total: f64,
    pub no_seeds: bool,
}

/// Graph handles of one classifier forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierPass {
    pub features: Var,
    /// Input to both heads: the enhanced features, or the raw features
    /// without attention.
    pub enhanced: Var,
    pub tau: Var,
    /// `M×h×w` seed-branch probabilities.
    pub seed_probs: Option<Var>,
    pub attention: Option<AttentionOutput>,
}

/// Backbone plus classification head, optionally with the attention block
/// and the seed segmentation branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel<T> {
    pub params: ParamStore<T>,
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub variant: Variant,
}

impl<T: Real> ClassifierModel<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, backbone: BackboneConfig, num_classes: usize, variant: Variant) -> Result<Self> {
        backbone.validate()?;
        let mut params = ParamStore::new();
        backbone.init_params(rng, &mut params);
        let c = backbone.feature_channels();
        params.insert(CLASSIFIER_WEIGHT, normal_tensor(rng, &[c, num_classes], 0.01));
        let mut model = Self {
            params,
            backbone,
            num_classes,
            variant,
        };
        model.add_missing(rng);
        Ok(model)
    }

    /// Starts from trained baseline weights; the attention block and seed
    /// branch are freshly initialised.
    pub fn from_baseline<R: Rng + ?Sized>(rng: &mut R, baseline: &ClassifierModel<T>, variant: Variant) -> Self {
        let mut params = ParamStore::new();
        params.copy_prefix_from(&baseline.params, "backbone.");
        params.copy_prefix_from(&baseline.params, "classifier.");
        let mut model = Self {
            params,
            backbone: baseline.backbone.clone(),
            num_classes: baseline.num_classes,
            variant,
        };
        model.add_missing(rng);
        model
    }

    /// Rebuilds a model from stored parameters, checking every required
    /// entry is present.
    pub fn from_params(params: ParamStore<T>, backbone: BackboneConfig, num_classes: usize, variant: Variant) -> Result<Self> {
        let model = Self {
            params,
            backbone,
            num_classes,
            variant,
        };
        model.params.require(CLASSIFIER_WEIGHT)?;
        if variant.has_attention() {
            model.params.require(crate::attention::GAMMA)?;
        }
        if variant.has_seed_branch() {
            model.params.require(SEED_BRANCH_WEIGHT)?;
        }
        Ok(model)
    }

    fn add_missing<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let c = self.backbone.feature_channels();
        if self.variant.has_attention() {
            init_attention_params(rng, c, &mut self.params);
        }
        if self.variant.has_seed_branch() {
            self.params
                .insert(SEED_BRANCH_WEIGHT, normal_tensor(rng, &[self.num_classes, c, 1, 1], 0.01));
            self.params.insert(SEED_BRANCH_BIAS, Tensor::zeros(&[self.num_classes]));
        }
    }

    /// The mask actually used by this variant: `None` means unguided.
    fn effective_mask<'m>(&self, mask: Option<&'m SaliencyMask>) -> Result<Option<&'m SaliencyMask>> {
        if !self.variant.saliency_guided() {
            return Ok(None);
        }
        mask.map(Some)
            .ok_or_else(|| Error::Config(alloc::format!("variant {} needs a saliency mask", self.variant)))
    }

    pub fn forward(&self, sess: &mut Session<'_, T>, image: Var, mask: Option<&SaliencyMask>) -> Result<ClassifierPass> {
        let features = forward_features(sess, image, &self.backbone)?;
        let (enhanced, attention) = if self.variant.has_attention() {
            let out = sgan_forward(sess, features, self.effective_mask(mask)?)?;
            (out.enhanced, Some(out))
        } else {
            (features, None)
        };
        let tau = classify(sess, enhanced, CLASSIFIER_WEIGHT)?;
        let seed_probs = if self.variant.has_seed_branch() {
            let w = sess.p(SEED_BRANCH_WEIGHT)?;
            let b = sess.p(SEED_BRANCH_BIAS)?;
            let logits = sess.graph.conv2d(enhanced, w, Some(b), Conv2dAttrs::POINTWISE)?;
            Some(sess.graph.softmax(logits, 0)?)
        } else {
            None
        };
        Ok(ClassifierPass {
            features,
            enhanced,
            tau,
            seed_probs,
            attention,
        })
    }

    /// Loss and parameter gradients for one image. `seeds` live on the
    /// feature grid and are only used when the variant has a seed branch.
    pub fn loss_and_grads(
        &self,
        image: Tensor<T>,
        labels: &ImageLabels,
        mask: Option<&SaliencyMask>,
        seeds: Option<&SeedMask>,
        lambda: f64,
    ) -> Result<(ClassifierLoss, Grads<T>)> {
        let mut sess = Session::training(&self.params);
        let x = sess.graph.constant(image);
        let pass = self.forward(&mut sess, x, mask)?;
        let cls = classification_loss(&mut sess.graph, pass.tau, labels)?;
        let (total, seed, no_seeds) = match pass.seed_probs {
            Some(phi) => {
                let seeds = seeds.ok_or_else(|| Error::Config("seed branch training needs seed masks".into()))?;
                let s = seed_loss(&mut sess.graph, phi, seeds, self.num_classes)?;
                (sgan_total(&mut sess.graph, cls, s.loss, lambda)?, s.loss, s.no_seeds)
            }
            None => (cls, cls, true),
        };
        let record = ClassifierLoss {
            cls: sess.graph.value(cls).item().as_f64(),
            seed: if pass.seed_probs.is_some() {
                sess.graph.value(seed).item().as_f64()
            } else {
                0.0
            },
            total: sess.graph.value(total).item().as_f64(),
            no_seeds,
        };
        let grads = sess.backward(total)?;
        Ok((record, grads))
    }

    fn infer<R>(&self, image: Tensor<T>, mask: Option<&SaliencyMask>, read: impl FnOnce(&Session<'_, T>, &ClassifierPass) -> Result<R>) -> Result<R> {
        let mut sess = Session::inference(&self.params);
        let x = sess.graph.constant(image);
        let pass = self.forward(&mut sess, x, mask)?;
        read(&sess, &pass)
    }

    /// Class probabilities `τ`.
    pub fn predict(&self, image: Tensor<T>, mask: Option<&SaliencyMask>) -> Result<Vec<f64>> {
        self.infer(image, mask, |s, p| Ok(s.graph.value(p.tau).data().iter().map(|v| v.as_f64()).collect()))
    }

    /// Feature-resolution activation maps from the requested source.
    pub fn cams(&self, image: Tensor<T>, labels: &ImageLabels, mask: Option<&SaliencyMask>, source: CamSource) -> Result<CamStack<T>> {
        if source != CamSource::Cls && !self.variant.has_seed_branch() {
            return Err(Error::Config(alloc::format!("variant {} has no seed branch", self.variant)));
        }
        let weight = self.params.require(CLASSIFIER_WEIGHT)?;
        self.infer(image, mask, |s, p| {
            let cls = || compute_cam(s.graph.value(p.enhanced), weight, labels.present());
            let seg = || -> Result<CamStack<T>> {
                let phi = s.graph.value(p.seed_probs.expect("seed branch present"));
                let plane = phi.shape()[1] * phi.shape()[2];
                let mut maps = phi.clone();
                for (z, ch) in maps.data_mut().chunks_mut(plane).enumerate() {
                    if !labels.is_present(z) {
                        ch.iter_mut().for_each(|v| *v = T::zero());
                    }
                }
                max_normalize(&mut maps);
                Ok(CamStack {
                    maps,
                    source: CamSource::Seg,
                })
            };
            match source {
                CamSource::Cls => cls(),
                CamSource::Seg => seg(),
                CamSource::Ensemble => ensemble_cams(&cls()?, &seg()?),
            }
        })
    }

    /// Context attention `D` (`N×N` over feature positions).
    pub fn context_attention(&self, image: Tensor<T>, mask: Option<&SaliencyMask>) -> Result<Tensor<T>> {
        if !self.variant.has_attention() {
            return Err(Error::Config("the baseline has no attention block".into()));
        }
        self.infer(image, mask, |s, p| Ok(s.graph.value(p.attention.expect("attention present").context).clone()))
    }

    pub fn gamma(&self) -> Option<f64> {
        self.params.get(crate::attention::GAMMA).map(|g| g.item().as_f64())
    }
}

/// Values recorded for one segmentation training sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SegLoss {
    pub balanced_seed: f64,
    pub boundary: f64,
    pub total: f64,
}

/// Backbone followed by a `1×1` convolution to `M+1` channels and a
/// per-position softmax; channel 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel<T> {
    pub params: ParamStore<T>,
    pub backbone: BackboneConfig,
    pub num_classes: usize,
}

impl<T: Real> SegModel<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, backbone: BackboneConfig, num_classes: usize) -> Result<Self> {
        backbone.validate()?;
        let mut params = ParamStore::new();
        backbone.init_params(rng, &mut params);
        let mut model = Self {
            params,
            backbone,
            num_classes,
        };
        model.init_head(rng);
        Ok(model)
    }

    /// Backbone weights copied from a trained classifier.
    pub fn from_classifier<R: Rng + ?Sized>(rng: &mut R, classifier: &ClassifierModel<T>) -> Self {
        let mut params = ParamStore::new();
        params.copy_prefix_from(&classifier.params, "backbone.");
        let mut model = Self {
            params,
            backbone: classifier.backbone.clone(),
            num_classes: classifier.num_classes,
        };
        model.init_head(rng);
        model
    }

    pub fn from_params(params: ParamStore<T>, backbone: BackboneConfig, num_classes: usize) -> Result<Self> {
        params.require(SEG_HEAD_WEIGHT)?;
        params.require(SEG_HEAD_BIAS)?;
        Ok(Self {
            params,
            backbone,
            num_classes,
        })
    }

    fn init_head<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let c = self.backbone.feature_channels();
        self.params
            .insert(SEG_HEAD_WEIGHT, normal_tensor(rng, &[self.num_classes + 1, c, 1, 1], 0.01));
        self.params.insert(SEG_HEAD_BIAS, Tensor::zeros(&[self.num_classes + 1]));
    }

    /// `(M+1)×h×w` class probabilities.
    pub fn forward(&self, sess: &mut Session<'_, T>, image: Var) -> Result<Var> {
        let x = forward_features(sess, image, &self.backbone)?;
        let w = sess.p(SEG_HEAD_WEIGHT)?;
        let b = sess.p(SEG_HEAD_BIAS)?;
        let logits = sess.graph.conv2d(x, w, Some(b), Conv2dAttrs::POINTWISE)?;
        sess.graph.softmax(logits, 0)
    }

    pub fn probs(&self, image: Tensor<T>) -> Result<Tensor<T>> {
        let mut sess = Session::inference(&self.params);
        let x = sess.graph.constant(image);
        let phi = self.forward(&mut sess, x)?;
        Ok(sess.graph.value(phi).clone())
    }

    /// Balanced seed loss plus `boundary_weight ×` the boundary loss.
    /// `target` receives the current probabilities and returns the boundary
    /// target, or `None` to skip the term; it is not called when the weight
    /// is 0.
    pub fn loss_and_grads(
        &self,
        image: Tensor<T>,
        seeds: &SeedMask,
        boundary_weight: f64,
        target: impl FnOnce(&Tensor<T>) -> Result<Option<Tensor<T>>>,
    ) -> Result<(SegLoss, Grads<T>)> {
        let mut sess = Session::training(&self.params);
        let x = sess.graph.constant(image);
        let phi = self.forward(&mut sess, x)?;
        let balanced = balanced_seed_loss(&mut sess.graph, phi, seeds, self.num_classes)?;
        let mut record = SegLoss {
            balanced_seed: sess.graph.value(balanced).item().as_f64(),
            ..Default::default()
        };
        let r = if boundary_weight != 0.0 { target(sess.graph.value(phi))? } else { None };
        let total = match r {
            Some(r) => {
                let b = boundary_loss(&mut sess.graph, phi, &r)?;
                record.boundary = sess.graph.value(b).item().as_f64();
                let weighted = sess.graph.scale(b, T::of(boundary_weight))?;
                sess.graph.add(balanced, weighted)?
            }
            None => balanced,
        };
        record.total = sess.graph.value(total).item().as_f64();
        let grads = sess.backward(total)?;
        Ok((record, grads))
    }

    /// Label map at `stride`-times the feature resolution (nearest).
    pub fn predict(&self, image: Tensor<T>) -> Result<Vec<u8>> {
        let phi = self.probs(image)?;
        Ok(argmax_upsample(&phi, self.backbone.stride()))
    }
}

/// Per-position argmax of an `L×h×w` map, repeated over `factor×factor`
/// blocks.
pub fn argmax_upsample<T: Real>(phi: &Tensor<T>, factor: usize) -> Vec<u8> {
    let (l, h, w) = (phi.shape()[0], phi.shape()[1], phi.shape()[2]);
    let plane = h * w;
    let d = phi.data();
    let (oh, ow) = (h * factor, w * factor);
    (0..oh * ow)
        .map(|i| {
            let u = (i / ow / factor) * w + (i % ow) / factor;
            let mut best = 0;
            for c in 1..l {
                if d[c * plane + u] > d[best * plane + u] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Boundary-loss target: CRF inference on the block-averaged image at the
/// probability map's resolution, with distances kept in image pixels.
pub fn crf_target<T: Real>(image: &Tensor<T>, phi: &Tensor<T>, stride: usize, params: &CrfParams) -> Result<Tensor<T>> {
    let small = downsample_image(image, stride)?;
    let p = CrfParams {
        spacing: params.spacing * stride as f64,
        ..params.clone()
    };
    mean_field(&small, phi, &p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::GAMMA;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            in_channels: 3,
            block_channels: alloc::vec![4, 6],
            pool_after: alloc::vec![0],
        }
    }

    fn image(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normal_tensor(&mut rng, &[3, 8, 8], 1.0)
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("sgan-x".parse::<Variant>().is_err());
    }

    #[test]
    fn fresh_attention_matches_baseline_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = ClassifierModel::<f64>::new(&mut rng, tiny(), 3, Variant::Baseline).unwrap();
        let sgan = ClassifierModel::from_baseline(&mut rng, &base, Variant::SalSeed);
        let labels = ImageLabels::new(alloc::vec![true, false, true]);
        let (a, _) = base.loss_and_grads(image(1), &labels, None, None, 0.15).unwrap();
        let (b, _) = sgan.loss_and_grads(image(1), &labels, None, None, 0.15).unwrap();
        assert_eq!(a.cls, b.cls);
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn all_salient_mask_reproduces_unguided_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sal = ClassifierModel::<f64>::new(&mut rng, tiny(), 2, Variant::SalSeed).unwrap();
        sal.params.insert(GAMMA, Tensor::scalar(0.7));
        let mut guided = sal.clone();
        guided.variant = Variant::Seed;
        let labels = ImageLabels::new(alloc::vec![true, false]);
        let all = SaliencyMask::all_salient(4, 4);
        let (a, ga) = sal.loss_and_grads(image(2), &labels, None, None, 0.0).unwrap();
        let (b, gb) = guided.loss_and_grads(image(2), &labels, Some(&all), None, 0.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn guided_variant_requires_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = ClassifierModel::<f64>::new(&mut rng, tiny(), 2, Variant::Seed).unwrap();
        let labels = ImageLabels::new(alloc::vec![true, false]);
        assert!(m.loss_and_grads(image(1), &labels, None, None, 0.0).is_err());
    }

    #[test]
    fn ensemble_cams_combine_both_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = ClassifierModel::<f64>::new(&mut rng, tiny(), 2, Variant::Full).unwrap();
        m.params.insert(GAMMA, Tensor::scalar(0.3));
        let labels = ImageLabels::new(alloc::vec![true, true]);
        let mask = SaliencyMask::all_salient(4, 4);
        let cls = m.cams(image(3), &labels, Some(&mask), CamSource::Cls).unwrap();
        let seg = m.cams(image(3), &labels, Some(&mask), CamSource::Seg).unwrap();
        let ens = m.cams(image(3), &labels, Some(&mask), CamSource::Ensemble).unwrap();
        assert_eq!(ens, ensemble_cams(&cls, &seg).unwrap());
        for v in ens.maps.data() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn seg_loss_without_boundary_is_balanced_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = SegModel::<f64>::new(&mut rng, tiny(), 2).unwrap();
        let seeds = SeedMask::from_labels(4, 4, alloc::vec![0, 1, 255, 2, 0, 0, 255, 255, 1, 1, 2, 255, 0, 255, 255, 0], 2).unwrap();
        let (a, _) = m.loss_and_grads(image(4), &seeds, 0.0, |_| panic!("target unused at weight 0")).unwrap();
        assert_eq!(a.total, a.balanced_seed);
        let (b, _) = m.loss_and_grads(image(4), &seeds, 1.0, |phi| Ok(Some(phi.clone()))).unwrap();
        assert!(b.boundary.abs() < 1e-12);
        assert_eq!(b.total, b.balanced_seed + b.boundary);
    }

    #[test]
    fn flip_twice_is_identity() {
        let t = image(9);
        let f = flip_horizontal(&t);
        assert_eq!(f.at(&[1, 2, 0]), t.at(&[1, 2, 7]));
        assert_eq!(flip_horizontal(&f), t);
    }

    #[test]
    fn argmax_upsample_repeats_blocks() {
        let phi = Tensor::<f64>::from_f64(&[2, 1, 2], &[0.9, 0.2, 0.1, 0.8]).unwrap();
        assert_eq!(argmax_upsample(&phi, 2), alloc::vec![0, 0, 1, 1, 0, 0, 1, 1]);
    }
}
