//! The training stages and evaluation, operating on in-memory data.
//!
//! Every stage is single-threaded and draws its randomness from a ChaCha8
//! stream derived from the configured seed and a per-stage salt, so a run is
//! a pure function of its configuration.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sgan_core::attention::{SaliencyMask, GAMMA};
use sgan_core::metrics::{evaluate_segmentation, MetricsReport, SeedCounts, SeedQuality};
use sgan_core::model::{crf_target, flip_horizontal, ClassifierModel, SegModel, Variant, SEED_BRANCH_BIAS, SEED_BRANCH_WEIGHT, SEG_HEAD_BIAS, SEG_HEAD_WEIGHT};
use sgan_core::nn::{CamSource, Grads, ParamStore};
use sgan_core::optim::{Sgd, SgdConfig};
use sgan_core::seeds::{final_seeds, fit_resolution, initial_seeds, semi_substitute, SeedMask};
use sgan_core::synth::{clean_saliency, Sample, Split};
use sgan_core::Tensor;

use crate::config::PipelineConfig;
use crate::error::{PipelineError, Result};

/// Receives one JSON object per logged training step.
pub trait LogSink {
    fn record(&mut self, entry: Value);
}

impl LogSink for Vec<Value> {
    fn record(&mut self, entry: Value) {
        self.push(entry);
    }
}

/// Discards everything.
pub struct NullLog;

impl LogSink for NullLog {
    fn record(&mut self, _: Value) {}
}

/// Generated samples split into training and validation sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>, num_classes: usize) -> Self {
        let (train, val) = samples.into_iter().partition(|s| s.split == Split::Train);
        Self { train, val, num_classes }
    }

    pub fn generate(cfg: &sgan_core::synth::DatasetConfig) -> Result<Self> {
        Ok(Self::from_samples(sgan_core::synth::generate_dataset(cfg)?, cfg.num_classes))
    }
}

/// `strong[i]` marks training image `i` as fully annotated: the first
/// `⌈fraction·n⌉` entries of a seeded permutation.
pub fn semi_indices(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stage_rng(seed, SALT_SEMI));
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let mut strong = vec![false; n];
    for &i in &order[..k] {
        strong[i] = true;
    }
    strong
}

const SALT_BASELINE: u64 = 0x0b;
const SALT_SGAN: u64 = 0x51;
const SALT_SEG: u64 = 0x5e;
const SALT_SEMI: u64 = 0x7f;
const SALT_INIT: u64 = 0x1a;

fn stage_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng
}

/// Saliency map each training image is trained and mined with: the ground
/// truth for strong images, the (possibly corrupted) oracle otherwise.
fn effective_saliency(sample: &Sample, strong: bool) -> Result<Vec<f32>> {
    if strong {
        Ok(sample.clean_saliency()?)
    } else {
        Ok(sample.saliency.clone())
    }
}

/// Per-image training inputs prepared once per stage.
struct Prepared {
    image: Tensor<f32>,
    mask: SaliencyMask,
}

fn prepare(cfg: &PipelineConfig, samples: &[Sample], strong: &[bool]) -> Result<Vec<Prepared>> {
    let stride = cfg.backbone.stride();
    samples
        .iter()
        .zip(strong)
        .map(|(s, &st)| {
            let sal = effective_saliency(s, st)?;
            Ok(Prepared {
                image: s.network_input(),
                mask: SaliencyMask::from_saliency(&sal, s.height, s.width, stride, cfg.sgan.saliency_threshold)?,
            })
        })
        .collect()
}

/// Mean of named loss terms over a batch.
#[derive(Default)]
struct LossTally {
    sums: Vec<(&'static str, f64)>,
    count: usize,
}

impl LossTally {
    fn add(&mut self, terms: &[(&'static str, f64)]) {
        if self.sums.is_empty() {
            self.sums = terms.iter().map(|&(k, _)| (k, 0.0)).collect();
        }
        for (slot, &(_, v)) in self.sums.iter_mut().zip(terms) {
            slot.1 += v;
        }
        self.count += 1;
    }

    fn means(&self) -> Vec<(&'static str, f64)> {
        self.sums.iter().map(|&(k, v)| (k, v / self.count as f64)).collect()
    }
}

/// Minibatch SGD over `n` training images. `per_sample(index, flip, step)`
/// returns named loss terms (the last one is the optimised total) and
/// gradients for one image.
#[allow(clippy::too_many_arguments)]
fn train_loop(
    stage: &'static str,
    params: &mut ParamStore<f32>,
    opt_cfg: SgdConfig,
    iterations: usize,
    cfg: &PipelineConfig,
    n: usize,
    salt: u64,
    log: &mut dyn LogSink,
    mut per_sample: impl FnMut(&ParamStore<f32>, usize, bool, usize) -> Result<(Vec<(&'static str, f64)>, Grads<f32>)>,
) -> Result<()> {
    if n == 0 {
        return Err(PipelineError::Config(format!("{stage}: no training images")));
    }
    let mut rng = stage_rng(cfg.seed, salt);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut opt = Sgd::new(opt_cfg)?;
    let batch = cfg.training.batch_size;
    for step in 0..iterations {
        let mut grads = Grads::zeros_like(params);
        let mut tally = LossTally::default();
        for _ in 0..batch {
            if cursor == order.len() {
                order = (0..n).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let index = order[cursor];
            cursor += 1;
            let flip = cfg.training.flip && rng.random_bool(0.5);
            let (terms, g) = per_sample(params, index, flip, step).map_err(|e| match e {
                PipelineError::Core(
                    inner @ (sgan_core::Error::NonFinite { .. } | sgan_core::Error::LogDomain { .. }),
                ) => PipelineError::Diverged {
                    stage,
                    step,
                    reason: inner.to_string(),
                },
                other => other,
            })?;
            if let Some(&(_, total)) = terms.last() {
                if !total.is_finite() {
                    return Err(PipelineError::Diverged {
                        stage,
                        step,
                        reason: "non-finite loss".into(),
                    });
                }
            }
            tally.add(&terms);
            grads.accumulate(&g);
        }
        grads.scale(1.0 / batch as f32);
        let lr = opt.config().lr_at(step, iterations);
        opt.step(params, &grads, lr);
        if step % cfg.training.log_every == 0 || step + 1 == iterations {
            let mut entry = Map::new();
            entry.insert("stage".into(), json!(stage));
            entry.insert("step".into(), json!(step));
            entry.insert("lr".into(), json!(lr));
            for (k, v) in tally.means() {
                entry.insert(k.into(), json!(v));
            }
            if let Some(g) = params.get(GAMMA) {
                entry.insert("gamma".into(), json!(g.item()));
            }
            log::debug!("{}", Value::Object(entry.clone()));
            log.record(Value::Object(entry));
        }
    }
    Ok(())
}

/// Stage 0: the attention-free classifier trained with the
/// classification loss alone.
pub fn train_baseline(cfg: &PipelineConfig, data: &Dataset, log: &mut dyn LogSink) -> Result<ClassifierModel<f32>> {
    let mut init = stage_rng(cfg.seed, SALT_INIT);
    let mut model = ClassifierModel::new(&mut init, cfg.backbone.clone(), data.num_classes, Variant::Baseline)?;
    let images: Vec<Tensor<f32>> = data.train.iter().map(|s| s.network_input()).collect();
    let flipped: Vec<Tensor<f32>> = images.iter().map(flip_horizontal).collect();
    let mut params = std::mem::take(&mut model.params);
    train_loop(
        "baseline",
        &mut params,
        cfg.optimizer.clone(),
        cfg.training.baseline_iterations,
        cfg,
        data.train.len(),
        SALT_BASELINE,
        log,
        |p, i, flip, _| {
            let m = ClassifierModel {
                params: p.clone(),
                ..model.clone()
            };
            let img = if flip { &flipped[i] } else { &images[i] };
            let (l, g) = m.loss_and_grads(img.clone(), &data.train[i].labels, None, None, 0.0)?;
            Ok((vec![("L_cls", l.cls)], g))
        },
    )?;
    model.params = params;
    Ok(model)
}

/// Per-label accuracy of `τ > 0.5` over `samples`.
pub fn label_accuracy(cfg: &PipelineConfig, model: &ClassifierModel<f32>, samples: &[Sample]) -> Result<f64> {
    let strong = vec![false; samples.len()];
    let prepared = prepare(cfg, samples, &strong)?;
    let (mut right, mut total) = (0usize, 0usize);
    for (s, p) in samples.iter().zip(&prepared) {
        let tau = model.predict(p.image.clone(), Some(&p.mask))?;
        for (z, &t) in tau.iter().enumerate() {
            right += usize::from((t > 0.5) == s.labels.is_present(z));
            total += 1;
        }
    }
    Ok(right as f64 / total.max(1) as f64)
}

/// Image-resolution CAMs of one training image, from the variant's
/// default source unless `source` is given.
fn image_cams(
    cfg: &PipelineConfig,
    model: &ClassifierModel<f32>,
    sample: &Sample,
    prepared: &Prepared,
    source: CamSource,
) -> Result<sgan_core::nn::CamStack<f32>> {
    let cams = model.cams(prepared.image.clone(), &sample.labels, Some(&prepared.mask), source)?;
    let _ = cfg;
    Ok(fit_resolution(&cams, sample.height, sample.width)?)
}

/// Initial foreground seeds from the baseline CAMs; strong images get
/// their ground truth.
pub fn initial_seed_masks(cfg: &PipelineConfig, baseline: &ClassifierModel<f32>, data: &Dataset, strong: &[bool]) -> Result<Vec<SeedMask>> {
    let prepared = prepare(cfg, &data.train, strong)?;
    data.train
        .iter()
        .zip(&prepared)
        .zip(strong)
        .map(|((s, p), &st)| {
            if st {
                return Ok(s.gt_mask()?);
            }
            let cams = image_cams(cfg, baseline, s, p, CamSource::Cls)?;
            Ok(initial_seeds(&cams, &s.labels, cfg.thresholds.initial)?)
        })
        .collect()
}

/// Stage 1: trains `variant` starting from the baseline weights. `seeds`
/// are image-resolution masks, one per training image.
pub fn train_sgan(
    cfg: &PipelineConfig,
    baseline: &ClassifierModel<f32>,
    variant: Variant,
    data: &Dataset,
    seeds: &[SeedMask],
    strong: &[bool],
    log: &mut dyn LogSink,
) -> Result<ClassifierModel<f32>> {
    if seeds.len() != data.train.len() {
        return Err(PipelineError::Config(format!(
            "{} seed masks for {} training images",
            seeds.len(),
            data.train.len()
        )));
    }
    let mut init = stage_rng(cfg.seed, SALT_INIT ^ SALT_SGAN);
    let mut model = ClassifierModel::from_baseline(&mut init, baseline, variant);
    let stride = cfg.backbone.stride();
    let prepared = prepare(cfg, &data.train, strong)?;
    let small: Vec<SeedMask> = seeds.iter().map(|s| s.downsample(stride)).collect::<Result<_, _>>()?;
    let flipped: Vec<(Tensor<f32>, SaliencyMask, SeedMask)> = prepared
        .iter()
        .zip(&small)
        .map(|(p, s)| (flip_horizontal(&p.image), p.mask.flip_horizontal(), s.flip_horizontal()))
        .collect();
    let lambda = if variant.has_seed_branch() { cfg.sgan.lambda } else { 0.0 };
    let mut opt_cfg = cfg.optimizer.clone();
    if cfg.sgan.gamma_lr_mult != 1.0 {
        opt_cfg.lr_multipliers.push((GAMMA.into(), cfg.sgan.gamma_lr_mult));
    }
    if variant.has_seed_branch() && cfg.sgan.seed_branch_lr_mult != 1.0 {
        for name in [SEED_BRANCH_WEIGHT, SEED_BRANCH_BIAS] {
            opt_cfg.lr_multipliers.push((name.into(), cfg.sgan.seed_branch_lr_mult));
        }
    }
    let mut params = std::mem::take(&mut model.params);
    train_loop(
        "sgan",
        &mut params,
        opt_cfg,
        cfg.training.sgan_iterations,
        cfg,
        data.train.len(),
        SALT_SGAN,
        log,
        |p, i, flip, _| {
            let m = ClassifierModel {
                params: p.clone(),
                ..model.clone()
            };
            let (img, mask, sd) = if flip {
                (&flipped[i].0, &flipped[i].1, &flipped[i].2)
            } else {
                (&prepared[i].image, &prepared[i].mask, &small[i])
            };
            let (l, g) = m.loss_and_grads(img.clone(), &data.train[i].labels, Some(mask), Some(sd), lambda)?;
            Ok((vec![("L_cls", l.cls), ("L_seed", l.seed), ("L_total", l.total)], g))
        },
    )?;
    model.params = params;
    Ok(model)
}

/// Final seeds: the α rule on CAMs from `source` and the β rule on the
/// saliency map. Strong images get their ground truth.
pub fn final_seed_masks(
    cfg: &PipelineConfig,
    model: &ClassifierModel<f32>,
    data: &Dataset,
    strong: &[bool],
    source: CamSource,
) -> Result<Vec<SeedMask>> {
    let prepared = prepare(cfg, &data.train, strong)?;
    data.train
        .iter()
        .zip(&prepared)
        .zip(strong)
        .map(|((s, p), &st)| {
            if st {
                return Ok(semi_substitute(s.gt.as_deref().ok_or(sgan_core::Error::MissingGroundTruth(s.index))?, s.height, s.width, data.num_classes)?.1);
            }
            let cams = model.cams(p.image.clone(), &s.labels, Some(&p.mask), source)?;
            let sal = effective_saliency(s, st)?;
            Ok(final_seeds(
                &cams,
                &sal,
                s.height,
                s.width,
                &s.labels,
                cfg.thresholds.alpha,
                cfg.thresholds.beta,
            )?)
        })
        .collect()
}

/// Foreground seeds from thresholding CAMs at `alpha` alone, before any
/// saliency rule.
pub fn cam_seed_masks(cfg: &PipelineConfig, model: &ClassifierModel<f32>, data: &Dataset, source: CamSource) -> Result<Vec<SeedMask>> {
    let strong = vec![false; data.train.len()];
    let prepared = prepare(cfg, &data.train, &strong)?;
    data.train
        .iter()
        .zip(&prepared)
        .map(|(s, p)| {
            let cams = image_cams(cfg, model, s, p, source)?;
            Ok(initial_seeds(&cams, &s.labels, cfg.thresholds.alpha)?)
        })
        .collect()
}

/// Pooled seed quality over training images where `include[i]` holds.
pub fn seed_quality(seeds: &[SeedMask], data: &Dataset, include: &[bool]) -> Result<SeedQuality> {
    let mut counts = SeedCounts::default();
    for ((m, s), &inc) in seeds.iter().zip(&data.train).zip(include) {
        if inc {
            let gt = s.gt.as_ref().ok_or(sgan_core::Error::MissingGroundTruth(s.index))?;
            counts.add_image(m, gt)?;
        }
    }
    Ok(counts.quality())
}

/// Fraction of `class` (one-based) foreground seeds lying on ground-truth
/// background, pooled over the training images.
pub fn misspread_fraction(seeds: &[SeedMask], data: &Dataset, class: u8) -> Result<f64> {
    let (mut on_bg, mut total) = (0usize, 0usize);
    for (m, s) in seeds.iter().zip(&data.train) {
        let gt = s.gt.as_ref().ok_or(sgan_core::Error::MissingGroundTruth(s.index))?;
        for (u, &l) in m.labels().iter().enumerate() {
            if l == class {
                total += 1;
                on_bg += usize::from(gt[u] == SeedMask::BACKGROUND);
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { on_bg as f64 / total as f64 })
}

/// Stage 3: the segmentation network, initialised from `init` (the
/// baseline backbone), trained on image-resolution `seeds`.
pub fn train_seg(
    cfg: &PipelineConfig,
    init: &ClassifierModel<f32>,
    data: &Dataset,
    seeds: &[SeedMask],
    log: &mut dyn LogSink,
) -> Result<SegModel<f32>> {
    let mut rng = stage_rng(cfg.seed, SALT_INIT ^ SALT_SEG);
    let mut model = SegModel::from_classifier(&mut rng, init);
    let stride = cfg.backbone.stride();
    let small: Vec<SeedMask> = seeds.iter().map(|s| s.downsample(stride)).collect::<Result<_, _>>()?;
    let images: Vec<Tensor<f32>> = data.train.iter().map(|s| s.network_input()).collect();
    let raw: Vec<Tensor<f32>> = data.train.iter().map(|s| s.image_tensor()).collect();
    let mut cache: HashMap<(usize, bool), (usize, Tensor<f32>)> = HashMap::new();
    let interval = cfg.training.crf_interval;
    let weight = cfg.training.boundary_weight;
    let mut opt_cfg = cfg.optimizer.clone();
    if cfg.training.seg_head_lr_mult != 1.0 {
        for name in [SEG_HEAD_WEIGHT, SEG_HEAD_BIAS] {
            opt_cfg.lr_multipliers.push((name.into(), cfg.training.seg_head_lr_mult));
        }
    }
    let mut params = std::mem::take(&mut model.params);
    train_loop(
        "seg",
        &mut params,
        opt_cfg,
        cfg.training.seg_iterations,
        cfg,
        data.train.len(),
        SALT_SEG,
        log,
        |p, i, flip, step| {
            let m = SegModel {
                params: p.clone(),
                ..model.clone()
            };
            let (img, sd) = if flip {
                (flip_horizontal(&images[i]), small[i].flip_horizontal())
            } else {
                (images[i].clone(), small[i].clone())
            };
            let (l, g) = m.loss_and_grads(img, &sd, weight, |phi| {
                if let Some((at, r)) = cache.get(&(i, flip)) {
                    if step - at < interval {
                        return Ok(Some(r.clone()));
                    }
                }
                let rimg = if flip { flip_horizontal(&raw[i]) } else { raw[i].clone() };
                let r = crf_target(&rimg, phi, stride, &cfg.crf)?;
                cache.insert((i, flip), (step, r.clone()));
                Ok(Some(r))
            })?;
            Ok((
                vec![("L_balance_seed", l.balanced_seed), ("L_boundary", l.boundary), ("L_total", l.total)],
                g,
            ))
        },
    )?;
    model.params = params;
    Ok(model)
}

/// Predicted label maps for `samples`.
pub fn predict_all(model: &SegModel<f32>, samples: &[Sample]) -> Result<Vec<Vec<u8>>> {
    samples
        .iter()
        .map(|s| Ok(model.predict(s.network_input())?))
        .collect()
}

/// Segmentation metrics on the validation split.
pub fn evaluate_val(model: &SegModel<f32>, data: &Dataset) -> Result<MetricsReport> {
    let preds = predict_all(model, &data.val)?;
    let gts: Vec<&[u8]> = data
        .val
        .iter()
        .map(|s| s.gt.as_deref().ok_or(sgan_core::Error::MissingGroundTruth(s.index)))
        .collect::<Result<_, _>>()?;
    Ok(evaluate_segmentation(&preds, &gts, data.num_classes)?)
}

/// Everything measured by one end-to-end run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub semi_fraction: f64,
    pub baseline_label_accuracy: f64,
    pub initial_seeds: SeedQuality,
    /// Over weakly annotated training images only.
    pub final_seeds: SeedQuality,
    pub gamma: Option<f64>,
    pub segmentation: MetricsReport,
}

/// Trained models and seeds of one end-to-end run.
pub struct RunArtifacts {
    pub baseline: ClassifierModel<f32>,
    pub initial_seeds: Vec<SeedMask>,
    pub model: ClassifierModel<f32>,
    pub final_seeds: Vec<SeedMask>,
    pub seg: SegModel<f32>,
    pub strong: Vec<bool>,
    pub summary: RunSummary,
}

/// All four stages for `cfg.variant`. The baseline variant skips stage 1
/// and mines its final seeds from the baseline CAMs.
pub fn run_all(cfg: &PipelineConfig, data: &Dataset, log: &mut dyn LogSink) -> Result<RunArtifacts> {
    cfg.validate()?;
    let strong = semi_indices(data.train.len(), cfg.semi_fraction, cfg.seed);
    let weak: Vec<bool> = strong.iter().map(|s| !s).collect();
    let baseline = train_baseline(cfg, data, log)?;
    let accuracy = label_accuracy(cfg, &baseline, &data.train)?;
    let initial = initial_seed_masks(cfg, &baseline, data, &strong)?;
    let model = if cfg.variant == Variant::Baseline {
        baseline.clone()
    } else {
        train_sgan(cfg, &baseline, cfg.variant, data, &initial, &strong, log)?
    };
    let final_masks = final_seed_masks(cfg, &model, data, &strong, cfg.variant.cam_source())?;
    let seg = train_seg(cfg, &baseline, data, &final_masks, log)?;
    let summary = RunSummary {
        variant: cfg.variant,
        seed: cfg.seed,
        semi_fraction: cfg.semi_fraction,
        baseline_label_accuracy: accuracy,
        initial_seeds: seed_quality(&initial, data, &weak)?,
        final_seeds: seed_quality(&final_masks, data, &weak)?,
        gamma: model.gamma(),
        segmentation: evaluate_val(&seg, data)?,
    };
    Ok(RunArtifacts {
        baseline,
        initial_seeds: initial,
        model,
        final_seeds: final_masks,
        seg,
        strong,
        summary,
    })
}

/// Ground-truth saliency for every training image, as used by strong
/// images.
pub fn gt_saliency(data: &Dataset) -> Vec<Vec<f32>> {
    data.train
        .iter()
        .map(|s| s.gt.as_deref().map(clean_saliency).unwrap_or_default())
        .collect()
}
