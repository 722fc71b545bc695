//! Property tests for the invariants of attention, losses, CRF, seeds,
//! metrics and synthetic data.

use proptest::prelude::*;
use sgan_core::attention::{enhance, saliency_attention, SaliencyMask, ROW_EPS};
use sgan_core::crf::{mean_field, CrfParams};
use sgan_core::losses::classification_loss;
use sgan_core::metrics::{evaluate_segmentation, f_beta, Confusion};
use sgan_core::nn::{CamSource, CamStack};
use sgan_core::seeds::{ensemble_cams, initial_seeds, ImageLabels, SeedMask};
use sgan_core::synth::{generate_dataset, DatasetConfig, SaliencyCorruption};
use sgan_core::{Graph, Tensor};

fn matrix(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, n * n)
}

fn attention_case() -> impl Strategy<Value = (usize, Vec<f64>, Vec<bool>)> {
    (1usize..10).prop_flat_map(|n| (Just(n), matrix(n), prop::collection::vec(any::<bool>(), n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn context_attention_rows_are_distributions_within_their_group((n, p, b) in attention_case()) {
        let mut g = Graph::<f64>::new();
        let pv = g.constant(Tensor::new(&[n, n], p.clone()).unwrap());
        let d = g.masked_row_normalize(pv, Some(b.clone()), ROW_EPS).unwrap();
        let d = g.value(d).data().to_vec();
        for i in 0..n {
            let support = (0..n).any(|j| b[i] == b[j] && p[i * n + j] > 0.0);
            let row: f64 = d[i * n..(i + 1) * n].iter().sum();
            if support {
                prop_assert!((row - 1.0).abs() <= 1e-6, "row {} sums to {}", i, row);
            } else {
                prop_assert_eq!(row, 0.0);
            }
            for j in 0..n {
                prop_assert!(d[i * n + j] >= 0.0);
                if b[i] != b[j] {
                    prop_assert_eq!(d[i * n + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn saliency_attention_is_symmetric(bits in prop::collection::vec(any::<bool>(), 1..40)) {
        let n = bits.len();
        let s: Tensor<f64> = saliency_attention(&SaliencyMask::from_bits(bits, 1, n).unwrap());
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(s.data()[i * n + j], s.data()[j * n + i]);
            }
            prop_assert_eq!(s.data()[i * n + i], 1.0);
        }
    }

    #[test]
    fn closed_gate_leaves_features_bitwise_unchanged(
        x in prop::collection::vec(-5.0..5.0f64, 12),
        p in matrix(4),
    ) {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new(&[3, 2, 2], x.clone()).unwrap());
        let pv = g.constant(Tensor::new(&[4, 4], p).unwrap());
        let d = g.masked_row_normalize(pv, None, ROW_EPS).unwrap();
        let gamma = g.constant(Tensor::scalar(0.0));
        let e = enhance(&mut g, xv, d, gamma).unwrap();
        let out = g.value(e).data();
        for (a, b) in out.iter().zip(&x) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn classification_loss_is_positive_and_zero_only_at_certainty(
        tau in prop::collection::vec(0.001..0.999f64, 1..6),
        signs in prop::collection::vec(any::<bool>(), 6),
    ) {
        let m = tau.len();
        let labels = ImageLabels::new(signs[..m].to_vec());
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::new(&[m], tau.clone()).unwrap());
        let l = classification_loss(&mut g, t, &labels).unwrap();
        let oracle: f64 = tau
            .iter()
            .zip(labels.present())
            .map(|(&t, &y)| -(if y { t } else { 1.0 - t }).ln())
            .sum::<f64>() / m as f64;
        prop_assert!((g.value(l).item() - oracle).abs() < 1e-9);
        prop_assert!(g.value(l).item() > 0.0);
    }

    #[test]
    fn f_beta_lies_between_precision_and_recall(p in 0.0..1.0f64, r in 0.0..1.0f64, b2 in 0.05..4.0f64) {
        let f = f_beta(p, r, b2);
        prop_assert!(f >= p.min(r) - 1e-12 && f <= p.max(r) + 1e-12);
        prop_assert!((f_beta(p, p, b2) - p).abs() < 1e-12);
    }

    #[test]
    fn miou_is_invariant_under_class_permutation(
        pred in prop::collection::vec(0u8..4, 36),
        gt in prop::collection::vec(0u8..4, 36),
        perm in Just(vec![2u8, 0, 3, 1]).prop_shuffle(),
    ) {
        let a = evaluate_segmentation(&[pred.clone()], &[gt.clone()], 3).unwrap();
        let pp: Vec<u8> = pred.iter().map(|&v| perm[v as usize]).collect();
        let pg: Vec<u8> = gt.iter().map(|&v| perm[v as usize]).collect();
        let b = evaluate_segmentation(&[pp], &[pg], 3).unwrap();
        prop_assert!((a.miou - b.miou).abs() < 1e-12);
        let mut c = Confusion::new(4);
        c.add_image(&pred, &gt).unwrap();
        prop_assert_eq!(c.total(), 36);
        for (k, row) in c.rows().iter().enumerate() {
            let gt_count = gt.iter().filter(|&&v| v as usize == k).count() as u64;
            prop_assert_eq!(row.iter().sum::<u64>(), gt_count);
        }
    }

    #[test]
    fn crf_output_is_a_distribution(
        logits in prop::collection::vec(-2.0..2.0f64, 3 * 9),
        pixels in prop::collection::vec(0.0..255.0f64, 3 * 9),
        iterations in 0usize..4,
    ) {
        let mut phi = Tensor::new(&[3, 3, 3], logits.iter().map(|v| v.exp()).collect()).unwrap();
        for u in 0..9 {
            let total: f64 = (0..3).map(|c| phi.data()[c * 9 + u]).sum();
            for c in 0..3 {
                phi.data_mut()[c * 9 + u] /= total;
            }
        }
        let image = Tensor::new(&[3, 3, 3], pixels).unwrap();
        let params = CrfParams { iterations, ..Default::default() };
        let r = mean_field(&image, &phi, &params).unwrap();
        for u in 0..9 {
            let total: f64 = (0..3).map(|c| r.data()[c * 9 + u]).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
        prop_assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        if iterations == 0 {
            prop_assert!(r.max_abs_diff(&phi) < 1e-6);
        }
    }

    #[test]
    fn seed_area_shrinks_as_the_threshold_rises(maps in prop::collection::vec(0.0..1.0f64, 2 * 16)) {
        let cams = CamStack { maps: Tensor::new(&[2, 4, 4], maps).unwrap(), source: CamSource::Cls };
        let labels = ImageLabels::new(vec![true, true]);
        let counts: Vec<usize> = [0.1, 0.2, 0.3]
            .iter()
            .map(|&a| initial_seeds(&cams, &labels, a).unwrap().count_foreground())
            .collect();
        prop_assert!(counts[0] >= counts[1] && counts[1] >= counts[2]);
    }

    #[test]
    fn ensemble_with_a_zero_operand_returns_the_normalised_input(maps in prop::collection::vec(0.01..1.0f64, 2 * 9)) {
        let mut t = Tensor::new(&[2, 3, 3], maps).unwrap();
        sgan_core::nn::max_normalize(&mut t);
        let cls = CamStack { maps: t.clone(), source: CamSource::Cls };
        let zero = CamStack { maps: Tensor::zeros(&[2, 3, 3]), source: CamSource::Seg };
        let e = ensemble_cams(&cls, &zero).unwrap();
        prop_assert!(e.maps.max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn flipping_a_seed_mask_twice_is_the_identity(labels in prop::collection::vec(prop::sample::select(vec![0u8, 1, 2, 255]), 20)) {
        let m = SeedMask::from_labels(4, 5, labels, 2).unwrap();
        prop_assert_eq!(m.flip_horizontal().flip_horizontal(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_samples_are_sound(
        seed in any::<u64>(),
        bias in any::<bool>(),
        shading in 0.0..1.0f64,
        dilate in 0usize..3,
    ) {
        let cfg = DatasetConfig {
            image_size: 32,
            train: 4,
            val: 2,
            rng_seed: seed,
            co_occurrence_bias: bias,
            shading,
            saliency_corruption: SaliencyCorruption { dilate_px: dilate, ..Default::default() },
            ..Default::default()
        };
        let a = generate_dataset(&cfg).unwrap();
        prop_assert_eq!(&a, &generate_dataset(&cfg).unwrap());
        for s in &a {
            let gt = s.gt.as_ref().unwrap();
            let mut present = vec![false; cfg.num_classes];
            for &l in gt {
                if l > 0 {
                    present[l as usize - 1] = true;
                }
            }
            prop_assert_eq!(s.labels.present(), &present[..]);
            prop_assert!(s.saliency.iter().all(|v| (0.0..=1.0).contains(v)));
            let clean = s.clean_saliency().unwrap();
            for (u, &l) in gt.iter().enumerate() {
                prop_assert_eq!(clean[u] >= 0.5, l > 0);
            }
        }
    }
}
