//! Diagnostics against independent pixel-scan oracles, plus training-step
//! edge cases that need a real model and scenes.

use std::collections::BTreeSet;

use panlab_core::analysis::{class_prototypes_from_data, future_confusion_profile};
use panlab_core::autodiff::Tensor;
use panlab_core::future_aware::{
    downsample_labels_majority, total_loss_value, train_step, AuxState, FutureAwareConfig,
    TrainStepConfig,
};
use panlab_core::model::{panoptic_inference, InferenceConfig, LossWeights, ModelConfig, QueryModel};
use panlab_core::optim::{AdamWConfig, AdamWState};
use panlab_core::panoptic::{ClassId, PanopticMap};
use panlab_core::rng::rng_for;
use panlab_core::scenes::{generate_dataset, SceneSpec};
use panlab_core::stream::mask_labels;

fn small_cfg() -> ModelConfig {
    ModelConfig {
        canvas: (32, 32),
        conv_channels: [8, 12],
        feat_channels: 16,
        embed_dim: 16,
        num_queries: 10,
        num_classes: 5,
        aux_head: None,
    }
}

#[test]
fn confusion_profile_matches_pixel_scan_oracle() {
    let spec = SceneSpec::toy(3, 2, 32, 32);
    let eval = generate_dataset(&spec, 6, 5, None).unwrap();
    let model = QueryModel::init(small_cfg(), 3).unwrap();
    let known: BTreeSet<ClassId> = [1u32, 4, 5].into_iter().collect();
    let infer = InferenceConfig::default();
    let profile =
        future_confusion_profile(&model, &eval, &spec.labels, &known, 1, &infer).unwrap();

    // independent scan over the same inference outputs
    let (mut to_old, mut to_bg, mut to_future) = (0u64, 0u64, 0u64);
    for s in &eval {
        let out = model
            .infer(&Tensor::from_vec(&[3, 32, 32], s.image.clone()))
            .unwrap();
        let pred = panoptic_inference(&out, &spec.labels, &infer);
        for i in 0..32 * 32 {
            let g = s.annotation.semantic()[i];
            if g == 0 || known.contains(&g) {
                continue;
            }
            let p = pred.semantic()[i];
            if p == 0 {
                to_bg += 1;
            } else if known.contains(&p) {
                to_old += 1;
            } else {
                to_future += 1;
            }
        }
    }
    let total = (to_old + to_bg + to_future) as f64;
    assert!((profile.fraction_to_old - to_old as f64 / total).abs() < 1e-12);
    assert!((profile.fraction_to_background - to_bg as f64 / total).abs() < 1e-12);
    assert!((profile.fraction_to_future - to_future as f64 / total).abs() < 1e-12);
    let sum =
        profile.fraction_to_old + profile.fraction_to_background + profile.fraction_to_future;
    assert!((sum - 1.0).abs() < 1e-9);
}

#[test]
fn confusion_profile_void_predictor_goes_to_background() {
    let spec = SceneSpec::toy(3, 2, 32, 32);
    let eval = generate_dataset(&spec, 4, 6, None).unwrap();
    let model = QueryModel::init(small_cfg(), 3).unwrap();
    let known: BTreeSet<ClassId> = [1u32].into_iter().collect();
    // impossible score threshold -> every pixel predicted void
    let infer = InferenceConfig { score_threshold: 1.1, mask_threshold: 0.5 };
    let profile =
        future_confusion_profile(&model, &eval, &spec.labels, &known, 1, &infer).unwrap();
    assert_eq!(profile.fraction_to_old, 0.0);
    assert_eq!(profile.fraction_to_background, 1.0);
    assert_eq!(profile.fraction_to_future, 0.0);
}

#[test]
fn confusion_profile_errors_without_future_pixels() {
    let spec = SceneSpec::toy(3, 2, 32, 32);
    let eval = generate_dataset(&spec, 4, 6, None).unwrap();
    let model = QueryModel::init(small_cfg(), 3).unwrap();
    let known: BTreeSet<ClassId> = (1..=5).collect();
    let infer = InferenceConfig::default();
    assert!(future_confusion_profile(&model, &eval, &spec.labels, &known, 1, &infer).is_err());
}

#[test]
fn data_prototypes_match_flat_sum_oracle() {
    let spec = SceneSpec::toy(3, 2, 32, 32);
    let eval = generate_dataset(&spec, 5, 9, None).unwrap();
    let model = QueryModel::init(small_cfg(), 3).unwrap();
    let classes: BTreeSet<ClassId> = (1..=5).collect();
    let (protos, _missing) = class_prototypes_from_data(&model, &eval, &classes).unwrap();

    // flat enumeration across the whole set (pixel-count weighting)
    let cf = 16usize;
    let mut sums: std::collections::BTreeMap<ClassId, (Vec<f64>, usize)> = Default::default();
    for s in &eval {
        let out = model
            .infer(&Tensor::from_vec(&[3, 32, 32], s.image.clone()))
            .unwrap();
        let labels_feat = downsample_labels_majority(&s.annotation, 4);
        let (fh, fw) = (8usize, 8usize);
        for i in 0..fh {
            for j in 0..fw {
                let c = labels_feat[i * fw + j];
                if c == 0 {
                    continue;
                }
                let e = sums.entry(c).or_insert((vec![0.0; cf], 0));
                for ch in 0..cf {
                    e.0[ch] += out.features.data[ch * fh * fw + i * fw + j];
                }
                e.1 += 1;
            }
        }
    }
    for (c, (sum, n)) in sums {
        let got = &protos[&c];
        for ch in 0..cf {
            assert!(
                (got[ch] - sum[ch] / n as f64).abs() < 1e-12,
                "class {c} channel {ch}"
            );
        }
    }
}

#[test]
fn fully_labeled_batch_yields_no_regions_and_zero_losses() {
    let mut spec = SceneSpec::toy(3, 2, 32, 32);
    spec.min_things = 1;
    spec.max_things = 2;
    let data = generate_dataset(&spec, 4, 11, None).unwrap();
    let mut model = QueryModel::init(small_cfg(), 3).unwrap();
    let mut opt = AdamWState::new(model.tensors());
    let mut aux = AuxState::default();
    // every class is current: nothing is unlabeled after masking
    let current: BTreeSet<ClassId> = (1..=5).collect();
    let images: Vec<Tensor> =
        data.iter().map(|s| Tensor::from_vec(&[3, 32, 32], s.image.clone())).collect();
    let masked: Vec<PanopticMap> =
        data.iter().map(|s| mask_labels(&s.annotation, &current)).collect();
    let batch: Vec<(&Tensor, &PanopticMap)> =
        images.iter().zip(masked.iter()).map(|(i, m)| (i, m)).collect();
    let fa = FutureAwareConfig { min_region_pixels: 4, confidence_min: 0.5, ..Default::default() };
    let tc = TrainStepConfig {
        fa: &fa,
        weights: LossWeights::default(),
        adamw: AdamWConfig::default(),
        protocol_step: 1,
        global_step: 0,
        seed: 5,
        known: &current,
    };
    let rec = train_step(&mut model, &mut opt, &mut aux, &batch, &spec.labels, &tc).unwrap();
    // scenes cover the canvas with labeled classes, so no majority-unlabeled
    // support and no unlabeled pixels exist
    assert_eq!(rec.num_regions, 0);
    assert_eq!(rec.num_unlabeled, 0);
    assert_eq!(rec.loss_contrast, 0.0);
    assert_eq!(rec.loss_repulsion, 0.0);
}

#[test]
fn fifty_step_trace_is_finite_and_decreasing() {
    let mut spec = SceneSpec::toy(3, 2, 32, 32);
    spec.min_things = 1;
    spec.max_things = 2;
    let data = generate_dataset(&spec, 6, 21, None).unwrap();
    let mut model = QueryModel::init(small_cfg(), 4).unwrap();
    let mut opt = AdamWState::new(model.tensors());
    let mut aux = AuxState::default();
    let current: BTreeSet<ClassId> = (1..=3).collect();
    let images: Vec<Tensor> =
        data.iter().map(|s| Tensor::from_vec(&[3, 32, 32], s.image.clone())).collect();
    let masked: Vec<PanopticMap> =
        data.iter().map(|s| mask_labels(&s.annotation, &current)).collect();
    let batch: Vec<(&Tensor, &PanopticMap)> =
        images.iter().zip(masked.iter()).map(|(i, m)| (i, m)).collect();
    let fa = FutureAwareConfig { min_region_pixels: 4, confidence_min: 0.5, ..Default::default() };
    let mut trace = Vec::new();
    for step in 0..50u64 {
        let tc = TrainStepConfig {
            fa: &fa,
            weights: LossWeights::default(),
            adamw: AdamWConfig { lr: 2e-3, ..Default::default() },
            protocol_step: 1,
            global_step: step,
            seed: 5,
            known: &current,
        };
        let rec = train_step(&mut model, &mut opt, &mut aux, &batch, &spec.labels, &tc).unwrap();
        assert!(rec.loss_total.is_finite());
        trace.push(rec.loss_total);
    }
    let avg = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let first = avg(&trace[..5]);
    let last = avg(&trace[45..]);
    assert!(last < first, "5-step moving average should fall: {first} -> {last}");
}

#[test]
fn total_loss_sum_is_order_stable() {
    let cfg = FutureAwareConfig::default();
    let mut rng = rng_for(17, "sum", 0);
    for _ in 0..100 {
        let p = rand::Rng::random_range(&mut rng, 0.0..10.0);
        let r = rand::Rng::random_range(&mut rng, 0.0..10.0);
        let k = rand::Rng::random_range(&mut rng, 0.0..10.0);
        let a = total_loss_value(p, r, k, &cfg).unwrap();
        let b = p + (cfg.lambda_repulsion * k + cfg.lambda_contrast * r);
        let c = (cfg.lambda_contrast * r + p) + cfg.lambda_repulsion * k;
        assert!((a - b).abs() <= 1e-12);
        assert!((a - c).abs() <= 1e-12);
    }
}
