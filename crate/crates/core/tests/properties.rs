use candle_core::{DType, Device, Tensor};
use distillkit::data::{resize_label, BatchSampler, Normalization, SegSample};
use distillkit::losses::{cross_entropy_seg, hcl_loss, logits_kd_loss, PyramidSpec};
use distillkit::metrics::ConfusionMatrix;
use distillkit::models::{EncoderConfig, SegModel};
use distillkit::ops::{map_to_tokens, tokens_to_map};
use distillkit::tensors::{FeatureMap, LabelBatch, IGNORE_INDEX};
use distillkit::train::{poly_lr, ScheduleConfig};
use proptest::prelude::*;

fn tensor(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

fn labels(k: u8, n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop_oneof![9 => 0..k, 1 => Just(IGNORE_INDEX)], n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn hcl_is_non_negative_and_zero_on_equal_maps(v in prop::collection::vec(-3.0f64..3.0, 2 * 3 * 6 * 6)) {
        let a = FeatureMap::new(tensor(&v, &[2, 3, 6, 6]), 1).unwrap();
        let shifted: Vec<f64> = v.iter().rev().copied().collect();
        let b = FeatureMap::new(tensor(&shifted, &[2, 3, 6, 6]), 1).unwrap();
        let spec = PyramidSpec::default();
        let same = hcl_loss(&a, &a, &spec).unwrap().to_scalar::<f64>().unwrap();
        let diff = hcl_loss(&a, &b, &spec).unwrap().to_scalar::<f64>().unwrap();
        prop_assert_eq!(same, 0.0);
        prop_assert!(diff >= 0.0);
    }

    #[test]
    fn cross_entropy_ignores_logits_at_ignored_pixels(
        logits in prop::collection::vec(-4.0f64..4.0, 3 * 16),
        noise in prop::collection::vec(-50.0f64..50.0, 3 * 16),
        lab in labels(3, 16),
    ) {
        prop_assume!(lab.iter().any(|&l| l != IGNORE_INDEX));
        let batch = LabelBatch::new(lab.clone(), 1, 4, 4).unwrap();
        let mut perturbed = logits.clone();
        for (p, &l) in lab.iter().enumerate() {
            if l == IGNORE_INDEX {
                for c in 0..3 {
                    perturbed[c * 16 + p] += noise[c * 16 + p];
                }
            }
        }
        let a = cross_entropy_seg(&tensor(&logits, &[1, 3, 4, 4]), &batch, IGNORE_INDEX).unwrap();
        let b = cross_entropy_seg(&tensor(&perturbed, &[1, 3, 4, 4]), &batch, IGNORE_INDEX).unwrap();
        let (a, b) = (a.loss.to_scalar::<f64>().unwrap(), b.loss.to_scalar::<f64>().unwrap());
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn kd_of_identical_logits_is_zero(v in prop::collection::vec(-5.0f64..5.0, 4 * 9), t in 0.5f64..10.0) {
        let x = tensor(&v, &[1, 4, 3, 3]);
        let kd = logits_kd_loss(&x, &x, t).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(kd.abs() < 1e-12, "{}", kd);
    }

    #[test]
    fn confusion_matrices_merge_like_concatenated_batches(a in labels(4, 32), b in labels(4, 32), pa in labels(4, 32), pb in labels(4, 32)) {
        let clean = |v: &[u8]| v.iter().map(|&x| x % 4).collect::<Vec<_>>();
        let (pa, pb) = (clean(&pa), clean(&pb));
        let mut left = ConfusionMatrix::new(4);
        left.update(&LabelBatch::new(pa.clone(), 1, 4, 8).unwrap(), &LabelBatch::new(a.clone(), 1, 4, 8).unwrap()).unwrap();
        let mut right = ConfusionMatrix::new(4);
        right.update(&LabelBatch::new(pb.clone(), 1, 4, 8).unwrap(), &LabelBatch::new(b.clone(), 1, 4, 8).unwrap()).unwrap();
        left.merge(&right).unwrap();
        let mut joint = ConfusionMatrix::new(4);
        joint
            .update(&LabelBatch::new([pa, pb].concat(), 2, 4, 8).unwrap(), &LabelBatch::new([a, b].concat(), 2, 4, 8).unwrap())
            .unwrap();
        prop_assert_eq!(left, joint);
    }

    #[test]
    fn relabeling_permutes_per_class_iou(lab in labels(5, 64), pred in prop::collection::vec(0u8..5, 64), perm in Just([0u8, 1, 2, 3, 4]).prop_shuffle()) {
        let map = |v: &[u8]| v.iter().map(|&x| if x == IGNORE_INDEX { x } else { perm[x as usize] }).collect::<Vec<_>>();
        let score = |p: Vec<u8>, l: Vec<u8>| {
            let mut cm = ConfusionMatrix::new(5);
            cm.update(&LabelBatch::new(p, 1, 8, 8).unwrap(), &LabelBatch::new(l, 1, 8, 8).unwrap()).unwrap();
            cm.miou()
        };
        let before = score(pred.clone(), lab.clone());
        let after = score(map(&pred), map(&lab));
        for c in 0..5 {
            prop_assert_eq!(before.per_class[c], after.per_class[perm[c] as usize]);
        }
        match (before.miou, after.miou) {
            (Some(x), Some(y)) => {
                prop_assert!((x - y).abs() < 1e-9);
                prop_assert!((0.0..=100.0).contains(&x));
            }
            (x, y) => prop_assert_eq!(x, y),
        }
    }

    #[test]
    fn resized_labels_only_contain_source_ids(lab in labels(6, 7 * 5), oh in 1usize..20, ow in 1usize..20) {
        let sample = SegSample::new(vec![0; 7 * 5 * 3], lab.clone(), 7, 5).unwrap();
        let out = resize_label(&sample, oh, ow);
        prop_assert_eq!(out.len(), oh * ow);
        prop_assert!(out.iter().all(|id| lab.contains(id)));
    }

    #[test]
    fn normalization_round_trips(x in 0.0f32..1.0, c in 0usize..3) {
        let n = Normalization::default();
        prop_assert!((n.denormalize(n.normalize(x, c), c) - x).abs() < 1e-6);
    }

    #[test]
    fn tokens_and_maps_round_trip(b in 1usize..3, c in 1usize..5, h in 1usize..6, w in 1usize..6) {
        let n = b * h * w * c;
        let tokens = tensor(&(0..n).map(|i| i as f64).collect::<Vec<_>>(), &[b, h * w, c]);
        let back = map_to_tokens(&tokens_to_map(&tokens, h, w).unwrap()).unwrap();
        prop_assert_eq!(back.to_vec3::<f64>().unwrap(), tokens.to_vec3::<f64>().unwrap());
    }

    #[test]
    fn poly_schedule_boundaries_and_monotonicity(k in 1u64..5000, power in 0.0f64..3.0, base in 1e-6f64..1.0) {
        let s = ScheduleConfig { total_iters: k, poly_power: power };
        prop_assert_eq!(poly_lr(0, base, &s), base);
        prop_assert_eq!(poly_lr(k, base, &s), 0.0);
        let mut prev = base;
        for i in (0..=k).step_by((k as usize / 50).max(1)) {
            let lr = poly_lr(i, base, &s);
            prop_assert!(lr <= prev);
            prev = lr;
        }
    }
}

#[test]
fn sampler_batches_are_reproducible() {
    let make = |seed| BatchSampler::new(10, 3, seed, (8, 8), 4, Normalization::default(), Default::default()).unwrap();
    let (a, b, other) = (make(5), make(5), make(6));
    let run = |s: &BatchSampler| (0..12).map(|i| s.indices_for(i).unwrap()).collect::<Vec<_>>();
    assert_eq!(run(&a), run(&b));
    assert_ne!(run(&a), run(&other));
}

#[test]
fn forward_is_bitwise_repeatable() {
    let model = SegModel::new(&EncoderConfig::desk_student(8), 3, DType::F32, &Device::Cpu).unwrap();
    let x = Tensor::randn(0f32, 1.0, (2, 3, 32, 32), &Device::Cpu).unwrap();
    let a: Vec<f32> = model.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let b: Vec<f32> = model.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

/// Regression pin: changing either count means the desk architecture changed.
#[test]
fn desk_parameter_counts_are_pinned() {
    let count = |cfg| SegModel::new(&cfg, 0, DType::F32, &Device::Cpu).unwrap().count_params();
    assert_eq!(count(EncoderConfig::desk_student(8)), 456_232);
    assert_eq!(count(EncoderConfig::desk_teacher(8)), 3_057_224);
}
