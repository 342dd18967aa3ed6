mod common;
use common::*;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfnet_autodiff::{Tape, Tensor};
use rfnet_core::synth::synthetic_taxonomy;
use rfnet_core::taxonomy::ClassInfo;
use rfnet_core::{lambda_select, multisource_loss, pixel_weights, ClassSet, LabelMap, LabelTaxonomy, IGNORE_ID};

#[test]
fn loss_matches_per_pixel_expansion_on_random_batches() {
    let tax = synthetic_taxonomy();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let case = random_case(&mut rng, &tax);
        let (got, _) = loss_and_grad(&case, &tax);
        let want = brute_force(&case, &tax);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn gradient_matches_closed_form() {
    let tax = synthetic_taxonomy();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let case = random_case(&mut rng, &tax);
        let (_, g) = loss_and_grad(&case, &tax);
        let d = case.logits.dims();
        let (n, k, hw) = (d[0], d[1], d[2] * d[3]);
        for s in 0..n {
            let wts = pixel_weights(&case.labels[s], case.sources[s], &tax).unwrap();
            let total: f64 = wts.iter().sum();
            for p in 0..hw {
                let z: Vec<f64> = (0..k).map(|c| case.logits.data()[(s * k + c) * hw + p]).collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let sum: f64 = e.iter().sum();
                for c in 0..k {
                    let onehot = (case.labels[s].data[p] == c as u32) as u8 as f64;
                    let want = if total > 0.0 {
                        wts[p] * (e[c] / sum - onehot) / total / n as f64
                    } else {
                        0.0
                    };
                    let got = g.data()[(s * k + c) * hw + p];
                    assert!((got - want).abs() <= 1e-12, "sample {s} pixel {p} class {c}: {got} vs {want}");
                }
            }
        }
    }
}

#[test]
fn permuting_set_b_labels_of_auxiliary_samples_changes_nothing() {
    let tax = synthetic_taxonomy();
    let b = set_b(&tax);
    assert!(b.len() >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let case = random_case(&mut rng, &tax);
        let (loss, grad) = loss_and_grad(&case, &tax);
        let permuted = permute_set_b(&case, &tax, &mut rng);
        let (loss2, grad2) = loss_and_grad(&permuted, &tax);
        assert_eq!(loss.to_bits(), loss2.to_bits());
        assert_eq!(grad, grad2);
    }
}

#[test]
fn standard_only_batch_is_plain_cross_entropy() {
    let tax = synthetic_taxonomy();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut case = random_case(&mut rng, &tax);
    case.sources.iter_mut().for_each(|s| *s = STANDARD);
    let flat: Vec<u32> = case.labels.iter().flat_map(|m| m.data.clone()).collect();
    let weights: Vec<f64> = flat.iter().map(|&l| (l != IGNORE_ID) as u8 as f64).collect();
    let mut tape = Tape::new();
    let z = tape.leaf(case.logits.clone(), true);
    let plain = tape.masked_cross_entropy(z, &flat, &weights, IGNORE_ID).unwrap();
    let (got, _) = loss_and_grad(&case, &tax);
    assert_eq!(got, tape.value(plain).item());
}

#[test]
fn fully_masked_auxiliary_sample_contributes_nothing() {
    let tax = synthetic_taxonomy();
    let b = set_b(&tax);
    let (h, w) = (3, 3);
    let k = tax.num_classes();
    let logits = Tensor::from_fn(&[1, k, h, w], |i| (i as f64 * 0.37).sin());
    let case = Case {
        logits,
        labels: vec![LabelMap::new(h, w, (0..h * w).map(|i| b[i % b.len()]).collect()).unwrap()],
        sources: vec![AUX],
    };
    let (loss, grad) = loss_and_grad(&case, &tax);
    assert_eq!(loss, 0.0);
    assert!(grad.data().iter().all(|&g| g == 0.0));
}

#[test]
fn dropping_zero_weight_pixels_keeps_the_loss() {
    let tax = synthetic_taxonomy();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let case = random_case(&mut rng, &tax);
        let (full, _) = loss_and_grad(&case, &tax);
        // Rebuild each sample as a 1 x P strip of its scored pixels only.
        let d = case.logits.dims();
        let (n, k, hw) = (d[0], d[1], d[2] * d[3]);
        let mut per_sample = Vec::new();
        for s in 0..n {
            let wts = pixel_weights(&case.labels[s], case.sources[s], &tax).unwrap();
            let keep: Vec<usize> = (0..hw).filter(|&p| wts[p] > 0.0).collect();
            if keep.is_empty() {
                per_sample.push(0.0);
                continue;
            }
            let logits = Tensor::from_fn(&[1, k, 1, keep.len()], |i| {
                let (c, j) = (i / keep.len(), i % keep.len());
                case.logits.data()[(s * k + c) * hw + keep[j]]
            });
            let labels = LabelMap::new(1, keep.len(), keep.iter().map(|&p| case.labels[s].data[p]).collect()).unwrap();
            let one = Case {
                logits,
                labels: vec![labels],
                sources: vec![case.sources[s]],
            };
            per_sample.push(loss_and_grad(&one, &tax).0);
        }
        let reduced = per_sample.iter().sum::<f64>() / n as f64;
        assert!((full - reduced).abs() < 1e-12, "{full} vs {reduced}");
    }
}

#[test]
fn single_dataset_without_set_b_is_masked_cross_entropy() {
    let tax = LabelTaxonomy::new(
        (0..3)
            .map(|i| ClassInfo {
                id: i,
                name: format!("c{i}"),
                set: ClassSet::A,
            })
            .collect(),
        vec![rfnet_core::taxonomy::DatasetInfo {
            name: "only".into(),
            standard: true,
        }],
        [("only".to_string(), (0..3).map(|i| (i, i)).collect())].into_iter().collect(),
    )
    .unwrap();
    assert_eq!(lambda_select("only", &tax).unwrap(), 1);
    let labels = vec![LabelMap::new(2, 2, vec![0, 2, IGNORE_ID, 1]).unwrap()];
    let logits = Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64 * 0.1 - 0.4);
    let mut tape = Tape::new();
    let z = tape.leaf(logits, true);
    let ours = multisource_loss(&mut tape, z, &labels, &["only"], &tax).unwrap();
    let plain = tape
        .masked_cross_entropy(z, &labels[0].data, &[1.0, 1.0, 0.0, 1.0], IGNORE_ID)
        .unwrap();
    assert_eq!(tape.value(ours).item(), tape.value(plain).item());
}

#[test]
fn labels_outside_the_taxonomy_are_rejected() {
    let tax = synthetic_taxonomy();
    let k = tax.num_classes();
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::zeros(&[1, k, 1, 2]), true);
    let bad = vec![LabelMap::new(1, 2, vec![0, k as u32]).unwrap()];
    assert!(multisource_loss(&mut tape, z, &bad, &[STANDARD], &tax).is_err());
    let ok = vec![LabelMap::new(1, 2, vec![0, 1]).unwrap()];
    assert!(multisource_loss(&mut tape, z, &ok, &["unknown"], &tax).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn batch_order_does_not_matter(seed in any::<u64>(), rot in 1usize..4) {
        let tax = synthetic_taxonomy();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = random_case(&mut rng, &tax);
        let n = case.labels.len();
        let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let per = case.logits.numel() / n;
        let logits = Tensor::new(
            case.logits.dims().to_vec(),
            order.iter().flat_map(|&s| case.logits.data()[s * per..(s + 1) * per].to_vec()).collect(),
        ).unwrap();
        let shuffled = Case {
            logits,
            labels: order.iter().map(|&s| case.labels[s].clone()).collect(),
            sources: order.iter().map(|&s| case.sources[s]).collect(),
        };
        let (a, _) = loss_and_grad(&case, &tax);
        let (b, _) = loss_and_grad(&shuffled, &tax);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn loss_is_finite_and_non_negative(seed in any::<u64>()) {
        let tax = synthetic_taxonomy();
        let case = random_case(&mut ChaCha8Rng::seed_from_u64(seed), &tax);
        let (loss, grad) = loss_and_grad(&case, &tax);
        prop_assert!(loss.is_finite() && loss >= 0.0);
        prop_assert!(grad.data().iter().all(|g| g.is_finite()));
    }
}
