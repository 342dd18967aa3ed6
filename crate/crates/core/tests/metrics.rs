mod common;
use common::*;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfnet_autodiff::Tensor;
use rfnet_core::metrics::{
    bin_index, binned_csv, binned_eval, class_csv, depth_from_disparity, label_ppm, ConfusionMatrix,
    DepthBinnedReport, DEFAULT_BIN_EDGES, MAX_DEPTH,
};
use rfnet_core::{LabelMap, IGNORE_ID};

#[test]
fn iou_matches_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let inst = random_instance(&mut rng);
        let mut cm = ConfusionMatrix::new(inst.k);
        cm.accumulate(&inst.pred, &inst.gt).unwrap();
        assert_eq!(cm.iou().per_class, oracle_iou(&pairs(&inst), inst.k));
    }
}

#[test]
fn binned_iou_matches_filtered_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let edges = DEFAULT_BIN_EDGES;
    for _ in 0..50 {
        let inst = random_instance(&mut rng);
        let report = binned_eval(&inst.pred, &inst.gt, &inst.depth, &edges, inst.k).unwrap();
        for (b, cm) in report.bins.iter().enumerate() {
            let low = if b == 0 { 0.0 } else { edges[b - 1] };
            let in_bin: Vec<(u32, u32)> = pairs(&inst)
                .into_iter()
                .zip(&inst.depth)
                .filter(|(_, &d)| d > low && d <= edges[b])
                .map(|(p, _)| p)
                .collect();
            assert_eq!(cm.iou().per_class, oracle_iou(&in_bin, inst.k), "bin {b}");
        }
    }
}

#[test]
fn bins_sum_to_the_global_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..50 {
        let inst = random_instance(&mut rng);
        let report = binned_eval(&inst.pred, &inst.gt, &inst.depth, &DEFAULT_BIN_EDGES, inst.k).unwrap();
        let mut global = ConfusionMatrix::new(inst.k);
        global.accumulate(&inst.pred, &inst.gt).unwrap();
        assert_eq!(report.merged(), global);
    }
}

#[test]
fn unmatched_pixels_fall_in_the_farthest_bin() {
    let d = Tensor::new(vec![1, 1, 4], vec![0.0, 400.0, 2.0, 40.0]).unwrap();
    let depth = depth_from_disparity(&d, 400.0).unwrap();
    assert_eq!(depth.data(), &[MAX_DEPTH, 1.0, MAX_DEPTH, 10.0]);
    let last = DEFAULT_BIN_EDGES.len() - 1;
    assert_eq!(bin_index(&DEFAULT_BIN_EDGES, depth.data()[0]).unwrap(), last);
    assert_eq!(bin_index(&DEFAULT_BIN_EDGES, 20.0).unwrap(), 0);
    assert_eq!(bin_index(&DEFAULT_BIN_EDGES, 20.0 + 1e-9).unwrap(), 1);
    let gt = LabelMap::new(1, 4, vec![0, 1, 0, 1]).unwrap();
    let r = binned_eval(&gt, &gt, depth.data(), &DEFAULT_BIN_EDGES, 2).unwrap();
    assert_eq!(r.bins[last].total(), 2);
}

#[test]
fn rejects_malformed_edges_and_inputs() {
    assert!(DepthBinnedReport::new(&[10.0, 5.0, 100.0], 2).is_err());
    assert!(DepthBinnedReport::new(&[10.0, 50.0], 2).is_err());
    assert!(DepthBinnedReport::new(&[], 2).is_err());
    let mut cm = ConfusionMatrix::new(2);
    let a = LabelMap::new(1, 2, vec![0, 2]).unwrap();
    let b = LabelMap::new(1, 2, vec![0, 1]).unwrap();
    assert!(cm.accumulate(&a, &b).is_err());
    assert_eq!(cm.total(), 0, "failed accumulate leaves no partial counts");
    assert!(depth_from_disparity(&Tensor::full(&[1, 1, 1], -1.0), 400.0).is_err());
}

#[test]
fn undefined_classes_are_left_out_of_the_mean() {
    let gt = LabelMap::new(1, 3, vec![0, 0, 1]).unwrap();
    let pred = LabelMap::new(1, 3, vec![0, 1, 1]).unwrap();
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&pred, &gt).unwrap();
    let r = cm.iou();
    assert_eq!(r.per_class, vec![Some(0.5), Some(0.5), None]);
    assert_eq!(r.miou(), Some(0.5));
    let csv = class_csv(&cm, &["a", "b", "c"]);
    assert_eq!(csv, "class,iou\na,0.500000\nb,0.500000\nc,undefined\nmIoU,0.500000\n");
}

#[test]
fn reports_render_as_csv_and_ppm() {
    let gt = LabelMap::new(1, 2, vec![0, 1]).unwrap();
    let r = binned_eval(&gt, &gt, &[5.0, 95.0], &[50.0, 100.0], 2).unwrap();
    assert_eq!(
        binned_csv(&r, &["road", "obstacle"], 1),
        "bin_low,bin_high,pixels,miou,obstacle_iou\n0,50,1,1.000000,undefined\n50,100,1,1.000000,1.000000\n"
    );
    let ppm = label_ppm(&LabelMap::new(1, 2, vec![1, IGNORE_ID]).unwrap(), &[[1, 2, 3], [4, 5, 6]]);
    assert_eq!(ppm, b"P6\n2 1\n255\n\x04\x05\x06\x00\x00\x00");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_invariant_under_consistent_relabelling(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng);
        let mut perm: Vec<u32> = (0..inst.k as u32).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let relabel = |m: &LabelMap| LabelMap {
            data: m.data.iter().map(|&v| if v == IGNORE_ID { v } else { perm[v as usize] }).collect(),
            ..m.clone()
        };
        let mut a = ConfusionMatrix::new(inst.k);
        a.accumulate(&inst.pred, &inst.gt).unwrap();
        let mut b = ConfusionMatrix::new(inst.k);
        b.accumulate(&relabel(&inst.pred), &relabel(&inst.gt)).unwrap();
        let (ra, rb) = (a.iou(), b.iou());
        for c in 0..inst.k {
            prop_assert_eq!(ra.per_class[c], rb.per_class[perm[c] as usize]);
        }
    }

    #[test]
    fn merging_is_order_independent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = random_instance(&mut rng);
        let k = first.k;
        let mut parts = vec![first];
        while parts.len() < 4 {
            let i = random_instance(&mut rng);
            if i.k == k {
                parts.push(i);
            }
        }
        let fold = |order: &[usize]| {
            let mut cm = ConfusionMatrix::new(k);
            for &i in order {
                let mut part = ConfusionMatrix::new(k);
                part.accumulate(&parts[i].pred, &parts[i].gt).unwrap();
                cm.merge(&part).unwrap();
            }
            cm
        };
        prop_assert_eq!(fold(&[0, 1, 2, 3]), fold(&[3, 1, 0, 2]));
    }

    #[test]
    fn perfect_prediction_scores_one(seed in any::<u64>()) {
        let inst = random_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let pred = LabelMap {
            data: inst.gt.data.iter().map(|&v| if v == IGNORE_ID { 0 } else { v }).collect(),
            ..inst.gt.clone()
        };
        let mut cm = ConfusionMatrix::new(inst.k);
        cm.accumulate(&pred, &inst.gt).unwrap();
        let r = cm.iou();
        prop_assert!(r.per_class.iter().flatten().all(|&v| v == 1.0));
    }
}
