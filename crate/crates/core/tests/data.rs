use std::collections::BTreeSet;

use proptest::prelude::*;
use rfnet_autodiff::Tensor;
use rfnet_core::augment::{augment, draw_augment, preprocess_disparity, rescale, AugmentDraw, Example};
use rfnet_core::dataset::{prepare, read_split, synth_split, write_split, DisparityPrep, SynthConfig};
use rfnet_core::seed;
use rfnet_core::synth::{
    generate, generate_scene, synthetic_taxonomy, Analog, ObjectKind, SceneSpec, LF_BACKGROUND, LF_FREE_SPACE,
    LF_OBSTACLE, OBSTACLE, ROAD,
};
use rfnet_core::{LabelMap, IGNORE_ID};

/// Half-pixel-centre bilinear sample of a row-major plane, edges clamped.
fn sample(plane: &[f64], h: usize, w: usize, fy: f64, fx: f64) -> f64 {
    let clamp = |v: f64, n: usize| v.max(0.0).min((n - 1) as f64);
    let (y, x) = (clamp(fy, h), clamp(fx, w));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| plane[r * w + c];
    at(y0, x0) * (1.0 - ty) * (1.0 - tx) + at(y0, x1) * (1.0 - ty) * tx + at(y1, x0) * ty * (1.0 - tx) + at(y1, x1) * ty * tx
}

fn resize_oracle(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let fy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
            let fx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
            out.push(sample(plane, h, w, fy, fx));
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn generation_is_deterministic() {
    for analog in [Analog::CityscapesLike, Analog::LostfoundLike] {
        let spec = SceneSpec::new(42, 64, 64);
        assert_eq!(generate(&spec, analog).unwrap(), generate(&spec, analog).unwrap());
    }
    let cfg = SynthConfig::new(3, 6, 2, 48, 48);
    let a = synth_split(&cfg, "train", 6).unwrap();
    assert_eq!(a, synth_split(&cfg, "train", 6).unwrap());
    // Growing a split keeps its prefix.
    assert_eq!(&synth_split(&cfg, "train", 9).unwrap()[..6], &a[..]);
    assert_ne!(synth_split(&cfg, "val", 6).unwrap(), a);
}

#[test]
fn empty_obstacle_scene_has_only_free_space_and_background() {
    let mut spec = SceneSpec::new(5, 64, 64);
    spec.obstacles = 0;
    let s = generate(&spec, Analog::LostfoundLike).unwrap();
    let ids: BTreeSet<u32> = s.labels.data.iter().copied().collect();
    assert!(ids.is_subset(&[LF_BACKGROUND, LF_FREE_SPACE].into_iter().collect()));
    assert!(ids.contains(&LF_FREE_SPACE));
}

#[test]
fn markings_are_flat_and_obstacles_stand_out() {
    for seed in 0..20 {
        let spec = SceneSpec::new(seed, 64, 64);
        let scene = generate_scene(&spec, Analog::LostfoundLike).unwrap();
        let s = &scene.sample;
        let w = spec.width;
        let mut markings = 0;
        for o in &scene.objects {
            for y in o.base + 1 - o.height..=o.base {
                for x in o.x0..o.x0 + o.width {
                    let d = s.disparity.data()[y * w + x];
                    let label = s.labels.get(y, x);
                    if d == 0.0 {
                        continue; // unmatched pixel
                    }
                    match o.kind {
                        ObjectKind::Marking if label == LF_FREE_SPACE => {
                            // Not covered by a standing object: flat road.
                            assert_eq!(d, scene.road_row_disparity[y]);
                            markings += 1;
                        }
                        ObjectKind::Obstacle if label == LF_OBSTACLE => {
                            assert!(d > scene.road_row_disparity[o.base + 1], "seed {seed}");
                        }
                        _ => {}
                    }
                }
            }
        }
        assert!(markings > 0);
    }
}

#[test]
fn obstacles_and_markings_share_appearance() {
    // Same colour range for both; over many scenes their mean colours agree.
    let (mut obs, mut mark) = (Vec::new(), Vec::new());
    for seed in 0..30 {
        let spec = SceneSpec::new(seed, 64, 64);
        let scene = generate_scene(&spec, Analog::LostfoundLike).unwrap();
        let plane = 64 * 64;
        for o in &scene.objects {
            let (x, y) = (o.x0 + o.width / 2, o.base + 1 - (o.height + 1) / 2);
            let i = y * 64 + x;
            let rgb: f64 = (0..3).map(|c| scene.sample.rgb.data()[c * plane + i]).sum::<f64>() / 3.0;
            match (o.kind, scene.sample.labels.data[i]) {
                (ObjectKind::Obstacle, LF_OBSTACLE) => obs.push(rgb),
                (ObjectKind::Marking, LF_FREE_SPACE) => mark.push(rgb),
                _ => {}
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(obs.len() > 50 && mark.len() > 50);
    assert!((mean(&obs) - mean(&mark)).abs() < 0.05, "{} vs {}", mean(&obs), mean(&mark));
}

#[test]
fn split_roundtrips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::new(1, 3, 0, 32, 32);
    let samples = synth_split(&cfg, "train", 3).unwrap();
    write_split(dir.path(), "train", &samples).unwrap();
    assert_eq!(read_split(dir.path(), "train").unwrap(), samples);
}

#[test]
fn zero_crop_is_pure_normalization() {
    let d = Tensor::from_fn(&[1, 5, 7], |i| (i * 3 % 11) as f64);
    let out = preprocess_disparity(&d, 0, 0, 4.0).unwrap();
    assert!(close(out.data(), &d.data().iter().map(|v| v / 4.0).collect::<Vec<_>>(), 0.0));
}

#[test]
fn constant_plane_stays_constant() {
    let d = Tensor::full(&[1, 9, 6], 12.0);
    let out = preprocess_disparity(&d, 2, 3, 48.0).unwrap();
    assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn cropped_ramp_matches_slice_then_resize() {
    let (h, w) = (8, 8);
    let d = Tensor::from_fn(&[1, h, w], |i| (i / w) as f64 * 3.0 + (i % w) as f64 * 0.5 + 1.0);
    let out = preprocess_disparity(&d, 2, 2, 10.0).unwrap();
    let kept: Vec<f64> = (0..h - 2)
        .flat_map(|y| (2..w).map(move |x| (y, x)))
        .map(|(y, x)| d.data()[y * w + x])
        .collect();
    let want: Vec<f64> = resize_oracle(&kept, h - 2, w - 2, h, w).iter().map(|v| v / 10.0).collect();
    assert!(close(out.data(), &want, 1e-12));
}

fn ramp_example(h: usize, w: usize) -> Example {
    Example {
        rgb: Tensor::from_fn(&[3, h, w], |i| (i % 17) as f64 / 17.0),
        disparity: Tensor::from_fn(&[1, h, w], |i| ((i / w) + 2 * (i % w)) as f64),
        labels: LabelMap::new(h, w, (0..h * w).map(|i| (i % 5) as u32).collect()).unwrap(),
        source: "cityscapes_like".into(),
    }
}

#[test]
fn doubling_scale_doubles_disparity_on_the_resampled_grid() {
    let ex = ramp_example(6, 5);
    let out = rescale(&ex, 2.0, true);
    let want: Vec<f64> = resize_oracle(ex.disparity.data(), 6, 5, 12, 10).iter().map(|v| v * 2.0).collect();
    assert_eq!(out.disparity.dims(), &[1, 12, 10]);
    assert!(close(out.disparity.data(), &want, 1e-12));
    let kept = rescale(&ex, 2.0, false);
    assert!(close(kept.disparity.data(), &resize_oracle(ex.disparity.data(), 6, 5, 12, 10), 1e-12));
}

#[test]
fn prepare_remaps_labels() {
    let spec = SceneSpec::new(9, 64, 64);
    let s = generate(&spec, Analog::LostfoundLike).unwrap();
    let ex = prepare(&s, &synthetic_taxonomy(), &DisparityPrep::default()).unwrap();
    for (&raw, &u) in s.labels.data.iter().zip(&ex.labels.data) {
        let want = match raw {
            LF_BACKGROUND => IGNORE_ID,
            LF_FREE_SPACE => ROAD,
            LF_OBSTACLE => OBSTACLE,
            other => panic!("unexpected raw id {other}"),
        };
        assert_eq!(u, want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn samples_are_well_formed(seed in any::<u64>(), lf in any::<bool>()) {
        let spec = SceneSpec::new(seed, 48, 64);
        let analog = if lf { Analog::LostfoundLike } else { Analog::CityscapesLike };
        let s = generate(&spec, analog).unwrap();
        prop_assert_eq!(s.rgb.dims(), &[3, 48, 64]);
        prop_assert_eq!(s.disparity.dims(), &[1, 48, 64]);
        prop_assert!(s.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(s.disparity.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn augmented_labels_come_from_the_source(seed in any::<u64>(), lo in 0.5f64..1.0, hi in 1.0f64..2.0) {
        let mut ex = ramp_example(20, 24);
        let mut rng = seed::stream(&[seed]);
        use rand::Rng;
        ex.labels.data.iter_mut().for_each(|v| *v = if rng.random_bool(0.1) { IGNORE_ID } else { rng.random_range(0..3) * 7 });
        let d = draw_augment(&mut rng, 20, 24, (16, 16), (lo, hi));
        let out = augment(&ex, &d, (16, 16), true);
        let source: BTreeSet<u32> = ex.labels.data.iter().copied().collect();
        prop_assert!(out.labels.data.iter().all(|v| *v == IGNORE_ID || source.contains(v)));
        prop_assert_eq!(out.rgb.dims(), &[3, 16, 16]);
    }

    #[test]
    fn neutral_augmentation_is_identity(h in 4usize..12, w in 4usize..12) {
        let ex = ramp_example(h, w);
        prop_assert_eq!(augment(&ex, &AugmentDraw::IDENTITY, (h, w), true), ex);
    }
}
