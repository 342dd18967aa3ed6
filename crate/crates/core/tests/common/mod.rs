//! Oracles shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rfnet_autodiff::{Tape, Tensor};
use rfnet_core::metrics::{DEFAULT_BIN_EDGES, MAX_DEPTH};
use rfnet_core::{multisource_loss, ClassSet, LabelMap, LabelTaxonomy, IGNORE_ID};

pub const STANDARD: &str = "cityscapes_like";
pub const AUX: &str = "lostfound_like";

pub struct Case {
    pub logits: Tensor,
    pub labels: Vec<LabelMap>,
    pub sources: Vec<&'static str>,
}

pub fn random_case(rng: &mut ChaCha8Rng, tax: &LabelTaxonomy) -> Case {
    let k = tax.num_classes();
    let n = rng.random_range(1..=4);
    let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let logits = Tensor::from_fn(&[n, k, h, w], |_| rng.random_range(-4.0..4.0));
    let sources: Vec<&str> = (0..n).map(|_| if rng.random_bool(0.5) { STANDARD } else { AUX }).collect();
    let labels = (0..n)
        .map(|_| {
            let data = (0..h * w)
                .map(|_| {
                    if rng.random_bool(0.15) {
                        IGNORE_ID
                    } else {
                        rng.random_range(0..k as u32)
                    }
                })
                .collect();
            LabelMap::new(h, w, data).unwrap()
        })
        .collect();
    Case { logits, labels, sources }
}

/// Direct per-pixel expansion: per sample, set-A terms plus lambda times
/// set-B terms, normalized by that sample's scored pixel weight, then
/// averaged over the batch.
pub fn brute_force(case: &Case, tax: &LabelTaxonomy) -> f64 {
    let d = case.logits.dims();
    let (n, k, h, w) = (d[0], d[1], d[2], d[3]);
    let at = |s: usize, c: usize, p: usize| case.logits.data()[((s * k + c) * h * w) + p];
    let mut total = 0.0;
    for s in 0..n {
        let lambda = if case.sources[s] == tax.standard_dataset() { 1.0 } else { 0.0 };
        let (mut loss_a, mut loss_b, mut weight) = (0.0, 0.0, 0.0);
        for p in 0..h * w {
            let y = case.labels[s].data[p];
            if y == IGNORE_ID {
                continue;
            }
            let m = (0..k).map(|c| at(s, c, p)).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..k).map(|c| (at(s, c, p) - m).exp()).sum::<f64>().ln();
            let nll = lse - at(s, y as usize, p);
            match tax.class_set(y).unwrap() {
                ClassSet::A => {
                    loss_a += nll;
                    weight += 1.0;
                }
                ClassSet::B => {
                    loss_b += nll;
                    weight += lambda;
                }
            }
        }
        if weight > 0.0 {
            total += (loss_a + lambda * loss_b) / weight;
        }
    }
    total / n as f64
}

pub fn loss_and_grad(case: &Case, tax: &LabelTaxonomy) -> (f64, Tensor) {
    let mut tape = Tape::new();
    let z = tape.leaf(case.logits.clone(), true);
    let loss = multisource_loss(&mut tape, z, &case.labels, &case.sources, tax).unwrap();
    let value = tape.value(loss).item();
    let g = tape.backward(loss).unwrap().take(z).unwrap();
    (value, g)
}

pub fn set_b(tax: &LabelTaxonomy) -> Vec<u32> {
    tax.classes().iter().filter(|c| c.set == ClassSet::B).map(|c| c.id).collect()
}

/// `case` with the set-B labels of every auxiliary sample relabelled by a
/// random permutation of set B.
pub fn permute_set_b(case: &Case, tax: &LabelTaxonomy, rng: &mut ChaCha8Rng) -> Case {
    let b = set_b(tax);
    let mut perm = b.clone();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mut labels = case.labels.clone();
    for (map, src) in labels.iter_mut().zip(&case.sources) {
        if *src == tax.standard_dataset() {
            continue;
        }
        for v in map.data.iter_mut() {
            if let Some(i) = b.iter().position(|x| x == v) {
                *v = perm[i];
            }
        }
    }
    Case {
        logits: case.logits.clone(),
        labels,
        sources: case.sources.clone(),
    }
}

pub struct Instance {
    pub k: usize,
    pub pred: LabelMap,
    pub gt: LabelMap,
    pub depth: Vec<f64>,
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let k = rng.random_range(1..=6);
    let (h, w) = (rng.random_range(1..=7), rng.random_range(1..=7));
    let n = h * w;
    let gt = (0..n)
        .map(|_| if rng.random_bool(0.1) { IGNORE_ID } else { rng.random_range(0..k as u32) })
        .collect();
    let pred = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
    // Include exact edge values so the bin boundaries get exercised.
    let depth = (0..n)
        .map(|_| match rng.random_range(0..4) {
            0 => DEFAULT_BIN_EDGES[rng.random_range(0..DEFAULT_BIN_EDGES.len())],
            _ => rng.random_range(0.01..=MAX_DEPTH),
        })
        .collect();
    Instance {
        k,
        pred: LabelMap::new(h, w, pred).unwrap(),
        gt: LabelMap::new(h, w, gt).unwrap(),
        depth,
    }
}

/// Counting oracle: per class, intersection and union over the pixel list.
pub fn oracle_iou(pairs: &[(u32, u32)], k: usize) -> Vec<Option<f64>> {
    (0..k as u32)
        .map(|c| {
            let scored = pairs.iter().filter(|(g, _)| *g != IGNORE_ID);
            let (mut inter, mut union) = (0u64, 0u64);
            for &(g, p) in scored {
                inter += (g == c && p == c) as u64;
                union += (g == c || p == c) as u64;
            }
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect()
}

pub fn pairs(inst: &Instance) -> Vec<(u32, u32)> {
    inst.gt.data.iter().copied().zip(inst.pred.data.iter().copied()).collect()
}

