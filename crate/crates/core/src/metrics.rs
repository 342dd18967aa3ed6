//! Confusion matrices, IoU and depth-binned evaluation.

use std::fmt::Write as _;

use rfnet_autodiff::Tensor;

use crate::error::{config, data, Result};
use crate::labels::{LabelMap, IGNORE_ID};

/// Depth assigned to unmatched pixels and the clamp for everything else.
pub const MAX_DEPTH: f64 = 100.0;

pub const DEFAULT_BIN_EDGES: [f64; 5] = [20.0, 40.0, 60.0, 80.0, 100.0];

/// `K x K` counts, rows ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        self.counts[gt * self.k..(gt + 1) * self.k].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.k).map(|g| self.get(g, pred)).sum()
    }

    fn check(&self, gt: u32, pred: u32) -> Result<bool> {
        if gt == IGNORE_ID {
            return Ok(false);
        }
        if gt as usize >= self.k {
            return data(format!("ground truth {gt} outside {} classes", self.k));
        }
        if pred as usize >= self.k {
            return data(format!("prediction {pred} outside {} classes", self.k));
        }
        Ok(true)
    }

    /// Adds one pixel; ignored ground truth is skipped.
    pub fn add(&mut self, gt: u32, pred: u32) -> Result<()> {
        if self.check(gt, pred)? {
            self.counts[gt as usize * self.k + pred as usize] += 1;
        }
        Ok(())
    }

    /// Counts every pixel of a prediction / ground-truth pair. Nothing is
    /// added when any pixel is invalid.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return data(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            ));
        }
        for (&g, &p) in gt.data.iter().zip(&pred.data) {
            self.check(g, p)?;
        }
        for (&g, &p) in gt.data.iter().zip(&pred.data) {
            if g != IGNORE_ID {
                self.counts[g as usize * self.k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return data(format!("merging {}-class into {}-class matrix", other.k, self.k));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; classes with an empty union are undefined.
    pub fn iou(&self) -> IouReport {
        let per_class = (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let union = self.row_sum(c) + self.col_sum(c) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        IouReport { per_class }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
}

impl IouReport {
    /// Mean over defined classes, `None` if no class is defined.
    pub fn miou(&self) -> Option<f64> {
        self.mean_over(self.per_class.len())
    }

    /// Mean over the defined classes among the first `n`.
    pub fn mean_over(&self, n: usize) -> Option<f64> {
        let defined: Vec<f64> = self.per_class.iter().take(n).flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// `scale_const / d`, clamped to [`MAX_DEPTH`]; unmatched (zero) pixels get
/// exactly `MAX_DEPTH`.
pub fn depth_from_disparity(d: &Tensor, scale_const: f64) -> Result<Tensor> {
    if scale_const <= 0.0 || !scale_const.is_finite() {
        return config(format!("depth scale {scale_const} must be positive"));
    }
    if let Some(v) = d.data().iter().find(|v| !v.is_finite() || **v < 0.0) {
        return data(format!("disparity {v} must be finite and non-negative"));
    }
    Ok(d.map(|v| if v == 0.0 { MAX_DEPTH } else { (scale_const / v).min(MAX_DEPTH) }))
}

pub fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.is_empty() || edges.last() != Some(&MAX_DEPTH) {
        return config(format!("bin edges must end at {MAX_DEPTH}"));
    }
    let mut prev = 0.0;
    for &e in edges {
        if e <= prev || !e.is_finite() {
            return config(format!("bin edges {edges:?} must be positive and strictly increasing"));
        }
        prev = e;
    }
    Ok(())
}

/// Index of the bin `(e[i-1], e[i]]` holding `depth`.
pub fn bin_index(edges: &[f64], depth: f64) -> Result<usize> {
    if !(depth > 0.0 && depth <= MAX_DEPTH) {
        return data(format!("depth {depth} outside (0, {MAX_DEPTH}]"));
    }
    Ok(edges.partition_point(|&e| e < depth))
}

/// One confusion matrix per depth bin.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthBinnedReport {
    pub edges: Vec<f64>,
    pub bins: Vec<ConfusionMatrix>,
}

impl DepthBinnedReport {
    pub fn new(edges: &[f64], k: usize) -> Result<Self> {
        check_edges(edges)?;
        Ok(Self {
            edges: edges.to_vec(),
            bins: vec![ConfusionMatrix::new(k); edges.len()],
        })
    }

    /// Adds one image; `depth` is row-major `H x W`.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, depth: &[f64]) -> Result<()> {
        if depth.len() != gt.data.len() || (pred.height, pred.width) != (gt.height, gt.width) {
            return data("prediction, ground truth and depth must share H x W");
        }
        let mut staged = Vec::with_capacity(depth.len());
        for ((&g, &p), &d) in gt.data.iter().zip(&pred.data).zip(depth) {
            if self.bins[0].check(g, p)? {
                staged.push((bin_index(&self.edges, d)?, g, p));
            }
        }
        for (b, g, p) in staged {
            self.bins[b].add(g, p)?;
        }
        Ok(())
    }

    pub fn merged(&self) -> ConfusionMatrix {
        let mut total = ConfusionMatrix::new(self.bins[0].num_classes());
        for b in &self.bins {
            total.merge(b).expect("bins share K");
        }
        total
    }
}

/// Per-image binned evaluation.
pub fn binned_eval(pred: &LabelMap, gt: &LabelMap, depth: &[f64], edges: &[f64], k: usize) -> Result<DepthBinnedReport> {
    let mut r = DepthBinnedReport::new(edges, k)?;
    r.add(pred, gt, depth)?;
    Ok(r)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

/// `class,iou` rows for the first `names.len()` classes, then `mIoU`.
pub fn class_csv(cm: &ConfusionMatrix, names: &[&str]) -> String {
    let r = cm.iou();
    let mut s = String::from("class,iou\n");
    for (name, v) in names.iter().zip(&r.per_class) {
        let _ = writeln!(s, "{name},{}", fmt_opt(*v));
    }
    let _ = writeln!(s, "mIoU,{}", fmt_opt(r.mean_over(names.len())));
    s
}

/// One row per bin with its range, pixel count, mIoU over the named classes
/// and the IoU of `focus` (the small-obstacle class).
pub fn binned_csv(report: &DepthBinnedReport, names: &[&str], focus: usize) -> String {
    let mut s = format!("bin_low,bin_high,pixels,miou,{}_iou\n", names[focus]);
    let mut low = 0.0;
    for (e, cm) in report.edges.iter().zip(&report.bins) {
        let r = cm.iou();
        let _ = writeln!(
            s,
            "{low},{e},{},{},{}",
            cm.total(),
            fmt_opt(r.mean_over(names.len())),
            fmt_opt(r.per_class[focus])
        );
        low = *e;
    }
    s
}

/// Binary PPM (P6) of a label map. Ids without a palette entry (including
/// the ignore id) are black.
pub fn label_ppm(labels: &LabelMap, palette: &[[u8; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    for &l in &labels.data {
        out.extend_from_slice(palette.get(l as usize).unwrap_or(&[0, 0, 0]));
    }
    out
}

/// Grayscale PPM tiling `planes` (`[C,H,W]`) into a near-square grid, each
/// plane min-max normalized on its own.
pub fn plane_grid_ppm(planes: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *planes.dims() {
        [c, h, w] => (c, h, w),
        ref d => return data(format!("feature grid needs [C,H,W], got {d:?}")),
    };
    let cols = (c as f64).sqrt().ceil() as usize;
    let rows = c.div_ceil(cols);
    let (gw, gh) = (cols * w, rows * h);
    let mut px = vec![0u8; gw * gh];
    for ch in 0..c {
        let p = &planes.data()[ch * h * w..(ch + 1) * h * w];
        let (lo, hi) = p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (oy, ox) = ((ch / cols) * h, (ch % cols) * w);
        for y in 0..h {
            for x in 0..w {
                px[(oy + y) * gw + ox + x] = (255.0 * (p[y * w + x] - lo) / span).round() as u8;
            }
        }
    }
    let mut out = format!("P6\n{gw} {gh}\n255\n").into_bytes();
    for v in px {
        out.extend_from_slice(&[v, v, v]);
    }
    Ok(out)
}
