//! Training, evaluation, ablation and diagnostics over an on-disk dataset.
//!
//! Every command computes its outputs in memory first and writes files only
//! once everything succeeded, so a failing run leaves no partial reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rfnet_autodiff::gradcheck::{check_gradients, GradCheckReport};
use rfnet_autodiff::io::write_tensor;
use rfnet_autodiff::par;
use rfnet_autodiff::{adam_step, cosine_lr, GroupScale, OptimizerState, Tape, Tensor, TensorError};

use crate::augment::{augment, draw_augment, Example};
use crate::checkpoint::{self, TrainingState};
use crate::config::{parse_list, KeyValues, ModelConfig, Variant};
use crate::dataset::{
    prepare, read_split, read_taxonomy, synth_split, write_split, write_taxonomy, DisparityPrep, SynthConfig,
};
use crate::error::{config, data, io_err, Error, Result};
use crate::labels::{LabelMap, IGNORE_ID};
use crate::loss::multisource_loss;
use crate::metrics::{
    binned_csv, class_csv, depth_from_disparity, label_ppm, plane_grid_ppm, ConfusionMatrix, DepthBinnedReport,
    DEFAULT_BIN_EDGES,
};
use crate::model::{param_count, Mode, NetworkGraph, ParamGroup};
use crate::seed;
use crate::synth::{synthetic_taxonomy, Sample, PALETTE};
use crate::taxonomy::LabelTaxonomy;

/// Output file names under `--out`.
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINT: &str = "checkpoint.rfc";
pub const EVAL_CLASSES: &str = "eval_classes.csv";
pub const EVAL_BINS: &str = "eval_bins.csv";
pub const PREDICTIONS: &str = "predictions";
pub const ABLATION: &str = "ablation.csv";
pub const FEATURES: &str = "features";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `num_classes` is replaced by the taxonomy's class count at train time.
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    /// Learning-rate and weight-decay multiplier of the pretrained group.
    pub pretrained_mult: f64,
    pub seed: u64,
    pub data: PathBuf,
    pub train_split: String,
    pub val_split: String,
    pub out: PathBuf,
    /// Multi-dataset masking. When off, ignored pixels become a trained
    /// `background` class and every class is scored for every sample.
    pub masking: bool,
    pub augment: bool,
    pub scale_range: (f64, f64),
    /// Multiply disparity by the augmentation scale factor.
    pub scale_disparity: bool,
    pub prep: DisparityPrep,
    /// Baseline x focal length, in depth units times disparity.
    pub depth_scale: f64,
    pub bins: Vec<f64>,
    /// Stop after this many completed epochs (the schedule still spans
    /// `epochs`), leaving a resumable checkpoint.
    pub stop_after: Option<usize>,
    pub resume: Option<PathBuf>,
    pub verbose: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(Variant::Rfnet, 5),
            epochs: 200,
            batch: 8,
            lr: 4e-4,
            min_lr: 1e-6,
            weight_decay: 1e-4,
            pretrained_mult: 0.25,
            seed: 0,
            data: PathBuf::from("data"),
            train_split: "train".into(),
            val_split: "val".into(),
            out: PathBuf::from("out"),
            masking: true,
            augment: true,
            scale_range: (0.5, 2.0),
            scale_disparity: true,
            prep: DisparityPrep::default(),
            depth_scale: 400.0,
            bins: DEFAULT_BIN_EDGES.to_vec(),
            stop_after: None,
            resume: None,
            verbose: false,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => config(format!("{key} = {v:?} is not a boolean")),
    }
}

pub fn parse_bins(s: &str) -> Result<Vec<f64>> {
    let bins = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad bin edge {p:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    crate::metrics::check_edges(&bins)?;
    Ok(bins)
}

const RUN_KEYS: &[&str] = &[
    "epochs",
    "batch",
    "lr",
    "min_lr",
    "weight_decay",
    "pretrained_mult",
    "seed",
    "data",
    "train_split",
    "val_split",
    "out",
    "masking",
    "augment",
    "scale_min",
    "scale_max",
    "scale_disparity",
    "crop_left",
    "crop_bottom",
    "max_disparity",
    "depth_scale",
    "bins",
    "stop_after",
    "resume",
    "verbose",
];

const MODEL_KEYS: &[&str] = &[
    "variant",
    "stage_widths",
    "blocks_per_stage",
    "decoder_width",
    "spp_grids",
    "num_classes",
    "input_height",
    "input_width",
];

impl RunConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !RUN_KEYS.contains(k) && !MODEL_KEYS.contains(k)) {
            return config(format!("unknown config key {k:?}"));
        }
        let d = Self::default();
        let get_bool = |k: &str, default: bool| kv.get(k).map_or(Ok(default), |v| parse_bool(k, v));
        let cfg = Self {
            model: ModelConfig::from_kv(kv)?,
            epochs: kv.parse_or("epochs", d.epochs)?,
            batch: kv.parse_or("batch", d.batch)?,
            lr: kv.parse_or("lr", d.lr)?,
            min_lr: kv.parse_or("min_lr", d.min_lr)?,
            weight_decay: kv.parse_or("weight_decay", d.weight_decay)?,
            pretrained_mult: kv.parse_or("pretrained_mult", d.pretrained_mult)?,
            seed: kv.parse_or("seed", d.seed)?,
            data: kv.get("data").map_or(d.data, PathBuf::from),
            train_split: kv.get("train_split").map_or(d.train_split, str::to_string),
            val_split: kv.get("val_split").map_or(d.val_split, str::to_string),
            out: kv.get("out").map_or(d.out, PathBuf::from),
            masking: get_bool("masking", d.masking)?,
            augment: get_bool("augment", d.augment)?,
            scale_range: (
                kv.parse_or("scale_min", d.scale_range.0)?,
                kv.parse_or("scale_max", d.scale_range.1)?,
            ),
            scale_disparity: get_bool("scale_disparity", d.scale_disparity)?,
            prep: DisparityPrep {
                crop_left: kv.parse_or("crop_left", d.prep.crop_left)?,
                crop_bottom: kv.parse_or("crop_bottom", d.prep.crop_bottom)?,
                max_disparity: kv.parse_or("max_disparity", d.prep.max_disparity)?,
            },
            depth_scale: kv.parse_or("depth_scale", d.depth_scale)?,
            bins: kv.get("bins").map_or(Ok(d.bins), parse_bins)?,
            stop_after: kv.get("stop_after").map(|v| v.parse()).transpose().map_err(|_| {
                Error::Config("stop_after must be an integer".into())
            })?,
            resume: kv.get("resume").map(PathBuf::from),
            verbose: get_bool("verbose", d.verbose)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(&fs::read_to_string(path).map_err(io_err(path))?)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.min_lr > 0.0 && self.min_lr <= self.lr) {
            return config(format!("need 0 < min_lr ({}) <= lr ({})", self.min_lr, self.lr));
        }
        if self.batch == 0 || self.epochs == 0 {
            return config("batch and epochs must be at least 1");
        }
        if !(self.weight_decay >= 0.0 && self.pretrained_mult > 0.0) {
            return config("weight_decay must be >= 0 and pretrained_mult > 0");
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return config(format!("scale range {lo}..{hi} is invalid"));
        }
        if self.depth_scale <= 0.0 {
            return config("depth_scale must be positive");
        }
        crate::metrics::check_edges(&self.bins)?;
        Ok(())
    }

    /// Learning-rate / weight-decay multipliers of a parameter group.
    pub fn group_scale(&self, group: ParamGroup) -> GroupScale {
        match group {
            ParamGroup::Pretrained => GroupScale::uniform(self.pretrained_mult),
            ParamGroup::Fresh => GroupScale::UNIT,
        }
    }
}

/// Taxonomy the model trains against.
pub fn training_taxonomy(root: &Path, masking: bool) -> Result<LabelTaxonomy> {
    let t = read_taxonomy(root)?;
    if masking {
        Ok(t)
    } else {
        t.unmasked()
    }
}

/// Reads and prepares a split.
pub fn load_examples(
    root: &Path,
    split: &str,
    taxonomy: &LabelTaxonomy,
    prep: &DisparityPrep,
) -> Result<Vec<(String, Example)>> {
    let raw = read_split(root, split)?;
    if raw.is_empty() {
        return data(format!("split {split:?} under {} is empty", root.display()));
    }
    raw.iter()
        .map(|(id, s)| Ok((id.clone(), prepare(s, taxonomy, prep)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn log_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,loss\n");
    for r in records {
        let _ = writeln!(s, "{},{:e},{:e}", r.epoch, r.lr, r.loss);
    }
    s
}

pub struct TrainOutcome {
    pub graph: NetworkGraph,
    pub taxonomy: LabelTaxonomy,
    pub records: Vec<EpochRecord>,
    pub checkpoint: Vec<u8>,
}

/// The augmented sample `index` sees in `epoch`; identical for every
/// variant trained with the same seed.
pub fn training_view(cfg: &RunConfig, ex: &Example, epoch: usize, index: usize) -> Result<Example> {
    let crop = (cfg.model.input_height, cfg.model.input_width);
    if !cfg.augment {
        if (ex.height(), ex.width()) != crop {
            return config(format!(
                "sample is {}x{}, model expects {}x{} (enable augmentation to crop)",
                ex.height(),
                ex.width(),
                crop.0,
                crop.1
            ));
        }
        return Ok(ex.clone());
    }
    let mut rng = seed::stream(&[seed::AUGMENT, cfg.seed, epoch as u64, index as u64]);
    let d = draw_augment(&mut rng, ex.height(), ex.width(), crop, cfg.scale_range);
    Ok(augment(ex, &d, crop, cfg.scale_disparity))
}

/// Sample order of `epoch`, split into batches. A trailing batch of one is
/// dropped when batches are larger than one (batch norm needs two values
/// per channel at the coarsest pooling level).
pub fn epoch_batches(cfg: &RunConfig, n: usize, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream(&[seed::SHUFFLE, cfg.seed, epoch as u64]));
    order
        .chunks(cfg.batch)
        .filter(|c| c.len() > 1 || cfg.batch == 1)
        .map(<[usize]>::to_vec)
        .collect()
}

pub fn batch_tensors(items: &[Example]) -> Result<(Tensor, Tensor)> {
    let rgb: Vec<Tensor> = items.iter().map(|e| e.rgb.clone()).collect();
    let disp: Vec<Tensor> = items.iter().map(|e| e.disparity.clone()).collect();
    Ok((Tensor::stack(&rgb)?, Tensor::stack(&disp)?))
}

/// Runs training in memory.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let taxonomy = training_taxonomy(&cfg.data, cfg.masking)?;
    let examples = load_examples(&cfg.data, &cfg.train_split, &taxonomy, &cfg.prep)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.num_classes = taxonomy.num_classes();

    let (mut graph, mut opt, start) = match &cfg.resume {
        Some(path) => {
            let (graph, state) = checkpoint::load(path)?;
            if graph.config() != &model_cfg {
                return config(format!("checkpoint {} was trained with another model config", path.display()));
            }
            let state = state.ok_or_else(|| Error::Config(format!("{} has no optimizer state", path.display())))?;
            let scales = graph.params().iter().map(|p| cfg.group_scale(p.group)).collect();
            let opt = OptimizerState {
                first_moment: state.first_moment,
                second_moment: state.second_moment,
                scales,
                step: state.step,
            };
            (graph, opt, state.epoch)
        }
        None => {
            let graph = NetworkGraph::build(&model_cfg, seed::mix(&[seed::INIT, cfg.seed]))?;
            let values: Vec<Tensor> = graph.params().iter().map(|p| p.value.clone()).collect();
            let scales = graph.params().iter().map(|p| cfg.group_scale(p.group)).collect();
            let opt = OptimizerState::new(&values, scales)?;
            (graph, opt, 0)
        }
    };

    let end = cfg.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    if start > end {
        return config(format!("checkpoint is at epoch {start}, past the requested end {end}"));
    }
    let mut records = Vec::new();
    for epoch in start..end {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.min_lr)?;
        let mut total = 0.0;
        let batches = epoch_batches(cfg, examples.len(), epoch);
        if batches.is_empty() {
            return data("training split too small to form a batch of two");
        }
        for batch in &batches {
            let views = batch
                .iter()
                .map(|&i| training_view(cfg, &examples[i].1, epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let (rgb, disp) = batch_tensors(&views)?;
            let labels: Vec<LabelMap> = views.iter().map(|v| v.labels.clone()).collect();
            let sources: Vec<&str> = views.iter().map(|v| v.source.as_str()).collect();

            let mut tape = Tape::with_checks(false);
            let trace = graph.forward(&mut tape, &rgb, &disp, Mode::Train)?;
            let loss = multisource_loss(&mut tape, trace.logits, &labels, &sources, &taxonomy)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss became {value} in epoch {epoch}")));
            }
            total += value;
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = trace
                .params
                .iter()
                .map(|&v| grads.take(v).expect("parameter gradient"))
                .collect();
            let mut values: Vec<Tensor> = graph
                .params_mut()
                .iter_mut()
                .map(|p| std::mem::replace(&mut p.value, Tensor::scalar(0.0)))
                .collect();
            let stepped = adam_step(&mut values, &grads, &mut opt, lr, cfg.weight_decay);
            for (p, v) in graph.params_mut().iter_mut().zip(values) {
                p.value = v;
            }
            stepped?;
        }
        let record = EpochRecord {
            epoch,
            lr,
            loss: total / batches.len() as f64,
        };
        if cfg.verbose {
            eprintln!("epoch {epoch:>4}  lr {:.3e}  loss {:.5}", record.lr, record.loss);
        }
        records.push(record);
    }
    let state = TrainingState::from_optimizer(&opt, end);
    let checkpoint = checkpoint::encode(&graph, Some(&state))?;
    Ok(TrainOutcome {
        graph,
        taxonomy,
        records,
        checkpoint,
    })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Trains and writes the log and checkpoint under `cfg.out`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let outcome = train(cfg)?;
    write_file(&cfg.out.join(TRAIN_LOG), log_csv(&outcome.records))?;
    write_file(&cfg.out.join(CHECKPOINT), &outcome.checkpoint)?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub prep: DisparityPrep,
    pub depth_scale: f64,
    pub bins: Vec<f64>,
}

impl EvalSettings {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            prep: cfg.prep,
            depth_scale: cfg.depth_scale,
            bins: cfg.bins.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    /// Square in the model's class count, which may exceed the scored classes.
    pub confusion: ConfusionMatrix,
    pub binned: DepthBinnedReport,
    pub class_names: Vec<String>,
    /// Index of the small-obstacle class.
    pub focus: usize,
    pub predictions: Vec<(String, LabelMap)>,
}

impl EvalOutcome {
    pub fn miou(&self) -> Option<f64> {
        self.confusion.iou().mean_over(self.class_names.len())
    }

    pub fn focus_iou(&self) -> Option<f64> {
        self.confusion.iou().per_class[self.focus]
    }

    fn names(&self) -> Vec<&str> {
        self.class_names.iter().map(String::as_str).collect()
    }

    pub fn class_csv(&self) -> String {
        class_csv(&self.confusion, &self.names())
    }

    pub fn binned_csv(&self) -> String {
        binned_csv(&self.binned, &self.names(), self.focus)
    }
}

/// Colour table covering `k` classes: the scene palette first, then a fixed
/// spread of extra colours.
pub fn palette(k: usize) -> Vec<[u8; 3]> {
    (0..k)
        .map(|i| {
            PALETTE.get(i).copied().unwrap_or_else(|| {
                let h = seed::mix(&[i as u64]);
                [(h >> 8) as u8, (h >> 24) as u8, (h >> 40) as u8]
            })
        })
        .collect()
}

/// Per-pixel argmax over `[N,K,H,W]` logits; ties go to the lower id.
pub fn argmax_maps(logits: &Tensor) -> Vec<LabelMap> {
    let d = logits.dims();
    let (n, k, h, w) = (d[0], d[1], d[2], d[3]);
    let plane = h * w;
    (0..n)
        .map(|s| {
            let base = &logits.data()[s * k * plane..(s + 1) * k * plane];
            let ids = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if base[c * plane + p] > base[best * plane + p] {
                            best = c;
                        }
                    }
                    best as u32
                })
                .collect();
            LabelMap {
                height: h,
                width: w,
                data: ids,
            }
        })
        .collect()
}

const EVAL_BATCH: usize = 8;

fn check_class_count(km: usize, taxonomy: &LabelTaxonomy) -> Result<()> {
    let k = taxonomy.num_classes();
    if km != k && km != k + 1 {
        return config(format!("model predicts {km} classes; dataset taxonomy has {k}"));
    }
    Ok(())
}

fn read_nonempty_split(root: &Path, split: &str) -> Result<Vec<(String, Sample)>> {
    let raw = read_split(root, split)?;
    if raw.is_empty() {
        return data(format!("split {split:?} under {} is empty", root.display()));
    }
    Ok(raw)
}

/// Scores per-sample predictions (in `km` classes) against the masked
/// taxonomy of the dataset. A model trained without masking carries one
/// extra `background` class; its predictions count as errors on scored
/// pixels.
pub fn score_predictions(
    samples: &[(String, Sample)],
    predictions: Vec<(String, LabelMap)>,
    km: usize,
    taxonomy: &LabelTaxonomy,
    settings: &EvalSettings,
) -> Result<EvalOutcome> {
    check_class_count(km, taxonomy)?;
    if samples.is_empty() {
        return data("nothing to evaluate");
    }
    if samples.len() != predictions.len() || samples.iter().zip(&predictions).any(|(s, p)| s.0 != p.0) {
        return data("predictions do not line up with the split");
    }
    let mut confusion = ConfusionMatrix::new(km);
    let mut binned = DepthBinnedReport::new(&settings.bins, km)?;
    for ((_, sample), (_, pred)) in samples.iter().zip(&predictions) {
        let gt = crate::loss::remap_labels(&sample.labels, &sample.source, taxonomy)?;
        let depth = depth_from_disparity(&sample.disparity, settings.depth_scale)?;
        confusion.accumulate(pred, &gt)?;
        binned.add(pred, &gt, depth.data())?;
    }
    let class_names: Vec<String> = taxonomy.class_names().into_iter().map(String::from).collect();
    let focus = class_names
        .iter()
        .position(|n| n.contains("obstacle"))
        .unwrap_or(class_names.len() - 1);
    Ok(EvalOutcome {
        confusion,
        binned,
        class_names,
        focus,
        predictions,
    })
}

/// Eval-mode inference over a split, scored by [`score_predictions`].
pub fn evaluate(graph: &NetworkGraph, root: &Path, split: &str, settings: &EvalSettings) -> Result<EvalOutcome> {
    let taxonomy = read_taxonomy(root)?;
    let km = graph.config().num_classes;
    check_class_count(km, &taxonomy)?;
    let raw = read_nonempty_split(root, split)?;
    // Chunks run independently (in parallel when enabled) and come back in
    // order, so the result matches a sequential pass exactly.
    let chunks: Vec<&[(String, Sample)]> = raw.chunks(EVAL_BATCH).collect();
    let results = par::map_indexed(chunks.len(), |c| -> Result<Vec<LabelMap>> {
        let examples = chunks[c]
            .iter()
            .map(|(_, s)| prepare(s, &taxonomy, &settings.prep))
            .collect::<Result<Vec<_>>>()?;
        let (rgb, disp) = batch_tensors(&examples)?;
        let mut tape = Tape::with_checks(false);
        let trace = graph.forward_eval(&mut tape, &rgb, &disp)?;
        Ok(argmax_maps(tape.value(trace.logits)))
    });
    let mut predictions = Vec::with_capacity(raw.len());
    for (chunk, preds) in chunks.iter().zip(results) {
        predictions.extend(chunk.iter().map(|(id, _)| id.clone()).zip(preds?));
    }
    score_predictions(&raw, predictions, km, &taxonomy, settings)
}

/// Scores `.pred` files previously written by [`cmd_eval`].
pub fn score_dumped(root: &Path, split: &str, pred_dir: &Path, km: usize, settings: &EvalSettings) -> Result<EvalOutcome> {
    let taxonomy = read_taxonomy(root)?;
    let raw = read_nonempty_split(root, split)?;
    let predictions = raw
        .iter()
        .map(|(id, _)| {
            let t = rfnet_autodiff::io::load_tensor(pred_dir.join(format!("{id}.pred")))?;
            Ok((id.clone(), LabelMap::from_tensor(&t)?))
        })
        .collect::<Result<Vec<_>>>()?;
    score_predictions(&raw, predictions, km, &taxonomy, settings)
}

/// Evaluates and writes both CSVs plus one `.ppm` colormap and one `.pred`
/// label tensor per sample.
pub fn cmd_eval(graph: &NetworkGraph, root: &Path, split: &str, settings: &EvalSettings, out: &Path) -> Result<EvalOutcome> {
    let outcome = evaluate(graph, root, split, settings)?;
    let colors = palette(graph.config().num_classes);
    let mut files: Vec<(PathBuf, Vec<u8>)> = vec![
        (out.join(EVAL_CLASSES), outcome.class_csv().into_bytes()),
        (out.join(EVAL_BINS), outcome.binned_csv().into_bytes()),
    ];
    for (id, pred) in &outcome.predictions {
        files.push((out.join(PREDICTIONS).join(format!("{id}.ppm")), label_ppm(pred, &colors)));
        let mut bytes = Vec::new();
        write_tensor(&mut bytes, &pred.to_tensor())?;
        files.push((out.join(PREDICTIONS).join(format!("{id}.pred")), bytes));
    }
    for (path, bytes) in files {
        write_file(&path, bytes)?;
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Parameter count of the same variant at the full preset.
    pub params_full: usize,
    pub params_run: usize,
    pub miou: Option<f64>,
    pub obstacle_iou: Option<f64>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let f = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.6}"));
    let mut s = String::from("variant,params_full,params_run,miou,obstacle_iou\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.variant,
            r.params_full,
            r.params_run,
            f(r.miou),
            f(r.obstacle_iou)
        );
    }
    s
}

/// Trains and evaluates each variant with the same seed and schedule.
pub fn ablate(cfg: &RunConfig, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&v| {
            let mut run = cfg.clone();
            run.model.variant = v;
            let trained = train(&run)?;
            let ev = evaluate(&trained.graph, &run.data, &run.val_split, &EvalSettings::from_run(&run))?;
            let mut full = ModelConfig::full(v);
            full.num_classes = 20;
            Ok(AblationRow {
                variant: v,
                params_full: param_count(&full)?,
                params_run: trained.graph.param_count(),
                miou: ev.miou(),
                obstacle_iou: ev.focus_iou(),
            })
        })
        .collect()
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let rows = ablate(cfg, &Variant::ALL)?;
    write_file(&cfg.out.join(ABLATION), ablation_csv(&rows))?;
    Ok(rows)
}

/// Total and per-group parameter counts as CSV.
pub fn param_count_csv(cfg: &ModelConfig) -> Result<String> {
    let g = NetworkGraph::build(cfg, 0)?;
    Ok(format!(
        "group,params\ntotal,{}\npretrained,{}\nfresh,{}\n",
        g.param_count(),
        g.group_count(ParamGroup::Pretrained),
        g.group_count(ParamGroup::Fresh)
    ))
}

/// Relative-error floor for whole-network checks; see the test suite for
/// the rounding-noise estimate behind it.
pub const NETWORK_GRAD_FLOOR: f64 = 1e-5;

/// Central-difference check of `probes` random parameter entries of a
/// freshly built network on random inputs and labels (train-mode batch norm,
/// batch of two, a sprinkling of ignored pixels).
pub fn grad_check(cfg: &ModelConfig, seed_value: u64, probes: usize) -> Result<GradCheckReport> {
    let graph = NetworkGraph::build(cfg, seed::mix(&[seed::INIT, seed_value]))?;
    let mut rng = seed::stream(&[seed::PROBE, seed_value]);
    let (h, w) = (cfg.input_height, cfg.input_width);
    let rgb = Tensor::rand_uniform(&[2, 3, h, w], 0.0, 1.0, &mut rng);
    let disp = Tensor::rand_uniform(&[2, 1, h, w], 0.0, 1.0, &mut rng);
    let labels: Vec<u32> = (0..2 * h * w)
        .map(|_| {
            if rng.random::<f64>() < 0.05 {
                IGNORE_ID
            } else {
                rng.random_range(0..cfg.num_classes as u32)
            }
        })
        .collect();
    let weights: Vec<f64> = labels.iter().map(|&l| if l == IGNORE_ID { 0.0 } else { 1.0 }).collect();
    let values: Vec<Tensor> = graph.params().iter().map(|p| p.value.clone()).collect();
    let picks: Vec<(usize, usize)> = (0..probes)
        .map(|_| {
            let i = rng.random_range(0..values.len());
            (i, rng.random_range(0..values[i].numel()))
        })
        .collect();
    let report = check_gradients(&values, &picks, 1e-5, |tape, vars| {
        let (trace, _) = graph
            .forward_with(tape, vars.to_vec(), &rgb, &disp, Mode::Train)
            .map_err(|e| TensorError::Contract(e.to_string()))?;
        tape.masked_cross_entropy(trace.logits, &labels, &weights, IGNORE_ID)
    })?;
    Ok(report.with_floor(NETWORK_GRAD_FLOOR))
}

/// Stage-2 feature maps of one sample: RGB branch, depth branch (dual-branch
/// variants only) and the fused map that feeds stage 3.
#[derive(Clone, Debug)]
pub struct FeatureDump {
    pub id: String,
    pub maps: Vec<(&'static str, Tensor)>,
}

pub fn dump_features(graph: &NetworkGraph, examples: &[(String, Example)]) -> Result<Vec<FeatureDump>> {
    examples
        .iter()
        .map(|(id, ex)| {
            let mut tape = Tape::with_checks(false);
            let tr = graph.forward_eval(&mut tape, &ex.rgb, &ex.disparity)?;
            let unbatch = |v| -> Result<Tensor> {
                let t: &Tensor = tape.value(v);
                Ok(t.clone().reshape(&t.dims()[1..])?)
            };
            let mut maps = vec![("rgb", unbatch(tr.rgb_stages[1])?)];
            if let Some(&d) = tr.depth_stages.get(1) {
                maps.push(("depth", unbatch(d)?));
            }
            maps.push(("fused", unbatch(tr.fused[1])?));
            Ok(FeatureDump { id: id.clone(), maps })
        })
        .collect()
}

/// Writes `<id>_<set>_block2.rft` and `.ppm` per map.
pub fn write_feature_dumps(dumps: &[FeatureDump], out: &Path) -> Result<()> {
    let mut files = Vec::new();
    for d in dumps {
        for (name, t) in &d.maps {
            let stem = format!("{}_{name}_block2", d.id);
            let mut bytes = Vec::new();
            write_tensor(&mut bytes, t)?;
            files.push((out.join(FEATURES).join(format!("{stem}.rft")), bytes));
            files.push((out.join(FEATURES).join(format!("{stem}.ppm")), plane_grid_ppm(t)?));
        }
    }
    for (path, bytes) in files {
        write_file(&path, bytes)?;
    }
    Ok(())
}

/// Parses a comma-separated list of variant names.
pub fn parse_variants(s: &str) -> Result<Vec<Variant>> {
    s.split(',').map(|v| v.trim().parse()).collect()
}

/// Stage widths helper for configs given on the command line.
pub fn parse_widths(s: &str) -> Result<[usize; 4]> {
    parse_list(s)?
        .try_into()
        .map_err(|_| Error::Config("stage widths need exactly 4 entries".into()))
}

/// Renders a synthetic dataset (taxonomy, `train` and `val` splits) under
/// `root`. Everything is generated before the first file is written.
pub fn cmd_generate(root: &Path, cfg: &SynthConfig) -> Result<()> {
    cfg.scene.validate()?;
    let train = synth_split(cfg, "train", cfg.train)?;
    let val = synth_split(cfg, "val", cfg.val)?;
    write_taxonomy(root, &synthetic_taxonomy())?;
    write_split(root, "train", &train)?;
    write_split(root, "val", &val)
}
