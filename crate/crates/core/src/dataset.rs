//! On-disk dataset layout and preparation of network inputs.
//!
//! ```text
//! <root>/taxonomy.txt
//! <root>/<split>/manifest.txt        "<sample-id> <dataset>" per line
//! <root>/<split>/<sample-id>.rgb     [3,H,W] tensor
//! <root>/<split>/<sample-id>.disp    [1,H,W] raw disparity
//! <root>/<split>/<sample-id>.label   [1,H,W] raw ids stored as floats
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rfnet_autodiff::io::{load_tensor, save_tensor};

use crate::augment::{preprocess_disparity, Example};
use crate::error::{data, io_err, Error, Result};
use crate::labels::LabelMap;
use crate::loss::remap_labels;
use crate::seed;
use crate::synth::{generate, Analog, Sample, SceneSpec};
use crate::taxonomy::LabelTaxonomy;

pub const MANIFEST: &str = "manifest.txt";
pub const TAXONOMY: &str = "taxonomy.txt";

/// Parameters of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    /// Share of samples rendered as `lostfound_like`.
    pub lostfound_fraction: f64,
    /// Template for every scene; its `seed` is replaced per sample.
    pub scene: SceneSpec,
}

impl SynthConfig {
    pub fn new(seed: u64, train: usize, val: usize, height: usize, width: usize) -> Self {
        Self {
            seed,
            train,
            val,
            lostfound_fraction: 0.5,
            scene: SceneSpec::new(0, height, width),
        }
    }
}

fn split_tag(split: &str) -> u64 {
    split.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64))
}

/// Renders `count` scenes for `split`. Sample `i` draws its flavour and scene
/// seed from a stream keyed by (seed, split, i), so splits are independent
/// and any prefix of a split is stable when `count` grows.
pub fn synth_split(cfg: &SynthConfig, split: &str, count: usize) -> Result<Vec<(String, Sample)>> {
    (0..count)
        .map(|i| {
            let mut rng = seed::stream(&[seed::SCENE, cfg.seed, split_tag(split), i as u64]);
            let analog = if rng.random::<f64>() < cfg.lostfound_fraction {
                Analog::LostfoundLike
            } else {
                Analog::CityscapesLike
            };
            let spec = SceneSpec {
                seed: rng.random(),
                ..cfg.scene.clone()
            };
            Ok((format!("{i:05}"), generate(&spec, analog)?))
        })
        .collect()
}

pub fn write_split(root: &Path, split: &str, samples: &[(String, Sample)]) -> Result<()> {
    let dir = root.join(split);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut manifest = String::new();
    for (id, s) in samples {
        if id.is_empty() || id.contains(char::is_whitespace) || id.contains('/') {
            return data(format!("invalid sample id {id:?}"));
        }
        save_tensor(dir.join(format!("{id}.rgb")), &s.rgb)?;
        save_tensor(dir.join(format!("{id}.disp")), &s.disparity)?;
        save_tensor(dir.join(format!("{id}.label")), &s.labels.to_tensor())?;
        let _ = writeln!(manifest, "{id} {}", s.source);
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(io_err(&path))
}

pub fn read_split(root: &Path, split: &str) -> Result<Vec<(String, Sample)>> {
    let dir = root.join(split);
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((id, source)) = line.split_once(char::is_whitespace) else {
            return data(format!("{}:{}: expected `<id> <dataset>`", path.display(), n + 1));
        };
        let rgb = load_tensor(dir.join(format!("{id}.rgb")))?;
        let disparity = load_tensor(dir.join(format!("{id}.disp")))?;
        let labels = LabelMap::from_tensor(&load_tensor(dir.join(format!("{id}.label")))?)?;
        let sample = Sample {
            rgb,
            disparity,
            labels,
            source: source.trim().to_string(),
        };
        check_sample(&sample).map_err(|e| Error::Data(format!("sample {id}: {e}")))?;
        out.push((id.to_string(), sample));
    }
    Ok(out)
}

fn check_sample(s: &Sample) -> Result<()> {
    let (h, w) = (s.labels.height, s.labels.width);
    if s.rgb.dims() != [3, h, w] || s.disparity.dims() != [1, h, w] {
        return data(format!(
            "planes {:?} / {:?} do not match labels {h}x{w}",
            s.rgb.dims(),
            s.disparity.dims()
        ));
    }
    if s.disparity.data().iter().any(|&d| !d.is_finite() || d < 0.0) {
        return data("disparity must be finite and non-negative");
    }
    Ok(())
}

pub fn write_taxonomy(root: &Path, t: &LabelTaxonomy) -> Result<()> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let path = root.join(TAXONOMY);
    fs::write(&path, t.to_text()).map_err(io_err(&path))
}

pub fn read_taxonomy(root: &Path) -> Result<LabelTaxonomy> {
    let path = root.join(TAXONOMY);
    LabelTaxonomy::parse(&fs::read_to_string(&path).map_err(io_err(&path))?)
}

/// How raw disparity becomes network input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisparityPrep {
    pub crop_left: usize,
    pub crop_bottom: usize,
    pub max_disparity: f64,
}

impl Default for DisparityPrep {
    fn default() -> Self {
        Self {
            crop_left: 4,
            crop_bottom: 2,
            max_disparity: 48.0,
        }
    }
}

/// Remaps labels into the unified taxonomy and preprocesses disparity.
pub fn prepare(sample: &Sample, taxonomy: &LabelTaxonomy, prep: &DisparityPrep) -> Result<Example> {
    Ok(Example {
        rgb: sample.rgb.clone(),
        disparity: preprocess_disparity(&sample.disparity, prep.crop_left, prep.crop_bottom, prep.max_disparity)?,
        labels: remap_labels(&sample.labels, &sample.source, taxonomy)?,
        source: sample.source.clone(),
    })
}
