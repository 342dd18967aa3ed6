//! Synthetic RGB-D road scenes in two dataset flavours.
//!
//! Both flavours render the same world: sky, a band of buildings, a ground
//! plane with disparity growing linearly towards the bottom row, vehicles
//! standing on the road and flat painted markings. `LostfoundLike` scenes
//! additionally contain small raised obstacles whose colour and size are
//! drawn from the same distributions as the markings, so only disparity tells
//! them apart.
//!
//! Raw label ids differ per flavour. `CityscapesLike` uses the unified ids
//! directly; `LostfoundLike` only knows background, free space and obstacle.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rfnet_autodiff::Tensor;

use crate::error::{config, Error, Result};
use crate::labels::LabelMap;
use crate::seed;
use crate::taxonomy::LabelTaxonomy;

pub const ROAD: u32 = 0;
pub const SKY: u32 = 1;
pub const BUILDING: u32 = 2;
pub const VEHICLE: u32 = 3;
pub const OBSTACLE: u32 = 4;
pub const NUM_CLASSES: usize = 5;

pub const LF_BACKGROUND: u32 = 0;
pub const LF_FREE_SPACE: u32 = 1;
pub const LF_OBSTACLE: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Analog {
    CityscapesLike,
    LostfoundLike,
}

impl Analog {
    pub fn name(self) -> &'static str {
        match self {
            Analog::CityscapesLike => "cityscapes_like",
            Analog::LostfoundLike => "lostfound_like",
        }
    }
}

impl fmt::Display for Analog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Analog {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Analog::CityscapesLike, Analog::LostfoundLike]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown dataset analog {s:?}")))
    }
}

/// Unified taxonomy for the two flavours. Road and obstacle are labelled
/// consistently by both (set A); everything else only by the standard
/// `cityscapes_like` data.
pub fn synthetic_taxonomy() -> LabelTaxonomy {
    LabelTaxonomy::parse(
        "class 0 road A\n\
         class 1 sky B\n\
         class 2 building B\n\
         class 3 vehicle B\n\
         class 4 obstacle A\n\
         dataset cityscapes_like standard\n\
         dataset lostfound_like aux\n\
         remap cityscapes_like 0 0\n\
         remap cityscapes_like 1 1\n\
         remap cityscapes_like 2 2\n\
         remap cityscapes_like 3 3\n\
         remap cityscapes_like 4 4\n\
         remap lostfound_like 0 ignore\n\
         remap lostfound_like 1 0\n\
         remap lostfound_like 2 4\n",
    )
    .expect("built-in taxonomy")
}

/// Class colours for rendered label maps.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [128, 64, 128],
    [70, 130, 180],
    [70, 70, 70],
    [0, 0, 142],
    [255, 200, 0],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Obstacles placed in `LostfoundLike` scenes.
    pub obstacles: usize,
    pub markings: usize,
    pub vehicles: usize,
    /// Inclusive side-length range shared by obstacles and markings.
    pub obstacle_size: (usize, usize),
    /// Disparity at the bottom road row.
    pub road_disparity: f64,
    /// Extra disparity of an obstacle over the road just below its base.
    pub obstacle_margin: f64,
    /// Fraction of matchable pixels randomly marked unmatched (0).
    pub unmatched_fraction: f64,
    /// Columns on the left and rows at the bottom with no stereo match.
    pub border_left: usize,
    pub border_bottom: usize,
}

impl SceneSpec {
    /// Defaults tuned so that colour alone cannot find obstacles: markings
    /// outnumber them two to one and objects scale with the image.
    pub fn new(seed: u64, height: usize, width: usize) -> Self {
        let side = height.min(width);
        Self {
            seed,
            height,
            width,
            obstacles: 6,
            markings: 12,
            vehicles: 2,
            obstacle_size: ((side / 12).max(2), (side / 6).max(2)),
            road_disparity: 32.0,
            obstacle_margin: 4.0,
            unmatched_fraction: 0.02,
            border_left: 4,
            border_bottom: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.obstacle_size;
        if lo < 2 || hi < lo {
            return config(format!("obstacle size range {lo}..={hi} must start at 2 px or more"));
        }
        if self.height < 32 || self.width < 32 || hi * 4 > self.height.min(self.width) {
            return config(format!(
                "{}x{} scene too small for {hi}-px objects",
                self.height, self.width
            ));
        }
        if !(0.0..1.0).contains(&self.unmatched_fraction) {
            return config("unmatched_fraction must lie in [0, 1)");
        }
        if self.road_disparity <= 0.0 || self.obstacle_margin <= 0.0 {
            return config("road_disparity and obstacle_margin must be positive");
        }
        if self.border_left >= self.width / 2 || self.border_bottom >= self.height / 4 {
            return config("unmatched borders too wide");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3,H,W]` in `[0,1]`.
    pub rgb: Tensor,
    /// `[1,H,W]` raw disparity, 0 where unmatched.
    pub disparity: Tensor,
    /// Raw ids of the source dataset.
    pub labels: LabelMap,
    pub source: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectKind {
    Vehicle,
    Obstacle,
    Marking,
}

/// Axis-aligned object footprint; `base` is the bottom row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placed {
    pub kind: ObjectKind,
    pub x0: usize,
    pub width: usize,
    pub base: usize,
    pub height: usize,
}

/// Scene plus the geometry it was rendered from.
#[derive(Clone, Debug)]
pub struct Scene {
    pub sample: Sample,
    pub horizon: usize,
    pub objects: Vec<Placed>,
    /// Ground-plane disparity per row (0 above the horizon).
    pub road_row_disparity: Vec<f64>,
}

/// Renders one scene; a pure function of `spec` and `analog`.
pub fn generate(spec: &SceneSpec, analog: Analog) -> Result<Sample> {
    Ok(generate_scene(spec, analog)?.sample)
}

pub fn generate_scene(spec: &SceneSpec, analog: Analog) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = seed::stream(&[seed::SCENE, spec.seed]);
    let horizon = rng.random_range(h * 7 / 20..=h * 9 / 20);
    let road_rows = (h - horizon) as f64;
    let road_row_disparity: Vec<f64> = (0..h)
        .map(|y| {
            if y < horizon {
                0.0
            } else {
                spec.road_disparity * (y - horizon + 1) as f64 / road_rows
            }
        })
        .collect();

    let mut rgb = vec![[0.0f64; 3]; h * w];
    let mut disp = vec![0.0f64; h * w];
    let mut unified = vec![SKY; h * w];

    let jitter = |rng: &mut ChaCha8Rng, c: [f64; 3], a: f64| c.map(|v| v + rng.random_range(-a..=a));
    let sky = jitter(&mut rng, [0.55, 0.7, 0.9], 0.05);
    for p in rgb.iter_mut().take(horizon * w) {
        *p = sky;
    }

    // Building band: segments of varying height standing on the horizon.
    let far = road_row_disparity[horizon];
    let mut x = 0;
    while x < w {
        let seg = rng.random_range(w / 8..=w / 4).min(w - x);
        let top = horizon.saturating_sub(rng.random_range(h / 10..=h / 4));
        let color = [
            rng.random_range(0.4..0.6),
            rng.random_range(0.3..0.45),
            rng.random_range(0.25..0.4),
        ];
        let d = far * rng.random_range(0.3..0.8);
        for y in top..horizon {
            for xx in x..x + seg {
                rgb[y * w + xx] = color;
                disp[y * w + xx] = d;
                unified[y * w + xx] = BUILDING;
            }
        }
        x += seg;
    }

    let gray = rng.random_range(0.35..0.45);
    for y in horizon..h {
        for xx in 0..w {
            rgb[y * w + xx] = [gray; 3];
            disp[y * w + xx] = road_row_disparity[y];
            unified[y * w + xx] = ROAD;
        }
    }

    // Markings and obstacles share colour and size distributions.
    let (slo, shi) = spec.obstacle_size;
    let bright = |rng: &mut ChaCha8Rng| [0; 3].map(|_| rng.random_range(0.6..1.0));
    let mut objects = Vec::new();
    let box_on_road = |rng: &mut ChaCha8Rng, kind: ObjectKind, (lo, hi): (usize, usize), min_base: usize| {
        let bw = rng.random_range(lo..=hi);
        let bh = rng.random_range(lo..=hi);
        let base = rng.random_range(min_base.max(horizon + bh)..h - spec.border_bottom - 1);
        let x0 = rng.random_range(0..=w - bw);
        Placed {
            kind,
            x0,
            width: bw,
            base,
            height: bh,
        }
    };
    for _ in 0..spec.markings {
        let m = box_on_road(&mut rng, ObjectKind::Marking, (slo, shi), horizon + 2);
        let color = bright(&mut rng);
        for y in m.base + 1 - m.height..=m.base {
            for xx in m.x0..m.x0 + m.width {
                rgb[y * w + xx] = color;
            }
        }
        objects.push(m);
    }

    let mut standing = Vec::new();
    for _ in 0..spec.vehicles {
        let v = box_on_road(&mut rng, ObjectKind::Vehicle, (w / 8, w / 4), horizon + 2);
        let color = [
            rng.random_range(0.1..0.5),
            rng.random_range(0.1..0.5),
            rng.random_range(0.4..0.8),
        ];
        standing.push((v, color));
    }
    if analog == Analog::LostfoundLike {
        for _ in 0..spec.obstacles {
            let o = box_on_road(&mut rng, ObjectKind::Obstacle, (slo, shi), horizon + 3);
            standing.push((o, bright(&mut rng)));
        }
    }
    // Far objects first so nearer ones occlude them.
    standing.sort_by_key(|(o, _)| o.base);
    for (o, color) in &standing {
        let (d, label) = match o.kind {
            ObjectKind::Vehicle => (road_row_disparity[o.base], VEHICLE),
            _ => (road_row_disparity[o.base + 1] + spec.obstacle_margin, OBSTACLE),
        };
        for y in o.base + 1 - o.height..=o.base {
            for xx in o.x0..o.x0 + o.width {
                rgb[y * w + xx] = *color;
                disp[y * w + xx] = d;
                unified[y * w + xx] = label;
            }
        }
    }
    objects.extend(standing.into_iter().map(|(o, _)| o));

    // Stereo dropouts. Small obstacles are kept intact.
    for (i, d) in disp.iter_mut().enumerate() {
        let (y, xx) = (i / w, i % w);
        let border = xx < spec.border_left || y >= h - spec.border_bottom;
        let dropped = rng.random::<f64>() < spec.unmatched_fraction;
        if border || (dropped && unified[i] != OBSTACLE) {
            *d = 0.0;
        }
    }

    let noise = rand_distr::Normal::new(0.0, 0.03).expect("noise std");
    let mut planes = vec![0.0; 3 * h * w];
    for (i, px) in rgb.iter().enumerate() {
        for c in 0..3 {
            let v: f64 = px[c] + rng.sample(noise);
            planes[c * h * w + i] = v.clamp(0.0, 1.0);
        }
    }

    let raw: Vec<u32> = match analog {
        Analog::CityscapesLike => unified,
        Analog::LostfoundLike => unified
            .iter()
            .map(|&u| match u {
                ROAD => LF_FREE_SPACE,
                OBSTACLE => LF_OBSTACLE,
                _ => LF_BACKGROUND,
            })
            .collect(),
    };

    Ok(Scene {
        sample: Sample {
            rgb: Tensor::new(vec![3, h, w], planes)?,
            disparity: Tensor::new(vec![1, h, w], disp)?,
            labels: LabelMap::new(h, w, raw)?,
            source: analog.name().to_string(),
        },
        horizon,
        objects,
        road_row_disparity,
    })
}
