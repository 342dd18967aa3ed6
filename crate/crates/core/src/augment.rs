//! Disparity preprocessing and training-time augmentation.

use rand::Rng;
use rfnet_autodiff::kernels::bilinear_forward;
use rfnet_autodiff::Tensor;

use crate::error::{config, Result};
use crate::labels::{LabelMap, IGNORE_ID};

/// A network-ready sample: RGB, normalized disparity and unified labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `[3,H,W]`.
    pub rgb: Tensor,
    /// `[1,H,W]`, disparity divided by the max-disparity constant.
    pub disparity: Tensor,
    pub labels: LabelMap,
    pub source: String,
}

impl Example {
    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }
}

fn hw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.dims() {
        [c, h, w] => Ok((c, h, w)),
        ref d => config(format!("expected a [C,H,W] plane stack, got {d:?}")),
    }
}

/// Drops the unmatched left columns and bottom rows, resizes bilinearly back
/// to the full size and divides by `max_disparity`.
pub fn preprocess_disparity(d: &Tensor, crop_left: usize, crop_bottom: usize, max_disparity: f64) -> Result<Tensor> {
    let (c, h, w) = hw(d)?;
    if c != 1 {
        return config(format!("disparity must have one channel, got {c}"));
    }
    if crop_left >= w || crop_bottom >= h {
        return config(format!("crop {crop_left}/{crop_bottom} leaves nothing of {h}x{w}"));
    }
    if max_disparity <= 0.0 {
        return config("max_disparity must be positive");
    }
    let (ch, cw) = (h - crop_bottom, w - crop_left);
    let mut kept = Vec::with_capacity(ch * cw);
    for y in 0..ch {
        kept.extend_from_slice(&d.data()[y * w + crop_left..(y + 1) * w]);
    }
    let resized = if (ch, cw) == (h, w) {
        kept
    } else {
        bilinear_forward(1, ch, cw, h, w, &kept)
    };
    Ok(Tensor::new(vec![1, h, w], resized.into_iter().map(|v| v / max_disparity).collect())?)
}

/// One augmentation draw. Offsets locate the crop window inside the scaled
/// (and possibly flipped) image; negative offsets pad.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub scale: f64,
    pub flip: bool,
    pub offset_y: isize,
    pub offset_x: isize,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        scale: 1.0,
        flip: false,
        offset_y: 0,
        offset_x: 0,
    };
}

fn scaled_len(len: usize, scale: f64) -> usize {
    ((len as f64 * scale).round() as usize).max(1)
}

fn offset<R: Rng + ?Sized>(rng: &mut R, scaled: usize, crop: usize) -> isize {
    if scaled >= crop {
        rng.random_range(0..=(scaled - crop) as i64) as isize
    } else {
        -(rng.random_range(0..=(crop - scaled) as i64) as isize)
    }
}

/// Scale from `scale_range`, fair-coin flip and a uniform crop position.
pub fn draw_augment<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    crop: (usize, usize),
    scale_range: (f64, f64),
) -> AugmentDraw {
    let scale = rng.random_range(scale_range.0..=scale_range.1);
    let flip = rng.random_bool(0.5);
    AugmentDraw {
        scale,
        flip,
        offset_y: offset(rng, scaled_len(height, scale), crop.0),
        offset_x: offset(rng, scaled_len(width, scale), crop.1),
    }
}

/// Mirrors every plane left to right.
pub fn flip_horizontal(ex: &Example) -> Example {
    let (h, w) = (ex.height(), ex.width());
    let flip_planes = |t: &Tensor| {
        Tensor::from_fn(t.dims(), |i| {
            let x = i % w;
            t.data()[i - x + (w - 1 - x)]
        })
    };
    let mut labels = ex.labels.clone();
    for y in 0..h {
        labels.data[y * w..(y + 1) * w].reverse();
    }
    Example {
        rgb: flip_planes(&ex.rgb),
        disparity: flip_planes(&ex.disparity),
        labels,
        source: ex.source.clone(),
    }
}

/// Resizes all planes by `scale` (bilinear for images, nearest for labels).
/// With `scale_disparity` the disparity values are multiplied by the same
/// factor, keeping apparent size and disparity consistent.
pub fn rescale(ex: &Example, scale: f64, scale_disparity: bool) -> Example {
    let (h, w) = (ex.height(), ex.width());
    let (sh, sw) = (scaled_len(h, scale), scaled_len(w, scale));
    if (sh, sw) == (h, w) {
        return ex.clone();
    }
    let rgb = Tensor::new(vec![3, sh, sw], bilinear_forward(3, h, w, sh, sw, ex.rgb.data())).expect("rgb dims");
    let factor = if scale_disparity { scale } else { 1.0 };
    let disparity = Tensor::new(
        vec![1, sh, sw],
        bilinear_forward(1, h, w, sh, sw, ex.disparity.data())
            .into_iter()
            .map(|v| v * factor)
            .collect(),
    )
    .expect("disparity dims");
    let near = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let mut labels = LabelMap::filled(sh, sw, IGNORE_ID);
    for y in 0..sh {
        for x in 0..sw {
            labels.set(y, x, ex.labels.get(near(y, sh, h), near(x, sw, w)));
        }
    }
    Example {
        rgb,
        disparity,
        labels,
        source: ex.source.clone(),
    }
}

/// Cuts a `crop` window at the draw's offsets, padding with zero pixels and
/// ignored labels outside the image.
pub fn crop(ex: &Example, oy: isize, ox: isize, crop: (usize, usize)) -> Example {
    let (h, w) = (ex.height() as isize, ex.width() as isize);
    let (ch, cw) = crop;
    let inside = |i: usize| {
        let (y, x) = ((i / cw) as isize + oy, (i % cw) as isize + ox);
        (y >= 0 && y < h && x >= 0 && x < w).then(|| (y * w + x) as usize)
    };
    let planes = |t: &Tensor, c: usize| {
        Tensor::from_fn(&[c, ch, cw], |i| {
            let (p, r) = (i / (ch * cw), i % (ch * cw));
            inside(r).map_or(0.0, |src| t.data()[p * (h * w) as usize + src])
        })
    };
    let labels = LabelMap {
        height: ch,
        width: cw,
        data: (0..ch * cw)
            .map(|i| inside(i).map_or(IGNORE_ID, |src| ex.labels.data[src]))
            .collect(),
    };
    Example {
        rgb: planes(&ex.rgb, 3),
        disparity: planes(&ex.disparity, 1),
        labels,
        source: ex.source.clone(),
    }
}

/// Scale, flip, then crop to `crop_size`.
pub fn augment(ex: &Example, d: &AugmentDraw, crop_size: (usize, usize), scale_disparity: bool) -> Example {
    let scaled = rescale(ex, d.scale, scale_disparity);
    let flipped = if d.flip { flip_horizontal(&scaled) } else { scaled };
    crop(&flipped, d.offset_y, d.offset_x, crop_size)
}
