use crate::error::{data, Result};
use rfnet_autodiff::Tensor;

/// Reserved label for pixels that are never scored.
pub const IGNORE_ID: u32 = 255;

/// Integer label map, row-major `H x W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return data_err_len(height, width, data.len());
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u32) {
        self.data[y * self.width + x] = v;
    }

    /// `[1, H, W]` tensor holding the ids as floats.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("label dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match *t.dims() {
            [h, w] | [1, h, w] => (h, w),
            ref d => return data(format!("label tensor must be [H,W] or [1,H,W], got {d:?}")),
        };
        let ids = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                    Ok(v as u32)
                } else {
                    data(format!("label value {v} is not a non-negative integer"))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(h, w, ids)
    }
}

fn data_err_len<T>(h: usize, w: usize, n: usize) -> Result<T> {
    data(format!("label map {h}x{w} given {n} values"))
}
