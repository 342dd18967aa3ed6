use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result, TensorError};

/// Dense row-major array of `f64`.
///
/// Differentiation state lives on the [`Tape`](crate::Tape); a `Tensor` is a
/// plain value that becomes a tape node through [`Tape::leaf`](crate::Tape::leaf).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return shape_err(format!("dims must be non-empty and positive, got {dims:?}"));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "dims {dims:?} hold {n} values but {} were supplied",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        assert!(
            !dims.is_empty() && dims.iter().all(|&d| d > 0),
            "invalid dims {dims:?}"
        );
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// Standard normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(dims, |_| std * rng.sample::<f64, _>(StandardNormal))
    }

    pub fn rand_uniform<R: Rng + ?Sized>(dims: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(dims, |_| rng.random_range(lo..hi))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data viewed under new dims with equal element count.
    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.iter().any(|&d| d == 0) {
            return shape_err(format!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "dims differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(TensorError::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    /// Concatenates same-shaped `[C,H,W]` tensors into `[N,C,H,W]`.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::Shape("cannot stack zero tensors".into()))?;
        let mut dims = vec![items.len()];
        dims.extend_from_slice(&first.dims);
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.dims != first.dims {
                return shape_err(format!("stack: {:?} vs {:?}", t.dims, first.dims));
            }
            data.extend_from_slice(&t.data);
        }
        Tensor::new(dims, data)
    }

    /// Sample `n` of a batched tensor, with the leading dim dropped.
    pub fn slice_batch(&self, n: usize) -> Self {
        let per = self.numel() / self.dims[0];
        Self {
            dims: self.dims[1..].to_vec(),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }
}

/// Interprets dims as `(N, C, H, W)`; rank-3 tensors are a batch of one.
pub(crate) fn nchw(dims: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *dims {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => shape_err(format!("expected [C,H,W] or [N,C,H,W], got {dims:?}")),
    }
}

/// Builds output dims with the same batching convention as `like`.
pub(crate) fn dims_like(like: &[usize], n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if like.len() == 3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}
