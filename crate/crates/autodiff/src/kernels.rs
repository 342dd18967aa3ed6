//! Raw forward/backward kernels on NCHW slices.
//!
//! These are the loops behind the tape ops. They carry no autodiff state and
//! are public so benches can time them directly.

use crate::par;

/// Geometry of a 2-D convolution over an `[N, Cin, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Unfolds one sample `[Cin, H, W]` into `[Cin*k*k, Ho*Wo]` columns.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut cols[r * plane..(r + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds column gradients back onto one `[Cin, H, W]` sample, accumulating.
fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &cols[r * plane..(r + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the loop pipeline; the order is fixed so results
    // stay reproducible.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            acc[j] += a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Cross-correlation with zero padding. Weight is `[Cout, Cin, k, k]`.
pub fn conv2d_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    let patch = g.patch_len();
    let in_sample = g.cin * g.h * g.w;
    let mut out = vec![0.0; g.n * g.cout * plane];
    par::for_each_chunk(&mut out, g.cout * plane, |n, out_n| {
        let xs = &x[n * in_sample..(n + 1) * in_sample];
        let owned;
        let cols: &[f64] = if g.is_pointwise() {
            xs
        } else {
            let mut c = vec![0.0; patch * plane];
            im2col(g, xs, &mut c);
            owned = c;
            &owned
        };
        for co in 0..g.cout {
            let orow = &mut out_n[co * plane..(co + 1) * plane];
            if let Some(b) = bias {
                orow.fill(b[co]);
            }
            let wrow = &weight[co * patch..(co + 1) * patch];
            for (r, &wv) in wrow.iter().enumerate() {
                if wv != 0.0 {
                    axpy(wv, &cols[r * plane..(r + 1) * plane], orow);
                }
            }
        }
    });
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    want_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    let patch = g.patch_len();
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * plane;

    let per_sample = par::map_indexed(g.n, |n| {
        let xs = &x[n * in_sample..(n + 1) * in_sample];
        let dy = &dout[n * out_sample..(n + 1) * out_sample];
        let owned;
        let cols: &[f64] = if g.is_pointwise() {
            xs
        } else {
            let mut c = vec![0.0; patch * plane];
            im2col(g, xs, &mut c);
            owned = c;
            &owned
        };
        let mut dw = vec![0.0; g.cout * patch];
        for co in 0..g.cout {
            let dyr = &dy[co * plane..(co + 1) * plane];
            let dwr = &mut dw[co * patch..(co + 1) * patch];
            for (r, d) in dwr.iter_mut().enumerate() {
                *d = dot(dyr, &cols[r * plane..(r + 1) * plane]);
            }
        }
        let dx = want_dx.then(|| {
            let mut dcols = vec![0.0; patch * plane];
            for co in 0..g.cout {
                let dyr = &dy[co * plane..(co + 1) * plane];
                let wrow = &weight[co * patch..(co + 1) * patch];
                for (r, &wv) in wrow.iter().enumerate() {
                    if wv != 0.0 {
                        axpy(wv, dyr, &mut dcols[r * plane..(r + 1) * plane]);
                    }
                }
            }
            if g.is_pointwise() {
                dcols
            } else {
                let mut dxs = vec![0.0; in_sample];
                col2im(g, &dcols, &mut dxs);
                dxs
            }
        });
        (dx, dw)
    });

    let mut dw = vec![0.0; g.cout * patch];
    let mut dx = want_dx.then(|| Vec::with_capacity(g.n * in_sample));
    for (dxs, dws) in per_sample {
        for (a, b) in dw.iter_mut().zip(&dws) {
            *a += b;
        }
        if let (Some(acc), Some(part)) = (dx.as_mut(), dxs) {
            acc.extend_from_slice(&part);
        }
    }
    let mut db = vec![0.0; g.cout];
    for n in 0..g.n {
        for (co, d) in db.iter_mut().enumerate() {
            let s = n * out_sample + co * plane;
            *d += dout[s..s + plane].iter().sum::<f64>();
        }
    }
    (dx, dw, db)
}

/// Geometry of a windowed pool over `[N*C]` planes of `H x W`.
#[derive(Clone, Copy, Debug)]
pub struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
}

/// Max pool; padded positions never win. Returns values and flat argmax
/// indices into the input. Ties resolve to the first position in row-major
/// window order.
pub fn max_pool_forward(g: &PoolGeom, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = Vec::with_capacity(g.planes * ho * wo);
    let mut arg = Vec::with_capacity(g.planes * ho * wo);
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let i = base + iy as usize * g.w + ix as usize;
                        let better = x[i] > best || (x[i].is_nan() && !best.is_nan());
                        if best_i == usize::MAX || better {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub fn avg_pool_forward(g: &PoolGeom, x: &[f64]) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let inv = 1.0 / (g.k * g.k) as f64;
    let mut out = Vec::with_capacity(g.planes * ho * wo);
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for ky in 0..g.k {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    s += x[row..row + g.k].iter().sum::<f64>();
                }
                out.push(s * inv);
            }
        }
    }
    out
}

pub fn avg_pool_backward(g: &PoolGeom, dout: &[f64]) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let inv = 1.0 / (g.k * g.k) as f64;
    let mut dx = vec![0.0; g.planes * g.h * g.w];
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..ho {
            for ox in 0..wo {
                let d = dout[(p * ho + oy) * wo + ox] * inv;
                for ky in 0..g.k {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    dx[row..row + g.k].iter_mut().for_each(|v| *v += d);
                }
            }
        }
    }
    dx
}

/// Bin `[start, end)` of cell `i` when `len` is split into `cells` parts.
pub fn adaptive_bin(i: usize, len: usize, cells: usize) -> (usize, usize) {
    let start = i * len / cells;
    let end = ((i + 1) * len).div_ceil(cells);
    (start, end)
}

pub fn adaptive_avg_pool_forward(planes: usize, h: usize, w: usize, grid: usize, x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes * grid * grid);
    for p in 0..planes {
        let base = p * h * w;
        for gy in 0..grid {
            let (y0, y1) = adaptive_bin(gy, h, grid);
            for gx in 0..grid {
                let (x0, x1) = adaptive_bin(gx, w, grid);
                let mut s = 0.0;
                for y in y0..y1 {
                    s += x[base + y * w + x0..base + y * w + x1].iter().sum::<f64>();
                }
                out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward(planes: usize, h: usize, w: usize, grid: usize, dout: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let base = p * h * w;
        for gy in 0..grid {
            let (y0, y1) = adaptive_bin(gy, h, grid);
            for gx in 0..grid {
                let (x0, x1) = adaptive_bin(gx, w, grid);
                let d = dout[(p * grid + gy) * grid + gx] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    dx[base + y * w + x0..base + y * w + x1]
                        .iter_mut()
                        .for_each(|v| *v += d);
                }
            }
        }
    }
    dx
}

/// Source taps for one output axis of a half-pixel bilinear resize:
/// `(lower index, upper index, upper weight)`.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_forward(planes: usize, h: usize, w: usize, oh: usize, ow: usize, x: &[f64]) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    par::for_each_chunk(&mut out, oh * ow, |p, o| {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = (1.0 - lx) * xp[y0 * w + x0] + lx * xp[y0 * w + x1];
                let bot = (1.0 - lx) * xp[y1 * w + x0] + lx * xp[y1 * w + x1];
                o[oy * ow + ox] = (1.0 - ly) * top + ly * bot;
            }
        }
    });
    out
}

pub fn bilinear_backward(planes: usize, h: usize, w: usize, oh: usize, ow: usize, dout: &[f64]) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    par::for_each_chunk(&mut dx, h * w, |p, d| {
        let dp = &dout[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = dp[oy * ow + ox];
                d[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * g;
                d[y0 * w + x1] += (1.0 - ly) * lx * g;
                d[y1 * w + x0] += ly * (1.0 - lx) * g;
                d[y1 * w + x1] += ly * lx * g;
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_bins_partition_divisible_planes() {
        let bins: Vec<_> = (0..4).map(|i| adaptive_bin(i, 8, 4)).collect();
        assert_eq!(bins, vec![(0, 2), (2, 4), (4, 6), (6, 8)]);
        // Non-divisible lengths overlap by at most one cell.
        assert_eq!(adaptive_bin(1, 5, 3), (1, 4));
    }

    #[test]
    fn bilinear_taps_identity_when_same_size() {
        for (i, &(a, b, l)) in bilinear_taps(5, 5).iter().enumerate() {
            assert_eq!(a, i);
            assert_eq!(l, 0.0);
            assert!(b == i + 1 || b == 4);
        }
    }

    #[test]
    fn max_pool_tie_goes_to_first() {
        let g = PoolGeom { planes: 1, h: 2, w: 2, k: 2, stride: 2, pad: 0 };
        let (v, a) = max_pool_forward(&g, &[3.0, 3.0, 1.0, 3.0]);
        assert_eq!(v, vec![3.0]);
        assert_eq!(a, vec![0]);
    }
}
