//! Forward and backward numeric kernels on raw NHWC buffers.

use crate::scalar::Scalar;

pub const BN_EPSILON: f64 = 1e-5;

/// Upper bound on the im2col scratch buffer, in elements.
const COL_CHUNK_ELEMS: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        9 * self.cin
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }

    fn images_per_chunk(&self) -> usize {
        (COL_CHUNK_ELEMS / (self.pixels() * self.patch()).max(1)).max(1)
    }
}

/// Lays out the 3x3 zero-padded neighbourhood of every pixel of images
/// `first..first + count` as rows of `cols` (`[count*H*W, 9*Cin]`), in
/// `(ky, kx, cin)` order to match the kernel layout `[3, 3, Cin, Cout]`.
fn im2col<T: Scalar>(input: &[T], g: &ConvGeom, first: usize, count: usize, cols: &mut [T]) {
    let (h, w, c) = (g.height, g.width, g.cin);
    let patch = g.patch();
    for b in 0..count {
        let img = &input[(first + b) * h * w * c..(first + b + 1) * h * w * c];
        for y in 0..h {
            for x in 0..w {
                let row = &mut cols[((b * h + y) * w + x) * patch..][..patch];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let dst = &mut row[(ky * 3 + kx) * c..][..c];
                        let iy = y as isize + ky as isize - 1;
                        let ix = x as isize + kx as isize - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            dst.fill(T::zero());
                        } else {
                            let src = (iy as usize * w + ix as usize) * c;
                            dst.copy_from_slice(&img[src..src + c]);
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, first: usize, count: usize, dx: &mut [T]) {
    let (h, w, c) = (g.height, g.width, g.cin);
    let patch = g.patch();
    for b in 0..count {
        let img = &mut dx[(first + b) * h * w * c..(first + b + 1) * h * w * c];
        for y in 0..h {
            for x in 0..w {
                let row = &cols[((b * h + y) * w + x) * patch..][..patch];
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = &row[(ky * 3 + kx) * c..][..c];
                        let dst = (iy as usize * w + ix as usize) * c;
                        for (d, &s) in img[dst..dst + c].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(input: &[T], kernels: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let px = g.pixels();
    let mut out = vec![T::zero(); g.batch * px * g.cout];
    let per_chunk = g.images_per_chunk();
    let mut cols = vec![T::zero(); per_chunk.min(g.batch) * px * g.patch()];
    let mut first = 0;
    while first < g.batch {
        let count = per_chunk.min(g.batch - first);
        let rows = count * px;
        im2col(input, g, first, count, &mut cols);
        let dst = &mut out[first * px * g.cout..(first + count) * px * g.cout];
        for row in dst.chunks_exact_mut(g.cout) {
            row.copy_from_slice(bias);
        }
        T::gemm(false, false, rows, g.cout, g.patch(), T::one(), &cols, kernels, T::one(), dst);
        first += count;
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernels: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    kernels: &[T],
    dy: &[T],
    g: &ConvGeom,
    want: [bool; 3],
) -> ConvGrads<T> {
    let px = g.pixels();
    let patch = g.patch();
    let mut dx = want[0].then(|| vec![T::zero(); input.len()]);
    let mut dk = want[1].then(|| vec![T::zero(); kernels.len()]);
    let db = want[2].then(|| {
        let mut db = vec![T::zero(); g.cout];
        for row in dy.chunks_exact(g.cout) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d = *d + v;
            }
        }
        db
    });
    if dx.is_some() || dk.is_some() {
        let per_chunk = g.images_per_chunk();
        let mut cols = vec![T::zero(); per_chunk.min(g.batch) * px * patch];
        let mut first = 0;
        while first < g.batch {
            let count = per_chunk.min(g.batch - first);
            let rows = count * px;
            let dy_chunk = &dy[first * px * g.cout..(first + count) * px * g.cout];
            if let Some(dk) = dk.as_mut() {
                im2col(input, g, first, count, &mut cols);
                T::gemm(true, false, patch, g.cout, rows, T::one(), &cols, dy_chunk, T::one(), dk);
            }
            if let Some(dx) = dx.as_mut() {
                let dcols = &mut cols[..rows * patch];
                T::gemm(false, true, rows, patch, g.cout, T::one(), dy_chunk, kernels, T::zero(), dcols);
                col2im_add(dcols, g, first, count, dx);
            }
            first += count;
        }
    }
    ConvGrads {
        input: dx,
        kernels: dk,
        bias: db,
    }
}

/// Per-channel mean and biased variance over the leading `rows` of a
/// `[rows, channels]` view, accumulated in `f64`.
pub fn channel_moments<T: Scalar>(x: &[T], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / channels;
    let mut mean = vec![0.0f64; channels];
    for row in x.chunks_exact(channels) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0f64; channels];
    for row in x.chunks_exact(channels) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.as_f64() - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= rows as f64);
    (mean, var)
}

/// Returns `(output, xhat, inv_std)`.
pub fn batch_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[f64],
    var: &[f64],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + BN_EPSILON).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        for ch in 0..c {
            let h = (row[ch] - mean_t[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(gamma[ch] * h + beta[ch]);
        }
    }
    (out, xhat, inv_std)
}

/// Input gradient of batch norm when the statistics come from the batch itself.
pub fn batch_norm_backward_batch<T: Scalar>(dy: &[T], xhat: &[T], gamma: &[T], inv_std: &[T]) -> Vec<T> {
    let c = gamma.len();
    let rows = dy.len() / c;
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for (drow, hrow) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            sum_dy[ch] += drow[ch].as_f64();
            sum_dy_xhat[ch] += (drow[ch] * hrow[ch]).as_f64();
        }
    }
    let m = rows as f64;
    let coef: Vec<T> = (0..c).map(|ch| gamma[ch] * inv_std[ch]).collect();
    let mean_dy: Vec<T> = sum_dy.iter().map(|&s| T::of(s / m)).collect();
    let mean_dy_xhat: Vec<T> = sum_dy_xhat.iter().map(|&s| T::of(s / m)).collect();
    let mut dx = Vec::with_capacity(dy.len());
    for (drow, hrow) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            dx.push(coef[ch] * (drow[ch] - mean_dy[ch] - hrow[ch] * mean_dy_xhat[ch]));
        }
    }
    dx
}

/// 2x2 max pooling with stride 2. Trailing odd rows/columns are dropped.
/// Returns the output and, per output element, the flat input index of the
/// selected maximum (first in window scan order on ties).
pub fn max_pool_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(batch * oh * ow * c);
    let mut arg = Vec::with_capacity(batch * oh * ow * c);
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_idx = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
                    let mut best = x[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution used as a reference.
    fn conv_reference(input: &[f64], kernels: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.height * g.width * g.cout];
        for b in 0..g.batch {
            for y in 0..g.height {
                for x in 0..g.width {
                    for co in 0..g.cout {
                        let mut acc = bias[co];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = x as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                for ci in 0..g.cin {
                                    let iv = input[((b * g.height + iy as usize) * g.width + ix as usize) * g.cin + ci];
                                    let kv = kernels[((ky * 3 + kx) * g.cin + ci) * g.cout + co];
                                    acc += iv * kv;
                                }
                            }
                        }
                        out[((b * g.height + y) * g.width + x) * g.cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let g = ConvGeom {
            batch: 2,
            height: 5,
            width: 4,
            cin: 3,
            cout: 2,
        };
        let input: Vec<f64> = (0..g.batch * 20 * 3).map(|i| ((i * 7 % 13) as f64) * 0.1 - 0.6).collect();
        let kernels: Vec<f64> = (0..9 * 3 * 2).map(|i| ((i * 5 % 11) as f64) * 0.05 - 0.2).collect();
        let bias = [0.3, -0.1];
        let got = conv2d_forward(&input, &kernels, &bias, &g);
        let want = conv_reference(&input, &kernels, &bias, &g);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_ties_pick_first_index() {
        let x = [5.0f64, 5.0, 5.0, 5.0];
        let (out, arg) = max_pool_forward(&x, 1, 2, 2, 1);
        assert_eq!(out, vec![5.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn max_pool_floors_odd_extents() {
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let (out, arg) = max_pool_forward(&x, 1, 3, 3, 1);
        assert_eq!(out, vec![4.0]);
        assert_eq!(arg, vec![4]);
    }
}
