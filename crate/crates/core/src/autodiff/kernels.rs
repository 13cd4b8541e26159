//! Dense loop kernels behind the graph ops. All layouts are NCHW, row-major.

/// Geometry of a square-kernel 2-D convolution with "same"-style zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding() - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding() - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Output positions `lo..hi` along one axis whose tap at offset `kx` lands
/// inside the input.
fn valid_span(kx: usize, pad: usize, stride: usize, extent: usize, out: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi = if extent + pad <= kx { 0 } else { ((extent - 1 + pad - kx) / stride + 1).min(out) };
    (lo.min(hi), hi)
}

/// Unfolds one image `(C, H, W)` into a `(C·K·K, Ho·Wo)` patch matrix.
pub fn im2col(image: &[f64], geo: &ConvGeometry, col: &mut [f64]) {
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let (pad, k, s) = (geo.padding(), geo.kernel, geo.stride);
    let plane = geo.height * geo.width;
    for c in 0..geo.channels {
        let src = &image[c * plane..(c + 1) * plane];
        for ky in 0..k {
            let (ylo, yhi) = valid_span(ky, pad, s, geo.height, ho);
            for kx in 0..k {
                let (xlo, xhi) = valid_span(kx, pad, s, geo.width, wo);
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                dst[..ylo * wo].fill(0.0);
                dst[yhi * wo..].fill(0.0);
                for oy in ylo..yhi {
                    let iy = oy * s + ky - pad;
                    let src_row = &src[iy * geo.width..(iy + 1) * geo.width];
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    out_row[..xlo].fill(0.0);
                    out_row[xhi..].fill(0.0);
                    if xlo < xhi {
                        let start = xlo * s + kx - pad;
                        if s == 1 {
                            out_row[xlo..xhi].copy_from_slice(&src_row[start..start + (xhi - xlo)]);
                        } else {
                            for (o, &v) in out_row[xlo..xhi].iter_mut().zip(src_row[start..].iter().step_by(s)) {
                                *o = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto an image gradient.
fn col2im(col: &[f64], geo: &ConvGeometry, image: &mut [f64]) {
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let (pad, k, s) = (geo.padding(), geo.kernel, geo.stride);
    let plane = geo.height * geo.width;
    for c in 0..geo.channels {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ky in 0..k {
            let (ylo, yhi) = valid_span(ky, pad, s, geo.height, ho);
            for kx in 0..k {
                let (xlo, xhi) = valid_span(kx, pad, s, geo.width, wo);
                if xlo >= xhi {
                    continue;
                }
                let row = (c * k + ky) * k + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in ylo..yhi {
                    let iy = oy * s + ky - pad;
                    let start = iy * geo.width + xlo * s + kx - pad;
                    let dst_row = &mut dst[start..(iy + 1) * geo.width];
                    for (d, &v) in dst_row.iter_mut().step_by(s).zip(&src[oy * wo + xlo..oy * wo + xhi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

const MR: usize = 8;
const NR: usize = 8;

/// `out[i, j] += Σ_p a(i, p) · b[p, j]` with `a(i, p) = a[i·rs + p·cs]`.
///
/// Output is processed in `MR×NR` register tiles. Every element sums its
/// terms in ascending `p` starting from the existing output value, so the
/// result does not depend on where tile edges fall.
fn gemm_strided(a: &[f64], rs: usize, cs: usize, b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i0 in (0..m).step_by(MR) {
        let mr = MR.min(m - i0);
        for j0 in (0..n).step_by(NR) {
            let nr = NR.min(n - j0);
            if mr == MR && nr == NR {
                let mut acc = [[0.0f64; NR]; MR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
                }
                for p in 0..k {
                    let bp: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = a[(i0 + r) * rs + p * cs];
                        for (slot, &bv) in row.iter_mut().zip(bp) {
                            *slot += av * bv;
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
                }
            } else {
                for r in 0..mr {
                    let i = i0 + r;
                    let dst = &mut out[i * n + j0..i * n + j0 + nr];
                    for p in 0..k {
                        let av = a[i * rs + p * cs];
                        for (slot, &bv) in dst.iter_mut().zip(&b[p * n + j0..p * n + j0 + nr]) {
                            *slot += av * bv;
                        }
                    }
                }
            }
        }
    }
}

/// `out[m, n] += Σ_k a[m, k] · b[k, n]` for row-major `a (m×k)` and `b (k×n)`.
pub fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(a, k, 1, b, out, m, k, n);
}

/// `out[m, n] += Σ_k a[m, k] · b[n, k]` (right operand transposed).
pub fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m, n] += Σ_k a[k, m] · b[k, n]` (left operand transposed).
pub fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(a, 1, m, b, out, m, k, n);
}

/// Row-major transpose of an `rows×cols` matrix.
fn transpose(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the loop vectorize; the summation
    // order is fixed, so results stay bit-reproducible.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for (lane, slot) in acc.iter_mut().enumerate() {
            *slot += a[4 * i + lane] * b[4 * i + lane];
        }
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        total += a[i] * b[i];
    }
    total
}

pub fn conv2d_forward(
    input: &[f64],
    batch: usize,
    geo: &ConvGeometry,
    weight: &[f64],
    out_channels: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (rows, cols) = (geo.col_rows(), geo.col_cols());
    let in_size = geo.channels * geo.height * geo.width;
    let out_size = out_channels * cols;
    let mut out = vec![0.0; batch * out_size];
    let mut col = vec![0.0; rows * cols];
    for n in 0..batch {
        im2col(&input[n * in_size..(n + 1) * in_size], geo, &mut col);
        let dst = &mut out[n * out_size..(n + 1) * out_size];
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_mut(cols).enumerate() {
                chunk.fill(bias[o]);
            }
        }
        gemm_acc(weight, &col, dst, out_channels, rows, cols);
    }
    out
}

/// Gradients of a convolution. `want_input` skips the (costly) input
/// gradient when nothing upstream needs it.
pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &[f64],
    batch: usize,
    geo: &ConvGeometry,
    weight: &[f64],
    out_channels: usize,
    grad_out: &[f64],
    want_input: bool,
) -> ConvGrads {
    let (rows, cols) = (geo.col_rows(), geo.col_cols());
    let in_size = geo.channels * geo.height * geo.width;
    let out_size = out_channels * cols;
    // The weight gradient is accumulated transposed, `(rows, out)`, so only
    // the small `dy` needs transposing per image; each element still sums
    // its terms in the same order.
    let mut grad_weight_t = vec![0.0; rows * out_channels];
    let mut grad_bias = vec![0.0; out_channels];
    let mut grad_input = want_input.then(|| vec![0.0; batch * in_size]);
    let mut col = vec![0.0; rows * cols];
    let mut dy_t = vec![0.0; cols * out_channels];
    let mut grad_col = vec![0.0; rows * cols];
    for n in 0..batch {
        im2col(&input[n * in_size..(n + 1) * in_size], geo, &mut col);
        let dy = &grad_out[n * out_size..(n + 1) * out_size];
        transpose(dy, out_channels, cols, &mut dy_t);
        for (o, chunk) in dy.chunks(cols).enumerate() {
            grad_bias[o] += chunk.iter().sum::<f64>();
        }
        gemm_acc(&col, &dy_t, &mut grad_weight_t, rows, cols, out_channels);
        if let Some(grad_input) = grad_input.as_mut() {
            grad_col.fill(0.0);
            gemm_tn_acc(weight, dy, &mut grad_col, rows, out_channels, cols);
            col2im(&grad_col, geo, &mut grad_input[n * in_size..(n + 1) * in_size]);
        }
    }
    let mut grad_weight = vec![0.0; out_channels * rows];
    transpose(&grad_weight_t, rows, out_channels, &mut grad_weight);
    ConvGrads { input: grad_input, weight: grad_weight, bias: grad_bias }
}

/// 2×2 max pooling with stride 2. Returns the pooled values and, for each
/// output, the flat index of the winning input (first maximum on ties).
pub fn max_pool2_forward(input: &[f64], planes: usize, height: usize, width: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + 2 * oy * width + 2 * ox;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * width + 2 * ox + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Per-channel statistics over every axis except axis 1.
pub fn channel_moments(input: &[f64], batch: usize, channels: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (batch * spatial) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut sum = 0.0;
        for n in 0..batch {
            let off = (n * channels + c) * spatial;
            sum += input[off..off + spatial].iter().sum::<f64>();
        }
        let m = sum / count;
        let mut sq = 0.0;
        for n in 0..batch {
            let off = (n * channels + c) * spatial;
            sq += input[off..off + spatial].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}
