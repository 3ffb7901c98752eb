//! Forward and backward numerics for every tensor operation.
//!
//! These functions are pure: they take tensors and return new buffers. The
//! [`Graph`](super::Graph) wraps them with bookkeeping for differentiation,
//! but they are also usable directly for inference or testing.

use super::gemm::{gemm, Mat};
use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Stride, zero padding and dilation of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvParams {
    /// Unpadded, unit-stride convolution: each extent shrinks by `m - 1`.
    pub fn valid() -> Self {
        Self::default()
    }

    pub fn new(stride: usize, padding: usize) -> Self {
        ConvParams {
            stride,
            padding,
            dilation: 1,
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    /// `floor((len + 2p - d(m-1) - 1) / s) + 1`, or `None` when it would be < 1.
    pub fn out_extent(&self, len: usize, m: usize) -> Option<usize> {
        let span = self.dilation * (m - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span {
            None
        } else {
            Some((padded - span) / self.stride + 1)
        }
    }
}

fn conv_geometry(x: Shape, w: Shape, params: ConvParams) -> Result<(usize, usize, usize)> {
    if w.c != x.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: x,
            right: w,
        });
    }
    if w.h != w.w || w.h == 0 {
        return Err(Error::InvalidShape {
            op: "conv2d",
            reason: format!("kernel must be square and non-empty, got {w}"),
        });
    }
    if params.stride == 0 || params.dilation == 0 {
        return Err(Error::InvalidShape {
            op: "conv2d",
            reason: "stride and dilation must be >= 1".into(),
        });
    }
    let m = w.h;
    match (params.out_extent(x.h, m), params.out_extent(x.w, m)) {
        (Some(oh), Some(ow)) => Ok((m, oh, ow)),
        _ => Err(Error::InvalidShape {
            op: "conv2d",
            reason: format!("input {x} smaller than kernel {m} (padding {})", params.padding),
        }),
    }
}

fn im2col(x: &Tensor, m: usize, oh: usize, ow: usize, params: ConvParams) -> Vec<f32> {
    let s = x.shape();
    let plane = oh * ow;
    let np = s.n * plane;
    let k = s.c * m * m;
    let mut cols = vec![0.0f32; k * np];
    let xd = x.data();
    for n in 0..s.n {
        for c in 0..s.c {
            let src = &xd[(n * s.c + c) * s.plane()..(n * s.c + c + 1) * s.plane()];
            for ky in 0..m {
                for kx in 0..m {
                    let r = (c * m + ky) * m + kx;
                    let row = &mut cols[r * np + n * plane..r * np + (n + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * params.stride + ky * params.dilation) as isize - params.padding as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * s.w..(iy as usize + 1) * s.w];
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * params.stride + kx * params.dilation) as isize - params.padding as isize;
                            if ix >= 0 && ix < s.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], s: Shape, m: usize, oh: usize, ow: usize, params: ConvParams) -> Vec<f32> {
    let plane = oh * ow;
    let np = s.n * plane;
    let mut dx = vec![0.0f32; s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let dst = &mut dx[(n * s.c + c) * s.plane()..(n * s.c + c + 1) * s.plane()];
            for ky in 0..m {
                for kx in 0..m {
                    let r = (c * m + ky) * m + kx;
                    let row = &cols[r * np + n * plane..r * np + (n + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * params.stride + ky * params.dilation) as isize - params.padding as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let base = iy as usize * s.w;
                        for ox in 0..ow {
                            let ix = (ox * params.stride + kx * params.dilation) as isize - params.padding as isize;
                            if ix >= 0 && ix < s.w as isize {
                                dst[base + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2-D cross-correlation of `x` (n, k_in, h, w) with kernels `w`
/// (k_out, k_in, m, m) plus a per-output-channel bias of k_out values.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, params: ConvParams) -> Result<Tensor> {
    conv2d_forward(x, w, b, params).map(|(out, _)| out)
}

/// Forward pass that also returns the unfolded input needed by the backward pass.
pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, params: ConvParams) -> Result<(Tensor, Vec<f32>)> {
    let (xs, ws) = (x.shape(), w.shape());
    let (m, oh, ow) = conv_geometry(xs, ws, params)?;
    if b.numel() != ws.n {
        return Err(Error::InvalidShape {
            op: "conv2d",
            reason: format!("bias has {} values for {} output channels", b.numel(), ws.n),
        });
    }
    let cols = im2col(x, m, oh, ow, params);
    let k = xs.c * m * m;
    let plane = oh * ow;
    let np = xs.n * plane;
    let mut outm = vec![0.0f32; ws.n * np];
    gemm(Mat::new(w.data(), ws.n, k), Mat::new(&cols, k, np), 0.0, &mut outm);
    let out_shape = Shape::new(xs.n, ws.n, oh, ow);
    let mut out = vec![0.0f32; out_shape.numel()];
    for n in 0..xs.n {
        for co in 0..ws.n {
            let bias = b.data()[co];
            let src = &outm[co * np + n * plane..co * np + (n + 1) * plane];
            let dst = &mut out[(n * ws.n + co) * plane..(n * ws.n + co + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias;
            }
        }
    }
    Ok((Tensor::new(out_shape, out)?, cols))
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
}

pub(crate) fn conv2d_backward(
    x_shape: Shape,
    w: &Tensor,
    cols: &[f32],
    dout: &[f32],
    params: ConvParams,
    need_dx: bool,
) -> ConvGrads {
    let ws = w.shape();
    let m = ws.h;
    let oh = params.out_extent(x_shape.h, m).expect("validated in forward");
    let ow = params.out_extent(x_shape.w, m).expect("validated in forward");
    let plane = oh * ow;
    let np = x_shape.n * plane;
    let k = x_shape.c * m * m;
    let mut doutm = vec![0.0f32; ws.n * np];
    let mut db = vec![0.0f32; ws.n];
    for n in 0..x_shape.n {
        for co in 0..ws.n {
            let src = &dout[(n * ws.n + co) * plane..(n * ws.n + co + 1) * plane];
            doutm[co * np + n * plane..co * np + (n + 1) * plane].copy_from_slice(src);
            db[co] += src.iter().sum::<f32>();
        }
    }
    let mut dw = vec![0.0f32; ws.numel()];
    gemm(Mat::new(&doutm, ws.n, np), Mat::new(cols, k, np).t(), 0.0, &mut dw);
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0f32; k * np];
        gemm(
            Mat::new(w.data(), ws.n, k).t(),
            Mat::new(&doutm, ws.n, np),
            0.0,
            &mut dcols,
        );
        col2im(&dcols, x_shape, m, oh, ow, params)
    });
    ConvGrads { dx, dw, db }
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

pub(crate) fn relu_backward(x: &Tensor, dout: &[f32]) -> Vec<f32> {
    x.data()
        .iter()
        .zip(dout)
        .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
        .collect()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Elementwise `max(p, q)`. Ties count as `p` winning when routing gradients.
pub fn max_merge(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    same_shape("max_merge", p, q)?;
    let data = p.data().iter().zip(q.data()).map(|(a, b)| a.max(*b)).collect();
    Tensor::new(p.shape(), data)
}

/// Gradients for `(p, q)`; every upstream value goes to exactly one branch.
pub(crate) fn max_merge_backward(p: &Tensor, q: &Tensor, dout: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let mut dp = vec![0.0; dout.len()];
    let mut dq = vec![0.0; dout.len()];
    for i in 0..dout.len() {
        if p.data()[i] >= q.data()[i] {
            dp[i] = dout[i];
        } else {
            dq[i] = dout[i];
        }
    }
    (dp, dq)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            left: sa,
            right: sb,
        });
    }
    let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..sa.n {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    Tensor::new(out_shape, data)
}

pub(crate) fn concat_channels_backward(sa: Shape, sb: Shape, dout: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let (la, lb) = (sa.sample_len(), sb.sample_len());
    let mut da = Vec::with_capacity(sa.numel());
    let mut db = Vec::with_capacity(sb.numel());
    for n in 0..sa.n {
        let base = n * (la + lb);
        da.extend_from_slice(&dout[base..base + la]);
        db.extend_from_slice(&dout[base + la..base + la + lb]);
    }
    (da, db)
}

/// Per-output-index source taps `(i0, i1, frac)` for doubling an axis of
/// length `len` with half-pixel-centre sampling and edge clamping.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f32)> {
    (0..2 * len)
        .map(|d| {
            let src = ((d as f32 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

/// Bilinear 2x upsampling (half-pixel centres, clamped at the border).
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::InvalidShape {
            op: "upsample2x",
            reason: format!("empty spatial extent {s}"),
        });
    }
    let ty = upsample_taps(s.h);
    let tx = upsample_taps(s.w);
    let out_shape = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in x.data().chunks_exact(s.plane()) {
        for &(y0, y1, fy) in &ty {
            let (r0, r1) = (&plane[y0 * s.w..(y0 + 1) * s.w], &plane[y1 * s.w..(y1 + 1) * s.w]);
            for &(x0, x1, fx) in &tx {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn upsample2x_backward(in_shape: Shape, dout: &[f32]) -> Vec<f32> {
    let ty = upsample_taps(in_shape.h);
    let tx = upsample_taps(in_shape.w);
    let ow = 2 * in_shape.w;
    let mut dx = vec![0.0f32; in_shape.numel()];
    for (plane_idx, dplane) in dout.chunks_exact(4 * in_shape.plane()).enumerate() {
        let dst = &mut dx[plane_idx * in_shape.plane()..(plane_idx + 1) * in_shape.plane()];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = dplane[oy * ow + ox];
                let (gt, gb) = (g * (1.0 - fy), g * fy);
                dst[y0 * in_shape.w + x0] += gt * (1.0 - fx);
                dst[y0 * in_shape.w + x1] += gt * fx;
                dst[y1 * in_shape.w + x0] += gb * (1.0 - fx);
                dst[y1 * in_shape.w + x1] += gb * fx;
            }
        }
    }
    dx
}

/// Result of pooling a batch of regions from one feature map.
#[derive(Clone, Debug)]
pub struct RoiPoolOutput {
    /// `(num_rois, c, out_h, out_w)`.
    pub output: Tensor,
    /// Flat input index chosen by each output cell; `u32::MAX` for empty bins.
    pub argmax: Vec<u32>,
    /// Regions that fell entirely outside the map (their output is all zero).
    pub degenerate: Vec<bool>,
}

/// Bin edges along one axis: `(start, end)` half-open, already clipped.
fn roi_bins(lo: f32, hi: f32, stride: f32, bins: usize, limit: usize) -> (Vec<(usize, usize)>, bool) {
    let start = (lo / stride).round() as i64;
    let end = (hi / stride).round() as i64;
    let len = (end - start).max(1);
    let clipped_lo = start.max(0);
    let clipped_hi = (start + len).min(limit as i64);
    let degenerate = clipped_hi <= clipped_lo;
    let edges = (0..bins as i64)
        .map(|b| {
            let s = start + (b * len).div_euclid(bins as i64);
            let e = start + ((b + 1) * len + bins as i64 - 1).div_euclid(bins as i64);
            let s = s.clamp(0, limit as i64) as usize;
            let e = e.clamp(0, limit as i64) as usize;
            (s, e)
        })
        .collect();
    (edges, degenerate)
}

/// Max-pools each region into an `out_h x out_w` grid of bins.
///
/// Region corners are mapped into feature coordinates by dividing by
/// `spatial_stride` and rounding; each bin takes the maximum of the cells it
/// covers (zero when it covers none).
pub fn roi_pool(
    feat: &Tensor,
    rois: &[BBox],
    out_h: usize,
    out_w: usize,
    spatial_stride: f32,
) -> Result<RoiPoolOutput> {
    let s = feat.shape();
    if s.n != 1 {
        return Err(Error::InvalidShape {
            op: "roi_pool",
            reason: format!("expected a single feature map, got {s}"),
        });
    }
    if out_h == 0 || out_w == 0 || !(spatial_stride > 0.0) {
        return Err(Error::InvalidShape {
            op: "roi_pool",
            reason: format!("output {out_h}x{out_w}, stride {spatial_stride}"),
        });
    }
    let out_shape = Shape::new(rois.len(), s.c, out_h, out_w);
    let mut out = vec![0.0f32; out_shape.numel()];
    let mut argmax = vec![u32::MAX; out_shape.numel()];
    let mut degenerate = Vec::with_capacity(rois.len());
    let fd = feat.data();
    for (r, roi) in rois.iter().enumerate() {
        let (x1, y1, x2, y2) = roi.corners();
        let (ybins, dy) = roi_bins(y1, y2, spatial_stride, out_h, s.h);
        let (xbins, dx) = roi_bins(x1, x2, spatial_stride, out_w, s.w);
        degenerate.push(dy || dx);
        if dy || dx {
            continue;
        }
        for c in 0..s.c {
            let base = c * s.plane();
            for (ph, &(hs, he)) in ybins.iter().enumerate() {
                for (pw, &(ws, we)) in xbins.iter().enumerate() {
                    let o = ((r * s.c + c) * out_h + ph) * out_w + pw;
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = u32::MAX;
                    for y in hs..he {
                        for x in ws..we {
                            let idx = base + y * s.w + x;
                            if fd[idx] > best {
                                best = fd[idx];
                                best_idx = idx as u32;
                            }
                        }
                    }
                    if best_idx != u32::MAX {
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
    }
    Ok(RoiPoolOutput {
        output: Tensor::new(out_shape, out)?,
        argmax,
        degenerate,
    })
}

/// Scatters output gradients back to the argmax cells.
pub(crate) fn scatter_argmax(in_len: usize, argmax: &[u32], dout: &[f32]) -> Vec<f32> {
    let mut dx = vec![0.0f32; in_len];
    for (&idx, &g) in argmax.iter().zip(dout) {
        if idx != u32::MAX {
            dx[idx as usize] += g;
        }
    }
    dx
}

/// 2x2 max pooling with stride 2; odd extents round up (partial windows).
pub fn max_pool2x2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let s = x.shape();
    let (oh, ow) = (s.h.div_ceil(2), s.w.div_ceil(2));
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let xd = x.data();
    for p in 0..s.n * s.c {
        let base = p * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * s.w + 2 * ox;
                let mut best = xd[best_idx];
                for y in 2 * oy..(2 * oy + 2).min(s.h) {
                    for xx in 2 * ox..(2 * ox + 2).min(s.w) {
                        let idx = base + y * s.w + xx;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx as u32);
            }
        }
    }
    (Tensor::new(out_shape, out).expect("shape"), argmax)
}

fn linear_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (xs, ws) = (x.shape(), w.shape());
    let d = xs.sample_len();
    if ws.sample_len() != d {
        return Err(Error::ShapeMismatch {
            op: "linear",
            left: xs,
            right: ws,
        });
    }
    if b.numel() != ws.n {
        return Err(Error::InvalidShape {
            op: "linear",
            reason: format!("bias has {} values for {} outputs", b.numel(), ws.n),
        });
    }
    Ok((xs.n, d, ws.n))
}

/// Fully connected layer: each batch entry is flattened to a vector of
/// `c*h*w` values and mapped through `w` (out, c*h*w) plus bias.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d, o) = linear_dims(x, w, b)?;
    let mut out = vec![0.0f32; n * o];
    for row in out.chunks_exact_mut(o) {
        row.copy_from_slice(b.data());
    }
    gemm(Mat::new(x.data(), n, d), Mat::new(w.data(), o, d).t(), 1.0, &mut out);
    Tensor::new([n, o, 1, 1], out)
}

pub(crate) struct LinearGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
}

pub(crate) fn linear_backward(x: &Tensor, w: &Tensor, dout: &[f32], need_dx: bool) -> LinearGrads {
    let (n, d, o) = (x.shape().n, x.shape().sample_len(), w.shape().n);
    let mut dw = vec![0.0f32; o * d];
    gemm(Mat::new(dout, n, o).t(), Mat::new(x.data(), n, d), 0.0, &mut dw);
    let mut db = vec![0.0f32; o];
    for row in dout.chunks_exact(o) {
        for (acc, g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0f32; n * d];
        gemm(Mat::new(dout, n, o), Mat::new(w.data(), o, d), 0.0, &mut dx);
        dx
    });
    LinearGrads { dx, dw, db }
}

/// Softmax over the `c*h*w` values of each batch entry.
pub fn softmax(logits: &Tensor) -> Tensor {
    let len = logits.shape().sample_len();
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks_exact(len.max(1)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let start = out.len();
        let mut total = 0.0f32;
        for v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    Tensor::new(logits.shape(), out).expect("same shape")
}

pub(crate) fn softmax_backward(probs: &Tensor, dout: &[f32]) -> Vec<f32> {
    let len = probs.shape().sample_len();
    let mut dx = Vec::with_capacity(probs.numel());
    for (p, g) in probs.data().chunks_exact(len).zip(dout.chunks_exact(len)) {
        let dot: f32 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        dx.extend(p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)));
    }
    dx
}

pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
