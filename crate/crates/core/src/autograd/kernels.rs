//! Forward and backward kernels on plain tensors. The tape in [`super::tape`]
//! records which of these ran; nothing here knows about gradients flowing
//! between nodes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
            groups,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Avg,
    Max,
}

impl core::str::FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(PoolKind::Avg),
            "max" => Ok(PoolKind::Max),
            other => Err(Error::Config(format!("unsupported pool kind `{other}`"))),
        }
    }
}

fn out_len(input: usize, k: usize, p: ConvParams) -> Option<usize> {
    let span = p.dilation * (k - 1) + 1;
    let padded = input + 2 * p.padding;
    if padded < span || p.stride == 0 {
        None
    } else {
        Some((padded - span) / p.stride + 1)
    }
}

/// Output positions `o` with `0 <= o*stride + offset - pad < input`.
#[inline]
#[cfg(test)]
fn valid_range(offset: usize, pad: usize, stride: usize, input: usize, out: usize) -> (usize, usize) {
    let off = offset as isize - pad as isize;
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi_excl = {
        // largest o with o*s + off <= input-1
        let top = input as isize - 1 - off;
        if top < 0 {
            0
        } else {
            top / s + 1
        }
    };
    let lo = lo.min(out as isize) as usize;
    let hi = hi_excl.clamp(0, out as isize) as usize;
    (lo, hi.max(lo))
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, p: ConvParams) -> Result<ConvGeom> {
    let (n, c, h, w) = x.dims4("conv2d")?;
    let (oc, cin_g, kh, kw) = weight.dims4("conv2d")?;
    if p.groups == 0 || c % p.groups != 0 || oc % p.groups != 0 {
        return Err(dim_err(
            "conv2d",
            format!("groups {} must divide in channels {} and out channels {}", p.groups, c, oc),
        ));
    }
    if cin_g != c / p.groups {
        return Err(dim_err(
            "conv2d",
            format!(
                "axis 1: weight expects {} channels per group, input has {} channels over {} groups",
                cin_g, c, p.groups
            ),
        ));
    }
    let oh = out_len(h, kh, p).ok_or_else(|| {
        dim_err("conv2d", format!("axis 2: height {h} too small for kernel {kh} with padding {} dilation {}", p.padding, p.dilation))
    })?;
    let ow = out_len(w, kw, p).ok_or_else(|| {
        dim_err("conv2d", format!("axis 3: width {w} too small for kernel {kw} with padding {} dilation {}", p.padding, p.dilation))
    })?;
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        oc,
        cin_g,
        cout_g: oc / p.groups,
        kh,
        kw,
        oh,
        ow,
    })
}

fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut acc = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for l in lanes {
        acc += l;
    }
    acc
}

/// Layout shared by the convolution kernels. Each input plane is
/// zero-padded and split into `stride * stride` phase planes of size
/// `qh x qw`; output rows are accumulated at width `qw`. With that, every
/// kernel tap is one contiguous multiply-add of length `len` against one
/// phase plane. Output columns past `ow` are scratch.
struct Phases {
    s: usize,
    pad: usize,
    qh: usize,
    qw: usize,
    len: usize,
}

impl Phases {
    fn new(g: &ConvGeom, p: ConvParams) -> Self {
        let s = p.stride;
        let (ph, pw) = (g.h + 2 * p.padding, g.w + 2 * p.padding);
        let (qh, qw) = (ph.div_ceil(s), pw.div_ceil(s));
        Phases {
            s,
            pad: p.padding,
            qh,
            qw,
            len: (g.oh - 1) * qw + g.ow,
        }
    }

    fn plane(&self) -> usize {
        self.qh * self.qw
    }

    /// Offset into the phase buffer of the slice that tap `(ty, tx)`
    /// (in padded input coordinates) reads.
    fn tap(&self, ty: usize, tx: usize) -> usize {
        ((ty % self.s) * self.s + tx % self.s) * self.plane() + (ty / self.s) * self.qw + tx / self.s
    }

    /// True when the phase buffer would be a plain copy of the input plane.
    fn is_identity(&self) -> bool {
        self.s == 1 && self.pad == 0
    }

    /// Walks the input plane in runs `(input start, buffer start, count,
    /// input step)`; each run is contiguous in the phase buffer.
    fn runs(&self, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let s = self.s;
        for y in 0..h {
            let yy = y + self.pad;
            let row = ((yy % s) * s) * self.plane() + (yy / s) * self.qw;
            // columns grouped by phase so each group is contiguous in the buffer
            for px in 0..s {
                let first = (px + s - self.pad % s) % s;
                if first >= w {
                    continue;
                }
                let count = (w - first).div_ceil(s);
                let xx = first + self.pad;
                f(y * w + first, row + px * self.plane() + xx / s, count, s);
            }
        }
    }

    fn split<T: Real>(&self, dst: &mut [T], src: &[T], h: usize, w: usize) {
        self.runs(h, w, |from, to, count, step| {
            if step == 1 {
                dst[to..to + count].copy_from_slice(&src[from..from + count]);
            } else {
                for i in 0..count {
                    dst[to + i] = src[from + i * step];
                }
            }
        });
    }

    fn merge<T: Real>(&self, dst: &mut [T], src: &[T], h: usize, w: usize) {
        self.runs(h, w, |from, to, count, step| {
            if step == 1 {
                dst[from..from + count].copy_from_slice(&src[to..to + count]);
            } else {
                for i in 0..count {
                    dst[from + i * step] = src[to + i];
                }
            }
        });
    }
}

fn conv2d_fast<T: Real>(xs: &[T], ws: &[T], g: &ConvGeom, p: ConvParams) -> Vec<T> {
    let ph = Phases::new(g, p);
    let (d, len, qw) = (p.dilation, ph.len, ph.qw);
    let taps = g.kh * g.kw;
    let mut out = vec![T::zero(); g.n * g.oc * g.oh * g.ow];
    let mut phases = vec![T::zero(); ph.s * ph.s * ph.plane()];
    let mut acc = vec![T::zero(); g.cout_g * len];
    for n in 0..g.n {
        for grp in 0..g.oc / g.cout_g {
            acc.fill(T::zero());
            for icl in 0..g.cin_g {
                let ic = grp * g.cin_g + icl;
                let plane = &xs[(n * g.c + ic) * g.h * g.w..][..g.h * g.w];
                let src = if ph.is_identity() {
                    plane
                } else {
                    ph.split(&mut phases, plane, g.h, g.w);
                    &phases
                };
                for ocl in 0..g.cout_g {
                    let oc = grp * g.cout_g + ocl;
                    let wrow = &ws[(oc * g.cin_g + icl) * taps..][..taps];
                    let dst = &mut acc[ocl * len..][..len];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let off = ph.tap(ky * d, kx * d);
                            axpy(dst, wrow[ky * g.kw + kx], &src[off..off + len]);
                        }
                    }
                }
            }
            for ocl in 0..g.cout_g {
                let oc = grp * g.cout_g + ocl;
                let plane = &mut out[(n * g.oc + oc) * g.oh * g.ow..][..g.oh * g.ow];
                for oy in 0..g.oh {
                    plane[oy * g.ow..][..g.ow].copy_from_slice(&acc[ocl * len + oy * qw..][..g.ow]);
                }
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv2d_backward_fast<T: Real>(
    xs: &[T],
    ws: &[T],
    gys: &[T],
    g: &ConvGeom,
    p: ConvParams,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let ph = Phases::new(g, p);
    let (d, len, qw) = (p.dilation, ph.len, ph.qw);
    let taps = g.kh * g.kw;
    let mut gx = if need_x { vec![T::zero(); xs.len()] } else { Vec::new() };
    let mut gw = if need_w { vec![T::zero(); ws.len()] } else { Vec::new() };
    // output gradient rows spread to width `qw`, scratch columns zero
    let mut gy_wide = vec![T::zero(); g.cout_g * len];
    let mut phases = vec![T::zero(); ph.s * ph.s * ph.plane()];
    let mut gphases = vec![T::zero(); phases.len()];
    for n in 0..g.n {
        for grp in 0..g.oc / g.cout_g {
            for ocl in 0..g.cout_g {
                let oc = grp * g.cout_g + ocl;
                let src = &gys[(n * g.oc + oc) * g.oh * g.ow..][..g.oh * g.ow];
                let dst = &mut gy_wide[ocl * len..][..len];
                for oy in 0..g.oh {
                    dst[oy * qw..][..g.ow].copy_from_slice(&src[oy * g.ow..][..g.ow]);
                }
            }
            for icl in 0..g.cin_g {
                let ic = grp * g.cin_g + icl;
                let plane_off = (n * g.c + ic) * g.h * g.w;
                let plane = &xs[plane_off..][..g.h * g.w];
                let src: &[T] = if !need_w || ph.is_identity() {
                    plane
                } else {
                    ph.split(&mut phases, plane, g.h, g.w);
                    &phases
                };
                let gdst: &mut [T] = if !need_x {
                    &mut []
                } else if ph.is_identity() {
                    &mut gx[plane_off..][..g.h * g.w]
                } else {
                    gphases.fill(T::zero());
                    &mut gphases
                };
                for ocl in 0..g.cout_g {
                    let oc = grp * g.cout_g + ocl;
                    let wbase = (oc * g.cin_g + icl) * taps;
                    let gyr = &gy_wide[ocl * len..][..len];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let off = ph.tap(ky * d, kx * d);
                            let t = wbase + ky * g.kw + kx;
                            if need_w {
                                gw[t] += dot(gyr, &src[off..off + len]);
                            }
                            if need_x {
                                axpy(&mut gdst[off..off + len], ws[t], gyr);
                            }
                        }
                    }
                }
                if need_x && !ph.is_identity() {
                    ph.merge(&mut gx[plane_off..][..g.h * g.w], &gphases, g.h, g.w);
                }
            }
        }
    }
    (need_x.then_some(gx), need_w.then_some(gw))
}

/// Cross-correlation, `weight` is `[out, in/groups, kh, kw]`, no bias.
pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, p: ConvParams) -> Result<Tensor<T>> {
    let g = conv_geom(x, weight, p)?;
    let out = conv2d_fast(x.data(), weight.data(), &g, p);
    Tensor::new(vec![g.n, g.oc, g.oh, g.ow], out)
}

/// Returns `(d input, d weight)`; each is computed only when requested.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gy: &Tensor<T>,
    p: ConvParams,
    need_x: bool,
    need_w: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = conv_geom(x, weight, p)?;
    if gy.shape() != [g.n, g.oc, g.oh, g.ow] {
        return Err(dim_err("conv2d", format!("output gradient has shape {:?}", gy.shape())));
    }
    let (gx, gw) = conv2d_backward_fast(x.data(), weight.data(), gy.data(), &g, p, need_x, need_w);
    let gx = gx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?;
    let gw = gw.map(|d| Tensor::new(weight.shape().to_vec(), d)).transpose()?;
    Ok((gx, gw))
}

/// 3x3 pooling with padding 1. Average pooling divides by the number of
/// in-bounds cells. Max pooling ignores padding; on ties the first cell in
/// scan order wins. Returns the output plus, for max pooling, the flat input
/// index each output was taken from.
pub fn pool2d<T: Real>(
    x: &Tensor<T>,
    kind: PoolKind,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if window != 3 {
        return Err(Error::Config(format!("pool window must be 3, got {window}")));
    }
    let (n, c, h, w) = x.dims4("pool2d")?;
    let p = ConvParams::new(stride, 1, 1, 1);
    let oh = out_len(h, 3, p).ok_or_else(|| dim_err("pool2d", "axis 2 too small"))?;
    let ow = out_len(w, 3, p).ok_or_else(|| dim_err("pool2d", "axis 3 too small"))?;
    let xs = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut arg = if kind == PoolKind::Max { vec![0usize; out.len()] } else { Vec::new() };
    // output columns whose window includes input column offset dx - 1
    let cols = |dx: usize| -> (usize, usize) {
        let lo = if dx == 0 { 1 } else { 0 };
        let hi = (w + 1 - dx).div_ceil(stride);
        (lo.min(ow), hi.min(ow))
    };
    let col_ranges = [cols(0), cols(1), cols(2)];
    let mut count = vec![T::zero(); ow];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let ylo = (oy * stride).saturating_sub(1);
            let yhi = (oy * stride + 2).min(h);
            let o0 = plane * oh * ow + oy * ow;
            let row_out = &mut out[o0..o0 + ow];
            match kind {
                PoolKind::Avg => {
                    count.fill(T::zero());
                    for iy in ylo..yhi {
                        let row_in = &xs[base + iy * w..][..w];
                        for (dx, &(lo, hi)) in col_ranges.iter().enumerate() {
                            for ox in lo..hi {
                                row_out[ox] += row_in[ox * stride + dx - 1];
                                count[ox] += T::one();
                            }
                        }
                    }
                    for (o, &k) in row_out.iter_mut().zip(&count) {
                        *o /= k;
                    }
                }
                PoolKind::Max => {
                    let row_arg = &mut arg[o0..o0 + ow];
                    row_out.fill(T::neg_infinity());
                    for (ox, a) in row_arg.iter_mut().enumerate() {
                        *a = base + ylo * w + (ox * stride).saturating_sub(1);
                    }
                    for iy in ylo..yhi {
                        let row_in = &xs[base + iy * w..][..w];
                        for (dx, &(lo, hi)) in col_ranges.iter().enumerate() {
                            for ox in lo..hi {
                                let ix = ox * stride + dx - 1;
                                let v = row_in[ix];
                                let gt = v > row_out[ox];
                                row_out[ox] = if gt { v } else { row_out[ox] };
                                row_arg[ox] = if gt { base + iy * w + ix } else { row_arg[ox] };
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn pool2d_backward<T: Real>(
    x_shape: &[usize],
    kind: PoolKind,
    stride: usize,
    argmax: &[usize],
    gy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (_, _, oh, ow) = gy.dims4("pool2d")?;
    let mut gx = vec![T::zero(); n * c * h * w];
    let gys = gy.data();
    match kind {
        PoolKind::Max => {
            for (g, &i) in gys.iter().zip(argmax) {
                gx[i] += *g;
            }
        }
        PoolKind::Avg => {
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    let y0 = (oy * stride) as isize - 1;
                    let ylo = y0.max(0) as usize;
                    let yhi = ((y0 + 3) as usize).min(h);
                    for ox in 0..ow {
                        let x0 = (ox * stride) as isize - 1;
                        let xlo = x0.max(0) as usize;
                        let xhi = ((x0 + 3) as usize).min(w);
                        let count = (yhi - ylo) * (xhi - xlo);
                        let g = gys[plane * oh * ow + oy * ow + ox] / T::of(count as f64);
                        for iy in ylo..yhi {
                            for ix in xlo..xhi {
                                gx[base + iy * w + ix] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gx)
}

/// Per-channel normalisation over (N, H, W) using batch statistics only.
/// Returns `(y, inv_std)`; `y` doubles as the normalised input for backward.
pub fn batch_norm<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, c, h, w) = x.dims4("batch_norm")?;
    let hw = h * w;
    let m = T::of((n * hw) as f64);
    let eps = T::of(NORM_EPS);
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let mut mean = T::zero();
        for b in 0..n {
            mean += xs[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
        }
        mean /= m;
        let mut var = T::zero();
        for b in 0..n {
            for &v in &xs[(b * c + ch) * hw..][..hw] {
                let d = v - mean;
                var += d * d;
            }
        }
        var /= m;
        let is = T::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for (o, &v) in out[off..off + hw].iter_mut().zip(&xs[off..off + hw]) {
                *o = (v - mean) * is;
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, inv_std))
}

pub fn batch_norm_backward<T: Real>(xhat: &Tensor<T>, inv_std: &[T], gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = xhat.dims4("batch_norm")?;
    let hw = h * w;
    let m = T::of((n * hw) as f64);
    let xs = xhat.data();
    let gs = gy.data();
    let mut gx = vec![T::zero(); xs.len()];
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                sum_g += gs[i];
                sum_gx += gs[i] * xs[i];
            }
        }
        let k = inv_std[ch] / m;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                gx[i] = k * (m * gs[i] - sum_g - xs[i] * sum_gx);
            }
        }
    }
    Tensor::new(xhat.shape().to_vec(), gx)
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err("softmax", format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Max-subtracted softmax. `-inf` entries map to exactly zero.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..len {
                m = m.max(xs[at(j)]);
            }
            if m == T::neg_infinity() {
                return Err(Error::DegenerateDistribution { axis });
            }
            let mut z = T::zero();
            for j in 0..len {
                let e = (xs[at(j)] - m).exp();
                out[at(j)] = e;
                z += e;
            }
            for j in 0..len {
                out[at(j)] /= z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_backward<T: Real>(y: &Tensor<T>, gy: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let ys = y.data();
    let gs = gy.data();
    let mut gx = vec![T::zero(); ys.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot += ys[at(j)] * gs[at(j)];
            }
            for j in 0..len {
                gx[at(j)] = ys[at(j)] * (gs[at(j)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), gx)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
/// Returns the loss and the softmax probabilities.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, c) = logits.dims2("cross_entropy")?;
    if labels.len() != n {
        return Err(dim_err("cross_entropy", format!("axis 0: {} labels for {} rows", labels.len(), n)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
    }
    let probs = softmax(logits, 1)?;
    let xs = logits.data();
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = &xs[r * c..(r + 1) * c];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        total += lse - row[label];
    }
    Ok((total / T::of(n as f64), probs))
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let hw = h * w;
    let k = T::of(hw as f64);
    let out = x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() / k).collect();
    Tensor::new(vec![n, c], out)
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(dim_err("matmul", format!("inner axes differ: {k} vs {k2}")));
    }
    let (av, bv) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = av[i * k + p];
            for (o, &bb) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                *o += s * bb;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2("transpose")?;
    let av = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = av[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| dim_err("concat", "no inputs"))?;
    let (n, _, h, w) = first.dims4("concat")?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4("concat")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(dim_err(
                "concat",
                format!("axes 0/2/3 differ: {:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
        total_c += pc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total_c * hw);
    for b in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[b * pc * hw..(b + 1) * pc * hw]);
        }
    }
    Tensor::new(vec![n, total_c, h, w], out)
}

/// `x[:, :, off_h:, off_w:]`
pub fn slice_spatial<T: Real>(x: &Tensor<T>, off_h: usize, off_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("slice_spatial")?;
    if off_h >= h || off_w >= w {
        return Err(dim_err("slice_spatial", format!("offset ({off_h},{off_w}) exceeds ({h},{w})")));
    }
    let (nh, nw) = (h - off_h, w - off_w);
    let xs = x.data();
    let mut out = Vec::with_capacity(n * c * nh * nw);
    for plane in 0..n * c {
        for y in off_h..h {
            out.extend_from_slice(&xs[plane * h * w + y * w + off_w..plane * h * w + (y + 1) * w]);
        }
    }
    Tensor::new(vec![n, c, nh, nw], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_conv2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, g: &ConvGeom, p: ConvParams) -> Result<Tensor<T>> {
        let mut out = vec![T::zero(); g.n * g.oc * g.oh * g.ow];
        let xs = x.data();
        let ws = weight.data();
        let (s, d, pad) = (p.stride, p.dilation, p.padding);
        for n in 0..g.n {
            for oc in 0..g.oc {
                let grp = oc / g.cout_g;
                let out_plane = &mut out[(n * g.oc + oc) * g.oh * g.ow..][..g.oh * g.ow];
                for icl in 0..g.cin_g {
                    let ic = grp * g.cin_g + icl;
                    let in_plane = &xs[(n * g.c + ic) * g.h * g.w..][..g.h * g.w];
                    let wbase = (oc * g.cin_g + icl) * g.kh * g.kw;
                    for ky in 0..g.kh {
                        let (oy0, oy1) = valid_range(ky * d, pad, s, g.h, g.oh);
                        for kx in 0..g.kw {
                            let (ox0, ox1) = valid_range(kx * d, pad, s, g.w, g.ow);
                            if ox0 >= ox1 {
                                continue;
                            }
                            let wv = ws[wbase + ky * g.kw + kx];
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky * d - pad;
                                let row_in = &in_plane[iy * g.w..][..g.w];
                                let row_out = &mut out_plane[oy * g.ow..][..g.ow];
                                if s == 1 {
                                    let ix0 = ox0 + kx * d - pad;
                                    for (o, &i) in row_out[ox0..ox1]
                                        .iter_mut()
                                        .zip(&row_in[ix0..ix0 + (ox1 - ox0)])
                                    {
                                        *o += wv * i;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        row_out[ox] += wv * row_in[ox * s + kx * d - pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![g.n, g.oc, g.oh, g.ow], out)
    }

    #[allow(clippy::type_complexity)]
    fn reference_conv2d_backward<T: Real>(
        x: &Tensor<T>,
        weight: &Tensor<T>,
        gy: &Tensor<T>,
        g: &ConvGeom,
        p: ConvParams,
        need_x: bool,
        need_w: bool,
    ) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
        let mut gx = if need_x { vec![T::zero(); x.numel()] } else { Vec::new() };
        let mut gw = if need_w { vec![T::zero(); weight.numel()] } else { Vec::new() };
        let xs = x.data();
        let ws = weight.data();
        let gys = gy.data();
        let (s, d, pad) = (p.stride, p.dilation, p.padding);
        for n in 0..g.n {
            for oc in 0..g.oc {
                let grp = oc / g.cout_g;
                let gy_plane = &gys[(n * g.oc + oc) * g.oh * g.ow..][..g.oh * g.ow];
                for icl in 0..g.cin_g {
                    let ic = grp * g.cin_g + icl;
                    let plane_off = (n * g.c + ic) * g.h * g.w;
                    let wbase = (oc * g.cin_g + icl) * g.kh * g.kw;
                    for ky in 0..g.kh {
                        let (oy0, oy1) = valid_range(ky * d, pad, s, g.h, g.oh);
                        for kx in 0..g.kw {
                            let (ox0, ox1) = valid_range(kx * d, pad, s, g.w, g.ow);
                            if ox0 >= ox1 {
                                continue;
                            }
                            let widx = wbase + ky * g.kw + kx;
                            let wv = ws[widx];
                            let mut acc = T::zero();
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky * d - pad;
                                let row_gy = &gy_plane[oy * g.ow..][..g.ow];
                                let in_row = plane_off + iy * g.w;
                                if need_w {
                                    let row_in = &xs[in_row..][..g.w];
                                    for ox in ox0..ox1 {
                                        acc += row_gy[ox] * row_in[ox * s + kx * d - pad];
                                    }
                                }
                                if need_x {
                                    let row_gx = &mut gx[in_row..][..g.w];
                                    for ox in ox0..ox1 {
                                        row_gx[ox * s + kx * d - pad] += wv * row_gy[ox];
                                    }
                                }
                            }
                            if need_w {
                                gw[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
        let gx = if need_x { Some(Tensor::new(x.shape().to_vec(), gx)?) } else { None };
        let gw = if need_w { Some(Tensor::new(weight.shape().to_vec(), gw)?) } else { None };
        Ok((gx, gw))
    }

    #[test]
    fn pool_matches_window_scan() {
        for (h, w, stride) in [(5, 5, 1), (6, 7, 2), (1, 3, 1), (4, 1, 2), (2, 2, 2)] {
            // small integers so ties are common
            let x = Tensor::<f64>::from_fn(&[2, 2, h, w], |i| ((i * 7) % 4) as f64);
            for kind in [PoolKind::Avg, PoolKind::Max] {
                let (y, arg) = pool2d(&x, kind, 3, stride).unwrap();
                let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
                for plane in 0..4 {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut cells = Vec::new();
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let (iy, ix) = ((oy * stride + dy) as isize - 1, (ox * stride + dx) as isize - 1);
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        cells.push(plane * h * w + iy as usize * w + ix as usize);
                                    }
                                }
                            }
                            let oi = plane * oh * ow + oy * ow + ox;
                            match kind {
                                PoolKind::Avg => {
                                    let m = cells.iter().map(|&i| x.data()[i]).sum::<f64>() / cells.len() as f64;
                                    assert!((y.data()[oi] - m).abs() < 1e-12);
                                }
                                PoolKind::Max => {
                                    let mut best = cells[0];
                                    for &c in &cells {
                                        if x.data()[c] > x.data()[best] {
                                            best = c;
                                        }
                                    }
                                    assert_eq!(arg[oi], best);
                                    assert_eq!(y.data()[oi], x.data()[best]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn phase_layout_matches_direct_loops() {
        let cases = [
            (1, 0, 1, 1, 1, 3, 4),
            (3, 1, 1, 1, 4, 4, 4),
            (5, 4, 2, 1, 4, 4, 4),
            (3, 1, 1, 1, 2, 4, 6),
            (3, 0, 1, 1, 1, 2, 3),
            (3, 1, 2, 1, 4, 4, 4),
            (5, 4, 2, 2, 4, 4, 4),
            (1, 0, 2, 1, 1, 3, 2),
            (3, 2, 3, 1, 1, 2, 2),
        ];
        for (k, pad, stride, dil, groups, c, oc) in cases {
            let x = Tensor::<f64>::from_fn(&[2, c, 7, 6], |i| ((i * 37) % 11) as f64 - 5.0);
            let w = Tensor::<f64>::from_fn(&[oc, c / groups, k, k], |i| ((i * 13) % 7) as f64 * 0.25 - 0.7);
            let p = ConvParams::new(stride, pad, dil, groups);
            let g = conv_geom(&x, &w, p).unwrap();
            let fast = conv2d(&x, &w, p).unwrap();
            let slow = reference_conv2d(&x, &w, &g, p).unwrap();
            assert_eq!(fast, slow);
            let gy = Tensor::from_fn(fast.shape(), |i| ((i * 29) % 5) as f64 - 2.0);
            let (fx, fw) = conv2d_backward(&x, &w, &gy, p, true, true).unwrap();
            let (sx, sw) = reference_conv2d_backward(&x, &w, &gy, &g, p, true, true).unwrap();
            assert_eq!(fx, sx);
            assert_eq!(fw, sw);
        }
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for input in 1..7 {
            for off in 0..5 {
                for pad in 0..4 {
                    for stride in 1..3 {
                        for out in 0..8 {
                            let (lo, hi) = valid_range(off, pad, stride, input, out);
                            let brute: Vec<usize> = (0..out)
                                .filter(|&o| {
                                    let i = (o * stride + off) as isize - pad as isize;
                                    i >= 0 && i < input as isize
                                })
                                .collect();
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, brute, "input {input} off {off} pad {pad} stride {stride} out {out}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_bad_groups() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(&[2, 1, 1, 1]);
        assert!(matches!(
            conv2d(&x, &w, ConvParams::new(1, 0, 1, 2)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn conv_reports_offending_axis() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(&[2, 2, 1, 1]);
        let err = conv2d(&x, &w, ConvParams::new(1, 0, 1, 1)).unwrap_err();
        assert!(alloc::format!("{err}").contains("axis 1"));
    }

    #[test]
    fn pool_rejects_other_windows() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        assert!(matches!(pool2d(&x, PoolKind::Avg, 2, 1), Err(Error::Config(_))));
        assert!(matches!("min".parse::<PoolKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn avg_pool_divides_by_valid_cells() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let (y, _) = pool2d(&x, PoolKind::Avg, 3, 1).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_all_neg_inf_is_degenerate() {
        let x = Tensor::new(vec![2], vec![f64::NEG_INFINITY; 2]).unwrap();
        assert_eq!(softmax(&x, 0), Err(Error::DegenerateDistribution { axis: 0 }));
    }
}
