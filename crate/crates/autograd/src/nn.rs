//! Network primitives: convolution, pooling, batch normalization, softmax.

use crate::error::{shape_err, Result};
use crate::graph::{check_finite, GradSink, Graph, Op, Var};
use crate::linalg::{gemm, MatView};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Spatial padding for stride-1 convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Output keeps the input's spatial size; kernel extents must be odd.
    Same,
}

#[derive(Debug)]
pub(crate) struct ConvSaved {
    x: Var,
    w: Var,
    bias: Option<Var>,
    pad: (usize, usize),
}

/// Normalization statistics source for [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of a training-mode batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

#[derive(Debug)]
pub(crate) struct BatchNormSaved {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

}

/// Output columns `xo` whose source `xo + j − pw` lies inside `[0, w)`.
fn valid_cols(g: &ConvGeom, j: usize) -> (usize, usize) {
    let lo = g.pw.saturating_sub(j).min(g.wo);
    let hi = (g.w + g.pw).saturating_sub(j).min(g.wo).max(lo);
    (lo, hi)
}

/// Unfolds one sample `[C, H, W]` into `cols` `[C·kh·kw, ho·wo]`.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncols = g.ho * g.wo;
    for c in 0..g.c {
        let src = &x[c * g.h * g.w..][..g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(g, j);
                for y in 0..g.ho {
                    let dst = &mut dst_row[y * g.wo..][..g.wo];
                    let sy = y as isize + i as isize - g.ph as isize;
                    if sy < 0 || sy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &src[sy as usize * g.w..][..g.w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if hi > lo {
                        let s0 = lo + j - g.pw;
                        dst[lo..hi].copy_from_slice(&src_row[s0..s0 + hi - lo]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`] for one sample, accumulating into `dx`.
fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncols = g.ho * g.wo;
    for c in 0..g.c {
        let dst = &mut dx[c * g.h * g.w..][..g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(g, j);
                for y in 0..g.ho {
                    let sy = y as isize + i as isize - g.ph as isize;
                    if sy < 0 || sy >= g.h as isize || hi == lo {
                        continue;
                    }
                    let src = &src_row[y * g.wo + lo..y * g.wo + hi];
                    let s0 = lo + j - g.pw;
                    let dst_row = &mut dst[sy as usize * g.w + s0..][..hi - lo];
                    for (d, v) in dst_row.iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn conv_geom(gr: &Graph, x: Var, w: Var, pad: (usize, usize)) -> ConvGeom {
    let (xs, ws) = (gr.shape(x), gr.shape(w));
    let (h, wd, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
    ConvGeom {
        b: xs[0],
        c: xs[1],
        h,
        w: wd,
        o: ws[0],
        kh,
        kw,
        ph: pad.0,
        pw: pad.1,
        ho: h + 2 * pad.0 + 1 - kh,
        wo: wd + 2 * pad.1 + 1 - kw,
    }
}

impl Graph {
    /// Stride-1 2D convolution (cross-correlation).
    ///
    /// `x` is `[B, C, H, W]`, `w` is `[O, C, kh, kw]`, `bias` is `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err("conv2d", format!("input {:?}, kernel {:?}", xs, ws)));
        }
        let pad = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
                    return Err(shape_err("conv2d", "same padding needs odd kernel extents"));
                }
                ((ws[2] - 1) / 2, (ws[3] - 1) / 2)
            }
        };
        if xs[2] + 2 * pad.0 < ws[2] || xs[3] + 2 * pad.1 < ws[3] {
            return Err(shape_err("conv2d", format!("kernel {:?} larger than input {:?}", ws, xs)));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [ws[0]] {
                return Err(shape_err("conv2d", format!("bias {:?}", self.shape(bv))));
            }
        }
        let geom = conv_geom(self, x, w, pad);
        let plane = geom.ho * geom.wo;
        let in_len = geom.c * geom.h * geom.w;
        let mut cols = vec![0.0; geom.col_rows() * plane];
        let mut out = vec![0.0; geom.b * geom.o * plane];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let bias_v = bias.map(|b| self.value(b).data());
        for b in 0..geom.b {
            im2col(&xv[b * in_len..][..in_len], &geom, &mut cols);
            let dst = &mut out[b * geom.o * plane..][..geom.o * plane];
            if let Some(bv) = bias_v {
                for (o, row) in dst.chunks_exact_mut(plane).enumerate() {
                    row.fill(bv[o]);
                }
            }
            gemm(
                wv,
                MatView::row_major(geom.o, geom.col_rows()),
                &cols,
                MatView::row_major(geom.col_rows(), plane),
                dst,
                if bias_v.is_some() { 1.0 } else { 0.0 },
            );
        }
        check_finite("conv2d", &out)?;
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        let shape = vec![geom.b, geom.o, geom.ho, geom.wo];
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d(ConvSaved { x, w, bias, pad }),
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2; odd extents round up (the last
    /// window is partial).
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("max_pool2d", format!("{:?}", xs)));
        }
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bc * ho * wo);
        let mut argmax = Vec::with_capacity(bc * ho * wo);
        for p in 0..bc {
            let base = p * h * w;
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = base + 2 * y * w + 2 * xo;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (sy, sx) = (2 * y + dy, 2 * xo + dx);
                            if sy < h && sx < w {
                                let i = base + sy * w + sx;
                                if xv[i] > xv[best] {
                                    best = i;
                                }
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![xs[0], xs[1], ho, wo], out)?,
            Op::MaxPool2d { x, argmax },
            rg,
        ))
    }

    /// Per-channel batch normalization over every axis except axis 1.
    ///
    /// Accepts `[B, C]` (dense features) and `[B, C, H, W]` (feature maps).
    /// In training mode the returned statistics are those of the batch.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err("batch_norm", format!("{:?}", xs)));
        }
        let (b, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let count = b * inner;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batch_norm", "scale/shift must have one entry per channel"));
        }
        let xv = self.value(x).data();
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        s += xv[(bi * c + ch) * inner..][..inner].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut v = 0.0;
                    for bi in 0..b {
                        v += xv[(bi * c + ch) * inner..][..inner]
                            .iter()
                            .map(|x| (x - m) * (x - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = v / count as f64;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * inner;
                for i in off..off + inner {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        check_finite("batch_norm", &out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let stats = train.then_some(BatchStats {
            mean,
            var,
            count,
        });
        let v = self.push(
            Tensor::new(xs, out)?,
            Op::BatchNorm(BatchNormSaved {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            }),
            rg,
        );
        Ok((v, stats))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = row_apply(t, |row, dst| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - m).exp();
                s += *d;
            }
            dst.iter_mut().for_each(|d| *d /= s);
        })?;
        check_finite("softmax", out.data())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Log-softmax over the last axis, computed as `x - max - ln Σ exp(x - max)`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = row_apply(t, |row, dst| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v - m - lse;
            }
        })?;
        check_finite("log_softmax", out.data())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }
}

fn row_apply(t: &Tensor, f: impl Fn(&[f64], &mut [f64])) -> Result<Tensor> {
    let last = *t
        .shape()
        .last()
        .ok_or_else(|| shape_err("softmax", "scalar input"))?;
    let mut out = vec![0.0; t.len()];
    if last > 0 {
        for (row, dst) in t.data().chunks(last).zip(out.chunks_mut(last)) {
            f(row, dst);
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

pub(crate) fn softmax_backward(y: &[f64], g: &[f64], shape: &[usize]) -> Vec<f64> {
    let last = *shape.last().unwrap();
    let mut gx = vec![0.0; y.len()];
    for ((yr, gr), dst) in y.chunks(last).zip(g.chunks(last)).zip(gx.chunks_mut(last)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yi), &gi) in dst.iter_mut().zip(yr).zip(gr) {
            *d = yi * (gi - dot);
        }
    }
    gx
}

pub(crate) fn log_softmax_backward(y: &[f64], g: &[f64], shape: &[usize]) -> Vec<f64> {
    let last = *shape.last().unwrap();
    let mut gx = vec![0.0; y.len()];
    for ((yr, gr), dst) in y.chunks(last).zip(g.chunks(last)).zip(gx.chunks_mut(last)) {
        let gs: f64 = gr.iter().sum();
        for ((d, &yi), &gi) in dst.iter_mut().zip(yr).zip(gr) {
            *d = gi - yi.exp() * gs;
        }
    }
    gx
}

pub(crate) fn conv2d_backward(gr: &Graph, s: &ConvSaved, g: &[f64], sink: &mut GradSink) {
    let geom = conv_geom(gr, s.x, s.w, s.pad);
    let plane = geom.ho * geom.wo;
    let out_len = geom.o * plane;
    if let Some(bias) = s.bias {
        if sink.wants(bias) {
            let mut gb = vec![0.0; geom.o];
            for gs in g.chunks_exact(out_len) {
                for (o, row) in gs.chunks_exact(plane).enumerate() {
                    gb[o] += row.iter().sum::<f64>();
                }
            }
            sink.add(bias, gb);
        }
    }
    let want_w = sink.wants(s.w);
    let want_x = sink.wants(s.x);
    if !want_w && !want_x {
        return;
    }
    let in_len = geom.c * geom.h * geom.w;
    let krows = geom.col_rows();
    let gview = MatView::row_major(geom.o, plane);
    let (xv, wv) = (gr.value(s.x).data(), gr.value(s.w).data());
    let mut cols = vec![0.0; krows * plane];
    let mut gw = vec![0.0; geom.o * krows];
    let mut gx = if want_x { vec![0.0; xv.len()] } else { Vec::new() };
    for b in 0..geom.b {
        let gb = &g[b * out_len..][..out_len];
        if want_w {
            im2col(&xv[b * in_len..][..in_len], &geom, &mut cols);
            gemm(
                gb,
                gview,
                &cols,
                MatView::row_major(krows, plane).t(),
                &mut gw,
                1.0,
            );
        }
        if want_x {
            gemm(
                wv,
                MatView::row_major(geom.o, krows).t(),
                gb,
                gview,
                &mut cols,
                0.0,
            );
            col2im(&cols, &geom, &mut gx[b * in_len..][..in_len]);
        }
    }
    if want_w {
        sink.add(s.w, gw);
    }
    if want_x {
        sink.add(s.x, gx);
    }
}

pub(crate) fn batch_norm_backward(gr: &Graph, s: &BatchNormSaved, g: &[f64], sink: &mut GradSink) {
    let xs = gr.shape(s.x);
    let (b, c) = (xs[0], xs[1]);
    let inner: usize = xs[2..].iter().product();
    let n = (b * inner) as f64;
    let gamma = gr.value(s.gamma).data();
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * inner;
            for i in off..off + inner {
                sum_g[ch] += g[i];
                sum_gx[ch] += g[i] * s.xhat[i];
            }
        }
    }
    if sink.wants(s.gamma) {
        sink.add(s.gamma, sum_gx.clone());
    }
    if sink.wants(s.beta) {
        sink.add(s.beta, sum_g.clone());
    }
    if sink.wants(s.x) {
        let mut gx = vec![0.0; g.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * inner;
                let k = gamma[ch] * s.inv_std[ch];
                for i in off..off + inner {
                    gx[i] = if s.train {
                        k * (g[i] - sum_g[ch] / n - s.xhat[i] * sum_gx[ch] / n)
                    } else {
                        k * g[i]
                    };
                }
            }
        }
        sink.add(s.x, gx);
    }
}
