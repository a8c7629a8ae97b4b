//! Forward and backward kernels on raw NCHW buffers.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element};

/// Stride, zero padding and dilation of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dGeom {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1 }
    }
}

impl Conv2dGeom {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self { stride, padding, dilation }
    }

    /// Output extent along one axis, or `None` when the dilated kernel does
    /// not fit inside the padded input.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let effective = (kernel - 1) * self.dilation + 1;
        let padded = input + 2 * self.padding;
        (self.stride >= 1 && kernel >= 1 && effective <= padded).then(|| (padded - effective) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: Conv2dGeom,
}

impl ConvDims {
    pub fn new(x: &[usize], w: &[usize], geom: Conv2dGeom) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::Dimension(format!("conv2d expects 4-d input and weight, got {x:?} and {w:?}")));
        }
        if x[1] != w[1] {
            return Err(Error::Dimension(format!("conv2d input has {} channels but weight expects {}", x[1], w[1])));
        }
        if geom.stride == 0 || geom.dilation == 0 {
            return Err(Error::Geometry(format!("stride and dilation must be >= 1, got {geom:?}")));
        }
        let ho = geom.out_extent(x[2], w[2]);
        let wo = geom.out_extent(x[3], w[3]);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::Geometry(format!(
                "kernel {}x{} with {geom:?} does not fit input {}x{}",
                w[2], w[3], x[2], x[3]
            )));
        };
        Ok(Self { n: x[0], cin: x[1], h: x[2], w: x[3], cout: w[0], kh: w[2], kw: w[3], ho, wo, geom })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the input plane is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }
}

fn im2col<T: Element>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let (s, pad, dil) = (d.geom.stride as isize, d.geom.padding as isize, d.geom.dilation as isize);
    let p = d.p();
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..d.ho {
                    let ih = oh as isize * s - pad + ki as isize * dil;
                    let drow = &mut dst[oh * d.wo..(oh + 1) * d.wo];
                    if ih < 0 || ih >= d.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    let off = kj as isize * dil - pad;
                    for (ow, v) in drow.iter_mut().enumerate() {
                        let iw = ow as isize * s + off;
                        *v = if iw >= 0 && iw < d.w as isize { src[iw as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], d: &ConvDims, dx: &mut [T]) {
    let (s, pad, dil) = (d.geom.stride as isize, d.geom.padding as isize, d.geom.dilation as isize);
    let p = d.p();
    for c in 0..d.cin {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..d.ho {
                    let ih = oh as isize * s - pad + ki as isize * dil;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let drow = &mut plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    let off = kj as isize * dil - pad;
                    for (ow, &v) in src[oh * d.wo..(oh + 1) * d.wo].iter().enumerate() {
                        let iw = ow as isize * s + off;
                        if iw >= 0 && iw < d.w as isize {
                            drow[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(x: &[T], w: &[T], b: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let (k, p) = (d.k(), d.p());
    let mut out = vec![T::zero(); d.n * d.cout * p];
    let mut cols = if d.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..d.n {
        let xn = &x[n * d.cin * d.h * d.w..(n + 1) * d.cin * d.h * d.w];
        let on = &mut out[n * d.cout * p..(n + 1) * d.cout * p];
        if let Some(b) = b {
            for (co, row) in on.chunks_exact_mut(p).enumerate() {
                row.fill(b[co]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        if d.is_pointwise() {
            gemm(false, false, d.cout, k, p, w, xn, beta, on);
        } else {
            im2col(xn, d, &mut cols);
            gemm(false, false, d.cout, k, p, w, &cols, beta, on);
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(x: &[T], w: &[T], gout: &[T], d: &ConvDims, need: [bool; 3]) -> ConvGrads<T> {
    let (k, p) = (d.k(), d.p());
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.len()]);
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); d.cout];
        for gn in gout.chunks_exact(d.cout * p) {
            for (co, row) in gn.chunks_exact(p).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
        db
    });
    let pointwise = d.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = if pointwise || dx.is_none() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..d.n {
        let xn = &x[n * d.cin * d.h * d.w..(n + 1) * d.cin * d.h * d.w];
        let gn = &gout[n * d.cout * p..(n + 1) * d.cout * p];
        if let Some(dw) = dw.as_deref_mut() {
            // dW += gout_n [cout, p] * cols^T [p, k]
            if pointwise {
                gemm(false, true, d.cout, p, k, gn, xn, T::one(), dw);
            } else {
                im2col(xn, d, &mut cols);
                gemm(false, true, d.cout, p, k, gn, &cols, T::one(), dw);
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * d.cin * d.h * d.w..(n + 1) * d.cin * d.h * d.w];
            // dcols = W^T [k, cout] * gout_n [cout, p]
            if pointwise {
                gemm(true, false, k, d.cout, p, w, gn, T::zero(), dxn);
            } else {
                gemm(true, false, k, d.cout, p, w, gn, T::zero(), &mut dcols);
                col2im(&dcols, d, dxn);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Max pooling without padding. Returns the output and, per output cell,
/// the flat input index of the selected element.
pub(crate) fn max_pool2d_forward<T: Element>(
    x: &[T],
    [n, c, h, w]: [usize; 4],
    kernel: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + oh * stride * w + ow * stride;
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let idx = base + (oh * stride + ki) * w + ow * stride + kj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg, ho, wo)
}

/// Start (inclusive) and end (exclusive) of adaptive pooling bin `i`.
pub(crate) fn adaptive_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

pub(crate) fn adaptive_avg_pool_forward<T: Element>(x: &[T], [n, c, h, w]: [usize; 4], oh: usize, ow: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.chunks_exact(h * w).take(n * c) {
        for i in 0..oh {
            let (r0, r1) = adaptive_bin(i, h, oh);
            for j in 0..ow {
                let (c0, c1) = adaptive_bin(j, w, ow);
                let mut acc = T::zero();
                for r in r0..r1 {
                    for v in &plane[r * w + c0..r * w + c1] {
                        acc += *v;
                    }
                }
                out.push(acc / T::lit(((r1 - r0) * (c1 - c0)) as f64));
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_pool_backward<T: Element>(
    g: &[T],
    [n, c, h, w]: [usize; 4],
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, gp) in dx.chunks_exact_mut(h * w).zip(g.chunks_exact(oh * ow)) {
        for i in 0..oh {
            let (r0, r1) = adaptive_bin(i, h, oh);
            for j in 0..ow {
                let (c0, c1) = adaptive_bin(j, w, ow);
                let share = gp[i * ow + j] / T::lit(((r1 - r0) * (c1 - c0)) as f64);
                for r in r0..r1 {
                    for v in &mut plane[r * w + c0..r * w + c1] {
                        *v += share;
                    }
                }
            }
        }
    }
    dx
}

/// Half-pixel-center bilinear sampling table for one axis: for every
/// output index, the two source indices and their weights.
pub(crate) fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn bilinear_forward<T: Element>(x: &[T], [n, c, h, w]: [usize; 4], oh: usize, ow: usize) -> Vec<T> {
    let rows = bilinear_axis(h, oh);
    let cols: Vec<_> = bilinear_axis(w, ow).into_iter().map(|(a, b, wa, wb)| (a, b, T::lit(wa), T::lit(wb))).collect();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.chunks_exact(h * w).take(n * c) {
        for &(r0, r1, wr0, wr1) in &rows {
            let (wr0, wr1) = (T::lit(wr0), T::lit(wr1));
            let top = &plane[r0 * w..(r0 + 1) * w];
            let bottom = &plane[r1 * w..(r1 + 1) * w];
            for &(c0, c1, wc0, wc1) in &cols {
                let t = top[c0] * wc0 + top[c1] * wc1;
                let b = bottom[c0] * wc0 + bottom[c1] * wc1;
                out.push(t * wr0 + b * wr1);
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Element>(g: &[T], [n, c, h, w]: [usize; 4], oh: usize, ow: usize) -> Vec<T> {
    let rows = bilinear_axis(h, oh);
    let cols: Vec<_> = bilinear_axis(w, ow).into_iter().map(|(a, b, wa, wb)| (a, b, T::lit(wa), T::lit(wb))).collect();
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, gp) in dx.chunks_exact_mut(h * w).zip(g.chunks_exact(oh * ow)) {
        for (i, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
            let (wr0, wr1) = (T::lit(wr0), T::lit(wr1));
            for (j, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                let v = gp[i * ow + j];
                let (vt, vb) = (v * wr0, v * wr1);
                plane[r0 * w + c0] += vt * wc0;
                plane[r0 * w + c1] += vt * wc1;
                plane[r1 * w + c0] += vb * wc0;
                plane[r1 * w + c1] += vb * wc1;
            }
        }
    }
    dx
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<T: Element>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |k: usize| base + k * inner + i;
            let mut max = T::neg_infinity();
            for k in 0..len {
                max = max.max(x[at(k)]);
            }
            let mut sum = T::zero();
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                sum += e;
            }
            if log {
                let lse = sum.ln();
                for k in 0..len {
                    out[at(k)] = x[at(k)] - max - lse;
                }
            } else {
                for k in 0..len {
                    out[at(k)] = out[at(k)] / sum;
                }
            }
        }
    }
    out
}

/// Gradient of softmax (`log == false`, `y` = softmax output) or
/// log-softmax (`log == true`, `y` = log-softmax output).
pub(crate) fn softmax_backward<T: Element>(y: &[T], g: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |k: usize| base + k * inner + i;
            if log {
                let gsum: T = (0..len).map(|k| g[at(k)]).sum();
                for k in 0..len {
                    dx[at(k)] = g[at(k)] - y[at(k)].exp() * gsum;
                }
            } else {
                let dot: T = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                for k in 0..len {
                    dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_bins_cover_input() {
        for input in 1..20 {
            for output in 1..=input {
                let (first, _) = adaptive_bin(0, input, output);
                let (_, last) = adaptive_bin(output - 1, input, output);
                assert_eq!((first, last), (0, input));
                for i in 0..output {
                    let (s, e) = adaptive_bin(i, input, output);
                    assert!(s < e);
                }
            }
        }
    }

    #[test]
    fn bilinear_identity_table() {
        for (o, &(i0, _, w0, w1)) in bilinear_axis(5, 5).iter().enumerate() {
            assert_eq!(i0, o);
            assert_eq!((w0, w1), (1.0, 0.0));
        }
    }

    #[test]
    fn out_extent_formula() {
        let g = Conv2dGeom::new(1, 2, 2);
        assert_eq!(g.out_extent(16, 3), Some(16));
        assert_eq!(Conv2dGeom::new(2, 1, 1).out_extent(7, 3), Some(4));
        assert_eq!(Conv2dGeom::new(1, 0, 3).out_extent(5, 3), None);
    }
}
