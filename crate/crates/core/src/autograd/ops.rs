//! Differentiable operations recorded on a [`Tape`].

use std::sync::Arc;

use super::kernels::{self, Conv2dGeom, ConvDims};
use super::tape::{BackwardFn, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, numel_of, Element, Tensor};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![1; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Dimension(format!("shapes {a:?} and {b:?} do not broadcast")));
            }
        };
    }
    Ok(out)
}

/// For every element of `out_shape`, the flat offset of the element of an
/// `in_shape` tensor broadcast onto it.
pub(crate) fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    if rank == 0 {
        return vec![0];
    }
    let pad = rank - in_shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        strides[i + pad] = if in_shape[i] == 1 { 0 } else { acc };
        acc *= in_shape[i];
    }
    let mut offs = Vec::with_capacity(numel_of(out_shape));
    let (last, last_stride) = (out_shape[rank - 1], strides[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut base = 0;
    loop {
        offs.extend((0..last).map(|j| base + j * last_stride));
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return offs;
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Materializes `t` broadcast to `shape`.
pub(crate) fn expand<T: Element>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape() == shape {
        return t.clone();
    }
    let src = t.data();
    let data = broadcast_offsets(shape, t.shape()).into_iter().map(|o| src[o]).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Sums `g` down to `shape`, the inverse of broadcasting.
pub(crate) fn reduce_to<T: Element>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = vec![T::zero(); numel_of(shape)];
    for (&o, &v) in broadcast_offsets(g.shape(), shape).iter().zip(g.data()) {
        out[o] += v;
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn zip_broadcast<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let oa = broadcast_offsets(&shape, a.shape());
    let ob = broadcast_offsets(&shape, b.shape());
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(ad[i], bd[j])).collect();
    Ok(Tensor::from_parts(shape, data))
}

fn zip_same<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::Dimension(format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(())
}

fn nchw(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(shape)
        .map_err(|_| Error::Dimension(format!("{what} expects an N x C x H x W tensor, got {shape:?}")))
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t, T: Element>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
    let values: Vec<Tensor<T>> = parts.iter().map(Var::value).collect();
    let base = values[0].shape().to_vec();
    check_axis(axis, base.len())?;
    for v in &values[1..] {
        let s = v.shape();
        let agree = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !agree {
            return Err(Error::Dimension(format!("concat on axis {axis}: {base:?} vs {s:?}")));
        }
    }
    let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = widths.iter().sum();
    let (outer, _, inner) = kernels::axis_split(&base, axis);
    let mut shape = base;
    shape[axis] = total;
    let mut data = Vec::with_capacity(numel_of(&shape));
    for o in 0..outer {
        for (v, &wd) in values.iter().zip(&widths) {
            data.extend_from_slice(&v.data()[o * wd * inner..(o + 1) * wd * inner]);
        }
    }
    let out_shape = shape.clone();
    let part_shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    let backward: BackwardFn<T> = Box::new(move |g, needs| {
        let gd = g.data();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(widths.len());
        for ((&wd, ps), &need) in widths.iter().zip(&part_shapes).zip(needs) {
            if need {
                let mut d = Vec::with_capacity(numel_of(ps));
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    d.extend_from_slice(&gd[start..start + wd * inner]);
                }
                grads.push(Some(Tensor::from_parts(ps.clone(), d)));
            } else {
                grads.push(None);
            }
            offset += wd;
        }
        grads
    });
    Ok(first.tape().op(Tensor::from_parts(out_shape, data), parts, backward))
}

impl<'t, T: Element> Var<'t, T> {
    fn unary(self, value: Tensor<T>, backward: impl Fn(&Tensor<T>) -> Tensor<T> + 'static) -> Var<'t, T> {
        self.tape().op(value, &[self], Box::new(move |g, _| vec![Some(backward(g))]))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = zip_broadcast(&a, &b, |x, y| x + y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape().op(
            out,
            &[self, other],
            Box::new(move |g, needs| vec![needs[0].then(|| reduce_to(g, &sa)), needs[1].then(|| reduce_to(g, &sb))]),
        ))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = zip_broadcast(&a, &b, |x, y| x - y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape().op(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                vec![needs[0].then(|| reduce_to(g, &sa)), needs[1].then(|| reduce_to(&g.map(|v| -v), &sb))]
            }),
        ))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = zip_broadcast(&a, &b, |x, y| x * y)?;
        let shape = out.shape().to_vec();
        Ok(self.tape().op(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| reduce_to(&zip_same(g, &expand(&b, &shape), |u, v| u * v), a.shape()));
                let gb = needs[1].then(|| reduce_to(&zip_same(g, &expand(&a, &shape), |u, v| u * v), b.shape()));
                vec![ga, gb]
            }),
        ))
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = zip_broadcast(&a, &b, |x, y| x / y)?;
        let shape = out.shape().to_vec();
        let quotient = out.clone();
        Ok(self.tape().op(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let be = expand(&b, &shape);
                let ga = needs[0].then(|| reduce_to(&zip_same(g, &be, |u, v| u / v), a.shape()));
                let gb = needs[1].then(|| {
                    // d(a/b)/db = -(a/b)/b
                    let t = zip_same(&zip_same(g, &quotient, |u, q| u * q), &be, |u, v| -u / v);
                    reduce_to(&t, b.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::lit(c);
        let out = self.value().map(|v| v + c);
        self.unary(out, Tensor::clone)
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::lit(c);
        let out = self.value().map(|v| v * c);
        self.unary(out, move |g| g.map(|v| v * c))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.mul_scalar(-1.0)
    }

    pub fn exp(self) -> Var<'t, T> {
        let out = self.value().map(T::exp);
        let y = out.clone();
        self.unary(out, move |g| zip_same(g, &y, |u, v| u * v))
    }

    pub fn log(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(T::ln);
        self.unary(out, move |g| zip_same(g, &x, |u, v| u / v))
    }

    pub fn sqrt(self) -> Var<'t, T> {
        let out = self.value().map(T::sqrt);
        let y = out.clone();
        let half = T::lit(0.5);
        self.unary(out, move |g| zip_same(g, &y, |u, v| u * half / v))
    }

    /// Elementwise `x^p`. Zero upstream gradient contributes exactly zero,
    /// even where the local derivative is unbounded.
    pub fn powf(self, p: f64) -> Var<'t, T> {
        let x = self.value();
        let pe = T::lit(p);
        let out = x.map(|v| v.powf(pe));
        let pm1 = T::lit(p - 1.0);
        self.unary(out, move |g| zip_same(g, &x, |u, v| if u == T::zero() { T::zero() } else { u * pe * v.powf(pm1) }))
    }

    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v.max(T::zero()));
        self.unary(out, move |g| zip_same(g, &x, |u, v| if v > T::zero() { u } else { T::zero() }))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let out = self.value().map(|v| T::one() / (T::one() + (-v).exp()));
        let y = out.clone();
        self.unary(out, move |g| zip_same(g, &y, |u, s| u * s * (T::one() - s)))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t, T>> {
        self.softmax_impl(axis, true)
    }

    fn softmax_impl(self, axis: usize, log: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        check_axis(axis, x.rank())?;
        let shape = x.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), kernels::softmax_forward(x.data(), &shape, axis, log));
        let y = out.clone();
        Ok(self.unary(out, move |g| {
            Tensor::from_parts(shape.clone(), kernels::softmax_backward(y.data(), g.data(), &shape, axis, log))
        }))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.unary(out, move |g| Tensor::from_parts(shape.clone(), vec![g.data()[0]; numel_of(&shape)]))
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = self.value().numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sums over `axes`; reduced axes are kept with extent 1 when `keepdim`.
    pub fn sum_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        for &a in axes {
            check_axis(a, shape.len())?;
        }
        let kept: Vec<usize> = shape.iter().enumerate().map(|(i, &e)| if axes.contains(&i) { 1 } else { e }).collect();
        let reduced = reduce_to(&x, &kept);
        let out_shape: Vec<usize> = if keepdim {
            kept.clone()
        } else {
            shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &e)| e).collect()
        };
        let out = Tensor::from_parts(out_shape, reduced.into_vec());
        Ok(self.unary(out, move |g| {
            let g = Tensor::from_parts(kept.clone(), g.data().to_vec());
            expand(&g, &shape)
        }))
    }

    pub fn mean_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        Ok(self.sum_axes(axes, keepdim)?.mul_scalar(1.0 / count as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let original = x.shape().to_vec();
        let out = x.reshape(shape)?;
        Ok(self.unary(out, move |g| Tensor::from_parts(original.clone(), g.data().to_vec())))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let out = permute_tensor(&x, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.unary(out, move |g| permute_tensor(g, &inverse)))
    }

    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t, T>> {
        let rank = self.value().rank();
        check_axis(a, rank)?;
        check_axis(b, rank)?;
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Matrix product over the last two axes; leading (batch) axes must match.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::Dimension(format!("matmul of {sa:?} and {sb:?}")));
        }
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        if sb[r - 2] != k {
            return Err(Error::Dimension(format!("matmul inner extents differ: {sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out_shape = sa.clone();
        out_shape[r - 1] = n;
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                false,
                false,
                m,
                k,
                n,
                &a.data()[i * m * k..],
                &b.data()[i * k * n..],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.tape().op(
            Tensor::from_parts(out_shape, out),
            &[self, other],
            Box::new(move |g, needs| {
                let gd = g.data();
                let ga = needs[0].then(|| {
                    let mut d = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        // dA = G [m,n] * B^T [n,k]
                        gemm(
                            false,
                            true,
                            m,
                            n,
                            k,
                            &gd[i * m * n..],
                            &b.data()[i * k * n..],
                            T::zero(),
                            &mut d[i * m * k..(i + 1) * m * k],
                        );
                    }
                    Tensor::from_parts(sa.clone(), d)
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        // dB = A^T [k,m] * G [m,n]
                        gemm(
                            true,
                            false,
                            k,
                            m,
                            n,
                            &a.data()[i * m * k..],
                            &gd[i * m * n..],
                            T::zero(),
                            &mut d[i * k * n..(i + 1) * k * n],
                        );
                    }
                    Tensor::from_parts(sb.clone(), d)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// 2-D cross-correlation of `self` [N,Cin,H,W] with `weight`
    /// [Cout,Cin,kh,kw] plus an optional per-channel `bias`.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, geom: Conv2dGeom) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let d = ConvDims::new(x.shape(), w.shape(), geom)?;
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            if b.shape() != [d.cout] {
                return Err(Error::Dimension(format!("conv2d bias shape {:?}, expected [{}]", b.shape(), d.cout)));
            }
        }
        let out = kernels::conv2d_forward(x.data(), w.data(), b.as_ref().map(|b| b.data()), &d);
        let out = Tensor::from_parts(vec![d.n, d.cout, d.ho, d.wo], out);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.tape().op(
            out,
            &parents,
            Box::new(move |g, needs| {
                let need_b = has_bias && needs[2];
                let grads = kernels::conv2d_backward(x.data(), w.data(), g.data(), &d, [needs[0], needs[1], need_b]);
                let mut v = vec![
                    grads.dx.map(|dx| Tensor::from_parts(x.shape().to_vec(), dx)),
                    grads.dw.map(|dw| Tensor::from_parts(w.shape().to_vec(), dw)),
                ];
                if has_bias {
                    v.push(grads.db.map(|db| Tensor::from_parts(vec![d.cout], db)));
                }
                v
            }),
        ))
    }

    pub fn max_pool2d(self, kernel: usize, stride: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let dims = nchw(x.shape(), "max_pool2d")?;
        if kernel == 0 || stride == 0 || kernel > dims[2] || kernel > dims[3] {
            return Err(Error::Geometry(format!("max_pool2d kernel {kernel} stride {stride} on {dims:?}")));
        }
        let (out, arg, ho, wo) = kernels::max_pool2d_forward(x.data(), dims, kernel, stride);
        let out = Tensor::from_parts(vec![dims[0], dims[1], ho, wo], out);
        let in_shape = x.shape().to_vec();
        let arg = Arc::new(arg);
        Ok(self.unary(out, move |g| {
            let mut dx = vec![T::zero(); numel_of(&in_shape)];
            for (&src, &v) in arg.iter().zip(g.data()) {
                dx[src] += v;
            }
            Tensor::from_parts(in_shape.clone(), dx)
        }))
    }

    /// Average over adaptive bins `[floor(i*H/oh), ceil((i+1)*H/oh))`.
    pub fn adaptive_avg_pool2d(self, oh: usize, ow: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let dims = nchw(x.shape(), "adaptive_avg_pool2d")?;
        if oh == 0 || ow == 0 || oh > dims[2] || ow > dims[3] {
            return Err(Error::Geometry(format!(
                "adaptive pool target {oh}x{ow} exceeds input {}x{}",
                dims[2], dims[3]
            )));
        }
        let out = kernels::adaptive_avg_pool_forward(x.data(), dims, oh, ow);
        let out = Tensor::from_parts(vec![dims[0], dims[1], oh, ow], out);
        Ok(self.unary(out, move |g| {
            Tensor::from_parts(dims.to_vec(), kernels::adaptive_avg_pool_backward(g.data(), dims, oh, ow))
        }))
    }

    /// Bilinear resize with half-pixel centers (`align_corners = false`).
    pub fn upsample_bilinear(self, oh: usize, ow: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let dims = nchw(x.shape(), "upsample_bilinear")?;
        if oh == 0 || ow == 0 {
            return Err(Error::Geometry(format!("bilinear target {oh}x{ow}")));
        }
        if (oh, ow) == (dims[2], dims[3]) {
            return Ok(self.unary(x, Tensor::clone));
        }
        let out = kernels::bilinear_forward(x.data(), dims, oh, ow);
        let out = Tensor::from_parts(vec![dims[0], dims[1], oh, ow], out);
        Ok(self
            .unary(out, move |g| Tensor::from_parts(dims.to_vec(), kernels::bilinear_backward(g.data(), dims, oh, ow))))
    }
}

pub(crate) fn permute_tensor<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // Offsets of the output walk, expressed in input strides.
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut data = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.numel() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, data)
}
