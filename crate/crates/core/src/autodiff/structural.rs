use super::{Graph, Var};
use crate::tensor::{numel, strides, Result, Scalar, Tensor, TensorError};

/// Copy a block `[outer, len·inner]` between layouts that differ only along
/// one axis (used by concat and narrow).
fn copy_axis_block<T: Scalar>(
    src: &[T],
    src_axis: usize,
    dst: &mut [T],
    dst_axis: usize,
    outer: usize,
    inner: usize,
    src_start: usize,
    dst_start: usize,
    len: usize,
    accumulate: bool,
) {
    for o in 0..outer {
        let s = &src[(o * src_axis + src_start) * inner..(o * src_axis + src_start + len) * inner];
        let d = &mut dst[(o * dst_axis + dst_start) * inner..(o * dst_axis + dst_start + len) * inner];
        if accumulate {
            for (a, &b) in d.iter_mut().zip(s) {
                *a += b;
            }
        } else {
            d.copy_from_slice(s);
        }
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::InvalidAxis { op, axis, rank });
    }
    Ok(())
}

fn permute_data<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src = strides(x.shape());
    let permuted: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let mut data = Vec::with_capacity(x.numel());
    crate::tensor::for_each_offset(&shape, [&permuted], |_, [o]| data.push(x.data()[o]));
    Tensor::from_parts(shape, data)
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let out = x.reshaped(shape)?;
        let orig = x.shape().to_vec();
        Ok(self
            .graph
            .record(out, &[self], move |g| vec![Some(g.reshaped(&orig).unwrap())]))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {rank}"),
            });
        }
        let out = permute_data(&x, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self
            .graph
            .record(out, &[self], move |g| vec![Some(permute_data(g, &inverse))]))
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        check_axis("narrow", axis, shape.len())?;
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {start}..{} outside axis of size {}", start + len, shape[axis]),
            });
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![T::zero(); numel(&out_shape)];
        copy_axis_block(x.data(), shape[axis], &mut data, len, outer, inner, start, 0, len, false);
        Ok(self.graph.record(Tensor::from_parts(out_shape, data), &[self], move |g| {
            let mut dx = vec![T::zero(); numel(&shape)];
            copy_axis_block(g.data(), len, &mut dx, shape[axis], outer, inner, 0, start, len, false);
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        }))
    }

    /// Zero padding of the last two dimensions.
    pub fn pad2d(self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Invalid {
                op: "pad2d",
                msg: format!("rank {} < 2", shape.len()),
            });
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (nh, nw) = (h + top + bottom, w + left + right);
        let planes = numel(&shape[..r - 2]);
        let mut out = vec![T::zero(); planes * nh * nw];
        for p in 0..planes {
            for i in 0..h {
                let s = &x.data()[(p * h + i) * w..(p * h + i + 1) * w];
                let d0 = (p * nh + i + top) * nw + left;
                out[d0..d0 + w].copy_from_slice(s);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[r - 2] = nh;
        out_shape[r - 1] = nw;
        Ok(self.graph.record(Tensor::from_parts(out_shape, out), &[self], move |g| {
            let mut dx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                for i in 0..h {
                    let s0 = (p * nh + i + top) * nw + left;
                    dx[(p * h + i) * w..(p * h + i + 1) * w].copy_from_slice(&g.data()[s0..s0 + w]);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        }))
    }

    /// Nearest-neighbour ×2 upsampling of the last two dimensions.
    pub fn upsample2x(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Invalid {
                op: "upsample2x",
                msg: format!("rank {} < 2", shape.len()),
            });
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes = numel(&shape[..r - 2]);
        let (nh, nw) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); planes * nh * nw];
        for p in 0..planes {
            for i in 0..nh {
                for j in 0..nw {
                    out[(p * nh + i) * nw + j] = x.data()[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[r - 2] = nh;
        out_shape[r - 1] = nw;
        Ok(self.graph.record(Tensor::from_parts(out_shape, out), &[self], move |g| {
            let mut dx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                for i in 0..nh {
                    for j in 0..nw {
                        dx[(p * h + i / 2) * w + j / 2] += g.data()[(p * nh + i) * nw + j];
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        }))
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        check_axis("softmax", axis, shape.len())?;
        let n = shape[axis];
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let mut y = vec![T::zero(); x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| x.data()[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..n {
                    let e = (x.data()[at(k)] - m).exp();
                    y[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    y[at(k)] /= z;
                }
            }
        }
        let yt = Tensor::from_parts(shape.clone(), y);
        let ys = yt.clone();
        Ok(self.graph.record(yt, &[self], move |g| {
            let mut dx = vec![T::zero(); ys.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: T = (0..n).map(|k| g.data()[at(k)] * ys.data()[at(k)]).sum();
                    for k in 0..n {
                        dx[at(k)] = ys.data()[at(k)] * (g.data()[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(ys.shape().to_vec(), dx))]
        }))
    }
}

impl<T: Scalar> Graph<T> {
    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat<'g>(&'g self, vars: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = vars.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = first.shape();
        check_axis("concat", axis, base.len())?;
        let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = vec![T::zero(); numel(&out_shape)];
        let mut at = 0;
        for (v, &len) in values.iter().zip(&sizes) {
            copy_axis_block(v.data(), len, &mut data, total, outer, inner, 0, at, len, false);
            at += len;
        }
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(self.record(Tensor::from_parts(out_shape, data), vars, move |g| {
            let mut at = 0;
            shapes
                .iter()
                .zip(&sizes)
                .map(|(s, &len)| {
                    let mut d = vec![T::zero(); numel(s)];
                    copy_axis_block(g.data(), total, &mut d, len, outer, inner, at, 0, len, true);
                    at += len;
                    Some(Tensor::from_parts(s.clone(), d))
                })
                .collect()
        }))
    }
}
