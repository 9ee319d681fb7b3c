//! 2-D cross-correlation with zero padding, via im2col and GEMM.

use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::Var;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    /// (rows, cols) of zero padding on each side.
    pub padding: (usize, usize),
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: (0, 0),
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    pub fn same(kh: usize, kw: usize, dilation: usize) -> Self {
        Self {
            padding: (dilation * (kh - 1) / 2, dilation * (kw - 1) / 2),
            dilation,
            ..Self::default()
        }
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let eh = self.dilation * (kh - 1) + 1;
        let ew = self.dilation * (kw - 1) + 1;
        let (ph, pw) = (h + 2 * self.padding.0, w + 2 * self.padding.1);
        if eh > ph || ew > pw || self.stride == 0 {
            return None;
        }
        Some(((ph - eh) / self.stride + 1, (pw - ew) / self.stride + 1))
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    o: Conv2dOptions,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.o.stride == 1
            && self.o.padding == (0, 0)
    }

    /// Source index of (kernel row, output row) or None when in padding.
    #[inline]
    fn src(&self, k: usize, out: usize, pad: usize, size: usize) -> Option<usize> {
        let p = (out * self.o.stride + k * self.o.dilation) as isize - pad as isize;
        (p >= 0 && (p as usize) < size).then_some(p as usize)
    }

    /// For stride 1: the output-column range `[lo, hi)` whose source column
    /// `oj + off - pad` lies inside the image, with `off = kj·dilation`.
    fn valid_cols(&self, kj: usize) -> (usize, usize, usize) {
        let off = kj * self.o.dilation;
        let pad = self.o.padding.1;
        let lo = pad.saturating_sub(off).min(self.ow);
        let hi = (self.w + pad).saturating_sub(off).min(self.ow).max(lo);
        (lo, hi, off)
    }

    /// Unfold `cg` channels of one image into a `[cg·kh·kw, oh·ow]` matrix.
    fn im2col<T: Scalar>(&self, x: &[T], cg: usize, cols: &mut [T]) {
        let ohw = self.oh * self.ow;
        for c in 0..cg {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * ohw;
                    for oi in 0..self.oh {
                        let dst = &mut cols[row + oi * self.ow..row + (oi + 1) * self.ow];
                        match self.src(ki, oi, self.o.padding.0, self.h) {
                            None => dst.fill(T::zero()),
                            Some(si) if self.o.stride == 1 => {
                                let (lo, hi, off) = self.valid_cols(kj);
                                dst[..lo].fill(T::zero());
                                dst[hi..].fill(T::zero());
                                if hi == lo {
                                    continue;
                                }
                                let start = si * self.w + lo + off - self.o.padding.1;
                                dst[lo..hi].copy_from_slice(&plane[start..start + hi - lo]);
                            }
                            Some(si) => {
                                for (oj, d) in dst.iter_mut().enumerate() {
                                    *d = match self.src(kj, oj, self.o.padding.1, self.w) {
                                        Some(sj) => plane[si * self.w + sj],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add the transpose of [`Self::im2col`].
    fn col2im<T: Scalar>(&self, cols: &[T], cg: usize, dx: &mut [T]) {
        let ohw = self.oh * self.ow;
        for c in 0..cg {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * ohw;
                    for oi in 0..self.oh {
                        let Some(si) = self.src(ki, oi, self.o.padding.0, self.h) else {
                            continue;
                        };
                        if self.o.stride == 1 {
                            let (lo, hi, off) = self.valid_cols(kj);
                            if hi == lo {
                                continue;
                            }
                            let start = si * self.w + lo + off - self.o.padding.1;
                            let src = &cols[row + oi * self.ow + lo..row + oi * self.ow + hi];
                            for (d, &v) in plane[start..start + hi - lo].iter_mut().zip(src) {
                                *d += v;
                            }
                            continue;
                        }
                        for oj in 0..self.ow {
                            if let Some(sj) = self.src(kj, oj, self.o.padding.1, self.w) {
                                plane[si * self.w + sj] += cols[row + oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// `x: B×C_in×H×W`, `w: C_out×(C_in/groups)×kh×kw`, `bias: C_out`.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        opts: Conv2dOptions,
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(TensorError::Conv(format!(
                "expected rank-4 input and weight, got {xs:?} and {ws:?}"
            )));
        }
        let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let groups = opts.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cg * groups != cin {
            return Err(TensorError::Conv(format!(
                "channel/group mismatch: input {cin} channels, weight {ws:?}, groups {groups}"
            )));
        }
        if let Some(bv) = &bias {
            if bv.shape() != [cout] {
                return Err(TensorError::Conv(format!(
                    "bias shape {:?} does not match {cout} output channels",
                    bv.shape()
                )));
            }
        }
        let Some((oh, ow)) = opts.output_size(h, wd, kh, kw) else {
            return Err(TensorError::Conv(format!(
                "kernel {kh}x{kw} (dilation {}) larger than padded input {h}x{wd}",
                opts.dilation
            )));
        };
        let geo = Geometry {
            cin,
            h,
            w: wd,
            kh,
            kw,
            oh,
            ow,
            o: opts,
        };
        let og = cout / groups;
        let kk = cg * kh * kw;
        let ohw = oh * ow;
        let in_img = cin * h * wd;
        let in_grp = cg * h * wd;
        let out_img = cout * ohw;

        let bias_val = bias.map(|v| v.value());
        let mut out = vec![T::zero(); b * out_img];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * ohw] };
        for n in 0..b {
            for gi in 0..groups {
                let xin = &x.data()[n * in_img + gi * in_grp..n * in_img + (gi + 1) * in_grp];
                let src: &[T] = if geo.is_pointwise() {
                    xin
                } else {
                    geo.im2col(xin, cg, &mut cols);
                    &cols
                };
                let dst = &mut out[n * out_img + gi * og * ohw..n * out_img + (gi + 1) * og * ohw];
                if let Some(bv) = &bias_val {
                    for (o, chunk) in dst.chunks_mut(ohw).enumerate() {
                        chunk.fill(bv.data()[gi * og + o]);
                    }
                }
                gemm_nn(og, kk, ohw, &w.data()[gi * og * kk..(gi + 1) * og * kk], src, dst);
            }
        }

        let need = (
            self.requires_grad(),
            weight.requires_grad(),
            bias.map(|v| v.requires_grad()).unwrap_or(false),
        );
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        let out = Tensor::from_parts(vec![b, cout, oh, ow], out);
        Ok(self.graph.record(out, &inputs, move |g| {
            let gd = g.data();
            let mut dx = need.0.then(|| vec![T::zero(); b * in_img]);
            let mut dw = need.1.then(|| vec![T::zero(); w.numel()]);
            let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { kk * ohw }];
            let mut dcols = vec![T::zero(); kk * ohw];
            for n in 0..b {
                for gi in 0..groups {
                    let go = &gd[n * out_img + gi * og * ohw..n * out_img + (gi + 1) * og * ohw];
                    let xin = &x.data()[n * in_img + gi * in_grp..n * in_img + (gi + 1) * in_grp];
                    if let Some(dw) = dw.as_mut() {
                        let src: &[T] = if geo.is_pointwise() {
                            xin
                        } else {
                            geo.im2col(xin, cg, &mut cols);
                            &cols
                        };
                        gemm_nt(og, ohw, kk, go, src, &mut dw[gi * og * kk..(gi + 1) * og * kk]);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let wg = &w.data()[gi * og * kk..(gi + 1) * og * kk];
                        let dxg = &mut dx[n * in_img + gi * in_grp..n * in_img + (gi + 1) * in_grp];
                        if geo.is_pointwise() {
                            gemm_tn(kk, og, ohw, wg, go, dxg);
                        } else {
                            dcols.fill(T::zero());
                            gemm_tn(kk, og, ohw, wg, go, &mut dcols);
                            geo.col2im(&dcols, cg, dxg);
                        }
                    }
                }
            }
            let db = (has_bias && need.2).then(|| {
                let mut db = vec![T::zero(); cout];
                for n in 0..b {
                    for (o, d) in db.iter_mut().enumerate() {
                        *d += gd[n * out_img + o * ohw..n * out_img + (o + 1) * ohw]
                            .iter()
                            .copied()
                            .sum::<T>();
                    }
                }
                Tensor::from_parts(vec![cout], db)
            });
            let mut grads = vec![
                dx.map(|d| Tensor::from_parts(vec![b, geo.cin, geo.h, geo.w], d)),
                dw.map(|d| Tensor::from_parts(vec![cout, cg, kh, kw], d)),
            ];
            if has_bias {
                grads.push(db);
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use crate::autodiff::Graph;

    /// Direct sliding-window reference.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, o: Conv2dOptions) -> Tensor<f64> {
        let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let (oh, ow) = o.output_size(h, wd, kh, kw).unwrap();
        let og = cout / o.groups;
        let _ = cin;
        Tensor::from_fn(&[b, cout, oh, ow], |lin| {
            let (n, rest) = (lin / (cout * oh * ow), lin % (cout * oh * ow));
            let (co, rest) = (rest / (oh * ow), rest % (oh * ow));
            let (i, j) = (rest / ow, rest % ow);
            let gi = co / og;
            let mut acc = 0.0;
            for c in 0..cg {
                for a in 0..kh {
                    for bb in 0..kw {
                        let si = (i * o.stride + a * o.dilation) as isize - o.padding.0 as isize;
                        let sj = (j * o.stride + bb * o.dilation) as isize - o.padding.1 as isize;
                        if si < 0 || sj < 0 || si >= h as isize || sj >= wd as isize {
                            continue;
                        }
                        acc += x.at(&[n, gi * cg + c, si as usize, sj as usize]) * w.at(&[co, c, a, bb]);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn one_by_one_unit_kernel_is_identity() {
        let g = Graph::<f32>::new();
        let xv = Tensor::from_fn(&[1, 1, 3, 4], |i| i as f32);
        let y = g
            .constant(xv.clone())
            .conv2d(g.constant(Tensor::ones(&[1, 1, 1, 1])), None, Conv2dOptions::default())
            .unwrap();
        assert_eq!(*y.value(), xv);
    }

    #[test]
    fn two_by_two_window() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = x.conv2d(w, None, Conv2dOptions::default()).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.value().data(), &[5.0]);
    }

    #[test]
    fn matches_naive_reference() {
        let cases = [
            (vec![2, 4, 7, 6], vec![6, 2, 3, 3], Conv2dOptions { stride: 2, padding: (1, 1), dilation: 1, groups: 2 }),
            (vec![1, 3, 9, 9], vec![2, 3, 3, 3], Conv2dOptions { stride: 1, padding: (2, 2), dilation: 2, groups: 1 }),
            (vec![1, 2, 5, 6], vec![3, 2, 1, 3], Conv2dOptions { stride: 1, padding: (0, 1), dilation: 1, groups: 1 }),
            (vec![2, 3, 4, 4], vec![5, 3, 1, 1], Conv2dOptions::default()),
            (vec![1, 2, 2, 2], vec![1, 2, 7, 7], Conv2dOptions::same(7, 7, 1)),
            (vec![1, 2, 3, 1], vec![2, 2, 3, 3], Conv2dOptions::same(3, 3, 2)),
        ];
        for (xs, ws, o) in cases {
            let inputs = crate::autodiff::gradcheck::random_inputs(&[xs, ws], 3);
            let g = Graph::<f64>::new();
            let y = g
                .constant(inputs[0].clone())
                .conv2d(g.constant(inputs[1].clone()), None, o)
                .unwrap();
            let r = naive(&inputs[0], &inputs[1], o);
            assert_eq!(y.shape(), r.shape());
            assert!(y.value().max_abs_diff(&r) < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
        assert!(x.conv2d(w, None, Conv2dOptions::default()).is_err());
        let big = g.constant(Tensor::zeros(&[1, 3, 5, 5]));
        assert!(x.conv2d(big, None, Conv2dOptions::default()).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let err = check_gradients(&[vec![1, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], 1, |_, v| {
            v[0].conv2d(v[1], Some(v[2]), Conv2dOptions::same(3, 3, 1))
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
        let o = Conv2dOptions { stride: 2, padding: (2, 2), dilation: 2, groups: 2 };
        let err = check_gradients(&[vec![2, 4, 6, 7], vec![4, 2, 3, 3]], 2, |_, v| v[0].conv2d(v[1], None, o)).unwrap();
        assert!(err <= 1e-4, "{err}");
        let err = check_gradients(&[vec![1, 2, 2, 2], vec![1, 2, 7, 7]], 5, |_, v| {
            v[0].conv2d(v[1], None, Conv2dOptions::same(7, 7, 1))
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
        let err = check_gradients(&[vec![1, 3, 4, 4], vec![2, 3, 1, 1], vec![2]], 4, |_, v| {
            v[0].conv2d(v[1], Some(v[2]), Conv2dOptions::default())
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
