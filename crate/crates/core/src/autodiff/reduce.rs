use super::Var;
use crate::tensor::{broadcast_strides, for_each_offset, Result, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
    /// Population variance (divides by the element count).
    Variance,
}

/// Shape with reduced axes kept as size 1.
fn kept_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

fn sum_kept<T: Scalar>(x: &Tensor<T>, kept: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); kept.iter().product()];
    let s = broadcast_strides(kept, x.shape());
    for_each_offset(x.shape(), [&s], |lin, [o]| out[o] += x.data()[lin]);
    out
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn reduce(self, kind: ReduceKind, axes: &[usize], keepdims: bool) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        for &a in &axes {
            if a >= shape.len() {
                return Err(TensorError::InvalidAxis {
                    op: "reduce",
                    axis: a,
                    rank: shape.len(),
                });
            }
            if shape[a] == 0 {
                return Err(TensorError::EmptyReduction(shape));
            }
        }
        let kept = kept_shape(&shape, &axes);
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let n = T::c(count as f64);
        let s = broadcast_strides(&kept, &shape);

        let (values, aux): (Vec<T>, Option<Vec<usize>>) = match kind {
            ReduceKind::Sum => (sum_kept(&x, &kept), None),
            ReduceKind::Mean => (sum_kept(&x, &kept).into_iter().map(|v| v / n).collect(), None),
            ReduceKind::Max => {
                let mut best = vec![T::neg_infinity(); kept.iter().product()];
                let mut arg = vec![usize::MAX; best.len()];
                for_each_offset(&shape, [&s], |lin, [o]| {
                    let v = x.data()[lin];
                    if arg[o] == usize::MAX || v > best[o] {
                        best[o] = v;
                        arg[o] = lin;
                    }
                });
                (best, Some(arg))
            }
            ReduceKind::Variance => {
                let mean: Vec<T> = sum_kept(&x, &kept).into_iter().map(|v| v / n).collect();
                let mut acc = vec![T::zero(); mean.len()];
                for_each_offset(&shape, [&s], |lin, [o]| {
                    let d = x.data()[lin] - mean[o];
                    acc[o] += d * d;
                });
                (acc.into_iter().map(|v| v / n).collect(), None)
            }
        };

        let out_shape = if keepdims {
            kept.clone()
        } else {
            let mut v: Vec<usize> = shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            if v.is_empty() {
                v.push(1);
            }
            v
        };
        let out = Tensor::from_parts(out_shape, values.clone());
        let xs = x.clone();
        Ok(self.graph.record(out, &[self], move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); xs.numel()];
            match kind {
                ReduceKind::Sum => for_each_offset(xs.shape(), [&s], |lin, [o]| dx[lin] = gd[o]),
                ReduceKind::Mean => {
                    for_each_offset(xs.shape(), [&s], |lin, [o]| dx[lin] = gd[o] / n)
                }
                ReduceKind::Max => {
                    for (o, &lin) in aux.as_ref().unwrap().iter().enumerate() {
                        dx[lin] = gd[o];
                    }
                }
                ReduceKind::Variance => {
                    let mean: Vec<T> =
                        sum_kept(&xs, &kept).into_iter().map(|v| v / n).collect();
                    let two = T::c(2.0);
                    for_each_offset(xs.shape(), [&s], |lin, [o]| {
                        dx[lin] = gd[o] * two * (xs.data()[lin] - mean[o]) / n;
                    });
                }
            }
            vec![Some(Tensor::from_parts(xs.shape().to_vec(), dx))]
        }))
    }

    pub fn sum(self, axes: &[usize], keepdims: bool) -> Result<Var<'g, T>> {
        self.reduce(ReduceKind::Sum, axes, keepdims)
    }

    pub fn mean(self, axes: &[usize], keepdims: bool) -> Result<Var<'g, T>> {
        self.reduce(ReduceKind::Mean, axes, keepdims)
    }

    pub fn max_over(self, axes: &[usize], keepdims: bool) -> Result<Var<'g, T>> {
        self.reduce(ReduceKind::Max, axes, keepdims)
    }

    pub fn variance(self, axes: &[usize], keepdims: bool) -> Result<Var<'g, T>> {
        self.reduce(ReduceKind::Variance, axes, keepdims)
    }

    fn all_axes(&self) -> Vec<usize> {
        (0..self.shape().len()).collect()
    }

    pub fn sum_all(self) -> Var<'g, T> {
        let axes = self.all_axes();
        self.sum(&axes, false).expect("valid axes")
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let axes = self.all_axes();
        self.mean(&axes, false).expect("valid axes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, check_gradients_at};
    use crate::autodiff::Graph;

    #[test]
    fn mean_of_values() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        assert_eq!(x.mean_all().item(), 3.0);
    }

    #[test]
    fn sum_over_no_axes_is_identity() {
        let g = Graph::<f32>::new();
        let v = Tensor::from_fn(&[2, 3], |i| i as f32);
        let y = g.constant(v.clone()).sum(&[], true).unwrap();
        assert_eq!(*y.value(), v);
    }

    #[test]
    fn variance_of_constant_is_zero() {
        let g = Graph::<f32>::new();
        let y = g.constant(Tensor::full(&[3, 3], 2.5)).variance(&[0, 1], false).unwrap();
        assert_eq!(y.item(), 0.0);
    }

    #[test]
    fn variance_is_population() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[4], &[1.0, 2.0, 3.0, 6.0]).unwrap());
        // deviations -2,-1,0,3 -> 14/4
        assert_eq!(x.variance(&[0], false).unwrap().item(), 3.5);
    }

    #[test]
    fn keepdims_shapes() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 4]));
        assert_eq!(x.sum(&[1], true).unwrap().shape(), vec![2, 1, 4]);
        assert_eq!(x.sum(&[1], false).unwrap().shape(), vec![2, 4]);
        assert!(x.sum(&[3], false).is_err());
    }

    #[test]
    fn reduce_gradients() {
        for kind in [ReduceKind::Sum, ReduceKind::Mean, ReduceKind::Variance] {
            let err = check_gradients(&[vec![2, 3, 4]], 11, |_, v| v[0].reduce(kind, &[0, 2], true))
                .unwrap();
            assert!(err <= 1e-4, "{kind:?}: {err}");
        }
        // max away from ties: distinct, well separated values
        let x = Tensor::from_fn(&[2, 3, 4], |i| ((i * 7) % 24) as f64 * 0.1);
        let err = check_gradients_at(vec![x], 2, usize::MAX, |_, v| v[0].max_over(&[1], false)).unwrap();
        assert!(err <= 1e-4, "max: {err}");
    }
}
