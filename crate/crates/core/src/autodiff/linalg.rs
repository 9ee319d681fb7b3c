//! Matrix products. The kernels accumulate into `c` in a fixed loop order so
//! results are bit-reproducible.

use super::Var;
use crate::tensor::{broadcast_shape, numel, strides, sum_to_shape, Result, Scalar, Tensor, TensorError};

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    // four rows of `c` at a time so each row of `b` is streamed once per block
    let blocked = m / 4 * 4;
    for i in (0..blocked).step_by(4) {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
    }
    for i in blocked..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

const LANES: usize = 8;

/// Dot product with eight interleaved partial sums (fixed order, so still
/// deterministic) to let the compiler vectorize.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let (x, y) = (&a[c * LANES..(c + 1) * LANES], &b[c * LANES..(c + 1) * LANES]);
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for p in chunks * LANES..a.len() {
        tail += a[p] * b[p];
    }
    let s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    s + tail
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let blocked = k / 4 * 4;
    for p in (0..blocked).step_by(4) {
        let (b0, b1, b2, b3) = (
            &b[p * n..(p + 1) * n],
            &b[(p + 1) * n..(p + 2) * n],
            &b[(p + 2) * n..(p + 3) * n],
            &b[(p + 3) * n..(p + 4) * n],
        );
        for i in 0..m {
            let (a0, a1, a2, a3) = (a[p * m + i], a[(p + 1) * m + i], a[(p + 2) * m + i], a[(p + 3) * m + i]);
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
        }
    }
    for p in blocked..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Offsets of each batch matrix of `shape` inside a broadcast batch `lead`.
fn batch_offsets(shape: &[usize], lead: &[usize], mat: usize) -> Vec<usize> {
    let own_lead = &shape[..shape.len() - 2];
    let lead_strides = crate::tensor::broadcast_strides(own_lead, lead);
    let total = numel(lead);
    let ls = strides(lead);
    (0..total)
        .map(|mut lin| {
            let mut off = 0;
            for d in 0..lead.len() {
                let idx = lin / ls[d];
                lin %= ls[d];
                off += idx * lead_strides[d];
            }
            off * mat
        })
        .collect()
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Batched matrix product over the trailing two dimensions with
    /// broadcasting of the leading ones.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::Invalid {
                op: "matmul",
                msg: format!("operands must have rank >= 2, got {sa:?} and {sb:?}"),
            });
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(TensorError::InnerDim { lhs: sa, rhs: sb });
        }
        let lead = broadcast_shape("matmul", &sa[..sa.len() - 2], &sb[..sb.len() - 2])?;
        let oa = batch_offsets(&sa, &lead, m * k);
        let ob = batch_offsets(&sb, &lead, k * n);
        let batches = oa.len();
        let mut out = vec![T::zero(); batches * m * n];
        for t in 0..batches {
            gemm_nn(
                m,
                k,
                n,
                &a.data()[oa[t]..oa[t] + m * k],
                &b.data()[ob[t]..ob[t] + k * n],
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        let mut out_shape = lead.clone();
        out_shape.extend([m, n]);
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        Ok(self.graph.record(Tensor::from_parts(out_shape, out), &[self, other], move |g| {
            let gd = g.data();
            // gradients at the broadcast batch shape, then summed down
            let ga = need_a.then(|| {
                let mut full = vec![T::zero(); batches * m * k];
                for t in 0..batches {
                    gemm_nt(
                        m,
                        n,
                        k,
                        &gd[t * m * n..(t + 1) * m * n],
                        &b.data()[ob[t]..ob[t] + k * n],
                        &mut full[t * m * k..(t + 1) * m * k],
                    );
                }
                let mut shape = lead.clone();
                shape.extend([m, k]);
                sum_to_shape(&Tensor::from_parts(shape, full), a.shape())
            });
            let gb = need_b.then(|| {
                let mut full = vec![T::zero(); batches * k * n];
                for t in 0..batches {
                    gemm_tn(
                        k,
                        m,
                        n,
                        &a.data()[oa[t]..oa[t] + m * k],
                        &gd[t * m * n..(t + 1) * m * n],
                        &mut full[t * k * n..(t + 1) * k * n],
                    );
                }
                let mut shape = lead.clone();
                shape.extend([k, n]);
                sum_to_shape(&Tensor::from_parts(shape, full), b.shape())
            });
            vec![ga, gb]
        }))
    }
}
