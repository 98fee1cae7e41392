use rayon::prelude::*;

use crate::error::{AutogradError, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Row/column strides of a stored row-major matrix with `cols` columns, viewed
/// transposed when `t` is set.
fn view(cols: usize, t: bool) -> (isize, isize) {
    if t {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

/// Batches at or above this many multiply-adds are spread over the rayon pool.
const PAR_WORK: usize = 1 << 16;

#[allow(clippy::too_many_arguments)]
fn batched<T: Real>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_stride: usize,
    (rsa, csa): (isize, isize),
    b: &[T],
    b_stride: usize,
    (rsb, csb): (isize, isize),
    c: &mut [T],
    c_stride: usize,
    (rsc, csc): (isize, isize),
) {
    if c_stride == 0 || batch == 0 {
        return;
    }
    let run = |i: usize, c: &mut [T]| {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a[i * a_stride..(i + 1) * a_stride],
            rsa,
            csa,
            &b[i * b_stride..(i + 1) * b_stride],
            rsb,
            csb,
            T::one(),
            c,
            rsc,
            csc,
        )
    };
    if batch > 1 && m * n * k >= PAR_WORK {
        c.par_chunks_mut(c_stride)
            .enumerate()
            .for_each(|(i, c)| run(i, c));
    } else {
        c.chunks_mut(c_stride).enumerate().for_each(|(i, c)| run(i, c));
    }
}

impl<T: Real> Graph<T> {
    /// `x (.., k) @ w (k, n)`: every leading index of `x` is a row.
    pub fn matmul(&self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let k = *xv.shape().last().unwrap_or(&0);
        if wv.rank() != 2 || wv.shape()[0] != k {
            return Err(AutogradError::ShapeMismatch {
                op: "matmul",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let n = wv.shape()[1];
        let rows = if k == 0 { 0 } else { xv.len() / k };
        let mut out_shape = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); rows * n];
        T::gemm(
            rows,
            k,
            n,
            T::one(),
            xv.data(),
            k as isize,
            1,
            wv.data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let out = Tensor::new(&out_shape, out)?;
        self.custom("matmul", &[x, w], out, move |g, sink| {
            if let Some(gx) = sink.grad_mut(x) {
                // dX = dY W^T
                T::gemm(
                    rows,
                    n,
                    k,
                    T::one(),
                    g.data(),
                    n as isize,
                    1,
                    wv.data(),
                    1,
                    n as isize,
                    T::one(),
                    gx,
                    k as isize,
                    1,
                );
            }
            if let Some(gw) = sink.grad_mut(w) {
                // dW = X^T dY
                T::gemm(
                    k,
                    rows,
                    n,
                    T::one(),
                    xv.data(),
                    1,
                    k as isize,
                    g.data(),
                    n as isize,
                    1,
                    T::one(),
                    gw,
                    n as isize,
                    1,
                );
            }
        })
    }

    /// `x @ w + b` over the last axis of `x`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Batched product of rank-3 tensors, `op(a[i]) @ op(b[i])` where `op`
    /// transposes the stored matrix when the matching flag is set.
    pub fn bmm(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let mismatch = || AutogradError::ShapeMismatch {
            op: "bmm",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(mismatch());
        }
        let batch = av.shape()[0];
        let (ar, ac) = (av.shape()[1], av.shape()[2]);
        let (br, bc) = (bv.shape()[1], bv.shape()[2]);
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch());
        }
        let sa = view(ac, trans_a);
        let sb = view(bc, trans_b);
        let sc = (n as isize, 1isize);
        let mut out = vec![T::zero(); batch * m * n];
        batched(
            batch,
            m,
            k,
            n,
            av.data(),
            ar * ac,
            sa,
            bv.data(),
            br * bc,
            sb,
            &mut out,
            m * n,
            sc,
        );
        let out = Tensor::new(&[batch, m, n], out)?;
        self.custom("bmm", &[a, b], out, move |g, sink| {
            if let Some(ga) = sink.grad_mut(a) {
                // d op(A) = dC op(B)^T, written through op(A)'s strides.
                batched(
                    batch,
                    m,
                    n,
                    k,
                    g.data(),
                    m * n,
                    sc,
                    bv.data(),
                    br * bc,
                    (sb.1, sb.0),
                    ga,
                    ar * ac,
                    sa,
                );
            }
            if let Some(gb) = sink.grad_mut(b) {
                // d op(B) = op(A)^T dC
                batched(
                    batch,
                    k,
                    m,
                    n,
                    av.data(),
                    ar * ac,
                    (sa.1, sa.0),
                    g.data(),
                    m * n,
                    sc,
                    gb,
                    br * bc,
                    sb,
                );
            }
        })
    }
}
