use std::sync::Arc;

use crate::error::{invalid, AutogradError, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::{split_axis, strides, Tensor};

/// For every output position of `shape` permuted by `perm`, the flat index
/// of the source element.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let len: usize = shape.iter().product();
    let mut index = Vec::with_capacity(len);
    let mut pos = vec![0usize; out_shape.len()];
    for _ in 0..len {
        index.push(
            pos.iter()
                .zip(perm)
                .map(|(&i, &p)| i * src_strides[p])
                .sum(),
        );
        for d in (0..pos.len()).rev() {
            pos[d] += 1;
            if pos[d] < out_shape[d] {
                break;
            }
            pos[d] = 0;
        }
    }
    index
}

impl<T: Real> Graph<T> {
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let out = (*xv).clone().reshape(shape)?;
        self.custom("reshape", &[x], out, move |g, sink| {
            if let Some(gx) = sink.grad_mut(x) {
                gx.iter_mut().zip(g.data()).for_each(|(o, &d)| *o += d);
            }
        })
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if perm.len() != xv.rank() || seen.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(invalid(
                "permute",
                format!("{perm:?} is not a permutation of {:?}", xv.shape()),
            ));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| xv.shape()[p]).collect();
        let index = Arc::new(permute_index(xv.shape(), perm));
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(&shape, data)?;
        self.custom("permute", &[x], out, move |g, sink| {
            if let Some(gx) = sink.grad_mut(x) {
                for (&i, &d) in index.iter().zip(g.data()) {
                    gx[i] += d;
                }
            }
        })
    }

    /// `len` consecutive positions of `axis` starting at `start`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || start + len > xv.shape()[axis] {
            return Err(invalid(
                "narrow",
                format!("{start}+{len} along axis {axis} of {:?}", xv.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let out = Tensor::new(&shape, data)?;
        self.custom("narrow", &[x], out, move |g, sink| {
            let Some(gx) = sink.grad_mut(x) else { return };
            for (o, chunk) in g.data().chunks(len * inner).enumerate() {
                let base = o * n * inner + start * inner;
                gx[base..base + len * inner]
                    .iter_mut()
                    .zip(chunk)
                    .for_each(|(a, &d)| *a += d);
            }
        })
    }

    /// Joins tensors that agree on every axis except `axis`.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let values: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range")));
        }
        for v in &values {
            let ok = v.rank() == base.len()
                && v.shape()
                    .iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(AutogradError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut shape = base.clone();
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        let parents: Vec<Var> = xs.to_vec();
        self.custom("concat", xs, out, move |g, sink| {
            let gd = g.data();
            let mut offset = 0;
            for (&v, &w) in parents.iter().zip(&widths) {
                if let Some(gv) = sink.grad_mut(v) {
                    for o in 0..outer {
                        let src = &gd[o * total + offset..o * total + offset + w];
                        gv[o * w..(o + 1) * w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &d)| *a += d);
                    }
                }
                offset += w;
            }
        })
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != index.len() {
            return Err(invalid("gather", "index length does not match shape"));
        }
        if index.iter().any(|&i| i >= xv.len()) {
            return Err(invalid("gather", "index out of bounds"));
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        self.custom("gather", &[x], out, move |g, sink| {
            if let Some(gx) = sink.grad_mut(x) {
                for (&i, &d) in index.iter().zip(g.data()) {
                    gx[i] += d;
                }
            }
        })
    }

    /// `out[index[i]] += x[i]` into a zero tensor of `shape`.
    pub fn scatter_add(&self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let len: usize = shape.iter().product();
        if index.len() != xv.len() {
            return Err(invalid("scatter_add", "index length does not match input"));
        }
        if index.iter().any(|&i| i >= len) {
            return Err(invalid("scatter_add", "index out of bounds"));
        }
        let mut data = vec![T::zero(); len];
        for (&i, &v) in index.iter().zip(xv.data()) {
            data[i] += v;
        }
        let out = Tensor::new(shape, data)?;
        self.custom("scatter_add", &[x], out, move |g, sink| {
            if let Some(gx) = sink.grad_mut(x) {
                for (o, &i) in gx.iter_mut().zip(index.iter()) {
                    *o += g.data()[i];
                }
            }
        })
    }
}
