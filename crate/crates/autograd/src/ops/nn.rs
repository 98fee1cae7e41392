use std::sync::Arc;

use rand::Rng;

use super::elementwise::sigmoid;
use crate::error::{invalid, AutogradError, Result};
use crate::graph::{Graph, Var};
use crate::real::{accurate_sum, Real};
use crate::tensor::{split_axis, Tensor};

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(invalid(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("softmax", xv.shape(), axis)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut y = vec![T::zero(); xv.len()];
        let xd = xv.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..n {
                    max = max.max(xd[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (xd[at(j)] - max).exp();
                    y[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    y[at(j)] /= sum;
                }
            }
        }
        let out = Tensor::new(xv.shape(), y)?;
        let yv = Arc::new(out.clone());
        self.custom("softmax", &[x], out, move |g, sink| {
            let Some(gx) = sink.grad_mut(x) else { return };
            let (gd, yd) = (g.data(), yv.data());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let dot: T = (0..n).map(|j| gd[at(j)] * yd[at(j)]).sum();
                    for j in 0..n {
                        gx[at(j)] += yd[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
        })
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps) * gain` over the last axis.
    pub fn rmsnorm(&self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let n = *xv.shape().last().unwrap_or(&0);
        if gv.len() != n || n == 0 {
            return Err(AutogradError::ShapeMismatch {
                op: "rmsnorm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.len() / n;
        let nf = T::of(n as f64);
        let mut inv = vec![T::zero(); rows];
        let mut y = vec![T::zero(); xv.len()];
        for (r, (xr, yr)) in xv.data().chunks(n).zip(y.chunks_mut(n)).enumerate() {
            let ms = xr.iter().map(|&v| v * v).sum::<T>() / nf;
            let s = T::one() / (ms + eps).sqrt();
            inv[r] = s;
            for ((o, &v), &w) in yr.iter_mut().zip(xr).zip(gv.data()) {
                *o = v * s * w;
            }
        }
        let out = Tensor::new(xv.shape(), y)?;
        self.custom("rmsnorm", &[x, gain], out, move |g, sink| {
            let wants_x = sink.wants(x);
            if let Some(gg) = sink.grad_mut(gain) {
                for ((gr, xr), &s) in g.data().chunks(n).zip(xv.data().chunks(n)).zip(&inv) {
                    for ((o, &d), &v) in gg.iter_mut().zip(gr).zip(xr) {
                        *o += d * v * s;
                    }
                }
            }
            if !wants_x {
                return;
            }
            let gx = sink.grad_mut(x).expect("checked above");
            for (((gxr, gr), xr), &s) in gx
                .chunks_mut(n)
                .zip(g.data().chunks(n))
                .zip(xv.data().chunks(n))
                .zip(&inv)
            {
                // dx = s * (dxhat - xhat * mean(dxhat * xhat)), dxhat = dy * gain
                let mean: T = gr
                    .iter()
                    .zip(xr)
                    .zip(gv.data())
                    .map(|((&d, &v), &w)| d * w * v * s)
                    .sum::<T>()
                    / nf;
                for (((o, &d), &v), &w) in gxr.iter_mut().zip(gr).zip(xr).zip(gv.data()) {
                    *o += s * (d * w - v * s * mean);
                }
            }
        })
    }

    /// Gated linear unit: splits `axis` into halves `a | b` and returns
    /// `a * sigmoid(b)`.
    pub fn glu(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("glu", xv.shape(), axis)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        if n % 2 != 0 {
            return Err(invalid("glu", format!("axis length {n} is odd")));
        }
        let h = n / 2;
        let mut shape = xv.shape().to_vec();
        shape[axis] = h;
        let xd = xv.data();
        let mut y = vec![T::zero(); outer * h * inner];
        for o in 0..outer {
            for j in 0..h {
                for i in 0..inner {
                    let a = xd[o * n * inner + j * inner + i];
                    let b = xd[o * n * inner + (j + h) * inner + i];
                    y[o * h * inner + j * inner + i] = a * sigmoid(b);
                }
            }
        }
        let out = Tensor::new(&shape, y)?;
        self.custom("glu", &[x], out, move |g, sink| {
            let Some(gx) = sink.grad_mut(x) else { return };
            let (xd, gd) = (xv.data(), g.data());
            for o in 0..outer {
                for j in 0..h {
                    for i in 0..inner {
                        let ia = o * n * inner + j * inner + i;
                        let ib = o * n * inner + (j + h) * inner + i;
                        let d = gd[o * h * inner + j * inner + i];
                        let s = sigmoid(xd[ib]);
                        gx[ia] += d * s;
                        gx[ib] += d * xd[ia] * s * (T::one() - s);
                    }
                }
            }
        })
    }

    /// Inverted dropout. The identity outside training mode or at rate 0.
    pub fn dropout(&self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !self.is_training() || rate == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = self.with_rng(|rng| {
            (0..xv.len())
                .map(|_| {
                    if rng.random::<f64>() < rate {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect()
        });
        let mask = Arc::new(Tensor::new(xv.shape(), mask)?);
        self.mul_const(x, mask)
    }

    /// Adaptive average pooling of `axis` down (or up) to `target` positions.
    ///
    /// Output position `i` averages the input range
    /// `floor(i * n / target) .. ceil((i + 1) * n / target)`, which partitions
    /// the axis whenever `target` divides `n`.
    pub fn mean_pool(&self, x: Var, axis: usize, target: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("mean_pool", xv.shape(), axis)?;
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        if target == 0 || n == 0 {
            return Err(invalid("mean_pool", "empty axis or target"));
        }
        if target == n {
            return Ok(x);
        }
        let ranges: Arc<Vec<(usize, usize)>> = Arc::new(
            (0..target)
                .map(|i| (i * n / target, ((i + 1) * n).div_ceil(target)))
                .collect(),
        );
        let mut shape = xv.shape().to_vec();
        shape[axis] = target;
        let xd = xv.data();
        let mut y = vec![T::zero(); outer * target * inner];
        for o in 0..outer {
            for (j, &(s, e)) in ranges.iter().enumerate() {
                let w = T::one() / T::of((e - s) as f64);
                for i in 0..inner {
                    let acc: T = (s..e).map(|t| xd[o * n * inner + t * inner + i]).sum();
                    y[o * target * inner + j * inner + i] = acc * w;
                }
            }
        }
        let out = Tensor::new(&shape, y)?;
        self.custom("mean_pool", &[x], out, move |g, sink| {
            let Some(gx) = sink.grad_mut(x) else { return };
            let gd = g.data();
            for o in 0..outer {
                for (j, &(s, e)) in ranges.iter().enumerate() {
                    let w = T::one() / T::of((e - s) as f64);
                    for i in 0..inner {
                        let d = gd[o * target * inner + j * inner + i] * w;
                        for t in s..e {
                            gx[o * n * inner + t * inner + i] += d;
                        }
                    }
                }
            }
        })
    }

    /// Mean absolute difference to a fixed target.
    pub fn l1_loss(&self, x: Var, target: Arc<Tensor<T>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() || xv.is_empty() {
            return Err(AutogradError::ShapeMismatch {
                op: "l1_loss",
                lhs: xv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let nf = T::of(xv.len() as f64);
        let total: T = accurate_sum(xv.data().iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()));
        let out = Tensor::scalar(total / nf);
        self.custom("l1_loss", &[x], out, move |g, sink| {
            let Some(gx) = sink.grad_mut(x) else { return };
            let d = g.item() / nf;
            for ((o, &a), &b) in gx.iter_mut().zip(xv.data()).zip(target.data()) {
                *o += d * super::elementwise::sign(a - b);
            }
        })
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and 0/1 targets,
    /// evaluated in the numerically stable logit form.
    pub fn bce_with_logits(&self, logits: Var, target: Arc<Tensor<T>>) -> Result<Var> {
        let xv = self.value(logits);
        if xv.shape() != target.shape() || xv.is_empty() {
            return Err(AutogradError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: xv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let nf = T::of(xv.len() as f64);
        let total: T = accurate_sum(
            xv.data()
                .iter()
                .zip(target.data())
                .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln()),
        );
        let out = Tensor::scalar(total / nf);
        self.custom("bce_with_logits", &[logits], out, move |g, sink| {
            let Some(gx) = sink.grad_mut(logits) else { return };
            let d = g.item() / nf;
            for ((o, &z), &y) in gx.iter_mut().zip(xv.data()).zip(target.data()) {
                *o += d * (sigmoid(z) - y);
            }
        })
    }
}
