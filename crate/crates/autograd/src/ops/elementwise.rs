use std::sync::Arc;

use crate::error::{AutogradError, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(AutogradError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    fn unary(
        &self,
        op: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        // derivative expressed through (input, output)
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.map(f);
        let yv = Arc::new(out.clone());
        self.custom(op, &[x], out, move |g, sink| {
            if let Some(gx) = sink.grad_mut(x) {
                for (((gx, &g), &xi), &yi) in gx
                    .iter_mut()
                    .zip(g.data())
                    .zip(xv.data())
                    .zip(yv.data())
                {
                    *gx += g * df(xi, yi);
                }
            }
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av.shape(), bv.shape())?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape(), data)?;
        self.custom("add", &[a, b], out, move |g, sink| {
            for v in [a, b] {
                if let Some(gv) = sink.grad_mut(v) {
                    gv.iter_mut().zip(g.data()).for_each(|(o, &d)| *o += d);
                }
            }
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("sub", av.shape(), bv.shape())?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(av.shape(), data)?;
        self.custom("sub", &[a, b], out, move |g, sink| {
            if let Some(ga) = sink.grad_mut(a) {
                ga.iter_mut().zip(g.data()).for_each(|(o, &d)| *o += d);
            }
            if let Some(gb) = sink.grad_mut(b) {
                gb.iter_mut().zip(g.data()).for_each(|(o, &d)| *o -= d);
            }
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av.shape(), bv.shape())?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape(), data)?;
        self.custom("mul", &[a, b], out, move |g, sink| {
            if let Some(ga) = sink.grad_mut(a) {
                for ((o, &d), &y) in ga.iter_mut().zip(g.data()).zip(bv.data()) {
                    *o += d * y;
                }
            }
            if let Some(gb) = sink.grad_mut(b) {
                for ((o, &d), &x) in gb.iter_mut().zip(g.data()).zip(av.data()) {
                    *o += d * x;
                }
            }
        })
    }

    /// Elementwise product with a fixed tensor of the same shape.
    pub fn mul_const(&self, a: Var, c: Arc<Tensor<T>>) -> Result<Var> {
        let av = self.value(a);
        same_shape("mul_const", av.shape(), c.shape())?;
        let data = av.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape(), data)?;
        self.custom("mul_const", &[a], out, move |g, sink| {
            if let Some(ga) = sink.grad_mut(a) {
                for ((o, &d), &y) in ga.iter_mut().zip(g.data()).zip(c.data()) {
                    *o += d * y;
                }
            }
        })
    }

    /// Elementwise sum with a fixed tensor of the same shape.
    pub fn add_const(&self, a: Var, c: Arc<Tensor<T>>) -> Result<Var> {
        let av = self.value(a);
        same_shape("add_const", av.shape(), c.shape())?;
        let data = av.data().iter().zip(c.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape(), data)?;
        self.custom("add_const", &[a], out, move |g, sink| {
            if let Some(ga) = sink.grad_mut(a) {
                ga.iter_mut().zip(g.data()).for_each(|(o, &d)| *o += d);
            }
        })
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var> {
        self.unary("scale", a, move |x| x * c, move |_, _| c)
    }

    /// Adds `bias` (length = last dimension of `x`) to every row of `x`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = *xv.shape().last().unwrap_or(&0);
        if bv.len() != n {
            return Err(AutogradError::ShapeMismatch {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut data = xv.data().to_vec();
        if n > 0 {
            for row in data.chunks_mut(n) {
                row.iter_mut().zip(bv.data()).for_each(|(o, &b)| *o += b);
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        self.custom("add_bias", &[x, bias], out, move |g, sink| {
            if let Some(gx) = sink.grad_mut(x) {
                gx.iter_mut().zip(g.data()).for_each(|(o, &d)| *o += d);
            }
            if n > 0 {
                if let Some(gb) = sink.grad_mut(bias) {
                    for row in g.data().chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, &d)| *o += d);
                    }
                }
            }
        })
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(
            "relu",
            x,
            |v| v.max(T::zero()),
            |v, _| if v > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu, gelu_grad)
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        self.unary("abs", x, |v| v.abs(), |v, _| sign(v))
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn gelu_inner<T: Real>(v: T) -> T {
    T::of((2.0 / std::f64::consts::PI).sqrt()) * (v + T::of(0.044715) * v * v * v)
}

fn gelu<T: Real>(v: T) -> T {
    T::of(0.5) * v * (T::one() + gelu_inner(v).tanh())
}

fn gelu_grad<T: Real>(v: T, _: T) -> T {
    let t = gelu_inner(v).tanh();
    let du = T::of((2.0 / std::f64::consts::PI).sqrt()) * (T::one() + T::of(3.0 * 0.044715) * v * v);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * v * (T::one() - t * t) * du
}
