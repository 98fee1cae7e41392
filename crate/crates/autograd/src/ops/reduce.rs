use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Graph<T> {
    pub fn sum(&self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.custom("sum", &[x], out, move |g, sink| {
            if let Some(gx) = sink.grad_mut(x) {
                let d = g.item();
                gx.iter_mut().for_each(|o| *o += d);
            }
        })
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sum of several scalars.
    pub fn add_all(&self, xs: &[Var]) -> Result<Var> {
        let mut it = xs.iter();
        let Some(&first) = it.next() else {
            return Err(invalid("add_all", "no inputs"));
        };
        it.try_fold(first, |acc, &v| self.add(acc, v))
    }
}
