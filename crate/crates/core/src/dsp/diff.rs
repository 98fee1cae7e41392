use std::sync::Arc;

use melrof_autograd::{Graph, Tensor, Var};

use super::StftPlan;
use crate::error::Result;
use crate::Scalar;

/// Differentiable STFT of a `(channels, len)` signal into `(2 * channels, F, T)`.
pub fn stft_var<T: Scalar>(g: &Graph<T>, x: Var, plan: &Arc<StftPlan<T>>) -> Result<Var> {
    let xv = g.value(x);
    let (ch, len) = (xv.shape()[0], xv.shape()[1]);
    let cfg = *plan.config();
    let (f, frames) = (cfg.bins(), cfg.frames(len));
    let block = 2 * f * frames;
    let mut out = vec![T::zero(); ch * block];
    for (xc, oc) in xv.data().chunks(len).zip(out.chunks_mut(block)) {
        plan.analyze(xc, oc);
    }
    let value = Tensor::new(&[2 * ch, f, frames], out)?;
    let plan = plan.clone();
    Ok(g.custom("stft", &[x], value, move |grad, sink| {
        if let Some(dx) = sink.grad_mut(x) {
            for (gc, dc) in grad.data().chunks(block).zip(dx.chunks_mut(len)) {
                plan.analyze_adjoint(gc, dc);
            }
        }
    })?)
}

/// Differentiable inverse STFT of `(2 * channels, F, T)` into `(channels, len)`.
pub fn istft_var<T: Scalar>(
    g: &Graph<T>,
    spec: Var,
    plan: &Arc<StftPlan<T>>,
    len: usize,
) -> Result<Var> {
    plan.config().validate()?;
    let sv = g.value(spec);
    let (planes, f, frames) = (sv.shape()[0], sv.shape()[1], sv.shape()[2]);
    let ch = planes / 2;
    let block = 2 * f * frames;
    let mut out = vec![T::zero(); ch * len];
    for (sc, oc) in sv.data().chunks(block).zip(out.chunks_mut(len)) {
        plan.synthesize(sc, frames, oc);
    }
    let value = Tensor::new(&[ch, len], out)?;
    let plan = plan.clone();
    Ok(g.custom("istft", &[spec], value, move |grad, sink| {
        if let Some(ds) = sink.grad_mut(spec) {
            for (gc, dc) in grad.data().chunks(len).zip(ds.chunks_mut(block)) {
                plan.synthesize_adjoint(gc, frames, dc);
            }
        }
    })?)
}
