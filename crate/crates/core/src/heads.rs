//! Output side of the model: per-band embedding MLPs, mask assembly and
//! application, frame-rate pooling and the onset/frame predictors.

use melrof_autograd::{Graph, Real, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::dsp::ComplexSpectrogram;
use crate::error::{shape, Result};
use crate::melband::{MelBandMap, RMS_EPS};
use crate::params::{linear_bias, linear_weight, ones, Bound, ParamStore};

/// Onset classes, MIDI 36 (C2) to 95 (B6).
pub const NUM_PITCHES: usize = 60;
pub const LOWEST_MIDI: i32 = 36;
/// Frame classes: the 60 pitches followed by one non-pitch class.
pub const NUM_FRAME_CLASSES: usize = NUM_PITCHES + 1;
pub const NON_PITCH_ROW: usize = NUM_PITCHES;
/// Per-band embedding width in transcription mode.
pub const TRANSCRIPTION_Z: usize = 64;
pub const ONSET_HIDDEN: usize = 512;
pub const ONSET_DROPOUT: f64 = 0.5;
/// Posteriorgram frame rate (frames per second).
pub const FRAME_RATE: f64 = 50.0;

pub fn embedding_param_names(k: usize) -> [String; 5] {
    ["norm", "w1", "b1", "w2", "b2"].map(|n| format!("emb.{k}.{n}"))
}

/// Per-band MLP: RMSNorm, `D -> 4D`, tanh, `4D -> 2 Z_k`, GLU.
pub fn init_embedding_projection<T: Real>(
    store: &mut ParamStore<T>,
    dim: usize,
    z_sizes: &[usize],
    rng: &mut ChaCha8Rng,
) {
    for (k, &z) in z_sizes.iter().enumerate() {
        let [norm, w1, b1, w2, b2] = embedding_param_names(k);
        store.insert(norm, ones(dim));
        store.insert(w1, linear_weight(rng, dim, 4 * dim));
        store.insert(b1, linear_bias(rng, dim, 4 * dim));
        store.insert(w2, linear_weight(rng, 4 * dim, 2 * z));
        store.insert(b2, linear_bias(rng, 4 * dim, 2 * z));
    }
}

/// `(K, T, D)` tokens to `(T, Z)` with band outputs concatenated in band order.
pub fn embedding_projection_var<T: Real>(
    g: &Graph<T>,
    params: &Bound,
    h: Var,
    num_bands: usize,
) -> Result<Var> {
    let s = g.shape(h);
    if s.len() != 3 || s[0] != num_bands {
        return Err(shape(format!("expected ({num_bands}, T, D) tokens, got {s:?}")));
    }
    let (t, d) = (s[1], s[2]);
    let mut outs = Vec::with_capacity(num_bands);
    for k in 0..num_bands {
        let [norm, w1, b1, w2, b2] = embedding_param_names(k);
        let x = g.reshape(g.narrow(h, 0, k, 1)?, &[t, d])?;
        let x = g.rmsnorm(x, params.var(&norm)?, T::of(RMS_EPS))?;
        let x = g.tanh(g.linear(x, params.var(&w1)?, Some(params.var(&b1)?))?)?;
        let x = g.linear(x, params.var(&w2)?, Some(params.var(&b2)?))?;
        outs.push(g.glu(x, 1)?);
    }
    Ok(g.concat(&outs, 1)?)
}

/// Inference-mode embedding projection on a `(D, K, T)` tensor, returning `(Z, T)`.
pub fn embedding_projection<T: Real>(h: &Tensor<T>, params: &ParamStore<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    g.disable_grad();
    let bound = params.bind(&g, |_| false);
    let k = h.shape().get(1).copied().unwrap_or(0);
    let x = g.permute(g.constant(h.clone()), &[1, 2, 0])?;
    let y = embedding_projection_var(&g, &bound, x, k)?;
    let y = g.permute(y, &[1, 0])?;
    Ok(g.value(y).as_ref().clone())
}

/// Estimated complex mask, `(C, F, T)` like the spectrogram it applies to.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTensor {
    data: Tensor<f32>,
}

impl MaskTensor {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        if data.rank() != 3 || !data.shape()[0].is_multiple_of(2) {
            return Err(shape(format!("mask shape {:?}", data.shape())));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn get(&self, plane: usize, bin: usize, frame: usize) -> f32 {
        let s = self.data.shape();
        self.data.data()[(plane * s[1] + bin) * s[2] + frame]
    }
}

/// For each band output column, the `(plane, bin)` it feeds; ordered
/// band-major, then plane, then bin.
fn mask_columns(map: &MelBandMap, planes: usize) -> Vec<(usize, usize)> {
    let mut cols = Vec::with_capacity(planes * map.total_width());
    for k in 0..map.num_bands() {
        let (s, e) = map.band(k);
        for c in 0..planes {
            for f in s..=e {
                cols.push((c, f));
            }
        }
    }
    cols
}

/// Overlap-averaged mask from `(T, Z)` band outputs. Bins no band covers get
/// the pass-through value `1 + 0i`.
pub fn assemble_mask_var<T: Real>(g: &Graph<T>, y: Var, map: &MelBandMap, planes: usize) -> Result<Var> {
    let s = g.shape(y);
    let cols = mask_columns(map, planes);
    if s.len() != 2 || s[1] != cols.len() {
        return Err(shape(format!(
            "band outputs {s:?} do not match Z = {} for {planes} planes",
            cols.len()
        )));
    }
    let (frames, z, f) = (s[0], s[1], map.bins());
    let counts: Vec<T> = map.overlap_counts().iter().map(|&c| T::of(c as f64)).collect();
    let yv = g.value(y);
    let mut out = vec![T::zero(); planes * f * frames];
    for t in 0..frames {
        let row = &yv.data()[t * z..(t + 1) * z];
        for (&(c, bin), &v) in cols.iter().zip(row) {
            out[(c * f + bin) * frames + t] += v;
        }
    }
    for c in 0..planes {
        for bin in 0..f {
            let cell = &mut out[(c * f + bin) * frames..(c * f + bin + 1) * frames];
            if map.overlap_count(bin) == 0 {
                let pass = if c % 2 == 0 { T::one() } else { T::zero() };
                cell.iter_mut().for_each(|v| *v = pass);
            } else {
                cell.iter_mut().for_each(|v| *v /= counts[bin]);
            }
        }
    }
    let value = Tensor::new(&[planes, f, frames], out)?;
    Ok(g.custom("assemble_mask", &[y], value, move |grad, sink| {
        if let Some(gy) = sink.grad_mut(y) {
            for t in 0..frames {
                for (j, &(c, bin)) in cols.iter().enumerate() {
                    gy[t * z + j] += grad.data()[(c * f + bin) * frames + t] / counts[bin];
                }
            }
        }
    })?)
}

/// Plain version of [`assemble_mask_var`] taking `(Z, T)` band outputs.
pub fn assemble_mask(y: &Tensor<f32>, map: &MelBandMap, planes: usize) -> Result<MaskTensor> {
    if y.rank() != 2 {
        return Err(shape(format!("band outputs must be (Z, T), got {:?}", y.shape())));
    }
    let g = Graph::new();
    g.disable_grad();
    let yt = g.permute(g.constant(y.clone()), &[1, 0])?;
    let m = assemble_mask_var(&g, yt, map, planes)?;
    MaskTensor::new(g.value(m).as_ref().clone())
}

fn complex_product<T: Real>(m: &[T], x: &[T], out: &mut [T], block: usize) {
    for ((mc, xc), oc) in m.chunks(2 * block).zip(x.chunks(2 * block)).zip(out.chunks_mut(2 * block)) {
        let (mr, mi) = mc.split_at(block);
        let (xr, xi) = xc.split_at(block);
        let (or, oi) = oc.split_at_mut(block);
        for i in 0..block {
            or[i] = mr[i] * xr[i] - mi[i] * xi[i];
            oi[i] = mr[i] * xi[i] + mi[i] * xr[i];
        }
    }
}

/// Complex product per audio channel of two `(C, F, T)` variables.
pub fn apply_mask_var<T: Real>(g: &Graph<T>, mask: Var, x: Var) -> Result<Var> {
    let (mv, xv) = (g.value(mask), g.value(x));
    if mv.shape() != xv.shape() || mv.rank() != 3 || mv.shape()[0] % 2 != 0 {
        return Err(shape(format!("mask {:?} vs spectrogram {:?}", mv.shape(), xv.shape())));
    }
    let block = mv.shape()[1] * mv.shape()[2];
    let mut out = vec![T::zero(); mv.len()];
    complex_product(mv.data(), xv.data(), &mut out, block);
    let value = Tensor::new(mv.shape(), out)?;
    Ok(g.custom("apply_mask", &[mask, x], value, move |grad, sink| {
        // d/dm of m*x is conj(x) applied to the incoming gradient, and vice versa.
        let conj_times = |other: &[T], dst: &mut [T]| {
            for ((gc, oc), dc) in grad
                .data()
                .chunks(2 * block)
                .zip(other.chunks(2 * block))
                .zip(dst.chunks_mut(2 * block))
            {
                let (gr, gi) = gc.split_at(block);
                let (ar, ai) = oc.split_at(block);
                let (dr, di) = dc.split_at_mut(block);
                for i in 0..block {
                    dr[i] += gr[i] * ar[i] + gi[i] * ai[i];
                    di[i] += gi[i] * ar[i] - gr[i] * ai[i];
                }
            }
        };
        if let Some(gm) = sink.grad_mut(mask) {
            conj_times(xv.data(), gm);
        }
        if let Some(gx) = sink.grad_mut(x) {
            conj_times(mv.data(), gx);
        }
    })?)
}

pub fn apply_mask(mask: &MaskTensor, x: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    if mask.data.shape() != x.data().shape() {
        return Err(shape(format!(
            "mask {:?} vs spectrogram {:?}",
            mask.data.shape(),
            x.data().shape()
        )));
    }
    let block = x.bins() * x.frames();
    let mut out = vec![0.0f32; mask.data.len()];
    complex_product(mask.data.data(), x.data().data(), &mut out, block);
    x.with_data(Tensor::new(x.data().shape(), out)?)
}

/// Number of output frames when pooling `frames` from `source_rate` to `target_rate`.
pub fn pooled_frames(frames: usize, source_rate: f64, target_rate: f64) -> usize {
    ((frames as f64 * target_rate / source_rate).round() as usize).max(1)
}

/// Adaptive average pooling of `(T, Z)` along time.
pub fn pool_to_frame_rate_var<T: Real>(g: &Graph<T>, y: Var, source_rate: f64, target_rate: f64) -> Result<Var> {
    let frames = g.shape(y)[0];
    Ok(g.mean_pool(y, 0, pooled_frames(frames, source_rate, target_rate))?)
}

/// Plain version on a `(Z, T)` tensor.
pub fn pool_to_frame_rate<T: Real>(y: &Tensor<T>, source_rate: f64, target_rate: f64) -> Result<Tensor<T>> {
    if source_rate <= 0.0 || target_rate <= 0.0 || y.rank() != 2 {
        return Err(shape("pooling needs positive rates and a (Z, T) tensor"));
    }
    let g = Graph::new();
    g.disable_grad();
    let frames = y.shape()[1];
    let p = g.mean_pool(g.constant(y.clone()), 1, pooled_frames(frames, source_rate, target_rate))?;
    Ok(g.value(p).as_ref().clone())
}

pub const ONSET_PARAMS: [&str; 4] = ["onset.w1", "onset.b1", "onset.w2", "onset.b2"];
pub const FRAME_PARAMS: [&str; 2] = ["frame.w", "frame.b"];

/// Onset MLP (`64K -> hidden -> 60`) and frame linear layer (`64K -> 61`).
pub fn init_transcription_heads<T: Real>(
    store: &mut ParamStore<T>,
    input: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) {
    let [w1, b1, w2, b2] = ONSET_PARAMS;
    store.insert(w1, linear_weight(rng, input, hidden));
    store.insert(b1, linear_bias(rng, input, hidden));
    store.insert(w2, linear_weight(rng, hidden, NUM_PITCHES));
    store.insert(b2, linear_bias(rng, hidden, NUM_PITCHES));
    let [w, b] = FRAME_PARAMS;
    store.insert(w, linear_weight(rng, input, NUM_FRAME_CLASSES));
    store.insert(b, linear_bias(rng, input, NUM_FRAME_CLASSES));
}

/// Onset logits `(T_f, 60)` from pooled embeddings `(T_f, 64K)`.
pub fn onset_logits_var<T: Real>(g: &Graph<T>, params: &Bound, e: Var, dropout: f64) -> Result<Var> {
    let [w1, b1, w2, b2] = ONSET_PARAMS;
    let h = g.relu(g.linear(e, params.var(w1)?, Some(params.var(b1)?))?)?;
    let h = g.dropout(h, dropout)?;
    Ok(g.linear(h, params.var(w2)?, Some(params.var(b2)?))?)
}

/// Frame logits `(T_f, 61)`.
pub fn frame_logits_var<T: Real>(g: &Graph<T>, params: &Bound, e: Var) -> Result<Var> {
    let [w, b] = FRAME_PARAMS;
    Ok(g.linear(e, params.var(w)?, Some(params.var(b)?))?)
}

fn head_posteriors<T: Real>(
    e: &Tensor<T>,
    params: &ParamStore<T>,
    head: &dyn Fn(&Graph<T>, &Bound, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    if e.rank() != 2 {
        return Err(shape(format!("embeddings must be (64K, T_f), got {:?}", e.shape())));
    }
    let g = Graph::new();
    g.disable_grad();
    let bound = params.bind(&g, |_| false);
    let x = g.permute(g.constant(e.clone()), &[1, 0])?;
    let y = g.sigmoid(head(&g, &bound, x)?)?;
    let y = g.permute(y, &[1, 0])?;
    Ok(g.value(y).as_ref().clone())
}

/// Inference-mode onset posteriors `(60, T_f)` from `(64K, T_f)` embeddings.
pub fn onset_head<T: Real>(e: &Tensor<T>, params: &ParamStore<T>) -> Result<Tensor<T>> {
    head_posteriors(e, params, &|g, p, x| onset_logits_var(g, p, x, ONSET_DROPOUT))
}

/// Inference-mode frame posteriors `(61, T_f)`.
pub fn frame_head<T: Real>(e: &Tensor<T>, params: &ParamStore<T>) -> Result<Tensor<T>> {
    head_posteriors(e, params, &frame_logits_var)
}

/// Onset `(60, T_f)` and frame `(61, T_f)` posteriors at [`FRAME_RATE`].
#[derive(Clone, Debug, PartialEq)]
pub struct Posteriorgram {
    pub onset: Tensor<f32>,
    pub frame: Tensor<f32>,
    pub frame_rate: f64,
}

impl Posteriorgram {
    pub fn new(onset: Tensor<f32>, frame: Tensor<f32>) -> Result<Self> {
        let (so, sf) = (onset.shape(), frame.shape());
        if so.len() != 2 || sf.len() != 2 || so[0] != NUM_PITCHES || sf[0] != NUM_FRAME_CLASSES || so[1] != sf[1] {
            return Err(shape(format!("posteriorgram shapes {so:?} / {sf:?}")));
        }
        Ok(Self {
            onset,
            frame,
            frame_rate: FRAME_RATE,
        })
    }

    pub fn frames(&self) -> usize {
        self.onset.shape()[1]
    }

    pub fn onset_at(&self, pitch_row: usize, t: usize) -> f32 {
        self.onset.data()[pitch_row * self.frames() + t]
    }

    pub fn frame_at(&self, row: usize, t: usize) -> f32 {
        self.frame.data()[row * self.frames() + t]
    }
}
