//! Mel-scale band map and the per-band input projection.
//!
//! Each band is the non-zero support of one filter of a Slaney-style,
//! area-normalised triangular Mel filter bank, built with the same floating
//! point steps as `librosa.filters.mel(htk=False, norm="slaney")` so that the
//! bin boundaries agree with that reference bit for bit.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use melrof_autograd::{Graph, Real, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::ComplexSpectrogram;
use crate::error::{config, shape, CoreError, Result};
use crate::params::{linear_bias, linear_weight, ones, Bound, ParamStore};

/// Epsilon inside every RMSNorm denominator.
pub const RMS_EPS: f64 = 1e-8;

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MIN_LOG_HZ {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel >= MIN_LOG_MEL {
        MIN_LOG_HZ * (log_step() * (mel - MIN_LOG_MEL)).exp()
    } else {
        F_SP * mel
    }
}

/// numpy.linspace with endpoint.
fn linspace(start: f64, stop: f64, num: usize) -> Vec<f64> {
    if num == 1 {
        return vec![start];
    }
    let step = (stop - start) / (num - 1) as f64;
    let mut v: Vec<f64> = (0..num).map(|i| i as f64 * step + start).collect();
    v[num - 1] = stop;
    v
}

/// Triangular Slaney filter bank, `num_filters x (n_fft/2 + 1)`, as single precision.
pub fn mel_filter_bank(
    sample_rate: u32,
    n_fft: usize,
    num_filters: usize,
    f_min: f64,
    f_max: f64,
) -> Vec<Vec<f32>> {
    let bins = n_fft / 2 + 1;
    let spacing = 1.0 / (n_fft as f64 * (1.0 / sample_rate as f64));
    let freqs: Vec<f64> = (0..bins).map(|k| k as f64 * spacing).collect();
    let mel_f: Vec<f64> = linspace(hz_to_mel(f_min), hz_to_mel(f_max), num_filters + 2)
        .into_iter()
        .map(mel_to_hz)
        .collect();
    let fdiff: Vec<f64> = mel_f.windows(2).map(|w| w[1] - w[0]).collect();
    (0..num_filters)
        .map(|i| {
            let enorm = 2.0 / (mel_f[i + 2] - mel_f[i]);
            freqs
                .iter()
                .map(|&f| {
                    let lower = -(mel_f[i] - f) / fdiff[i];
                    let upper = (mel_f[i + 2] - f) / fdiff[i + 1];
                    let w = 0.0f64.max(lower.min(upper)) as f32;
                    (w as f64 * enorm) as f32
                })
                .collect()
        })
        .collect()
}

/// K contiguous, overlapping bin ranges `[start, end]` (inclusive) and the
/// per-bin count of bands covering each bin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MelBandMap {
    bands: Vec<(usize, usize)>,
    overlap: Vec<u32>,
    sample_rate: u32,
    n_fft: usize,
}

#[derive(Serialize, Deserialize)]
struct BandMapFile {
    sample_rate: u32,
    n_fft: usize,
    bands: Vec<[usize; 2]>,
}

/// Builds the band map from the binarised filter bank.
pub fn build_mel_band_map(
    sample_rate: u32,
    n_fft: usize,
    num_bands: usize,
    f_min: f64,
    f_max: f64,
) -> Result<MelBandMap> {
    if num_bands == 0 {
        return Err(config("need at least one band"));
    }
    if n_fft < 2 || !n_fft.is_multiple_of(2) {
        return Err(config(format!("n_fft {n_fft} must be even and >= 2")));
    }
    if !(f_min >= 0.0 && f_min < f_max && f_max <= sample_rate as f64 / 2.0) {
        return Err(config(format!(
            "need 0 <= f_min < f_max <= {}, got f_min={f_min}, f_max={f_max}",
            sample_rate as f64 / 2.0
        )));
    }
    let bins = n_fft / 2 + 1;
    let fb = mel_filter_bank(sample_rate, n_fft, num_bands, f_min, f_max);
    let mut bands = Vec::with_capacity(num_bands);
    for (k, row) in fb.iter().enumerate() {
        let first = row.iter().position(|&w| w > 0.0);
        let last = row.iter().rposition(|&w| w > 0.0);
        match (first, last) {
            (Some(s), Some(e)) => bands.push((s, e)),
            _ => {
                return Err(CoreError::EmptyBand {
                    band: k,
                    bands: num_bands,
                    bins,
                })
            }
        }
    }
    MelBandMap::from_bands(bands, sample_rate, n_fft)
}

impl MelBandMap {
    /// Map from explicit ranges; validates bounds and ordering.
    pub fn from_bands(bands: Vec<(usize, usize)>, sample_rate: u32, n_fft: usize) -> Result<Self> {
        let bins = n_fft / 2 + 1;
        if bands.is_empty() {
            return Err(config("band map has no bands"));
        }
        for (k, &(s, e)) in bands.iter().enumerate() {
            if s > e || e >= bins {
                return Err(config(format!("band {k} = [{s}, {e}] invalid for {bins} bins")));
            }
            if k > 0 && s < bands[k - 1].0 {
                return Err(config(format!("band {k} starts before band {}", k - 1)));
            }
        }
        let mut overlap = vec![0u32; bins];
        for &(s, e) in &bands {
            overlap[s..=e].iter_mut().for_each(|c| *c += 1);
        }
        Ok(Self {
            bands,
            overlap,
            sample_rate,
            n_fft,
        })
    }

    pub fn num_bands(&self) -> usize {
        self.bands.len()
    }

    /// One-sided bin count, `n_fft/2 + 1`.
    pub fn bins(&self) -> usize {
        self.overlap.len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn bands(&self) -> &[(usize, usize)] {
        &self.bands
    }

    pub fn band(&self, k: usize) -> (usize, usize) {
        self.bands[k]
    }

    pub fn width(&self, k: usize) -> usize {
        self.bands[k].1 - self.bands[k].0 + 1
    }

    /// Sum of band widths.
    pub fn total_width(&self) -> usize {
        (0..self.num_bands()).map(|k| self.width(k)).sum()
    }

    /// S_f: number of bands containing bin `f`.
    pub fn overlap_count(&self, f: usize) -> u32 {
        self.overlap[f]
    }

    pub fn overlap_counts(&self) -> &[u32] {
        &self.overlap
    }

    pub fn to_json(&self) -> String {
        let mut s = String::new();
        s.push_str("{\n");
        let _ = writeln!(s, "  \"sample_rate\": {},", self.sample_rate);
        let _ = writeln!(s, "  \"n_fft\": {},", self.n_fft);
        s.push_str("  \"bands\": [\n");
        for (k, (a, b)) in self.bands.iter().enumerate() {
            let sep = if k + 1 == self.bands.len() { "" } else { "," };
            let _ = writeln!(s, "    [{a}, {b}]{sep}");
        }
        s.push_str("  ]\n}\n");
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BandMapFile = serde_json::from_str(text)?;
        let bands = file.bands.into_iter().map(|[a, b]| (a, b)).collect();
        Self::from_bands(bands, file.sample_rate, file.n_fft)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Band `k` as a `(C * |F_k|, T)` tensor: row `c * |F_k| + j` holds plane `c`,
/// bin `start + j`.
pub fn slice_band(spec: &ComplexSpectrogram, map: &MelBandMap, k: usize) -> Result<Tensor<f32>> {
    if k >= map.num_bands() {
        return Err(shape(format!("band {k} out of range ({} bands)", map.num_bands())));
    }
    if spec.bins() != map.bins() {
        return Err(shape(format!("spectrogram has {} bins, map has {}", spec.bins(), map.bins())));
    }
    let (s, _) = map.band(k);
    let (c, w, t) = (spec.planes(), map.width(k), spec.frames());
    let mut out = Vec::with_capacity(c * w * t);
    for p in 0..c {
        for j in 0..w {
            let base = (p * spec.bins() + s + j) * t;
            out.extend_from_slice(&spec.data().data()[base..base + t]);
        }
    }
    Ok(Tensor::new(&[c * w, t], out)?)
}

/// Flat indices into a `(C, F, T)` tensor ordered as `(T, C * |F_k|)`, the
/// token-row layout used inside the model.
pub(crate) fn band_token_index(map: &MelBandMap, k: usize, planes: usize, frames: usize) -> Vec<usize> {
    let (s, _) = map.band(k);
    let w = map.width(k);
    let f = map.bins();
    let mut idx = Vec::with_capacity(frames * planes * w);
    for t in 0..frames {
        for c in 0..planes {
            for j in 0..w {
                idx.push((c * f + s + j) * frames + t);
            }
        }
    }
    idx
}

/// Parameter names of band `k`'s projection.
pub fn band_param_names(k: usize) -> [String; 3] {
    [
        format!("band_proj.{k}.norm"),
        format!("band_proj.{k}.weight"),
        format!("band_proj.{k}.bias"),
    ]
}

/// Adds freshly initialised projection parameters (RMSNorm gain, linear
/// weight `(C |F_k|, D)` and bias `(D)`) for every band.
pub fn init_band_projection<T: Real>(
    store: &mut ParamStore<T>,
    map: &MelBandMap,
    planes: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) {
    for k in 0..map.num_bands() {
        let n = planes * map.width(k);
        let [norm, weight, bias] = band_param_names(k);
        store.insert(norm, ones(n));
        store.insert(weight, linear_weight(rng, n, dim));
        store.insert(bias, linear_bias(rng, n, dim));
    }
}

/// Projects a `(C, F, T)` spectrogram variable to `(K, T, D)` band tokens.
pub fn band_project_var<T: Real>(
    g: &Graph<T>,
    params: &Bound,
    map: &MelBandMap,
    spec: Var,
) -> Result<Var> {
    let s = g.shape(spec);
    if s.len() != 3 || s[1] != map.bins() {
        return Err(shape(format!("spectrogram {s:?} does not match {} bins", map.bins())));
    }
    let (planes, frames) = (s[0], s[2]);
    let mut tokens = Vec::with_capacity(map.num_bands());
    for k in 0..map.num_bands() {
        let [norm, weight, bias] = band_param_names(k);
        let idx = Arc::new(band_token_index(map, k, planes, frames));
        let x = g.gather(spec, idx, &[frames, planes * map.width(k)])?;
        let x = g.rmsnorm(x, params.var(&norm)?, T::of(RMS_EPS))?;
        let y = g.linear(x, params.var(&weight)?, Some(params.var(&bias)?))?;
        let d = g.shape(y)[1];
        tokens.push(g.reshape(y, &[1, frames, d])?);
    }
    Ok(g.concat(&tokens, 0)?)
}

/// Plain-tensor band projection returning `(D, K, T)`.
pub fn band_project(
    spec: &ComplexSpectrogram,
    map: &MelBandMap,
    params: &ParamStore<f32>,
) -> Result<Tensor<f32>> {
    let g = Graph::new();
    g.disable_grad();
    let bound = params.bind(&g, |_| false);
    let x = g.constant(spec.data().clone());
    let h = band_project_var(&g, &bound, map, x)?;
    let h = g.permute(h, &[2, 0, 1])?;
    Ok(g.value(h).as_ref().clone())
}
