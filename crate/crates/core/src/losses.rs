//! Multi-resolution separation loss and the summed onset/frame BCE loss.

use std::sync::Arc;

use melrof_autograd::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dsp::{stft_var, AudioSignal, StftConfig, StftPlan};
use crate::error::{config, shape, CoreError, Result};
use crate::heads::{Posteriorgram, LOWEST_MIDI, NON_PITCH_ROW, NUM_FRAME_CLASSES, NUM_PITCHES};
use crate::pipeline::NoteEvent;
use crate::Scalar;

/// Window sizes and frame rates of the spectral loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiResLossConfig {
    pub window_sizes: Vec<usize>,
    /// Frames per second; hop = round(sample_rate / rate).
    pub frame_rates: Vec<f64>,
}

impl Default for MultiResLossConfig {
    fn default() -> Self {
        Self {
            window_sizes: vec![4096, 2048, 1024, 512, 256],
            frame_rates: vec![100.0, 300.0],
        }
    }
}

impl MultiResLossConfig {
    /// Every `(window, hop)` pair for a sample rate, window-major.
    pub fn resolutions(&self, sample_rate: u32) -> Result<Vec<StftConfig>> {
        let mut out = Vec::new();
        for &w in &self.window_sizes {
            for &r in &self.frame_rates {
                if r <= 0.0 {
                    return Err(config(format!("frame rate {r} must be positive")));
                }
                let hop = (sample_rate as f64 / r).round() as usize;
                let cfg = StftConfig::hann(w, hop.max(1));
                cfg.validate_analysis()?;
                out.push(cfg);
            }
        }
        Ok(out)
    }
}

/// Precomputed STFT plans for one sample rate.
pub struct SeparationLoss<T: Scalar> {
    plans: Vec<Arc<StftPlan<T>>>,
}

/// Target waveform `(channels, len)` and its spectra at every resolution.
pub struct LossTarget<T> {
    pub wave: Arc<Tensor<T>>,
    pub spectra: Vec<Arc<Tensor<T>>>,
}

impl<T: Scalar> SeparationLoss<T> {
    pub fn new(cfg: &MultiResLossConfig, sample_rate: u32) -> Result<Self> {
        let plans = cfg
            .resolutions(sample_rate)?
            .into_iter()
            .map(|c| StftPlan::new(c).map(Arc::new))
            .collect::<Result<_>>()?;
        Ok(Self { plans })
    }

    pub fn target(&self, wave: Tensor<T>) -> Result<LossTarget<T>> {
        let g = Graph::new();
        g.disable_grad();
        let x = g.constant(wave);
        let spectra = self
            .plans
            .iter()
            .map(|p| Ok(g.value(stft_var(&g, x, p)?)))
            .collect::<Result<_>>()?;
        Ok(LossTarget {
            wave: g.value(x),
            spectra,
        })
    }

    /// Time-domain MAE plus the MAE of real/imaginary planes at every resolution.
    pub fn loss_var(&self, g: &Graph<T>, est: Var, target: &LossTarget<T>) -> Result<Var> {
        if g.shape(est) != target.wave.shape() {
            return Err(shape(format!(
                "estimate {:?} vs target {:?}",
                g.shape(est),
                target.wave.shape()
            )));
        }
        let mut terms = vec![g.l1_loss(est, target.wave.clone())?];
        for (plan, spec) in self.plans.iter().zip(&target.spectra) {
            let s = stft_var(g, est, plan)?;
            terms.push(g.l1_loss(s, spec.clone())?);
        }
        Ok(g.add_all(&terms)?)
    }
}

pub(crate) fn signal_tensor<T: Scalar>(x: &AudioSignal) -> Tensor<T> {
    let data = x.channels().iter().flatten().map(|&v| T::of(v as f64)).collect();
    Tensor::new(&[x.num_channels(), x.len()], data).expect("channels have equal length")
}

/// Separation loss between two signals, evaluated in double precision.
pub fn separation_loss(est: &AudioSignal, target: &AudioSignal, cfg: &MultiResLossConfig) -> Result<f64> {
    est.check_compatible(target)?;
    let loss = SeparationLoss::<f64>::new(cfg, target.sample_rate())?;
    let t = loss.target(signal_tensor(target))?;
    let g = Graph::new();
    g.disable_grad();
    let e = g.constant(signal_tensor::<f64>(est));
    let l = loss.loss_var(&g, e, &t)?;
    Ok(g.value(l).item())
}

/// Binary onset `(60, T_f)` and frame `(61, T_f)` targets.
#[derive(Clone, Debug, PartialEq)]
pub struct NoteTargets {
    pub onset_roll: Tensor<f32>,
    pub frame_roll: Tensor<f32>,
}

impl NoteTargets {
    /// Rolls on a `frame_rate` grid: onset/offset rounded to the nearest frame,
    /// one onset frame per note, frame rows active on `[onset, offset)`.
    pub fn from_notes(notes: &[NoteEvent], frames: usize, frame_rate: f64) -> Result<Self> {
        let mut onset = vec![0.0f32; NUM_PITCHES * frames];
        let mut frame = vec![0.0f32; NUM_FRAME_CLASSES * frames];
        for n in notes {
            let row = n.pitch - LOWEST_MIDI;
            if !(0..NUM_PITCHES as i32).contains(&row) {
                return Err(CoreError::InvalidConfig(format!("pitch {} outside MIDI 36..=95", n.pitch)));
            }
            let row = row as usize;
            let on = (n.onset * frame_rate).round() as i64;
            let off = ((n.offset * frame_rate).round() as i64).max(on + 1).min(frames as i64);
            if on >= frames as i64 || off <= 0 {
                continue;
            }
            // Notes cut by the start of a crop keep their frames but no onset.
            if on >= 0 {
                onset[row * frames + on as usize] = 1.0;
            }
            for t in on.max(0) as usize..off as usize {
                frame[row * frames + t] = 1.0;
            }
        }
        for t in 0..frames {
            let active = (0..NUM_PITCHES).any(|p| frame[p * frames + t] > 0.0);
            frame[NON_PITCH_ROW * frames + t] = if active { 0.0 } else { 1.0 };
        }
        let targets = Self {
            onset_roll: Tensor::new(&[NUM_PITCHES, frames], onset)?,
            frame_roll: Tensor::new(&[NUM_FRAME_CLASSES, frames], frame)?,
        };
        targets.validate()?;
        Ok(targets)
    }

    pub fn frames(&self) -> usize {
        self.onset_roll.shape()[1]
    }

    /// Binary values, at most one pitch per frame, non-pitch row active iff no pitch is.
    pub fn validate(&self) -> Result<()> {
        let (so, sf) = (self.onset_roll.shape(), self.frame_roll.shape());
        if so != [NUM_PITCHES, so[1]] || sf != [NUM_FRAME_CLASSES, so[1]] {
            return Err(shape(format!("target rolls {so:?} / {sf:?}")));
        }
        let binary = |t: &Tensor<f32>| t.data().iter().all(|&v| v == 0.0 || v == 1.0);
        if !binary(&self.onset_roll) || !binary(&self.frame_roll) {
            return Err(CoreError::InvalidConfig("targets must be 0 or 1".into()));
        }
        let frames = so[1];
        for t in 0..frames {
            let pitches = (0..NUM_PITCHES)
                .filter(|&p| self.frame_roll.data()[p * frames + t] > 0.0)
                .count();
            let silent = self.frame_roll.data()[NON_PITCH_ROW * frames + t] > 0.0;
            if pitches > 1 || silent == (pitches == 1) {
                return Err(CoreError::InvalidConfig(format!("frame {t} is not monophonic")));
            }
        }
        Ok(())
    }

    /// `(T_f, 60)` and `(T_f, 61)` transposes matching the logit layout.
    pub(crate) fn time_major<T: Scalar>(&self) -> (Tensor<T>, Tensor<T>) {
        let tr = |x: &Tensor<f32>| {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            Tensor::from_fn(&[c, r], |i| T::of(x.data()[(i % r) * c + i / r] as f64))
        };
        (tr(&self.onset_roll), tr(&self.frame_roll))
    }
}

/// Summed mean BCE of the two heads from logits `(T_f, 60)` and `(T_f, 61)`.
pub fn transcription_loss_var<T: Scalar>(
    g: &Graph<T>,
    onset_logits: Var,
    frame_logits: Var,
    targets: &NoteTargets,
) -> Result<Var> {
    let (on, fr) = targets.time_major::<T>();
    if g.shape(onset_logits) != on.shape() || g.shape(frame_logits) != fr.shape() {
        return Err(shape(format!(
            "logits {:?}/{:?} vs targets {:?}/{:?}",
            g.shape(onset_logits),
            g.shape(frame_logits),
            on.shape(),
            fr.shape()
        )));
    }
    let a = g.bce_with_logits(onset_logits, Arc::new(on))?;
    let b = g.bce_with_logits(frame_logits, Arc::new(fr))?;
    Ok(g.add(a, b)?)
}

/// Summed mean BCE from posteriors, clamped to `[1e-7, 1 - 1e-7]`.
pub fn transcription_loss(post: &Posteriorgram, targets: &NoteTargets) -> Result<f64> {
    targets.validate()?;
    if post.onset.shape() != targets.onset_roll.shape() || post.frame.shape() != targets.frame_roll.shape() {
        return Err(shape("posteriorgram and targets differ in shape"));
    }
    let bce = |p: &Tensor<f32>, y: &Tensor<f32>| {
        let total: f64 = p
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &y)| {
                let p = (p as f64).clamp(1e-7, 1.0 - 1e-7);
                -(y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln())
            })
            .sum();
        total / p.len() as f64
    };
    Ok(bce(&post.onset, &targets.onset_roll) + bce(&post.frame, &targets.frame_roll))
}
