//! Chunked inference, overlap averaging, note decoding and the head swap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{downmix_mono, resample, AudioSignal};
use crate::error::{config, CoreError, Result};
use crate::heads::{pooled_frames, Posteriorgram, FRAME_RATE, LOWEST_MIDI, NUM_PITCHES};
use crate::model::{MelRoFormer, Mode};
use melrof_autograd::Tensor;

/// A transcribed or reference note; times in seconds, pitch as a MIDI number.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub onset: f64,
    pub offset: f64,
    pub pitch: i32,
}

impl NoteEvent {
    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

/// Number of chunks of `chunk_len` at stride `hop` covering `len` samples.
pub fn chunk_count(len: usize, chunk_len: usize, hop: usize) -> usize {
    if len <= chunk_len {
        1
    } else {
        (len - chunk_len).div_ceil(hop) + 1
    }
}

/// Fixed-length chunks starting at multiples of `hop`; the tail is zero-padded.
pub fn chunk(signal: &AudioSignal, chunk_len: usize, hop: usize) -> Result<Vec<AudioSignal>> {
    if chunk_len == 0 || hop == 0 || hop > chunk_len {
        return Err(config(format!("invalid chunking: length {chunk_len}, hop {hop}")));
    }
    Ok((0..chunk_count(signal.len(), chunk_len, hop))
        .map(|i| signal.segment(i * hop, chunk_len))
        .collect())
}

/// Per-sample mean of every chunk covering that sample, truncated to `total_len`.
pub fn deframe(chunks: &[AudioSignal], hop: usize, total_len: usize) -> Result<AudioSignal> {
    let first = chunks.first().ok_or_else(|| config("no chunks to deframe"))?;
    let nch = first.num_channels();
    let mut sum = vec![vec![0.0f64; total_len]; nch];
    let mut count = vec![0u32; total_len];
    for (i, c) in chunks.iter().enumerate() {
        first.check_compatible(c)?;
        let start = i * hop;
        for n in 0..c.len().min(total_len.saturating_sub(start)) {
            count[start + n] += 1;
            for (ch, s) in sum.iter_mut().enumerate() {
                s[start + n] += c.channel(ch)[n] as f64;
            }
        }
    }
    if let Some(n) = count.iter().position(|&c| c == 0) {
        return Err(config(format!("sample {n} is not covered by any chunk")));
    }
    let channels = sum
        .into_iter()
        .map(|s| s.iter().zip(&count).map(|(&v, &c)| (v / c as f64) as f32).collect())
        .collect();
    AudioSignal::new(channels, first.sample_rate())
}

/// Resample and up/down-mix a signal to the model's input format.
pub fn conform(signal: &AudioSignal, model: &MelRoFormer) -> Result<AudioSignal> {
    let cfg = model.config();
    let x = match (signal.num_channels(), cfg.channels) {
        (a, b) if a == b => signal.clone(),
        (_, 1) => downmix_mono(signal),
        _ => AudioSignal::new(vec![signal.channel(0).to_vec(); cfg.channels], signal.sample_rate())?,
    };
    resample(&x, cfg.sample_rate)
}

fn chunk_layout(model: &MelRoFormer) -> (usize, usize) {
    let len = model.config().chunk_samples();
    (len, len / 2)
}

/// Vocal estimate for a whole signal with 50%-overlapping chunks.
pub fn separate(model: &MelRoFormer, mixture: &AudioSignal) -> Result<AudioSignal> {
    model.require(Mode::Separation)?;
    model.check_input(mixture)?;
    if mixture.is_empty() {
        return Err(CoreError::InvalidSignal("empty input".into()));
    }
    let (len, hop) = chunk_layout(model);
    let outs = chunk(mixture, len, hop)?
        .iter()
        .map(|c| model.separate_chunk(c))
        .collect::<Result<Vec<_>>>()?;
    deframe(&outs, hop, mixture.len())
}

/// Overlap-averaged posteriors `(rows, total)` from chunk posteriors `(rows, T_c)`.
fn average_frames(chunks: &[&Tensor<f32>], hop: usize, total: usize) -> Result<Tensor<f32>> {
    let rows = chunks[0].shape()[0];
    let mut sum = vec![0.0f64; rows * total];
    let mut count = vec![0u32; total];
    for (i, c) in chunks.iter().enumerate() {
        let tc = c.shape()[1];
        let start = i * hop;
        for t in 0..tc.min(total.saturating_sub(start)) {
            count[start + t] += 1;
            for r in 0..rows {
                sum[r * total + start + t] += c.data()[r * tc + t] as f64;
            }
        }
    }
    if count.contains(&0) {
        return Err(config("posterior frames not covered by any chunk"));
    }
    let data = (0..rows * total)
        .map(|i| (sum[i] / count[i % total] as f64) as f32)
        .collect();
    Ok(Tensor::new(&[rows, total], data)?)
}

/// Onset and frame posteriors for a whole signal.
pub fn transcribe_posteriors(model: &MelRoFormer, audio: &AudioSignal) -> Result<Posteriorgram> {
    model.require(Mode::Transcription)?;
    model.check_input(audio)?;
    if audio.is_empty() {
        return Err(CoreError::InvalidSignal("empty input".into()));
    }
    let cfg = model.config();
    let (len, hop) = chunk_layout(model);
    let posts = chunk(audio, len, hop)?
        .iter()
        .map(|c| model.transcribe_chunk(c))
        .collect::<Result<Vec<_>>>()?;
    let hop_frames = ((hop as f64 * FRAME_RATE / cfg.sample_rate as f64).round() as usize).max(1);
    let total = pooled_frames(cfg.stft.frames(audio.len()), cfg.frame_rate(), FRAME_RATE);
    let onset = average_frames(&posts.iter().map(|p| &p.onset).collect::<Vec<_>>(), hop_frames, total)?;
    let frame = average_frames(&posts.iter().map(|p| &p.frame).collect::<Vec<_>>(), hop_frames, total)?;
    Posteriorgram::new(onset, frame)
}

/// Posteriors followed by [`decode_notes`] with default thresholds.
pub fn transcribe(model: &MelRoFormer, audio: &AudioSignal) -> Result<Vec<NoteEvent>> {
    let post = transcribe_posteriors(model, audio)?;
    Ok(decode_notes(&post, &DecoderConfig::default()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub onset_threshold: f32,
    pub frame_threshold: f32,
    /// Onset peaks must be local maxima over `±peak_radius` frames.
    pub peak_radius: usize,
    /// Frames from the onset searched for a confident frame posterior.
    pub confirm_frames: usize,
    /// Onsets closer than this many frames to an accepted one are rejected.
    pub min_separation: usize,
    /// Shortest kept note in frames.
    pub min_frames: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            onset_threshold: 0.45,
            frame_threshold: 0.25,
            peak_radius: 2,
            confirm_frames: 3,
            min_separation: 2,
            min_frames: 2,
        }
    }
}

/// Monophonic note list from posteriors, sorted by onset.
///
/// Candidates are onset peaks above the onset threshold confirmed by the
/// frame posterior. They are accepted greedily by decreasing onset posterior,
/// skipping any within `min_separation` frames of an accepted onset. A note
/// ends at the first frame whose posterior drops below the frame threshold,
/// at the next accepted onset, or at the end of the input.
pub fn decode_notes(post: &Posteriorgram, cfg: &DecoderConfig) -> Vec<NoteEvent> {
    let frames = post.frames();
    let mut candidates = Vec::new();
    for p in 0..NUM_PITCHES {
        for t in 0..frames {
            let v = post.onset_at(p, t);
            if v < cfg.onset_threshold {
                continue;
            }
            let lo = t.saturating_sub(cfg.peak_radius);
            let hi = (t + cfg.peak_radius).min(frames - 1);
            let peak = (lo..t).all(|u| post.onset_at(p, u) < v) && (t + 1..=hi).all(|u| post.onset_at(p, u) <= v);
            let confirmed = (t..(t + cfg.confirm_frames).min(frames)).any(|u| post.frame_at(p, u) >= cfg.frame_threshold);
            if peak && confirmed {
                candidates.push((v, t, p));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut accepted: Vec<(usize, usize)> = Vec::new();
    for &(_, t, p) in &candidates {
        if accepted.iter().all(|&(u, _)| t.abs_diff(u) > cfg.min_separation) {
            accepted.push((t, p));
        }
    }
    accepted.sort_unstable();
    let mut notes = Vec::new();
    for (i, &(t, p)) in accepted.iter().enumerate() {
        let limit = accepted.get(i + 1).map_or(frames, |&(u, _)| u);
        let end = (t + 1..limit)
            .find(|&u| post.frame_at(p, u) < cfg.frame_threshold)
            .unwrap_or(limit);
        if end - t >= cfg.min_frames {
            notes.push(NoteEvent {
                onset: t as f64 / post.frame_rate,
                offset: end as f64 / post.frame_rate,
                pitch: LOWEST_MIDI + p as i32,
            });
        }
    }
    notes
}

/// Replace the mask head of a separation model with freshly initialised
/// transcription heads, keeping the band projection and encoders.
pub fn swap_head_for_transcription(model: &MelRoFormer, seed: u64) -> Result<MelRoFormer> {
    model.require(Mode::Separation)?;
    let mut cfg = model.config().clone();
    cfg.mode = Mode::Transcription;
    let mut params = model.params().clone();
    params.remove_matching(|n| !crate::model::is_backbone_param(n));
    let mut out = MelRoFormer::from_parts(cfg, model.band_map().clone(), params, true)?;
    out.init_head(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}
