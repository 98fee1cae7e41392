//! Synthetic training material: sine-sweep "vocals", band-passed noise
//! "accompaniment" and harmonic melody clips with known notes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dsp::AudioSignal;
use crate::error::Result;
use crate::pipeline::NoteEvent;

/// Raised-cosine fade of `ramp` samples at both ends of `[start, end)`.
fn envelope(n: usize, start: usize, end: usize, ramp: usize) -> f64 {
    if n < start || n >= end {
        return 0.0;
    }
    let r = ramp.max(1) as f64;
    let a = ((n - start) as f64 / r).min(1.0);
    let b = ((end - n) as f64 / r).min(1.0);
    let x = a.min(b);
    0.5 - 0.5 * (PI * x).cos()
}

/// Harmonic tone following a piecewise exponential pitch sweep, gated into
/// syllables of 0.3–0.6 s separated by 0.05–0.15 s pauses.
pub fn sweep_vocal(rng: &mut impl Rng, sample_rate: u32, len: usize) -> AudioSignal {
    let sr = sample_rate as f64;
    let mut out = vec![0.0f32; len];
    let mut phase = 0.0f64;
    let mut n = 0usize;
    let mut f0 = rng.random_range(200.0..700.0);
    while n < len {
        let note = (rng.random_range(0.3..0.6) * sr) as usize;
        let gap = (rng.random_range(0.05..0.15) * sr) as usize;
        let f1: f64 = rng.random_range(200.0..700.0);
        let end = (n + note).min(len);
        for i in n..end {
            let frac = (i - n) as f64 / note as f64;
            let f = f0 * (f1 / f0).powf(frac);
            phase += 2.0 * PI * f / sr;
            let tone = phase.sin() + 0.5 * (2.0 * phase).sin() + 0.25 * (3.0 * phase).sin();
            out[i] = (0.25 * envelope(i, n, end, (0.02 * sr) as usize) * tone) as f32;
        }
        f0 = f1;
        n = end + gap;
    }
    AudioSignal::mono(out, sample_rate).expect("mono signal")
}

/// Second-order band-pass (constant 0 dB peak gain).
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn band_pass(center: f64, q: f64, sample_rate: f64) -> Self {
        let w = 2.0 * PI * center / sample_rate;
        let alpha = w.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [-2.0 * w.cos() / a0, (1.0 - alpha) / a0],
        }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&v| {
                let y = self.b[0] * v + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                (x2, x1, y2, y1) = (x1, v, y1, y);
                y
            })
            .collect()
    }
}

/// Gaussian noise through a band-pass section centred between 2.5 and 4 kHz,
/// scaled to RMS 0.1.
pub fn filtered_noise(rng: &mut impl Rng, sample_rate: u32, len: usize) -> AudioSignal {
    let sr = sample_rate as f64;
    let center = rng.random_range(2500.0..4000.0f64).min(0.4 * sr);
    let white: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let bp = Biquad::band_pass(center, 0.8, sr);
    let y = bp.run(&white);
    let rms = (y.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    let gain = if rms > 0.0 { 0.1 / rms } else { 0.0 };
    AudioSignal::mono(y.iter().map(|v| (v * gain) as f32).collect(), sample_rate).expect("mono signal")
}

/// `count` (mixture, vocal) pairs of `seconds` each.
pub fn toy_separation_set(seed: u64, count: usize, sample_rate: u32, seconds: f64) -> Result<Vec<(AudioSignal, AudioSignal)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (seconds * sample_rate as f64).round() as usize;
    (0..count)
        .map(|_| {
            let vocal = sweep_vocal(&mut rng, sample_rate, len);
            let acc = filtered_noise(&mut rng, sample_rate, len);
            Ok((vocal.mix(&acc)?, vocal))
        })
        .collect()
}

/// Monophonic melody of harmonic tones with its note list. Pitches lie in
/// MIDI 55..=79, notes last 0.2–0.5 s with 0.06–0.2 s rests, and note
/// boundaries fall on the 20 ms grid.
pub fn melody_clip(rng: &mut impl Rng, sample_rate: u32, seconds: f64) -> (AudioSignal, Vec<NoteEvent>) {
    let sr = sample_rate as f64;
    let len = (seconds * sr).round() as usize;
    let grid = |s: f64| (s * 50.0).round() / 50.0;
    let mut notes = Vec::new();
    let mut t = grid(rng.random_range(0.1..0.3));
    loop {
        let dur = grid(rng.random_range(0.2..0.5));
        if t + dur > seconds - 0.1 {
            break;
        }
        notes.push(NoteEvent {
            onset: t,
            offset: t + dur,
            pitch: rng.random_range(55..=79),
        });
        t = grid(t + dur + rng.random_range(0.06..0.2));
    }
    let mut out = vec![0.0f64; len];
    for n in &notes {
        let f = 440.0 * 2f64.powf((n.pitch - 69) as f64 / 12.0);
        let (s, e) = ((n.onset * sr).round() as usize, ((n.offset * sr).round() as usize).min(len));
        for (i, o) in out.iter_mut().enumerate().take(e).skip(s) {
            let p = 2.0 * PI * f * (i - s) as f64 / sr;
            let tone = p.sin() + 0.4 * (2.0 * p).sin() + 0.2 * (3.0 * p).sin();
            *o += 0.25 * envelope(i, s, e, (0.005 * sr) as usize) * tone;
        }
    }
    let audio = AudioSignal::mono(out.iter().map(|&v| v as f32).collect(), sample_rate).expect("mono signal");
    (audio, notes)
}

/// `count` melody clips of `seconds` each.
pub fn toy_transcription_set(seed: u64, count: usize, sample_rate: u32, seconds: f64) -> Vec<(AudioSignal, Vec<NoteEvent>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| melody_clip(&mut rng, sample_rate, seconds)).collect()
}
