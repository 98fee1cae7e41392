use std::f64::consts::PI;

use super::AudioSignal;
use crate::error::{CoreError, Result};

const TAPS: usize = 64;
const HALF: f64 = (TAPS / 2) as f64;
/// Cutoff as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.95;
/// Phase tables larger than this are evaluated on the fly instead.
const MAX_TABLE_PHASES: u64 = 4096;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn blackman(d: f64) -> f64 {
    let x = PI * d / HALF;
    0.42 + 0.5 * x.cos() + 0.08 * (2.0 * x).cos()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Taps for fractional position `frac` in [0, 1): tap `j` weights input
/// sample `base + j - 31`. Normalised to unit DC gain.
fn phase_taps(frac: f64, cutoff: f64) -> [f64; TAPS] {
    let mut h = [0.0; TAPS];
    for (j, v) in h.iter_mut().enumerate() {
        let d = frac + (TAPS / 2 - 1) as f64 - j as f64;
        *v = cutoff * sinc(cutoff * d) * blackman(d);
    }
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= s);
    h
}

/// Band-limited rational-ratio resampling with a 64-tap windowed-sinc
/// polyphase filter. Output length is `round(len * target / source)`.
pub fn resample(signal: &AudioSignal, target_rate: u32) -> Result<AudioSignal> {
    if target_rate == 0 {
        return Err(CoreError::InvalidSignal("target rate must be positive".into()));
    }
    let src = signal.sample_rate();
    if src == target_rate {
        return Ok(signal.clone());
    }
    let g = gcd(src as u64, target_rate as u64);
    let (up, down) = (target_rate as u64 / g, src as u64 / g);
    let cutoff = ROLLOFF * (up as f64 / down as f64).min(1.0);
    let len = signal.len() as u64;
    let out_len = ((len * up + down / 2) / down) as usize;
    let table: Option<Vec<[f64; TAPS]>> = (up <= MAX_TABLE_PHASES)
        .then(|| (0..up).map(|p| phase_taps(p as f64 / up as f64, cutoff)).collect());
    let channels = signal
        .channels()
        .iter()
        .map(|x| {
            (0..out_len as u64)
                .map(|n| {
                    let pos = n * down;
                    let (base, phase) = ((pos / up) as i64, pos % up);
                    let owned;
                    let h = match &table {
                        Some(t) => &t[phase as usize],
                        None => {
                            owned = phase_taps(phase as f64 / up as f64, cutoff);
                            &owned
                        }
                    };
                    let mut acc = 0.0f64;
                    for (j, &w) in h.iter().enumerate() {
                        let k = base + j as i64 - (TAPS / 2 - 1) as i64;
                        if k >= 0 && (k as usize) < x.len() {
                            acc += w * x[k as usize] as f64;
                        }
                    }
                    acc as f32
                })
                .collect()
        })
        .collect();
    AudioSignal::new(channels, target_rate)
}
