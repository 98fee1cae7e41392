//! Stem-level random remixing.

use rand::Rng;

use crate::dsp::AudioSignal;
use crate::error::{config, Result};

/// Stem pools and draw settings.
#[derive(Clone, Debug)]
pub struct RemixSpec {
    pub vocals: Vec<AudioSignal>,
    pub accompaniments: Vec<AudioSignal>,
    /// Samples per drawn chunk; shorter stems are zero-padded.
    pub chunk_len: usize,
    /// Per-stem uniform gain range; `None` disables loudness augmentation.
    pub gain_range: Option<(f32, f32)>,
}

impl RemixSpec {
    pub fn new(vocals: Vec<AudioSignal>, accompaniments: Vec<AudioSignal>, chunk_len: usize) -> Result<Self> {
        let spec = Self {
            vocals,
            accompaniments,
            chunk_len,
            gain_range: Some((0.5, 1.25)),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let first = match (self.vocals.first(), self.accompaniments.first()) {
            (Some(v), Some(_)) => v,
            _ => return Err(config("remix pools must be non-empty")),
        };
        if self.chunk_len == 0 {
            return Err(config("remix chunk length must be positive"));
        }
        for s in self.vocals.iter().chain(&self.accompaniments) {
            if s.sample_rate() != first.sample_rate() || s.num_channels() != first.num_channels() {
                return Err(config("remix stems must share sample rate and channel count"));
            }
        }
        if let Some((lo, hi)) = self.gain_range {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(config(format!("invalid gain range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Mixture of independently drawn stems with the scaled vocal as target.
#[derive(Clone, Debug, PartialEq)]
pub struct RemixPair {
    pub mixture: AudioSignal,
    pub vocal: AudioSignal,
    pub accompaniment: AudioSignal,
}

fn draw(pool: &[AudioSignal], chunk_len: usize, gain: Option<(f32, f32)>, rng: &mut impl Rng) -> AudioSignal {
    let stem = &pool[rng.random_range(0..pool.len())];
    let start = if stem.len() > chunk_len {
        rng.random_range(0..=stem.len() - chunk_len)
    } else {
        0
    };
    let chunk = stem.segment(start, chunk_len);
    match gain {
        Some((lo, hi)) => chunk.scaled(rng.random_range(lo..=hi)),
        None => chunk,
    }
}

/// Draws one vocal and one accompaniment chunk and sums them.
pub fn random_remix(spec: &RemixSpec, rng: &mut impl Rng) -> Result<RemixPair> {
    spec.validate()?;
    let vocal = draw(&spec.vocals, spec.chunk_len, spec.gain_range, rng);
    let accompaniment = draw(&spec.accompaniments, spec.chunk_len, spec.gain_range, rng);
    let mixture = vocal.mix(&accompaniment)?;
    Ok(RemixPair {
        mixture,
        vocal,
        accompaniment,
    })
}
