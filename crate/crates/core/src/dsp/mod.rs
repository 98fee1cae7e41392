//! Signal containers, STFT/iSTFT, resampling and WAV I/O.

mod diff;
mod resample;
mod stft;
mod wav;

pub use diff::{istft_var, stft_var};
pub use resample::resample;
pub use stft::{istft, stft, ComplexSpectrogram, StftConfig, StftPlan, Window};
pub use wav::{read_wav, write_wav, WavFormat};

use crate::error::{CoreError, Result};

/// Multichannel audio at a fixed sample rate. Channels always have equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    channels: Vec<Vec<f32>>,
    sample_rate: u32,
}

impl AudioSignal {
    pub fn new(channels: Vec<Vec<f32>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(CoreError::InvalidSignal("sample rate must be positive".into()));
        }
        if !(1..=2).contains(&channels.len()) {
            return Err(CoreError::InvalidSignal(format!(
                "expected 1 or 2 channels, got {}",
                channels.len()
            )));
        }
        if channels.iter().any(|c| c.len() != channels[0].len()) {
            return Err(CoreError::InvalidSignal("channels differ in length".into()));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn silence(num_channels: usize, len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![vec![0.0; len]; num_channels], sample_rate)
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    pub fn channels_mut(&mut self) -> &mut [Vec<f32>] {
        &mut self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f32>> {
        self.channels
    }

    /// Samples `[start, start + len)`, zero-padded past the end.
    pub fn segment(&self, start: usize, len: usize) -> AudioSignal {
        let channels = self
            .channels
            .iter()
            .map(|c| (start..start + len).map(|i| c.get(i).copied().unwrap_or(0.0)).collect())
            .collect();
        AudioSignal {
            channels,
            sample_rate: self.sample_rate,
        }
    }

    pub fn scaled(&self, gain: f32) -> AudioSignal {
        let channels = self
            .channels
            .iter()
            .map(|c| c.iter().map(|&v| v * gain).collect())
            .collect();
        AudioSignal {
            channels,
            sample_rate: self.sample_rate,
        }
    }

    /// Sample-wise sum; both signals must share rate, channel count and length.
    pub fn mix(&self, other: &AudioSignal) -> Result<AudioSignal> {
        self.check_compatible(other)?;
        let channels = self
            .channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x + y).collect())
            .collect();
        Ok(AudioSignal {
            channels,
            sample_rate: self.sample_rate,
        })
    }

    pub fn check_compatible(&self, other: &AudioSignal) -> Result<()> {
        if self.sample_rate != other.sample_rate
            || self.num_channels() != other.num_channels()
            || self.len() != other.len()
        {
            return Err(CoreError::InvalidSignal(format!(
                "incompatible signals: {} Hz x{} x{} vs {} Hz x{} x{}",
                self.sample_rate,
                self.num_channels(),
                self.len(),
                other.sample_rate,
                other.num_channels(),
                other.len()
            )));
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f32 {
        self.channels
            .iter()
            .flatten()
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Mean of the channels. Returns mono input unchanged.
pub fn downmix_mono(signal: &AudioSignal) -> AudioSignal {
    if signal.num_channels() == 1 {
        return signal.clone();
    }
    let n = signal.num_channels() as f32;
    let mixed = (0..signal.len())
        .map(|i| signal.channels.iter().map(|c| c[i]).sum::<f32>() / n)
        .collect();
    AudioSignal {
        channels: vec![mixed],
        sample_rate: signal.sample_rate,
    }
}
