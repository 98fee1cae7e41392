use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioSignal;
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Reads integer PCM (any width hound supports) or 32-bit float WAV.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioSignal> {
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    let nch = spec.channels as usize;
    if !(1..=2).contains(&nch) {
        return Err(CoreError::InvalidSignal(format!("{nch} channels; only mono and stereo are supported")));
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>()?,
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()?
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / nch); nch];
    for frame in interleaved.chunks_exact(nch) {
        for (c, &v) in channels.iter_mut().zip(frame) {
            c.push(v);
        }
    }
    AudioSignal::new(channels, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, signal: &AudioSignal, format: WavFormat) -> Result<()> {
    let (bits, sample_format) = match format {
        WavFormat::Pcm16 => (16, SampleFormat::Int),
        WavFormat::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec {
        channels: signal.num_channels() as u16,
        sample_rate: signal.sample_rate(),
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for i in 0..signal.len() {
        for c in signal.channels() {
            match format {
                WavFormat::Pcm16 => {
                    let v = (c[i] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(v)?;
                }
                WavFormat::Float32 => writer.write_sample(c[i])?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}
