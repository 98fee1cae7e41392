//! Model configuration, presets and the assembled network.

use std::fmt;
use std::sync::Arc;

use melrof_autograd::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{istft_var, stft, stft_var, AudioSignal, StftConfig, StftPlan};
use crate::error::{config, CoreError, Result};
use crate::heads::{
    apply_mask_var, assemble_mask_var, embedding_projection_var, frame_logits_var,
    init_embedding_projection, init_transcription_heads, onset_logits_var,
    pool_to_frame_rate_var, Posteriorgram, FRAME_RATE,
};
use crate::melband::{band_project_var, build_mel_band_map, init_band_projection, MelBandMap};
use crate::params::{Bound, ParamStore};
use crate::roformer::{init_interleaved_stack, interleaved_stack_var, EncoderConfig, InterleavedStackConfig};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Separation,
    Transcription,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Separation => "separation",
            Mode::Transcription => "transcription",
        })
    }
}

/// Encoder hyperparameters other than the model width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSettings {
    pub heads: usize,
    pub ffn_multiplier: usize,
    pub dropout: f64,
    pub rope_base: f64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            heads: 8,
            ffn_multiplier: 4,
            dropout: 0.1,
            rope_base: 10000.0,
        }
    }
}

/// Transcription head sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSettings {
    /// Embedding width per band after the head swap.
    pub band_width: usize,
    pub onset_hidden: usize,
    pub onset_dropout: f64,
}

impl Default for HeadSettings {
    fn default() -> Self {
        Self {
            band_width: 64,
            onset_hidden: 512,
            onset_dropout: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub sample_rate: u32,
    pub channels: usize,
    pub stft: StftConfig,
    /// STFT frames per chunk.
    pub chunk_frames: usize,
    pub bands: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub dim: usize,
    pub layers: usize,
    pub encoder: EncoderSettings,
    pub head: HeadSettings,
}

impl ModelConfig {
    /// Stereo 44.1 kHz, 8 s chunks, K=60, D=384, L=12.
    pub fn flagship() -> Self {
        Self {
            mode: Mode::Separation,
            sample_rate: 44100,
            channels: 2,
            stft: StftConfig::hann(2048, 441),
            chunk_frames: 800,
            bands: 60,
            f_min: 0.0,
            f_max: 22050.0,
            dim: 384,
            layers: 12,
            encoder: EncoderSettings::default(),
            head: HeadSettings::default(),
        }
    }

    /// Mono 24 kHz, 6 s chunks, K=32, D=128, L=12.
    pub fn small_24k() -> Self {
        Self {
            mode: Mode::Separation,
            sample_rate: 24000,
            channels: 1,
            stft: StftConfig::hann(1024, 480),
            chunk_frames: 300,
            bands: 32,
            f_min: 0.0,
            f_max: 12000.0,
            dim: 128,
            layers: 12,
            encoder: EncoderSettings::default(),
            head: HeadSettings::default(),
        }
    }

    /// Mono 24 kHz, 6 s chunks, K=32, D=256, L=24.
    pub fn large_24k() -> Self {
        Self {
            dim: 256,
            layers: 24,
            ..Self::small_24k()
        }
    }

    /// 24k-small shape scaled down to D=32, L=2 with 4 heads, for desk-scale training.
    pub fn toy() -> Self {
        Self {
            dim: 32,
            layers: 2,
            encoder: EncoderSettings {
                heads: 4,
                ..EncoderSettings::default()
            },
            ..Self::small_24k()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "flagship" => Ok(Self::flagship()),
            "24k-small" => Ok(Self::small_24k()),
            "24k-large" => Ok(Self::large_24k()),
            "toy" => Ok(Self::toy()),
            other => Err(config(format!(
                "unknown preset {other}; expected flagship, 24k-small, 24k-large or toy"
            ))),
        }
    }

    /// Real and imaginary planes, `2 * channels`.
    pub fn planes(&self) -> usize {
        2 * self.channels
    }

    pub fn chunk_samples(&self) -> usize {
        self.chunk_frames * self.stft.hop_size
    }

    /// STFT frames per second.
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.stft.hop_size as f64
    }

    pub fn stack(&self) -> InterleavedStackConfig {
        InterleavedStackConfig {
            layers: self.layers,
            encoder: EncoderConfig {
                dim: self.dim,
                heads: self.encoder.heads,
                ffn_multiplier: self.encoder.ffn_multiplier,
                dropout: self.encoder.dropout,
                rope_base: self.encoder.rope_base,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.channels) {
            return Err(config(format!("channels must be 1 or 2, got {}", self.channels)));
        }
        if self.chunk_frames == 0 || self.dim == 0 {
            return Err(config("chunk_frames and dim must be positive"));
        }
        if !self.stft.hop_size.is_multiple_of(2) && !self.chunk_frames.is_multiple_of(2) {
            return Err(config("chunk length must be even so chunks overlap by half"));
        }
        if self.head.band_width == 0 || self.head.onset_hidden == 0 || !(0.0..1.0).contains(&self.head.onset_dropout) {
            return Err(config("invalid head settings"));
        }
        self.stft.validate()?;
        self.stack().validate()
    }

    pub fn band_map(&self) -> Result<MelBandMap> {
        build_mel_band_map(self.sample_rate, self.stft.window_size, self.bands, self.f_min, self.f_max)
    }
}

/// True for band projection and encoder parameters.
pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("band_proj.") || name.starts_with("layers.")
}

/// Mel-band RoPE transformer with either a mask head or transcription heads.
pub struct MelRoFormer<T: Scalar = f32> {
    config: ModelConfig,
    map: MelBandMap,
    params: ParamStore<T>,
    backbone_trainable: bool,
    plan: Arc<StftPlan<T>>,
}

impl<T: Scalar> Clone for MelRoFormer<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            map: self.map.clone(),
            params: self.params.clone(),
            backbone_trainable: self.backbone_trainable,
            plan: self.plan.clone(),
        }
    }
}

impl<T: Scalar> fmt::Debug for MelRoFormer<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MelRoFormer")
            .field("config", &self.config)
            .field("parameters", &self.params.count())
            .finish()
    }
}

impl<T: Scalar> MelRoFormer<T> {
    /// Freshly initialised model; parameters are registered in the fixed order
    /// band projection, encoders (time then band per layer), embedding
    /// projection, then transcription heads.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let map = config.band_map()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_band_projection(&mut params, &map, config.planes(), config.dim, &mut rng);
        init_interleaved_stack(&mut params, &config.stack(), &mut rng);
        let mut model = Self::from_parts(config, map, params, true)?;
        model.init_head(&mut rng);
        Ok(model)
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        map: MelBandMap,
        params: ParamStore<T>,
        backbone_trainable: bool,
    ) -> Result<Self> {
        let plan = Arc::new(StftPlan::new(config.stft)?);
        Ok(Self {
            config,
            map,
            params,
            backbone_trainable,
            plan,
        })
    }

    pub(crate) fn init_head(&mut self, rng: &mut ChaCha8Rng) {
        let z = self.z_sizes();
        init_embedding_projection(&mut self.params, self.config.dim, &z, rng);
        if self.config.mode == Mode::Transcription {
            let input = z.iter().sum();
            init_transcription_heads(&mut self.params, input, self.config.head.onset_hidden, rng);
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn band_map(&self) -> &MelBandMap {
        &self.map
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn backbone_trainable(&self) -> bool {
        self.backbone_trainable
    }

    pub fn set_backbone_trainable(&mut self, on: bool) {
        self.backbone_trainable = on;
    }

    /// Whether `name` receives gradients during training.
    pub fn is_trainable(&self, name: &str) -> bool {
        self.backbone_trainable || !is_backbone_param(name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params.count_matching(|n| self.is_trainable(n))
    }

    /// Embedding widths Z_k.
    pub fn z_sizes(&self) -> Vec<usize> {
        (0..self.map.num_bands())
            .map(|k| match self.config.mode {
                Mode::Separation => self.config.planes() * self.map.width(k),
                Mode::Transcription => self.config.head.band_width,
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Result<MelRoFormer<U>> {
        MelRoFormer::from_parts(
            self.config.clone(),
            self.map.clone(),
            self.params.cast(),
            self.backbone_trainable,
        )
    }

    pub fn bind(&self, g: &Graph<T>) -> Bound {
        self.params.bind(g, |n| self.is_trainable(n))
    }

    pub fn stft_plan(&self) -> &Arc<StftPlan<T>> {
        &self.plan
    }

    /// Spectrogram `(C, F, T)` to embeddings `(T, Z)`.
    pub fn embed_var(&self, g: &Graph<T>, params: &Bound, spec: Var) -> Result<Var> {
        let h = band_project_var(g, params, &self.map, spec)?;
        let h = interleaved_stack_var(g, params, h, &self.config.stack())?;
        embedding_projection_var(g, params, h, self.map.num_bands())
    }

    /// Estimated mask `(C, F, T)` for a spectrogram variable.
    pub fn mask_var(&self, g: &Graph<T>, params: &Bound, spec: Var) -> Result<Var> {
        self.require(Mode::Separation)?;
        let y = self.embed_var(g, params, spec)?;
        assemble_mask_var(g, y, &self.map, self.config.planes())
    }

    /// Waveform `(channels, len)` to separated waveform of the same shape.
    pub fn separate_var(&self, g: &Graph<T>, params: &Bound, wave: Var) -> Result<Var> {
        let len = g.shape(wave)[1];
        let spec = stft_var(g, wave, &self.plan)?;
        let mask = self.mask_var(g, params, spec)?;
        let est = apply_mask_var(g, mask, spec)?;
        istft_var(g, est, &self.plan, len)
    }

    /// Waveform to onset `(T_f, 60)` and frame `(T_f, 61)` logits at 50 fps.
    pub fn transcription_logits_var(&self, g: &Graph<T>, params: &Bound, wave: Var) -> Result<(Var, Var)> {
        self.require(Mode::Transcription)?;
        let spec = stft_var(g, wave, &self.plan)?;
        let y = self.embed_var(g, params, spec)?;
        let e = pool_to_frame_rate_var(g, y, self.config.frame_rate(), FRAME_RATE)?;
        let on = onset_logits_var(g, params, e, self.config.head.onset_dropout)?;
        let fr = frame_logits_var(g, params, e)?;
        Ok((on, fr))
    }

    pub(crate) fn require(&self, mode: Mode) -> Result<()> {
        if self.config.mode != mode {
            return Err(CoreError::ModeMismatch {
                expected: mode.to_string(),
                found: self.config.mode.to_string(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_input(&self, x: &AudioSignal) -> Result<()> {
        if x.sample_rate() != self.config.sample_rate || x.num_channels() != self.config.channels {
            return Err(CoreError::InvalidSignal(format!(
                "model expects {} Hz with {} channel(s), got {} Hz with {}",
                self.config.sample_rate,
                self.config.channels,
                x.sample_rate(),
                x.num_channels()
            )));
        }
        Ok(())
    }
}

pub(crate) fn wave_tensor<T: Scalar>(x: &AudioSignal) -> Tensor<T> {
    crate::losses::signal_tensor(x)
}

impl MelRoFormer<f32> {
    /// Inference on one chunk (any length) in eval mode.
    pub fn separate_chunk(&self, chunk: &AudioSignal) -> Result<AudioSignal> {
        self.check_input(chunk)?;
        let g = Graph::new();
        g.disable_grad();
        let params = self.bind(&g);
        let wave = g.constant(wave_tensor::<f32>(chunk));
        let y = self.separate_var(&g, &params, wave)?;
        let y = g.value(y);
        let channels = y.data().chunks(chunk.len()).map(|c| c.to_vec()).collect();
        AudioSignal::new(channels, chunk.sample_rate())
    }

    /// Posteriors for one chunk in eval mode.
    pub fn transcribe_chunk(&self, chunk: &AudioSignal) -> Result<Posteriorgram> {
        self.check_input(chunk)?;
        let g = Graph::new();
        g.disable_grad();
        let params = self.bind(&g);
        let wave = g.constant(wave_tensor::<f32>(chunk));
        let (on, fr) = self.transcription_logits_var(&g, &params, wave)?;
        let on = g.permute(g.sigmoid(on)?, &[1, 0])?;
        let fr = g.permute(g.sigmoid(fr)?, &[1, 0])?;
        Posteriorgram::new(g.value(on).as_ref().clone(), g.value(fr).as_ref().clone())
    }

    /// Spectrogram of a chunk under the model's STFT settings.
    pub fn spectrogram(&self, chunk: &AudioSignal) -> Result<crate::dsp::ComplexSpectrogram> {
        self.check_input(chunk)?;
        stft(chunk, &self.config.stft)
    }
}
