use std::f64::consts::PI;
use std::sync::Arc;

use melrof_autograd::Tensor;
use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use super::AudioSignal;
use crate::error::{config, CoreError, Result};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// Periodic Hann, `0.5 - 0.5 cos(2 pi n / N)`.
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_size: usize,
    pub hop_size: usize,
    pub window: Window,
    /// Frames centred on `t * hop` with reflect padding at both ends.
    pub center: bool,
}

impl StftConfig {
    pub fn hann(window_size: usize, hop_size: usize) -> Self {
        Self {
            window_size,
            hop_size,
            window: Window::Hann,
            center: true,
        }
    }

    pub fn bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// `ceil(len / hop)`, at least one frame.
    pub fn frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop_size).max(1)
    }

    /// Requirements for the forward transform alone.
    pub fn validate_analysis(&self) -> Result<()> {
        let (n, hop) = (self.window_size, self.hop_size);
        if n < 2 || n % 2 != 0 {
            return Err(config(format!("window size {n} must be even and >= 2")));
        }
        if hop == 0 {
            return Err(config("hop must be positive"));
        }
        Ok(())
    }

    /// Requirements for exact inversion: `hop <= window` and a nonzero
    /// overlap-add envelope of the squared window.
    pub fn validate(&self) -> Result<()> {
        self.validate_analysis()?;
        let (n, hop) = (self.window_size, self.hop_size);
        if hop > n {
            return Err(config(format!("hop {hop} must be in 1..={n}")));
        }
        // Overlap-add of the squared window must never vanish, otherwise the
        // synthesis normalisation divides by zero.
        let w = self.window.coefficients(n);
        let floor = (0..hop)
            .map(|p| (p..n).step_by(hop).map(|j| w[j] * w[j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        if floor < 1e-10 {
            return Err(config(format!(
                "window/hop pair ({n}, {hop}) does not overlap-add to a nonzero envelope"
            )));
        }
        Ok(())
    }
}

/// Real/imaginary planes per audio channel: shape `(2 * channels, F, T)`,
/// plane `2c` real and `2c + 1` imaginary.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    data: Tensor<f32>,
    sample_rate: u32,
    window_size: usize,
    hop_size: usize,
}

impl ComplexSpectrogram {
    pub fn new(data: Tensor<f32>, sample_rate: u32, cfg: &StftConfig) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || !(s[0] == 2 || s[0] == 4) || s[1] != cfg.bins() {
            return Err(CoreError::Shape(format!(
                "spectrogram shape {s:?} invalid for window {}",
                cfg.window_size
            )));
        }
        if !data.all_finite() {
            return Err(CoreError::NonFinite("spectrogram".into()));
        }
        Ok(Self {
            data,
            sample_rate,
            window_size: cfg.window_size,
            hop_size: cfg.hop_size,
        })
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    /// Same STFT settings, new values of the same shape.
    pub fn with_data(&self, data: Tensor<f32>) -> Result<Self> {
        if data.shape() != self.data.shape() {
            return Err(CoreError::Shape(format!(
                "expected {:?}, got {:?}",
                self.data.shape(),
                data.shape()
            )));
        }
        if !data.all_finite() {
            return Err(CoreError::NonFinite("spectrogram".into()));
        }
        Ok(Self { data, ..self.clone() })
    }

    pub fn into_data(self) -> Tensor<f32> {
        self.data
    }

    pub fn planes(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn hop_size(&self) -> usize {
        self.hop_size
    }

    pub fn get(&self, plane: usize, bin: usize, frame: usize) -> f32 {
        self.data.data()[(plane * self.bins() + bin) * self.frames() + frame]
    }
}

/// FFT plans and window for one STFT configuration, in either precision.
///
/// Spectra are laid out `(2, F, T)` per channel (real plane then imaginary
/// plane, frame index fastest). The adjoint methods give exact vector-Jacobian
/// products of the corresponding forward maps.
pub struct StftPlan<T: Scalar> {
    cfg: StftConfig,
    window: Vec<T>,
    fwd: Arc<dyn RealToComplex<T>>,
    inv: Arc<dyn ComplexToReal<T>>,
}

impl<T: Scalar> StftPlan<T> {
    /// Only the analysis requirements are checked; call
    /// [`StftConfig::validate`] before relying on synthesis.
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate_analysis()?;
        let mut planner = RealFftPlanner::<T>::new();
        Ok(Self {
            window: cfg
                .window
                .coefficients(cfg.window_size)
                .into_iter()
                .map(T::of)
                .collect(),
            fwd: planner.plan_fft_forward(cfg.window_size),
            inv: planner.plan_fft_inverse(cfg.window_size),
            cfg,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    fn offset(&self) -> usize {
        if self.cfg.center {
            self.cfg.window_size / 2
        } else {
            0
        }
    }

    /// Signal index feeding padded position `p`, or `None` for zero padding.
    fn source(&self, p: usize, len: usize) -> Option<usize> {
        let i = p as isize - self.offset() as isize;
        if !self.cfg.center {
            return (i >= 0 && (i as usize) < len).then_some(i as usize);
        }
        if len == 1 {
            return Some(0);
        }
        let period = 2 * (len as isize - 1);
        let m = i.rem_euclid(period);
        Some(if m >= len as isize { period - m } else { m } as usize)
    }

    /// Forward transform of one channel; `out` has length `2 * F * frames(len)`.
    pub fn analyze(&self, x: &[T], out: &mut [T]) {
        let (hop, f) = (self.cfg.hop_size, self.cfg.bins());
        let frames = self.cfg.frames(x.len());
        debug_assert_eq!(out.len(), 2 * f * frames);
        let mut buf = self.fwd.make_input_vec();
        let mut spec = self.fwd.make_output_vec();
        let mut scratch = self.fwd.make_scratch_vec();
        for t in 0..frames {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = match self.source(t * hop + j, x.len()) {
                    Some(i) => x[i] * self.window[j],
                    None => T::zero(),
                };
            }
            self.fwd
                .process_with_scratch(&mut buf, &mut spec, &mut scratch)
                .expect("buffer sizes come from the plan");
            for (k, z) in spec.iter().enumerate() {
                out[k * frames + t] = z.re;
                out[(f + k) * frames + t] = z.im;
            }
        }
    }

    /// Accumulates the adjoint of [`analyze`](Self::analyze) applied to `g` into `dx`.
    pub fn analyze_adjoint(&self, g: &[T], dx: &mut [T]) {
        let (n, hop, f) = (self.cfg.window_size, self.cfg.hop_size, self.cfg.bins());
        let len = dx.len();
        let frames = self.cfg.frames(len);
        let half = T::of(0.5);
        let mut spec = self.inv.make_input_vec();
        let mut buf = self.inv.make_output_vec();
        let mut scratch = self.inv.make_scratch_vec();
        for t in 0..frames {
            // c2r computes Re(Y_0) + 2 sum Re(Y_k e^{i theta}) + Re(Y_{N/2}) (-1)^j,
            // so interior bins are halved to obtain the plain transpose.
            for (k, z) in spec.iter_mut().enumerate() {
                let (re, im) = (g[k * frames + t], g[(f + k) * frames + t]);
                *z = if k == 0 || k == f - 1 {
                    Complex::new(re, T::zero())
                } else {
                    Complex::new(re * half, im * half)
                };
            }
            self.inv
                .process_with_scratch(&mut spec, &mut buf, &mut scratch)
                .expect("imaginary parts at DC and Nyquist are zero");
            for (j, &v) in buf.iter().enumerate().take(n) {
                if let Some(i) = self.source(t * hop + j, len) {
                    dx[i] += v * self.window[j];
                }
            }
        }
    }

    fn envelope(&self, frames: usize) -> Vec<T> {
        let (n, hop) = (self.cfg.window_size, self.cfg.hop_size);
        let mut env = vec![T::zero(); (frames - 1) * hop + n];
        for t in 0..frames {
            for (j, &w) in self.window.iter().enumerate() {
                env[t * hop + j] += w * w;
            }
        }
        env
    }

    /// Weighted overlap-add inverse of one channel with `frames` frames.
    pub fn synthesize(&self, spec_in: &[T], frames: usize, out: &mut [T]) {
        let (n, hop, f) = (self.cfg.window_size, self.cfg.hop_size, self.cfg.bins());
        debug_assert_eq!(spec_in.len(), 2 * f * frames);
        let scale = T::one() / T::of(n as f64);
        let mut acc = vec![T::zero(); (frames - 1) * hop + n];
        let mut spec = self.inv.make_input_vec();
        let mut buf = self.inv.make_output_vec();
        let mut scratch = self.inv.make_scratch_vec();
        for t in 0..frames {
            for (k, z) in spec.iter_mut().enumerate() {
                let im = if k == 0 || k == f - 1 {
                    T::zero()
                } else {
                    spec_in[(f + k) * frames + t]
                };
                *z = Complex::new(spec_in[k * frames + t], im);
            }
            self.inv
                .process_with_scratch(&mut spec, &mut buf, &mut scratch)
                .expect("imaginary parts at DC and Nyquist are zero");
            for (j, &v) in buf.iter().enumerate() {
                acc[t * hop + j] += v * scale * self.window[j];
            }
        }
        let env = self.envelope(frames);
        let off = self.offset();
        let tiny = T::of(1e-11);
        for (i, o) in out.iter_mut().enumerate() {
            let p = i + off;
            *o = match env.get(p) {
                Some(&e) if e > tiny => acc[p] / e,
                _ => T::zero(),
            };
        }
    }

    /// Accumulates the adjoint of [`synthesize`](Self::synthesize) applied to `gy` into `gspec`.
    pub fn synthesize_adjoint(&self, gy: &[T], frames: usize, gspec: &mut [T]) {
        let (n, hop, f) = (self.cfg.window_size, self.cfg.hop_size, self.cfg.bins());
        let scale = T::one() / T::of(n as f64);
        let env = self.envelope(frames);
        let off = self.offset();
        let tiny = T::of(1e-11);
        let mut gacc = vec![T::zero(); env.len()];
        for (i, &g) in gy.iter().enumerate() {
            let p = i + off;
            if let Some(&e) = env.get(p) {
                if e > tiny {
                    gacc[p] = g / e;
                }
            }
        }
        let mut buf = self.fwd.make_input_vec();
        let mut spec = self.fwd.make_output_vec();
        let mut scratch = self.fwd.make_scratch_vec();
        let two = T::of(2.0);
        for t in 0..frames {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = gacc[t * hop + j] * self.window[j] * scale;
            }
            self.fwd
                .process_with_scratch(&mut buf, &mut spec, &mut scratch)
                .expect("buffer sizes come from the plan");
            for (k, z) in spec.iter().enumerate() {
                if k == 0 || k == f - 1 {
                    gspec[k * frames + t] += z.re;
                } else {
                    gspec[k * frames + t] += two * z.re;
                    gspec[(f + k) * frames + t] += two * z.im;
                }
            }
        }
    }
}

fn check_signal(signal: &AudioSignal, cfg: &StftConfig) -> Result<()> {
    cfg.validate()?;
    if signal.is_empty() {
        return Err(CoreError::InvalidSignal("empty signal".into()));
    }
    Ok(())
}

/// One-sided STFT of every channel, shape `(2 * channels, window/2 + 1, ceil(len/hop))`.
/// Computed in double precision and stored in single precision.
pub fn stft(signal: &AudioSignal, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    check_signal(signal, cfg)?;
    let plan = StftPlan::<f64>::new(*cfg)?;
    let (f, frames) = (cfg.bins(), cfg.frames(signal.len()));
    let mut data = Vec::with_capacity(signal.num_channels() * 2 * f * frames);
    let mut out = vec![0.0f64; 2 * f * frames];
    for ch in signal.channels() {
        let x: Vec<f64> = ch.iter().map(|&v| v as f64).collect();
        plan.analyze(&x, &mut out);
        data.extend(out.iter().map(|&v| v as f32));
    }
    let data = Tensor::new(&[2 * signal.num_channels(), f, frames], data)?;
    ComplexSpectrogram::new(data, signal.sample_rate(), cfg)
}

/// Inverse of [`stft`] producing `length` samples per channel.
pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig, length: usize) -> Result<AudioSignal> {
    cfg.validate()?;
    if spec.window_size != cfg.window_size || spec.hop_size != cfg.hop_size {
        return Err(config(format!(
            "spectrogram was made with window {} hop {}, asked to invert with window {} hop {}",
            spec.window_size, spec.hop_size, cfg.window_size, cfg.hop_size
        )));
    }
    let plan = StftPlan::<f64>::new(*cfg)?;
    let (f, frames) = (spec.bins(), spec.frames());
    let mut channels = Vec::new();
    let mut y = vec![0.0f64; length];
    for plane in spec.data.data().chunks(2 * f * frames) {
        let s: Vec<f64> = plane.iter().map(|&v| v as f64).collect();
        plan.synthesize(&s, frames, &mut y);
        channels.push(y.iter().map(|&v| v as f32).collect());
    }
    AudioSignal::new(channels, spec.sample_rate)
}
