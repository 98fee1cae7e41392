//! Training loops for separation pretraining and transcription fine-tuning.

use std::io::Write;
use std::path::Path;

use melrof_autograd::{Graph, Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dsp::AudioSignal;
use crate::error::{config, CoreError, Result};
use crate::heads::{pooled_frames, FRAME_RATE};
use crate::losses::{signal_tensor, transcription_loss_var, MultiResLossConfig, NoteTargets, SeparationLoss};
use crate::model::{is_backbone_param, MelRoFormer, Mode};
use crate::params::Bound;
use crate::pipeline::{swap_head_for_transcription, NoteEvent};

use super::optim::{adamw_step, AdamWConfig, OptimizerState, PlateauSchedule, StepDecay};
use super::remix::{random_remix, RemixSpec};

/// Fine-tuning schedule: two parameter groups with reduce-on-plateau.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSchedule {
    pub heads_lr: f64,
    pub backbone_lr: f64,
    pub factor: f64,
    pub patience: u32,
    pub steps_per_epoch: u64,
}

impl Default for FinetuneSchedule {
    fn default() -> Self {
        Self {
            heads_lr: 1e-3,
            backbone_lr: 1e-4,
            factor: 0.9,
            patience: 15,
            steps_per_epoch: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub optimizer: AdamWConfig,
    pub separation_lr: StepDecay,
    pub finetune: FinetuneSchedule,
    pub loss: MultiResLossConfig,
    /// Train on random crops of this many seconds instead of whole clips.
    pub crop_seconds: Option<f64>,
    /// Steps between monitor calls (early stopping, checkpoints).
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1000,
            optimizer: AdamWConfig::default(),
            separation_lr: StepDecay::default(),
            finetune: FinetuneSchedule::default(),
            loss: MultiResLossConfig::default(),
            crop_seconds: None,
            eval_every: 100,
        }
    }
}

/// One row of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss,lr")?;
    for r in rows {
        writeln!(f, "{},{},{}", r.step, r.loss, r.lr)?;
    }
    f.flush()?;
    Ok(())
}

/// Plateau bookkeeping carried across checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub schedule: PlateauSchedule,
    pub epoch_loss: f64,
    pub epoch_steps: u64,
}

/// Everything besides the weights needed to resume bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub optimizer: OptimizerState<f32>,
    pub plateau: Option<PlateauState>,
}

pub enum SeparationData {
    /// Fixed `(mixture, vocal)` pairs.
    Pairs(Vec<(AudioSignal, AudioSignal)>),
    Remix(RemixSpec),
}

/// Audio clip with its reference notes.
#[derive(Clone, Debug)]
pub struct NoteClip {
    pub audio: AudioSignal,
    pub notes: Vec<NoteEvent>,
}

pub struct Trainer {
    model: MelRoFormer<f32>,
    state: TrainerState,
    loss: Option<SeparationLoss<f32>>,
    trace: Vec<TraceRow>,
}

impl Trainer {
    pub fn new(model: MelRoFormer<f32>, config: TrainConfig) -> Result<Self> {
        let plateau = (model.mode() == Mode::Transcription).then(|| {
            let f = config.finetune;
            PlateauState {
                schedule: PlateauSchedule::new(f.heads_lr, f.backbone_lr, f.factor, f.patience),
                epoch_loss: 0.0,
                epoch_steps: 0,
            }
        });
        let state = TrainerState {
            optimizer: OptimizerState::new(config.optimizer),
            config,
            plateau,
        };
        Self::from_state(model, state)
    }

    pub fn from_state(model: MelRoFormer<f32>, state: TrainerState) -> Result<Self> {
        let loss = match model.mode() {
            Mode::Separation => Some(SeparationLoss::new(&state.config.loss, model.config().sample_rate)?),
            Mode::Transcription => None,
        };
        if let Some(c) = state.config.crop_seconds {
            if !(c > 0.0) {
                return Err(config(format!("crop_seconds must be positive, got {c}")));
            }
        }
        Ok(Self {
            model,
            state,
            loss,
            trace: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let state = ckpt
            .training
            .ok_or_else(|| CoreError::Checkpoint("checkpoint has no training state".into()))?;
        Self::from_state(ckpt.model, state)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            training: Some(self.state.clone()),
        }
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.state.optimizer.step
    }

    pub fn model(&self) -> &MelRoFormer<f32> {
        &self.model
    }

    pub fn into_model(self) -> MelRoFormer<f32> {
        self.model
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    /// Generator for the next step, a pure function of `(seed, step)`.
    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.config.seed);
        rng.set_stream(self.step());
        rng
    }

    fn crop_len(&self, unit: usize) -> Option<usize> {
        let sr = self.model.config().sample_rate as f64;
        self.state
            .config
            .crop_seconds
            .map(|c| (((c * sr) / unit as f64).round() as usize).max(1) * unit)
    }

    /// One separation step; returns the loss before the update.
    pub fn separation_step(&mut self, data: &SeparationData) -> Result<f64> {
        self.model.require(Mode::Separation)?;
        let mut rng = self.step_rng();
        let (mixture, vocal) = match data {
            SeparationData::Pairs(pairs) => {
                if pairs.is_empty() {
                    return Err(config("empty training set"));
                }
                let (m, v) = &pairs[rng.random_range(0..pairs.len())];
                m.check_compatible(v)?;
                match self.crop_len(1) {
                    Some(len) if len < m.len() => {
                        let start = rng.random_range(0..=m.len() - len);
                        (m.segment(start, len), v.segment(start, len))
                    }
                    _ => (m.clone(), v.clone()),
                }
            }
            SeparationData::Remix(spec) => {
                let pair = random_remix(spec, &mut rng)?;
                (pair.mixture, pair.vocal)
            }
        };
        self.model.check_input(&mixture)?;
        let lr = self.state.config.separation_lr.lr(self.step());
        let loss = self.loss.as_ref().expect("separation mode");
        let target = loss.target(signal_tensor(&vocal))?;
        let g = Graph::training(rng.next_u64());
        let params = self.model.bind(&g);
        let x = g.constant(signal_tensor::<f32>(&mixture));
        let est = self.model.separate_var(&g, &params, x)?;
        let l = loss.loss_var(&g, est, &target)?;
        let value = self.update(g, params, l, |_| lr)?;
        self.trace.push(TraceRow {
            step: self.step(),
            loss: value,
            lr,
        });
        Ok(value)
    }

    /// One fine-tuning step on a random clip (or crop of one).
    pub fn transcription_step(&mut self, data: &[NoteClip]) -> Result<f64> {
        self.model.require(Mode::Transcription)?;
        if data.is_empty() {
            return Err(config("empty training set"));
        }
        let mut rng = self.step_rng();
        let clip = &data[rng.random_range(0..data.len())];
        let cfg = self.model.config().clone();
        let sr = cfg.sample_rate as f64;
        // Crops start on the posterior frame grid so targets stay aligned.
        let unit = (sr / FRAME_RATE).round() as usize;
        let (audio, shift) = match self.crop_len(unit) {
            Some(len) if len < clip.audio.len() => {
                let start = rng.random_range(0..=(clip.audio.len() - len) / unit) * unit;
                (clip.audio.segment(start, len), start as f64 / sr)
            }
            _ => (clip.audio.clone(), 0.0),
        };
        self.model.check_input(&audio)?;
        let notes: Vec<NoteEvent> = clip
            .notes
            .iter()
            .map(|n| NoteEvent {
                onset: n.onset - shift,
                offset: n.offset - shift,
                pitch: n.pitch,
            })
            .collect();
        let frames = pooled_frames(cfg.stft.frames(audio.len()), cfg.frame_rate(), FRAME_RATE);
        let targets = NoteTargets::from_notes(&notes, frames, FRAME_RATE)?;
        let (heads_lr, backbone_lr) = self.state.plateau.as_ref().expect("transcription mode").schedule.lrs();
        let g = Graph::training(rng.next_u64());
        let params = self.model.bind(&g);
        let x = g.constant(signal_tensor::<f32>(&audio));
        let (on, fr) = self.model.transcription_logits_var(&g, &params, x)?;
        let l = transcription_loss_var(&g, on, fr, &targets)?;
        let value = self.update(g, params, l, |n| {
            if is_backbone_param(n) {
                backbone_lr
            } else {
                heads_lr
            }
        })?;
        let p = self.state.plateau.as_mut().expect("transcription mode");
        p.epoch_loss += value;
        p.epoch_steps += 1;
        if p.epoch_steps >= self.state.config.finetune.steps_per_epoch {
            p.schedule.observe(p.epoch_loss / p.epoch_steps as f64);
            p.epoch_loss = 0.0;
            p.epoch_steps = 0;
        }
        self.trace.push(TraceRow {
            step: self.step(),
            loss: value,
            lr: heads_lr,
        });
        Ok(value)
    }

    fn update(&mut self, g: Graph<f32>, params: Bound, loss: Var, lr: impl Fn(&str) -> f64) -> Result<f64> {
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(CoreError::NonFinite(format!("loss at step {}", self.step())));
        }
        let mut grads = g.backward(loss)?;
        let mut named: Vec<(String, Tensor<f32>)> = Vec::new();
        for name in self.model.params().names() {
            let v = params.var(name)?;
            if g.requires_grad(v) {
                if let Some(t) = grads.take(v) {
                    named.push((name.to_string(), t));
                }
            }
        }
        drop(params);
        drop(g);
        let Self { model, state, .. } = self;
        adamw_step(model.params_mut(), &named, &mut state.optimizer, lr)?;
        Ok(value)
    }

    /// Runs until `steps` total steps. Every `eval_every` steps (and at the
    /// end) `monitor` is called; returning `true` stops early.
    pub fn run<D: ?Sized>(
        &mut self,
        steps: u64,
        data: &D,
        step_fn: fn(&mut Self, &D) -> Result<f64>,
        monitor: &mut dyn FnMut(&Trainer) -> Result<bool>,
    ) -> Result<()> {
        let every = self.state.config.eval_every.max(1);
        while self.step() < steps {
            step_fn(self, data)?;
            if (self.step().is_multiple_of(every) || self.step() == steps) && monitor(self)? {
                break;
            }
        }
        Ok(())
    }
}

/// Trained model and loss curve.
pub struct TrainOutcome {
    pub model: MelRoFormer<f32>,
    pub trace: Vec<TraceRow>,
}

/// Separation training for `config.steps` steps.
pub fn train_toy_separation(model: MelRoFormer<f32>, config: TrainConfig, data: &SeparationData) -> Result<TrainOutcome> {
    let steps = config.steps;
    let mut t = Trainer::new(model, config)?;
    t.run(steps, data, Trainer::separation_step, &mut |_| Ok(false))?;
    Ok(TrainOutcome {
        trace: t.trace.clone(),
        model: t.into_model(),
    })
}

/// Head swap followed by fine-tuning for `config.steps` steps.
pub fn train_toy_transcription(pretrained: &MelRoFormer<f32>, config: TrainConfig, data: &[NoteClip]) -> Result<TrainOutcome> {
    let model = swap_head_for_transcription(pretrained, config.seed)?;
    let steps = config.steps;
    let mut t = Trainer::new(model, config)?;
    t.run(steps, data, Trainer::transcription_step, &mut |_| Ok(false))?;
    Ok(TrainOutcome {
        trace: t.trace.clone(),
        model: t.into_model(),
    })
}
