use std::sync::Arc;

use melrof_autograd::{Graph, Tensor};
use melrof_core::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use melrof_core::dsp::{AudioSignal, StftConfig};
use melrof_core::losses::MultiResLossConfig;
use melrof_core::model::{EncoderSettings, HeadSettings, MelRoFormer, Mode, ModelConfig};
use melrof_core::params::ParamStore;
use melrof_core::pipeline::swap_head_for_transcription;
use melrof_core::train::synth::{toy_separation_set, toy_transcription_set};
use melrof_core::train::{
    adamw_step, lr_schedule_finetune, lr_schedule_separation, random_remix, train_toy_separation,
    train_toy_transcription, write_trace_csv, AdamWConfig, NoteClip, OptimizerState, PlateauSchedule, RemixSpec,
    SeparationData, StepDecay, TraceRow, TrainConfig, TrainDocument, Trainer,
};
use melrof_core::CoreError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SR: u32 = 8000;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        mode: Mode::Separation,
        sample_rate: SR,
        channels: 1,
        stft: StftConfig::hann(160, 80),
        chunk_frames: 10,
        bands: 4,
        f_min: 0.0,
        f_max: 4000.0,
        dim: 8,
        layers: 1,
        encoder: EncoderSettings {
            heads: 2,
            ..EncoderSettings::default()
        },
        head: HeadSettings {
            onset_hidden: 16,
            ..HeadSettings::default()
        },
    }
}

fn tiny_train_config(steps: u64) -> TrainConfig {
    TrainConfig {
        seed: 3,
        steps,
        loss: MultiResLossConfig {
            window_sizes: vec![256, 64],
            frame_rates: vec![100.0],
        },
        crop_seconds: Some(0.3),
        ..TrainConfig::default()
    }
}

fn pairs() -> SeparationData {
    SeparationData::Pairs(toy_separation_set(1, 2, SR, 0.5).unwrap())
}

fn clips() -> Vec<NoteClip> {
    toy_transcription_set(2, 2, SR, 1.0)
        .into_iter()
        .map(|(audio, notes)| NoteClip { audio, notes })
        .collect()
}

fn store(values: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::new(&[values.len()], values.to_vec()).unwrap());
    s
}

fn grad(values: &[f64]) -> Vec<(String, Tensor<f64>)> {
    vec![("w".to_string(), Tensor::new(&[values.len()], values.to_vec()).unwrap())]
}

#[test]
fn zero_gradient_without_decay_leaves_params() {
    let mut p = store(&[0.3, -1.2]);
    let mut s = OptimizerState::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    adamw_step(&mut p, &grad(&[0.0, 0.0]), &mut s, |_| 1e-3).unwrap();
    assert_eq!(p.get("w").unwrap().data(), &[0.3, -1.2]);
    assert_eq!(s.step, 1);
}

#[test]
fn first_step_moves_by_the_learning_rate() {
    let mut p = store(&[2.0]);
    let mut s = OptimizerState::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    adamw_step(&mut p, &grad(&[1.0]), &mut s, |_| 0.01).unwrap();
    let delta = p.get("w").unwrap().data()[0] - 2.0;
    assert!((delta + 0.01).abs() < 1e-9, "{delta}");
}

#[test]
fn decoupled_decay_shrinks_params() {
    let mut p = store(&[1.5, -4.0]);
    let mut s = OptimizerState::new(AdamWConfig::default());
    adamw_step(&mut p, &grad(&[0.0, 0.0]), &mut s, |_| 0.1).unwrap();
    let f = 1.0 - 0.1 * 0.01;
    assert_eq!(p.get("w").unwrap().data(), &[1.5 * f, -4.0 * f]);
}

#[test]
fn bad_gradients_are_rejected_without_side_effects() {
    let mut p = store(&[1.0, 2.0]);
    let mut s = OptimizerState::new(AdamWConfig::default());
    let err = adamw_step(&mut p, &grad(&[0.5, f64::NAN]), &mut s, |_| 0.1).unwrap_err();
    assert!(matches!(err, CoreError::NonFinite(_)));
    assert!(adamw_step(&mut p, &grad(&[0.5]), &mut s, |_| 0.1).is_err());
    assert_eq!(p.get("w").unwrap().data(), &[1.0, 2.0]);
    assert_eq!(s.step, 0);
    assert!(s.first.is_empty());
}

/// `sum_i tanh(w_i) * x_i + 0.5 * w_i^2 * y_i` on ten parameters.
fn toy_objective(g: &Graph<f64>, w: melrof_autograd::Var, x: &Arc<Tensor<f64>>, y: &Arc<Tensor<f64>>) -> melrof_autograd::Var {
    let a = g.mul_const(g.tanh(w).unwrap(), x.clone()).unwrap();
    let b = g.mul_const(g.mul(w, w).unwrap(), y.clone()).unwrap();
    let b = g.scale(b, 0.5).unwrap();
    g.sum(g.add(a, b).unwrap()).unwrap()
}

#[test]
fn numeric_gradient_step_matches_analytic_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w0: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Arc::new(Tensor::from_fn(&[10], |_| rng.random_range(-1.0..1.0)));
    let y = Arc::new(Tensor::from_fn(&[10], |_| rng.random_range(0.5..1.5)));
    let eval = |w: &[f64]| {
        let g = Graph::new();
        let v = g.param(Tensor::new(&[10], w.to_vec()).unwrap());
        let l = toy_objective(&g, v, &x, &y);
        g.value(l).item()
    };
    let analytic = {
        let g = Graph::new();
        let v = g.param(Tensor::new(&[10], w0.clone()).unwrap());
        let l = toy_objective(&g, v, &x, &y);
        g.backward(l).unwrap().take(v).unwrap()
    };
    let h = 1e-6;
    let numeric = Tensor::from_fn(&[10], |i| {
        let (mut a, mut b) = (w0.clone(), w0.clone());
        a[i] += h;
        b[i] -= h;
        (eval(&a) - eval(&b)) / (2.0 * h)
    });
    let run = |gr: &Tensor<f64>| {
        let mut p = store(&w0);
        let mut s = OptimizerState::new(AdamWConfig::default());
        adamw_step(&mut p, &[("w".to_string(), gr.clone())], &mut s, |_| 1e-2).unwrap();
        p.get("w").unwrap().data().to_vec()
    };
    let (pa, pn) = (run(&analytic), run(&numeric));
    for (a, n) in pa.iter().zip(&pn) {
        assert!((a - n).abs() < 1e-5, "{a} vs {n}");
    }
}

#[test]
fn separation_schedule_table() {
    assert_eq!(lr_schedule_separation(0), 5e-4);
    assert_eq!(lr_schedule_separation(39_999), 5e-4);
    assert!((lr_schedule_separation(40_000) - 4.5e-4).abs() < 1e-15);
    assert!((lr_schedule_separation(80_000) - 4.05e-4).abs() < 1e-15);
    let custom = StepDecay {
        base: 1.0,
        factor: 0.5,
        every: 10,
    };
    assert_eq!(custom.lr(25), 0.25);
}

#[test]
fn finetune_schedule_reduces_after_fifteen_flat_epochs() {
    assert_eq!(lr_schedule_finetune(&[]), (1e-3, 1e-4));
    let improving: Vec<f64> = (0..100).map(|i| 1.0 / (i + 1) as f64).collect();
    assert_eq!(lr_schedule_finetune(&improving), (1e-3, 1e-4));
    assert_eq!(lr_schedule_finetune(&[1.0; 15]), (1e-3, 1e-4));
    let (h, b) = lr_schedule_finetune(&[1.0; 16]);
    assert!((h - 9e-4).abs() < 1e-15 && (b - 9e-5).abs() < 1e-16);
    let (h, _) = lr_schedule_finetune(&[1.0; 31]);
    assert!((h - 8.1e-4).abs() < 1e-15);
    let mut s = PlateauSchedule::new(1.0, 0.1, 0.5, 2);
    for l in [3.0, 3.0, 2.0, 2.5, 2.5] {
        s.observe(l);
    }
    assert_eq!(s.lrs(), (0.5, 0.05));
}

fn stem(values: Vec<f32>) -> AudioSignal {
    AudioSignal::mono(values, SR).unwrap()
}

#[test]
fn single_stem_pools_give_the_only_pair() {
    let mut spec = RemixSpec::new(vec![stem(vec![0.5, -0.25, 0.125])], vec![stem(vec![0.75, 0.5, -1.0])], 3).unwrap();
    spec.gain_range = None;
    let pair = random_remix(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(pair.vocal, spec.vocals[0]);
    assert_eq!(pair.accompaniment, spec.accompaniments[0]);
    assert_eq!(pair.mixture.channel(0), &[1.25, 0.25, -0.875]);
}

#[test]
fn remix_is_additive_and_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dyadic = |rng: &mut ChaCha8Rng| stem((0..400).map(|_| rng.random_range(-64i32..64) as f32 / 128.0).collect());
    let mut spec = RemixSpec::new(
        (0..3).map(|_| dyadic(&mut rng)).collect(),
        (0..4).map(|_| dyadic(&mut rng)).collect(),
        100,
    )
    .unwrap();
    spec.gain_range = None;
    for seed in 0..20 {
        let pair = random_remix(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for ((m, v), a) in pair.mixture.channel(0).iter().zip(pair.vocal.channel(0)).zip(pair.accompaniment.channel(0)) {
            assert_eq!(m - a, *v);
        }
    }
    spec.gain_range = Some((0.5, 1.25));
    let a = random_remix(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = random_remix(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn remix_rejects_bad_pools() {
    assert!(RemixSpec::new(vec![], vec![stem(vec![0.0; 4])], 4).is_err());
    assert!(RemixSpec::new(vec![stem(vec![0.0; 4])], vec![], 4).is_err());
    let other = AudioSignal::mono(vec![0.0; 4], 16000).unwrap();
    assert!(RemixSpec::new(vec![stem(vec![0.0; 4])], vec![other], 4).is_err());
}

fn tiny_model(seed: u64) -> MelRoFormer {
    MelRoFormer::new(tiny_config(), seed).unwrap()
}

#[test]
fn zero_steps_return_the_initialisation() {
    let model = tiny_model(1);
    let out = train_toy_separation(model.clone(), tiny_train_config(0), &pairs()).unwrap();
    assert_eq!(out.model.params(), model.params());
    assert!(out.trace.is_empty());

    let out = train_toy_transcription(&model, tiny_train_config(0), &clips()).unwrap();
    let swapped = swap_head_for_transcription(&model, 3).unwrap();
    assert_eq!(out.model.params(), swapped.params());
}

#[test]
fn separation_loss_trends_down_on_one_example() {
    let data = SeparationData::Pairs(toy_separation_set(4, 1, SR, 0.3).unwrap());
    let mut cfg = tiny_train_config(60);
    cfg.separation_lr.base = 3e-3;
    let out = train_toy_separation(tiny_model(2), cfg, &data).unwrap();
    let mean = |r: &[TraceRow]| r.iter().map(|t| t.loss).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&out.trace[..10]), mean(&out.trace[50..]));
    assert!(last < first, "{first} -> {last}");
    assert_eq!(out.trace.len(), 60);
    assert_eq!(out.trace[0].step, 1);
}

#[test]
fn transcription_loss_trends_down_on_one_example() {
    let data: Vec<NoteClip> = clips().into_iter().take(1).collect();
    let mut cfg = tiny_train_config(60);
    cfg.finetune.heads_lr = 3e-3;
    let out = train_toy_transcription(&tiny_model(2), cfg, &data).unwrap();
    let mean = |r: &[TraceRow]| r.iter().map(|t| t.loss).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&out.trace[..10]), mean(&out.trace[50..]));
    assert!(last < first, "{first} -> {last}");
    assert_eq!(out.model.mode(), Mode::Transcription);
}

fn checkpoint_bytes_after(steps: u64) -> Vec<u8> {
    let mut t = Trainer::new(tiny_model(7), tiny_train_config(steps)).unwrap();
    t.run(steps, &pairs(), Trainer::separation_step, &mut |_| Ok(false)).unwrap();
    t.checkpoint().to_bytes().unwrap()
}

#[test]
fn identical_runs_give_identical_checkpoints() {
    assert_eq!(checkpoint_bytes_after(3), checkpoint_bytes_after(3));
}

#[test]
fn resumed_separation_reproduces_the_next_step() {
    let data = pairs();
    let mut a = Trainer::new(tiny_model(8), tiny_train_config(5)).unwrap();
    for _ in 0..3 {
        a.separation_step(&data).unwrap();
    }
    let bytes = a.checkpoint().to_bytes().unwrap();
    let next = a.separation_step(&data).unwrap();
    let mut b = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(b.step(), 3);
    assert_eq!(b.separation_step(&data).unwrap().to_bits(), next.to_bits());
    assert_eq!(a.checkpoint().to_bytes().unwrap(), b.checkpoint().to_bytes().unwrap());
}

#[test]
fn resumed_finetuning_reproduces_the_next_step() {
    let data = clips();
    let mut cfg = tiny_train_config(5);
    cfg.finetune.steps_per_epoch = 2;
    let model = swap_head_for_transcription(&tiny_model(9), 1).unwrap();
    let mut a = Trainer::new(model, cfg).unwrap();
    for _ in 0..3 {
        a.transcription_step(&data).unwrap();
    }
    let bytes = a.checkpoint().to_bytes().unwrap();
    let next = a.transcription_step(&data).unwrap();
    let mut b = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(b.transcription_step(&data).unwrap().to_bits(), next.to_bits());
    assert_eq!(a.state(), b.state());
}

#[test]
fn frozen_backbone_is_not_updated() {
    let mut model = swap_head_for_transcription(&tiny_model(10), 1).unwrap();
    model.set_backbone_trainable(false);
    let before = model.clone();
    let mut t = Trainer::new(model, tiny_train_config(2)).unwrap();
    t.transcription_step(&clips()).unwrap();
    for (name, p) in before.params().iter() {
        let changed = p != t.model().params().get(name).unwrap();
        assert_eq!(changed, !melrof_core::model::is_backbone_param(name), "{name}");
    }
}

#[test]
fn non_finite_loss_aborts_the_step() {
    let mut model = tiny_model(11);
    let name = model.params().names().next().unwrap().to_string();
    model.params_mut().get_mut(&name).unwrap().data_mut()[0] = f32::NAN;
    let mut t = Trainer::new(model.clone(), tiny_train_config(1)).unwrap();
    let err = t.separation_step(&pairs()).unwrap_err();
    assert!(matches!(err, CoreError::NonFinite(_)), "{err}");
    assert_eq!(t.step(), 0);
}

#[test]
fn wrong_mode_steps_are_rejected() {
    let mut t = Trainer::new(tiny_model(12), tiny_train_config(1)).unwrap();
    assert!(matches!(t.transcription_step(&clips()), Err(CoreError::ModeMismatch { .. })));
    let mut cfg = tiny_train_config(1);
    cfg.crop_seconds = Some(0.0);
    assert!(Trainer::new(tiny_model(12), cfg).is_err());
}

#[test]
fn remix_data_drives_separation_steps() {
    let set = toy_separation_set(5, 2, SR, 0.5).unwrap();
    let vocals = set.iter().map(|(_, v)| v.clone()).collect();
    let accs = set.iter().map(|(m, v)| m.mix(&v.scaled(-1.0)).unwrap()).collect();
    let spec = RemixSpec::new(vocals, accs, 2400).unwrap();
    let mut t = Trainer::new(tiny_model(13), tiny_train_config(2)).unwrap();
    assert!(t.separation_step(&SeparationData::Remix(spec)).unwrap().is_finite());
}

#[test]
fn checkpoint_round_trips_models() {
    let model = tiny_model(14);
    let bytes = Checkpoint::new(model.clone()).to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.model.params(), model.params());
    assert_eq!(back.model.config(), model.config());
    assert!(back.training.is_none());

    let tr = swap_head_for_transcription(&model, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tr.ckpt");
    Checkpoint::new(tr.clone()).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.model.mode(), Mode::Transcription);
    assert_eq!(back.model.params(), tr.params());
}

#[test]
fn checkpoint_rejects_foreign_and_damaged_files() {
    let bytes = Checkpoint::new(tiny_model(15)).to_bytes().unwrap();
    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let err = Checkpoint::from_bytes(&future).unwrap_err();
    assert!(err.to_string().contains("unsupported checkpoint version 2"), "{err}");
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&magic).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());
    assert!(Checkpoint::from_bytes(b"short").is_err());
}

#[test]
fn training_document_round_trips_through_toml() {
    let doc = TrainDocument {
        model: ModelConfig::toy(),
        train: tiny_train_config(123),
    };
    let text = doc.to_toml().unwrap();
    assert!(text.contains("[model]") && text.contains("[train]"));
    assert_eq!(TrainDocument::from_toml(&text).unwrap(), doc);

    let minimal = text.split("[train]").next().unwrap();
    let parsed = TrainDocument::from_toml(minimal).unwrap();
    assert_eq!(parsed.train, TrainConfig::default());
    assert!(TrainDocument::from_toml("[model]\nmode = \"separation\"\n").is_err());
    let bad = text.replace("channels = 1", "channels = 3");
    assert!(TrainDocument::from_toml(&bad).is_err());
}

#[test]
fn trace_csv_has_a_header_and_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let rows = [
        TraceRow { step: 1, loss: 0.5, lr: 5e-4 },
        TraceRow { step: 2, loss: 0.25, lr: 5e-4 },
    ];
    write_trace_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, ["step,loss,lr", "1,0.5,0.0005", "2,0.25,0.0005"]);
}
