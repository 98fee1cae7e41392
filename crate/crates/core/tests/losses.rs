use std::f64::consts::PI;

use melrof_autograd::{grad_check, Graph, Tensor};
use melrof_core::dsp::AudioSignal;
use melrof_core::heads::Posteriorgram;
use melrof_core::losses::{
    separation_loss, transcription_loss, transcription_loss_var, MultiResLossConfig, NoteTargets, SeparationLoss,
};
use melrof_core::pipeline::NoteEvent;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

const SR: u32 = 8000;

fn small_cfg() -> MultiResLossConfig {
    MultiResLossConfig {
        window_sizes: vec![64, 32],
        frame_rates: vec![100.0, 300.0],
    }
}

fn noise(rng: &mut ChaCha8Rng, channels: usize, len: usize) -> AudioSignal {
    let ch = (0..channels).map(|_| (0..len).map(|_| rng.random_range(-0.5f32..0.5)).collect()).collect();
    AudioSignal::new(ch, SR).unwrap()
}

fn combine(a: &AudioSignal, b: &AudioSignal, c: f32) -> AudioSignal {
    a.mix(&b.scaled(c)).unwrap()
}

/// Centred STFT with reflect padding and a periodic Hann window, via a full complex FFT.
fn oracle_stft(x: &[f64], n: usize, hop: usize) -> Vec<Complex<f64>> {
    let fft = FftPlanner::new().plan_fft_forward(n);
    let len = x.len() as isize;
    let frames = x.len().div_ceil(hop);
    let mut out = Vec::new();
    for t in 0..frames {
        let mut buf: Vec<Complex<f64>> = (0..n)
            .map(|j| {
                let mut i = (t * hop + j) as isize - (n / 2) as isize;
                if i < 0 {
                    i = -i;
                }
                if i >= len {
                    i = 2 * (len - 1) - i;
                }
                let w = 0.5 - 0.5 * (2.0 * PI * j as f64 / n as f64).cos();
                Complex::new(x[i as usize] * w, 0.0)
            })
            .collect();
        fft.process(&mut buf);
        out.extend_from_slice(&buf[..n / 2 + 1]);
    }
    out
}

fn oracle_loss(est: &AudioSignal, target: &AudioSignal, cfg: &MultiResLossConfig) -> f64 {
    let chans = |s: &AudioSignal| -> Vec<Vec<f64>> {
        s.channels().iter().map(|c| c.iter().map(|&v| v as f64).collect()).collect()
    };
    let (e, t) = (chans(est), chans(target));
    let mut wave = 0.0;
    for (a, b) in e.iter().zip(&t) {
        wave += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    let mut total = wave / (e.len() * e[0].len()) as f64;
    for &n in &cfg.window_sizes {
        for &r in &cfg.frame_rates {
            let hop = (SR as f64 / r).round() as usize;
            let (mut sum, mut count) = (0.0, 0usize);
            for (a, b) in e.iter().zip(&t) {
                for (x, y) in oracle_stft(a, n, hop).iter().zip(oracle_stft(b, n, hop)) {
                    sum += (x.re - y.re).abs() + (x.im - y.im).abs();
                    count += 2;
                }
            }
            total += sum / count as f64;
        }
    }
    total
}

#[test]
fn identical_signals_have_zero_loss() {
    let x = noise(&mut ChaCha8Rng::seed_from_u64(1), 2, 500);
    assert_eq!(separation_loss(&x, &x, &small_cfg()).unwrap(), 0.0);
}

#[test]
fn loss_scales_with_the_error_magnitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (t, d) = (noise(&mut rng, 1, 600), noise(&mut rng, 1, 600));
    let cfg = small_cfg();
    let unit = separation_loss(&combine(&t, &d, 0.5), &t, &cfg).unwrap() / 0.5;
    for c in [0.25f32, 1.0, 2.0] {
        let l = separation_loss(&combine(&t, &d, c), &t, &cfg).unwrap();
        assert!((l - c as f64 * unit).abs() < 1e-6 * l.max(1.0), "c={c}: {l} vs {}", c as f64 * unit);
    }
}

#[test]
fn loss_is_even_in_the_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t, d) = (noise(&mut rng, 2, 400), noise(&mut rng, 2, 400));
    let cfg = small_cfg();
    let a = separation_loss(&combine(&t, &d, 1.0), &t, &cfg).unwrap();
    let b = separation_loss(&combine(&t, &d, -1.0), &t, &cfg).unwrap();
    assert!((a - b).abs() < 1e-6 * a);
}

#[test]
fn loss_matches_an_independent_fft_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for channels in [1, 2] {
        let (e, t) = (noise(&mut rng, channels, 777), noise(&mut rng, channels, 777));
        let cfg = small_cfg();
        let got = separation_loss(&e, &t, &cfg).unwrap();
        let want = oracle_loss(&e, &t, &cfg);
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }
}

#[test]
fn default_resolutions_cover_five_windows_at_two_rates() {
    let r = MultiResLossConfig::default().resolutions(44100).unwrap();
    assert_eq!(r.len(), 10);
    assert_eq!((r[0].window_size, r[0].hop_size), (4096, 441));
    assert_eq!((r[1].window_size, r[1].hop_size), (4096, 147));
    assert_eq!((r[9].window_size, r[9].hop_size), (256, 147));
}

#[test]
fn mismatched_signals_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = (noise(&mut rng, 1, 300), noise(&mut rng, 2, 300));
    assert!(separation_loss(&a, &b, &small_cfg()).is_err());
    let c = noise(&mut rng, 1, 301);
    assert!(separation_loss(&a, &c, &small_cfg()).is_err());
}

#[test]
fn separation_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = MultiResLossConfig {
        window_sizes: vec![32, 16],
        frame_rates: vec![400.0, 1000.0],
    };
    let loss = SeparationLoss::<f64>::new(&cfg, SR).unwrap();
    let target = loss.target(Tensor::from_fn(&[2, 120], |_| rng.random_range(-1.0..1.0))).unwrap();
    let est = Tensor::from_fn(&[2, 120], |_| rng.random_range(-1.0..1.0));
    let report = grad_check(|g: &Graph<f64>, v| Ok(loss.loss_var(g, v[0], &target).unwrap()), &[est], 1e-7).unwrap();
    assert!(report.max_relative_error < 1e-3, "{report:?}");
}

fn note(onset: f64, offset: f64, pitch: i32) -> NoteEvent {
    NoteEvent { onset, offset, pitch }
}

fn posteriors(onset: Tensor<f32>, frame: Tensor<f32>) -> Posteriorgram {
    Posteriorgram::new(onset, frame).unwrap()
}

#[test]
fn even_posteriors_cost_two_ln_two() {
    let targets = NoteTargets::from_notes(&[note(0.1, 0.3, 60)], 20, 50.0).unwrap();
    let post = posteriors(Tensor::full(&[60, 20], 0.5), Tensor::full(&[61, 20], 0.5));
    let l = transcription_loss(&post, &targets).unwrap();
    assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn perfect_posteriors_cost_almost_nothing() {
    let targets = NoteTargets::from_notes(&[note(0.1, 0.3, 60), note(0.5, 0.6, 72)], 40, 50.0).unwrap();
    let post = posteriors(targets.onset_roll.clone(), targets.frame_roll.clone());
    assert!(transcription_loss(&post, &targets).unwrap() < 1e-5);
}

#[test]
fn bce_matches_a_per_cell_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let targets = NoteTargets::from_notes(&[note(0.02, 0.2, 50), note(0.3, 0.5, 90)], 30, 50.0).unwrap();
    let on = Tensor::from_fn(&[60, 30], |_| rng.random_range(0.01f32..0.99));
    let fr = Tensor::from_fn(&[61, 30], |_| rng.random_range(0.01f32..0.99));
    let mean_bce = |p: &Tensor<f32>, y: &Tensor<f32>| {
        let mut s = 0.0;
        for (&p, &y) in p.data().iter().zip(y.data()) {
            let p = p as f64;
            s -= if y == 1.0 { p.ln() } else { (1.0 - p).ln() };
        }
        s / p.len() as f64
    };
    let want = mean_bce(&on, &targets.onset_roll) + mean_bce(&fr, &targets.frame_roll);
    let got = transcription_loss(&posteriors(on, fr), &targets).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn logit_loss_agrees_with_posterior_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let targets = NoteTargets::from_notes(&[note(0.1, 0.4, 64)], 25, 50.0).unwrap();
    let on = Tensor::<f64>::from_fn(&[25, 60], |_| rng.random_range(-3.0..3.0));
    let fr = Tensor::<f64>::from_fn(&[25, 61], |_| rng.random_range(-3.0..3.0));
    let g = Graph::new();
    let (a, b) = (g.constant(on.clone()), g.constant(fr.clone()));
    let via_logits = g.value(transcription_loss_var(&g, a, b, &targets).unwrap()).item();
    let sig = |x: f64| (1.0 / (1.0 + (-x).exp())) as f32;
    let transpose = |x: &Tensor<f64>, rows: usize| {
        Tensor::from_fn(&[rows, 25], |i| sig(x.data()[(i % 25) * rows + i / 25]))
    };
    let post = posteriors(transpose(&on, 60), transpose(&fr, 61));
    let via_post = transcription_loss(&post, &targets).unwrap();
    assert!((via_logits - via_post).abs() < 1e-5, "{via_logits} vs {via_post}");
}

#[test]
fn transcription_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let targets = NoteTargets::from_notes(&[note(0.04, 0.12, 40)], 8, 50.0).unwrap();
    let inputs = [
        Tensor::<f64>::from_fn(&[8, 60], |_| rng.random_range(-2.0..2.0)),
        Tensor::<f64>::from_fn(&[8, 61], |_| rng.random_range(-2.0..2.0)),
    ];
    let report = grad_check(
        |g: &Graph<f64>, v| Ok(transcription_loss_var(g, v[0], v[1], &targets).unwrap()),
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-3, "{report:?}");
}

#[test]
fn targets_mark_onsets_and_sustain() {
    let t = NoteTargets::from_notes(&[note(0.1, 0.2, 60)], 12, 50.0).unwrap();
    let row = (60 - 36) * 12;
    assert_eq!(t.onset_roll.data()[row + 5], 1.0);
    assert_eq!(t.onset_roll.data().iter().sum::<f32>(), 1.0);
    let frames: Vec<usize> = (0..12).filter(|&f| t.frame_roll.data()[row + f] == 1.0).collect();
    assert_eq!(frames, (5..10).collect::<Vec<_>>());
    let silent: Vec<usize> = (0..12).filter(|&f| t.frame_roll.data()[60 * 12 + f] == 1.0).collect();
    assert_eq!(silent, vec![0, 1, 2, 3, 4, 10, 11]);
}

#[test]
fn notes_cut_by_the_crop_start_keep_frames_without_onset() {
    let t = NoteTargets::from_notes(&[note(-0.1, 0.1, 70)], 10, 50.0).unwrap();
    assert_eq!(t.onset_roll.data().iter().sum::<f32>(), 0.0);
    let row = (70 - 36) * 10;
    assert_eq!(&t.frame_roll.data()[row..row + 6], &[1.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
}

#[test]
fn invalid_note_lists_are_rejected() {
    assert!(NoteTargets::from_notes(&[note(0.1, 0.2, 35)], 10, 50.0).is_err());
    assert!(NoteTargets::from_notes(&[note(0.1, 0.2, 96)], 10, 50.0).is_err());
    assert!(NoteTargets::from_notes(&[note(0.0, 0.1, 60), note(0.04, 0.12, 62)], 10, 50.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn separation_loss_is_non_negative(seed in any::<u64>(), len in 40usize..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (noise(&mut rng, 1, len), noise(&mut rng, 1, len));
        prop_assert!(separation_loss(&a, &b, &small_cfg()).unwrap() >= 0.0);
    }

    #[test]
    fn targets_from_monophonic_notes_are_valid(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = 100;
        let mut notes = Vec::new();
        let mut t = rng.random_range(0.0..0.2);
        while t < 2.0 {
            let d = rng.random_range(0.03..0.4);
            notes.push(note(t, t + d, rng.random_range(36..=95)));
            t += d + rng.random_range(0.0..0.2);
        }
        let targets = NoteTargets::from_notes(&notes, frames, 50.0).unwrap();
        prop_assert!(targets.validate().is_ok());
        let onsets = targets.onset_roll.data().iter().sum::<f32>() as usize;
        let in_range = notes.iter().filter(|n| ((n.onset * 50.0).round() as usize) < frames).count();
        prop_assert_eq!(onsets, in_range);
    }
}
