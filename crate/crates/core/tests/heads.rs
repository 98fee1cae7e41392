use std::sync::Arc;

use melrof_autograd::{grad_check, Graph, Tensor};
use melrof_core::dsp::{ComplexSpectrogram, StftConfig};
use melrof_core::heads::{
    apply_mask, apply_mask_var, assemble_mask, assemble_mask_var, embedding_param_names, embedding_projection,
    embedding_projection_var, frame_head, frame_logits_var, init_embedding_projection, init_transcription_heads,
    onset_head, pool_to_frame_rate, pooled_frames, MaskTensor, Posteriorgram, NUM_FRAME_CLASSES, NUM_PITCHES,
    ONSET_HIDDEN,
};
use melrof_core::melband::{build_mel_band_map, MelBandMap};
use melrof_core::params::{Bound, ParamStore};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random32(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

/// Overlapping bands with non-decreasing starts over `n_fft / 2 + 1` bins.
fn random_map(rng: &mut ChaCha8Rng) -> MelBandMap {
    let n_fft = 2 * rng.random_range(8..40);
    let bins = n_fft / 2 + 1;
    let k = rng.random_range(1..9);
    let mut starts: Vec<usize> = (0..k).map(|_| rng.random_range(0..bins)).collect();
    starts.sort();
    let bands = starts
        .into_iter()
        .map(|s| (s, (s + rng.random_range(0..bins / 2)).min(bins - 1)))
        .collect();
    MelBandMap::from_bands(bands, 16000, n_fft).unwrap()
}

/// Per-bin mean written independently of the implementation: for each cell,
/// walk the bands in order, pick the matching column, and divide by the count.
fn brute_force_mask(y: &Tensor<f32>, map: &MelBandMap, planes: usize) -> Vec<f32> {
    let frames = y.shape()[1];
    let f = map.bins();
    let mut out = vec![0.0f32; planes * f * frames];
    for c in 0..planes {
        for bin in 0..f {
            for t in 0..frames {
                let mut sum = 0.0f32;
                let mut count = 0u32;
                let mut offset = 0;
                for k in 0..map.num_bands() {
                    let (s, e) = map.band(k);
                    let w = e - s + 1;
                    if (s..=e).contains(&bin) {
                        sum += y.data()[(offset + c * w + bin - s) * frames + t];
                        count += 1;
                    }
                    offset += planes * w;
                }
                out[(c * f + bin) * frames + t] = match count {
                    0 if c % 2 == 0 => 1.0,
                    0 => 0.0,
                    n => sum / n as f32,
                };
            }
        }
    }
    out
}

#[test]
fn transcription_embedding_has_64_features_per_band() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ParamStore::new();
    init_embedding_projection(&mut params, 8, &[64; 32], &mut rng);
    let h = random32(&[8, 32, 5], &mut rng);
    let y = embedding_projection(&h, &params).unwrap();
    assert_eq!(y.shape(), &[2048, 5]);
    assert_eq!(params.get(&embedding_param_names(31)[3]).unwrap().shape(), &[32, 128]);
}

#[test]
fn zero_tokens_and_biases_give_zero_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ParamStore::new();
    init_embedding_projection(&mut params, 8, &[3, 5], &mut rng);
    for k in 0..2 {
        let [_, _, b1, _, b2] = embedding_param_names(k);
        params.get_mut(&b1).unwrap().data_mut().fill(0.0);
        params.get_mut(&b2).unwrap().data_mut().fill(0.0);
    }
    let y = embedding_projection(&Tensor::zeros(&[8, 2, 4]), &params).unwrap();
    assert_eq!(y.shape(), &[8, 4]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn separation_embedding_width_follows_band_width() {
    let map = build_mel_band_map(44100, 2048, 7, 0.0, 22050.0).unwrap();
    assert_eq!(4 * map.width(0), 184);
}

#[test]
fn single_cover_bins_pass_band_values_through() {
    let map = MelBandMap::from_bands(vec![(0, 2), (2, 4)], 8000, 8).unwrap();
    // Band 0 covers bins 0..=2, band 1 covers 2..=4; one plane pair, one frame.
    let mut y = vec![0.0f32; 2 * 3 + 2 * 3];
    y[0] = 0.7; // band 0, real, bin 0
    y[2] = 0.2; // band 0, real, bin 2
    y[6] = 0.6; // band 1, real, bin 2
    y[8] = -0.3; // band 1, real, bin 4
    let m = assemble_mask(&Tensor::new(&[12, 1], y).unwrap(), &map, 2).unwrap();
    assert_eq!(m.get(0, 0, 0), 0.7);
    assert!((m.get(0, 2, 0) - 0.4).abs() < 1e-7);
    assert_eq!(m.get(0, 4, 0), -0.3);
}

#[test]
fn uncovered_bins_pass_through() {
    let map = MelBandMap::from_bands(vec![(1, 2)], 8000, 8).unwrap();
    let m = assemble_mask(&Tensor::full(&[4, 3], 0.25), &map, 2).unwrap();
    for t in 0..3 {
        assert_eq!((m.get(0, 0, t), m.get(1, 0, t)), (1.0, 0.0));
        assert_eq!((m.get(0, 4, t), m.get(1, 4, t)), (1.0, 0.0));
        assert_eq!(m.get(1, 1, t), 0.25);
    }
}

#[test]
fn assemble_mask_matches_brute_force_on_the_seven_band_map() {
    let map = build_mel_band_map(44100, 2048, 7, 0.0, 22050.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = random32(&[4 * map.total_width(), 6], &mut rng);
    let m = assemble_mask(&y, &map, 4).unwrap();
    assert_eq!(m.data().shape(), &[4, 1025, 6]);
    assert_eq!(m.data().data(), brute_force_mask(&y, &map, 4).as_slice());
}

#[test]
fn assemble_mask_rejects_wrong_width() {
    let map = MelBandMap::from_bands(vec![(0, 2)], 8000, 8).unwrap();
    assert!(assemble_mask(&Tensor::zeros(&[5, 2]), &map, 2).is_err());
}

fn spec(data: Tensor<f32>) -> ComplexSpectrogram {
    let n = data.shape()[1];
    ComplexSpectrogram::new(data, 8000, &StftConfig::hann(2 * (n - 1), (n - 1) / 2)).unwrap()
}

#[test]
fn identity_and_zero_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = spec(random32(&[4, 9, 3], &mut rng));
    let ones = Tensor::from_fn(&[4, 9, 3], |i| if (i / 27) % 2 == 0 { 1.0 } else { 0.0 });
    assert_eq!(apply_mask(&MaskTensor::new(ones).unwrap(), &x).unwrap(), x);
    let z = apply_mask(&MaskTensor::new(Tensor::zeros(&[4, 9, 3])).unwrap(), &x).unwrap();
    assert!(z.data().data().iter().all(|&v| v == 0.0));
}

#[test]
fn imaginary_unit_mask_rotates_by_ninety_degrees() {
    let x = Tensor::from_fn(&[2, 5, 1], |i| if i < 5 { 1.0 } else { 0.0 });
    let m = Tensor::from_fn(&[2, 5, 1], |i| if i < 5 { 0.0 } else { 1.0 });
    let y = apply_mask(&MaskTensor::new(m).unwrap(), &spec(x)).unwrap();
    for f in 0..5 {
        assert_eq!((y.get(0, f, 0), y.get(1, f, 0)), (0.0, 1.0));
    }
}

#[test]
fn inverse_mask_recovers_unity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random32(&[2, 9, 4], &mut rng);
    let block = 36;
    let m = Tensor::from_fn(&[2, 9, 4], |i| {
        let j = i % block;
        let (re, im) = (x.data()[j] as f64, x.data()[block + j] as f64);
        let n = re * re + im * im;
        (if i < block { re / n } else { -im / n }) as f32
    });
    let y = apply_mask(&MaskTensor::new(m).unwrap(), &spec(x)).unwrap();
    for j in 0..block {
        assert!((y.data().data()[j] - 1.0).abs() < 1e-5);
        assert!(y.data().data()[block + j].abs() < 1e-5);
    }
}

#[test]
fn apply_mask_rejects_shape_mismatch() {
    let x = spec(Tensor::zeros(&[2, 5, 2]));
    assert!(apply_mask(&MaskTensor::new(Tensor::zeros(&[2, 5, 3])).unwrap(), &x).is_err());
    assert!(MaskTensor::new(Tensor::zeros(&[3, 5, 3])).is_err());
}

fn heads(input: usize, zero_bias: bool, seed: u64) -> ParamStore<f32> {
    let mut params = ParamStore::new();
    init_transcription_heads(&mut params, input, ONSET_HIDDEN, &mut ChaCha8Rng::seed_from_u64(seed));
    if zero_bias {
        for n in ["onset.b1", "onset.b2", "frame.b"] {
            params.get_mut(n).unwrap().data_mut().fill(0.0);
        }
    }
    params
}

#[test]
fn zero_input_gives_even_posteriors() {
    let params = heads(64, true, 6);
    let e = Tensor::zeros(&[64, 300]);
    let on = onset_head(&e, &params).unwrap();
    let fr = frame_head(&e, &params).unwrap();
    assert_eq!(on.shape(), &[NUM_PITCHES, 300]);
    assert_eq!(fr.shape(), &[NUM_FRAME_CLASSES, 300]);
    assert!(on.data().iter().chain(fr.data()).all(|&v| v == 0.5));
}

#[test]
fn heads_are_deterministic_and_strictly_inside_unit_interval() {
    let params = heads(128, false, 7);
    let e = random32(&[128, 20], &mut ChaCha8Rng::seed_from_u64(7));
    let a = onset_head(&e, &params).unwrap();
    assert_eq!(a, onset_head(&e, &params).unwrap());
    let f = frame_head(&e, &params).unwrap();
    assert!(a.data().iter().chain(f.data()).all(|&v| v > 0.0 && v < 1.0));
    assert!(onset_head(&Tensor::zeros(&[64, 20]), &params).is_err());
}

#[test]
fn frame_logits_are_additive_without_bias() {
    let params = heads(16, true, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (a, b) = (random32(&[3, 16], &mut rng), random32(&[3, 16], &mut rng));
    let sum = Tensor::from_fn(&[3, 16], |i| a.data()[i] + b.data()[i]);
    let logits = |x: &Tensor<f32>| {
        let g = Graph::new();
        let bound = params.bind(&g, |_| false);
        let y = frame_logits_var(&g, &bound, g.constant(x.clone())).unwrap();
        g.value(y).as_ref().clone()
    };
    let (la, lb, ls) = (logits(&a), logits(&b), logits(&sum));
    for i in 0..ls.len() {
        assert!((ls.data()[i] - la.data()[i] - lb.data()[i]).abs() < 1e-5);
    }
}

#[test]
fn pooling_at_equal_rates_is_identity() {
    let y = random32(&[6, 300], &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(pool_to_frame_rate(&y, 24000.0 / 480.0, 50.0).unwrap(), y);
    assert_eq!(pooled_frames(300, 50.0, 50.0), 300);
}

#[test]
fn pooling_halves_a_hundred_fps_grid() {
    let y = Tensor::from_fn(&[2, 8], |i| i as f32);
    let p = pool_to_frame_rate(&y, 100.0, 50.0).unwrap();
    assert_eq!(p.shape(), &[2, 4]);
    assert_eq!(p.data(), &[0.5, 2.5, 4.5, 6.5, 8.5, 10.5, 12.5, 14.5]);
    let c = pool_to_frame_rate(&Tensor::full(&[3, 800], 0.3f32), 100.0, 50.0).unwrap();
    assert!(c.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
}

#[test]
fn posteriorgram_checks_shapes() {
    assert!(Posteriorgram::new(Tensor::zeros(&[60, 4]), Tensor::zeros(&[61, 4])).is_ok());
    assert!(Posteriorgram::new(Tensor::zeros(&[60, 4]), Tensor::zeros(&[60, 4])).is_err());
    assert!(Posteriorgram::new(Tensor::zeros(&[60, 4]), Tensor::zeros(&[61, 5])).is_err());
}

#[test]
fn mask_head_gradients_match_finite_differences() {
    let map = MelBandMap::from_bands(vec![(0, 3), (2, 5), (5, 8)], 8000, 16).unwrap();
    let planes = 2;
    let z: Vec<usize> = (0..3).map(|k| planes * map.width(k)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut params = ParamStore::<f64>::new();
    init_embedding_projection(&mut params, 4, &z, &mut rng);
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut inputs = vec![Tensor::from_fn(&[3, 5, 4], |_| rng.random_range(-1.0..1.0))];
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    inputs.push(Tensor::from_fn(&[2, 9, 5], |_| rng.random_range(-1.0..1.0)));
    let probe = Arc::new(Tensor::from_fn(&[2, 9, 5], |_| rng.random_range(-1.0..1.0)));
    let n = names.len();
    let report = grad_check(
        |g: &Graph<f64>, v| {
            let bound = Bound::from_vars(names.iter().cloned().zip(v[1..=n].iter().copied()));
            let y = embedding_projection_var(g, &bound, v[0], 3).unwrap();
            let m = assemble_mask_var(g, y, &map, planes).unwrap();
            let out = apply_mask_var(g, m, v[n + 1]).unwrap();
            g.sum(g.mul_const(out, probe.clone())?)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-5, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn assemble_mask_equals_brute_force_on_random_maps(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_map(&mut rng);
        let planes = 2 * rng.random_range(1..=2);
        let frames = rng.random_range(1..5);
        let y = random32(&[planes * map.total_width(), frames], &mut rng);
        let m = assemble_mask(&y, &map, planes).unwrap();
        let oracle = brute_force_mask(&y, &map, planes);
        prop_assert_eq!(m.data().data(), oracle.as_slice());
    }
}
