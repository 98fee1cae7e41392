use melrof_core::dsp::AudioSignal;
use melrof_core::eval::{median, median_of_medians, note_fmeasures, sdr, sdr_csv, NoteTolerances, SDR_CAP_DB};
use melrof_core::pipeline::NoteEvent;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SR: u32 = 1000;

fn tone(len: usize) -> AudioSignal {
    AudioSignal::mono((0..len).map(|i| (i as f32 * 0.37).sin() * 0.5).collect(), SR).unwrap()
}

#[test]
fn perfect_estimate_hits_the_cap() {
    let r = sdr(&tone(3000), &tone(3000)).unwrap();
    assert_eq!(r.chunk_sdrs, vec![SDR_CAP_DB; 3]);
    assert_eq!(r.median, 100.0);
}

#[test]
fn silent_estimate_reads_zero() {
    let r = sdr(&AudioSignal::silence(1, 2000, SR).unwrap(), &tone(2000)).unwrap();
    assert_eq!(r.chunk_sdrs, vec![0.0, 0.0]);
}

#[test]
fn twenty_db_noise_reads_twenty_db() {
    let sr = 24000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let len = 10 * sr as usize;
    let reference: Vec<f32> = (0..len).map(|i| (i as f32 * 0.05).sin() * 0.3).collect();
    let noise: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let p_ref = reference.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
    let p_noise = noise.iter().map(|v| v * v).sum::<f64>();
    let gain = (p_ref / p_noise / 100.0).sqrt();
    let est = reference.iter().zip(&noise).map(|(&r, &n)| r + (gain * n) as f32).collect();
    let report = sdr(&AudioSignal::mono(est, sr).unwrap(), &AudioSignal::mono(reference, sr).unwrap()).unwrap();
    assert_eq!(report.chunk_sdrs.len(), 10);
    for s in &report.chunk_sdrs {
        assert!((s - 20.0).abs() < 0.5, "{s}");
    }
}

#[test]
fn scaled_estimate_follows_the_energy_ratio() {
    let r = tone(2000);
    for g in [0.0f32, 0.5, 0.9, 1.5, 3.0] {
        let report = sdr(&r.scaled(g), &r).unwrap();
        let want = -10.0 * ((1.0 - g as f64).powi(2)).log10();
        for s in report.chunk_sdrs {
            assert!((s - want).abs() < 1e-5, "g={g}: {s} vs {want}");
        }
    }
}

#[test]
fn chunking_drops_the_tail_and_skips_silence() {
    let mut samples = tone(3500).into_channels().remove(0);
    samples[1000..2000].fill(0.0);
    let reference = AudioSignal::mono(samples, SR).unwrap();
    let r = sdr(&tone(3500), &reference).unwrap();
    assert_eq!(r.chunk_sdrs.len(), 2);
    assert_eq!(r.skipped_silent, 1);

    let short = sdr(&tone(300).scaled(0.5), &tone(300)).unwrap();
    assert_eq!(short.chunk_sdrs.len(), 1);

    let silent = AudioSignal::silence(1, 2000, SR).unwrap();
    let r = sdr(&silent, &silent).unwrap();
    assert!(r.median.is_nan());
    assert_eq!(r.skipped_silent, 2);
}

#[test]
fn mismatched_signals_are_rejected() {
    assert!(sdr(&tone(2000), &tone(2001)).is_err());
    let stereo = AudioSignal::new(vec![vec![0.0; 2000]; 2], SR).unwrap();
    assert!(sdr(&stereo, &tone(2000)).is_err());
}

#[test]
fn medians_and_csv() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    let a = sdr(&tone(2000).scaled(0.5), &tone(2000)).unwrap();
    let b = sdr(&tone(2000), &tone(2000)).unwrap();
    let c = sdr(&tone(2000).scaled(0.9), &tone(2000)).unwrap();
    let mm = median_of_medians(&[a.clone(), b, c.clone()]);
    assert!((mm - c.median).abs() < 1e-12);
    let csv = sdr_csv(&[("song".into(), a.clone())]);
    assert_eq!(csv, format!("song,median_sdr,chunks,skipped_silent\nsong,{},2,0\n", a.median));
}

fn note(onset: f64, offset: f64, pitch: i32) -> NoteEvent {
    NoteEvent { onset, offset, pitch }
}

#[test]
fn worked_example_hits_onset_and_pitch_but_not_offset() {
    let r = note_fmeasures(&[note(1.03, 1.70, 60)], &[note(1.0, 2.0, 60)], NoteTolerances::default());
    assert_eq!(r.con.f_measure, 1.0);
    assert_eq!(r.conp.f_measure, 1.0);
    assert_eq!(r.conpoff.f_measure, 0.0);
}

#[test]
fn identical_and_empty_lists() {
    let notes = [note(0.5, 1.0, 60), note(1.2, 1.4, 62), note(2.0, 3.0, 70)];
    let r = note_fmeasures(&notes, &notes, NoteTolerances::default());
    for p in [r.con, r.conp, r.conpoff] {
        assert_eq!((p.precision, p.recall, p.f_measure), (1.0, 1.0, 1.0));
    }
    let r = note_fmeasures(&[], &notes, NoteTolerances::default());
    for p in [r.con, r.conp, r.conpoff] {
        assert_eq!((p.recall, p.f_measure), (0.0, 0.0));
    }
    let r = note_fmeasures(&[], &[], NoteTolerances::default());
    assert_eq!(r.con.f_measure, 0.0);
}

#[test]
fn pitch_tolerance_is_fifty_cents() {
    let r = note_fmeasures(&[note(1.0, 2.0, 61)], &[note(1.0, 2.0, 60)], NoteTolerances::default());
    assert_eq!((r.con.f_measure, r.conp.f_measure), (1.0, 0.0));
}

#[test]
fn onset_tolerance_switch_changes_a_borderline_case() {
    let est = [note(1.065, 2.0, 60)];
    let reference = [note(1.0, 2.0, 60)];
    assert_eq!(note_fmeasures(&est, &reference, NoteTolerances::default()).con.f_measure, 0.0);
    assert_eq!(note_fmeasures(&est, &reference, NoteTolerances::pop909()).con.f_measure, 1.0);
    let edge = [note(1.05, 2.0, 60)];
    assert_eq!(note_fmeasures(&edge, &reference, NoteTolerances::default()).con.f_measure, 1.0);
}

#[test]
fn offset_tolerance_uses_the_larger_window() {
    let reference = [note(1.0, 1.1, 60)];
    let r = note_fmeasures(&[note(1.0, 1.15, 60)], &reference, NoteTolerances::default());
    assert_eq!(r.conpoff.f_measure, 1.0);
    let reference = [note(1.0, 3.0, 60)];
    let r = note_fmeasures(&[note(1.0, 3.39, 60)], &reference, NoteTolerances::default());
    assert_eq!(r.conpoff.f_measure, 1.0);
    let r = note_fmeasures(&[note(1.0, 3.41, 60)], &reference, NoteTolerances::default());
    assert_eq!(r.conpoff.f_measure, 0.0);
}

#[test]
fn matching_is_one_to_one() {
    let reference = [note(1.0, 2.0, 60)];
    let r = note_fmeasures(&[note(1.0, 2.0, 60), note(1.0, 2.0, 60)], &reference, NoteTolerances::default());
    assert_eq!((r.con.precision, r.con.recall), (0.5, 1.0));
    let r = note_fmeasures(&reference, &[note(1.0, 2.0, 60), note(1.0, 2.0, 60)], NoteTolerances::default());
    assert_eq!((r.con.precision, r.con.recall), (1.0, 0.5));
}

#[test]
fn matching_is_maximal_where_greedy_fails() {
    let reference = [note(1.0, 1.5, 60), note(1.06, 1.5, 60)];
    let est = [note(1.03, 1.5, 60), note(0.98, 1.5, 60)];
    let r = note_fmeasures(&est, &reference, NoteTolerances::default());
    assert_eq!(r.con.f_measure, 1.0);
}

#[test]
fn report_text_has_stable_keys() {
    let r = note_fmeasures(&[note(1.0, 2.0, 60)], &[note(1.0, 2.0, 60)], NoteTolerances::default());
    let text = r.to_text();
    let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
    assert_eq!(keys[0], "COn.precision");
    assert_eq!(keys[8], "COnPOff.f_measure");
    assert_eq!(keys.len(), 12);
}

fn random_notes(rng: &mut ChaCha8Rng, n: usize) -> Vec<NoteEvent> {
    let mut t = 0.0;
    (0..n)
        .map(|_| {
            t += rng.random_range(0.0..0.3);
            let on = t;
            t += rng.random_range(0.05..0.5);
            note(on, t, rng.random_range(50..70))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_are_bounded_and_monotone(seed in any::<u64>(), n_ref in 0usize..8, n_est in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference = random_notes(&mut rng, n_ref);
        let est = random_notes(&mut rng, n_est);
        let tol = NoteTolerances::default();
        let base = note_fmeasures(&est, &reference, tol);
        for p in [base.con, base.conp, base.conpoff] {
            prop_assert!((0.0..=1.0).contains(&p.precision) && (0.0..=1.0).contains(&p.recall));
            let h = if p.precision + p.recall == 0.0 { 0.0 } else { 2.0 * p.precision * p.recall / (p.precision + p.recall) };
            prop_assert!((p.f_measure - h).abs() < 1e-12);
        }
        let mut spurious = est.clone();
        spurious.push(note(1000.0, 1001.0, 60));
        let s = note_fmeasures(&spurious, &reference, tol);
        prop_assert!(s.con.precision <= base.con.precision && s.conpoff.precision <= base.conpoff.precision);
        if let Some(r) = reference.first() {
            let mut extra = est.clone();
            extra.push(*r);
            let e = note_fmeasures(&extra, &reference, tol);
            prop_assert!(e.con.recall >= base.con.recall && e.conpoff.recall >= base.conpoff.recall);
        }
    }
}
