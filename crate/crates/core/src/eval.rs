//! Chunked SDR and note-level transcription metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dsp::AudioSignal;
use crate::error::Result;
use crate::pipeline::NoteEvent;

/// SDR returned when the estimate matches the reference exactly, and the
/// ceiling for every chunk.
pub const SDR_CAP_DB: f64 = 100.0;

/// Per-chunk SDRs of one song and their median.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdrReport {
    pub chunk_sdrs: Vec<f64>,
    /// Chunks whose reference is all zeros; excluded from the median.
    pub skipped_silent: usize,
    /// `NaN` when every chunk was skipped.
    pub median: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `10 log10(|ref|^2 / |ref - est|^2)` over all channels, capped at [`SDR_CAP_DB`].
fn chunk_sdr(est: &[&[f32]], reference: &[&[f32]]) -> Option<f64> {
    let (mut s, mut e) = (0.0f64, 0.0f64);
    for (x, r) in est.iter().zip(reference) {
        for (&a, &b) in x.iter().zip(r.iter()) {
            let (a, b) = (a as f64, b as f64);
            s += b * b;
            e += (b - a) * (b - a);
        }
    }
    if s == 0.0 {
        return None;
    }
    if e == 0.0 {
        return Some(SDR_CAP_DB);
    }
    Some((10.0 * (s / e).log10()).min(SDR_CAP_DB))
}

/// SDR over non-overlapping one-second chunks. A trailing partial chunk is
/// dropped; a signal shorter than one second forms a single chunk.
pub fn sdr(est: &AudioSignal, reference: &AudioSignal) -> Result<SdrReport> {
    est.check_compatible(reference)?;
    let len = reference.len();
    let step = reference.sample_rate() as usize;
    let bounds: Vec<(usize, usize)> = if len < step {
        vec![(0, len)]
    } else {
        (0..len / step).map(|i| (i * step, (i + 1) * step)).collect()
    };
    let mut chunk_sdrs = Vec::new();
    let mut skipped_silent = 0;
    for (a, b) in bounds {
        let e: Vec<&[f32]> = est.channels().iter().map(|c| &c[a..b]).collect();
        let r: Vec<&[f32]> = reference.channels().iter().map(|c| &c[a..b]).collect();
        match chunk_sdr(&e, &r) {
            Some(v) => chunk_sdrs.push(v),
            None => skipped_silent += 1,
        }
    }
    Ok(SdrReport {
        median: median(&chunk_sdrs),
        chunk_sdrs,
        skipped_silent,
    })
}

/// Median over songs of the per-song medians; songs without a scored chunk are ignored.
pub fn median_of_medians(reports: &[SdrReport]) -> f64 {
    let m: Vec<f64> = reports.iter().map(|r| r.median).filter(|v| !v.is_nan()).collect();
    median(&m)
}

/// Per-song SDR table as CSV (`song,median_sdr,chunks,skipped_silent`).
pub fn sdr_csv(rows: &[(String, SdrReport)]) -> String {
    let mut s = String::from("song,median_sdr,chunks,skipped_silent\n");
    for (name, r) in rows {
        let _ = writeln!(s, "{name},{},{},{}", r.median, r.chunk_sdrs.len(), r.skipped_silent);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

impl Prf {
    fn from_counts(matched: usize, est: usize, reference: usize) -> Self {
        let precision = if est == 0 { 0.0 } else { matched as f64 / est as f64 };
        let recall = if reference == 0 { 0.0 } else { matched as f64 / reference as f64 };
        let f_measure = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f_measure,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoteTolerances {
    /// Seconds.
    pub onset: f64,
    pub pitch_cents: f64,
    /// Offset tolerance is `max(onset, offset_ratio * reference duration)`.
    pub offset_ratio: f64,
}

impl Default for NoteTolerances {
    fn default() -> Self {
        Self {
            onset: 0.05,
            pitch_cents: 50.0,
            offset_ratio: 0.2,
        }
    }
}

impl NoteTolerances {
    /// Wider onset window used for the POP909 set.
    pub fn pop909() -> Self {
        Self {
            onset: 0.08,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptionReport {
    pub con: Prf,
    pub conp: Prf,
    pub conpoff: Prf,
    pub tolerances: NoteTolerances,
}

impl TranscriptionReport {
    /// Stable-order key/value text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, p) in [("COn", self.con), ("COnP", self.conp), ("COnPOff", self.conpoff)] {
            let _ = writeln!(s, "{name}.precision = {}", p.precision);
            let _ = writeln!(s, "{name}.recall = {}", p.recall);
            let _ = writeln!(s, "{name}.f_measure = {}", p.f_measure);
        }
        let t = self.tolerances;
        let _ = writeln!(s, "onset_tolerance = {}", t.onset);
        let _ = writeln!(s, "pitch_tolerance_cents = {}", t.pitch_cents);
        let _ = writeln!(s, "offset_ratio = {}", t.offset_ratio);
        s
    }
}

/// Distances are rounded to this many decimals before the tolerance test so
/// grid-aligned times are not rejected by representation error.
const TIME_DECIMALS: i32 = 6;

fn within(a: f64, b: f64, tol: f64) -> bool {
    let p = 10f64.powi(TIME_DECIMALS);
    ((a - b).abs() * p).round() / p <= tol
}

fn cents(a: i32, b: i32) -> f64 {
    let hz = |m: i32| 440.0 * 2f64.powf((m - 69) as f64 / 12.0);
    1200.0 * (hz(a) / hz(b)).log2().abs()
}

/// Maximum bipartite matching size by augmenting paths, visiting candidates
/// in index order.
fn max_matching(edges: &[Vec<usize>], n_est: usize) -> usize {
    fn augment(r: usize, edges: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &e in &edges[r] {
            if !seen[e] {
                seen[e] = true;
                if owner[e].is_none_or(|o| augment(o, edges, seen, owner)) {
                    owner[e] = Some(r);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; n_est];
    (0..edges.len())
        .filter(|&r| augment(r, edges, &mut vec![false; n_est], &mut owner))
        .count()
}

fn score(est: &[NoteEvent], reference: &[NoteEvent], ok: impl Fn(&NoteEvent, &NoteEvent) -> bool) -> Prf {
    let edges: Vec<Vec<usize>> = reference
        .iter()
        .map(|r| (0..est.len()).filter(|&j| ok(&est[j], r)).collect())
        .collect();
    Prf::from_counts(max_matching(&edges, est.len()), est.len(), reference.len())
}

/// COn, COnP and COnPOff with one-to-one matching.
pub fn note_fmeasures(est: &[NoteEvent], reference: &[NoteEvent], tol: NoteTolerances) -> TranscriptionReport {
    let onset = |e: &NoteEvent, r: &NoteEvent| within(e.onset, r.onset, tol.onset);
    let pitch = |e: &NoteEvent, r: &NoteEvent| cents(e.pitch, r.pitch) <= tol.pitch_cents;
    let offset = |e: &NoteEvent, r: &NoteEvent| within(e.offset, r.offset, tol.onset.max(tol.offset_ratio * r.duration()));
    TranscriptionReport {
        con: score(est, reference, onset),
        conp: score(est, reference, |e, r| onset(e, r) && pitch(e, r)),
        conpoff: score(est, reference, |e, r| onset(e, r) && pitch(e, r) && offset(e, r)),
        tolerances: tol,
    }
}
