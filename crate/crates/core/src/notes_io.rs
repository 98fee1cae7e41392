//! Note list files: JSON lines and single-track standard MIDI.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::pipeline::NoteEvent;

/// Ticks per quarter note.
pub const MIDI_DIVISION: u16 = 480;
/// Microseconds per quarter note (120 BPM).
pub const MIDI_TEMPO: u32 = 500_000;
const VELOCITY: u8 = 100;

/// One `{"onset": s, "offset": s, "pitch": n}` object per line.
pub fn notes_to_jsonl(notes: &[NoteEvent]) -> Result<String> {
    let mut s = String::new();
    for n in notes {
        s.push_str(&serde_json::to_string(n)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn notes_from_jsonl(reader: impl BufRead) -> Result<Vec<NoteEvent>> {
    let mut notes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let n: NoteEvent = serde_json::from_str(&line)?;
        if !(n.onset.is_finite() && n.offset.is_finite() && n.onset < n.offset) {
            return Err(CoreError::InvalidConfig(format!("line {}: onset must precede offset", i + 1)));
        }
        notes.push(n);
    }
    Ok(notes)
}

pub fn write_notes_jsonl(path: &Path, notes: &[NoteEvent]) -> Result<()> {
    std::fs::write(path, notes_to_jsonl(notes)?)?;
    Ok(())
}

pub fn read_notes_jsonl(path: &Path) -> Result<Vec<NoteEvent>> {
    notes_from_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}

fn ticks_per_second() -> f64 {
    MIDI_DIVISION as f64 * 1e6 / MIDI_TEMPO as f64
}

fn put_vlq(out: &mut Vec<u8>, mut v: u32) {
    let mut bytes = vec![(v & 0x7f) as u8];
    v >>= 7;
    while v > 0 {
        bytes.push((v & 0x7f) as u8 | 0x80);
        v >>= 7;
    }
    out.extend(bytes.iter().rev());
}

/// Format-0 file with a tempo event followed by note-on/off pairs on channel 0.
pub fn notes_to_midi(notes: &[NoteEvent]) -> Result<Vec<u8>> {
    let tick = |s: f64| (s.max(0.0) * ticks_per_second()).round() as u32;
    // (tick, is_on, pitch); offs sort before ons at the same tick.
    let mut events = Vec::with_capacity(2 * notes.len());
    for n in notes {
        if !(0..=127).contains(&n.pitch) {
            return Err(CoreError::InvalidConfig(format!("pitch {} outside MIDI range", n.pitch)));
        }
        events.push((tick(n.onset), true, n.pitch as u8));
        events.push((tick(n.offset), false, n.pitch as u8));
    }
    events.sort();
    let mut track = vec![0x00, 0xff, 0x51, 0x03];
    track.extend_from_slice(&MIDI_TEMPO.to_be_bytes()[1..]);
    let mut now = 0;
    for (t, on, pitch) in events {
        put_vlq(&mut track, t - now);
        now = t;
        track.extend_from_slice(&if on { [0x90, pitch, VELOCITY] } else { [0x80, pitch, 0] });
    }
    track.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);
    let mut out = b"MThd".to_vec();
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&MIDI_DIVISION.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}

pub fn write_midi(path: &Path, notes: &[NoteEvent]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&notes_to_midi(notes)?)?;
    Ok(())
}

fn midi_err(msg: &str) -> CoreError {
    CoreError::InvalidConfig(format!("malformed MIDI: {msg}"))
}

/// Notes from the first track of a MIDI file at the file's division and a
/// single tempo (the first tempo event, 120 BPM if none). Supports running
/// status; note-on with velocity 0 ends a note.
pub fn notes_from_midi(bytes: &[u8]) -> Result<Vec<NoteEvent>> {
    if bytes.len() < 14 || &bytes[..4] != b"MThd" {
        return Err(midi_err("missing header"));
    }
    let division = u16::from_be_bytes([bytes[12], bytes[13]]);
    if division == 0 || division & 0x8000 != 0 {
        return Err(midi_err("unsupported time division"));
    }
    let hlen = u32::from_be_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let mut pos = 8 + hlen;
    if bytes.len() < pos + 8 || &bytes[pos..pos + 4] != b"MTrk" {
        return Err(midi_err("missing track"));
    }
    let tlen = u32::from_be_bytes(bytes[pos + 4..pos + 8].try_into().expect("4 bytes")) as usize;
    pos += 8;
    let track = bytes.get(pos..pos + tlen).ok_or_else(|| midi_err("truncated track"))?;
    let mut i = 0;
    let next = |i: &mut usize| -> Result<u8> {
        let b = *track.get(*i).ok_or_else(|| midi_err("truncated event"))?;
        *i += 1;
        Ok(b)
    };
    let mut tick = 0u64;
    let mut tempo = None;
    let mut status = 0u8;
    let mut open: [Option<u64>; 128] = [None; 128];
    let mut raw = Vec::new();
    while i < track.len() {
        let mut delta = 0u64;
        loop {
            let b = next(&mut i)?;
            delta = (delta << 7) | (b & 0x7f) as u64;
            if b & 0x80 == 0 {
                break;
            }
        }
        tick += delta;
        let mut b = next(&mut i)?;
        if b == 0xff || b == 0xf0 || b == 0xf7 {
            let kind = if b == 0xff { next(&mut i)? } else { 0 };
            let mut len = 0usize;
            loop {
                let c = next(&mut i)?;
                len = (len << 7) | (c & 0x7f) as usize;
                if c & 0x80 == 0 {
                    break;
                }
            }
            let data = track.get(i..i + len).ok_or_else(|| midi_err("truncated meta event"))?;
            i += len;
            if b == 0xff && kind == 0x51 && len == 3 && tempo.is_none() {
                tempo = Some(u32::from_be_bytes([0, data[0], data[1], data[2]]));
            }
            continue;
        }
        let first = if b & 0x80 != 0 {
            status = b;
            next(&mut i)?
        } else {
            let d = b;
            b = status;
            d
        };
        let kind = b & 0xf0;
        let second = if matches!(kind, 0xc0 | 0xd0) { 0 } else { next(&mut i)? };
        let pitch = (first & 0x7f) as usize;
        match kind {
            0x90 if second > 0 => open[pitch] = Some(tick),
            0x80 | 0x90 => {
                if let Some(on) = open[pitch].take() {
                    raw.push((on, tick, pitch as i32));
                }
            }
            0xa0..=0xe0 => {}
            _ => return Err(midi_err("unexpected status byte")),
        }
    }
    let sec = tempo.unwrap_or(MIDI_TEMPO) as f64 / 1e6 / division as f64;
    raw.sort();
    Ok(raw
        .into_iter()
        .map(|(on, off, pitch)| NoteEvent {
            onset: on as f64 * sec,
            offset: off as f64 * sec,
            pitch,
        })
        .collect())
}
