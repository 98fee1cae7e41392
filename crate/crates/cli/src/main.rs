//! `melrof`: band maps, separation, transcription, toy training and evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use melrof_core::checkpoint::Checkpoint;
use melrof_core::dsp::{read_wav, write_wav, AudioSignal, WavFormat};
use melrof_core::eval::{median_of_medians, note_fmeasures, sdr, sdr_csv, NoteTolerances};
use melrof_core::melband::build_mel_band_map;
use melrof_core::model::{MelRoFormer, Mode, ModelConfig};
use melrof_core::notes_io::{notes_from_midi, read_notes_jsonl, write_midi, write_notes_jsonl};
use melrof_core::pipeline::{conform, separate, swap_head_for_transcription, transcribe, NoteEvent};
use melrof_core::train::synth::{toy_separation_set, toy_transcription_set};
use melrof_core::train::{write_trace_csv, NoteClip, SeparationData, TrainConfig, TrainDocument, Trainer};
use melrof_core::CoreError;

#[derive(Parser)]
#[command(name = "melrof", version, about = "Mel-band RoPE transformer for vocal separation and melody transcription")]
struct Cli {
    /// Seed for model initialisation, synthetic data, data order and dropout.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Training document (TOML with a [model] table and an optional [train] table).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoteFormat {
    Json,
    Midi,
}

#[derive(Subcommand)]
enum Command {
    /// Build a Mel-band map and write it as JSON.
    Bandmap {
        #[arg(long, default_value_t = 44100)]
        sr: u32,
        #[arg(long, default_value_t = 2048)]
        nfft: usize,
        #[arg(long, default_value_t = 60)]
        bands: usize,
        #[arg(long, default_value_t = 0.0)]
        fmin: f64,
        /// Defaults to the Nyquist frequency.
        #[arg(long)]
        fmax: Option<f64>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract vocals from a WAV file.
    Separate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Resample and up/down-mix the input to the model's format.
        #[arg(long)]
        conform: bool,
        /// Write 32-bit float samples instead of 16-bit PCM.
        #[arg(long)]
        float: bool,
    },
    /// Transcribe the vocal melody of a WAV file to notes.
    Transcribe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = NoteFormat::Json)]
        format: NoteFormat,
        #[arg(long)]
        conform: bool,
    },
    /// Train a separation model from scratch or resume from a checkpoint.
    Train {
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Model preset when no --config is given.
        #[arg(long, default_value = "toy")]
        preset: String,
        #[arg(long)]
        steps: Option<u64>,
        /// Directory of song folders holding mixture.wav and vocals.wav; synthetic data when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Synthetic clip count.
        #[arg(long, default_value_t = 4)]
        clips: usize,
        /// Synthetic clip length in seconds.
        #[arg(long, default_value_t = 6.0)]
        seconds: f64,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Loss curve CSV to write.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Swap a separation checkpoint's head for transcription and fine-tune it.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Directory of WAV files with note lists of the same stem (.jsonl, .mid or .midi); synthetic data when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        clips: usize,
        #[arg(long, default_value_t = 6.0)]
        seconds: f64,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Chunked SDR of estimates against references (two WAV files or two directories).
    EvalSdr {
        #[arg(long)]
        est: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Per-song table to write.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Note-level F-measures of an estimated note list against a reference.
    EvalNotes {
        #[arg(long)]
        est: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Onset tolerance in seconds.
        #[arg(long, default_value_t = 0.05)]
        onset_tol: f64,
    },
}

enum Failure {
    Usage(String),
    Core(CoreError),
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, CoreError::NonFinite(_)) { 3 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let doc = cli.config.as_deref().map(TrainDocument::load).transpose()?;
    match cli.command {
        Command::Bandmap {
            sr,
            nfft,
            bands,
            fmin,
            fmax,
            out,
        } => cmd_bandmap(sr, nfft, bands, fmin, fmax, out.as_deref()),
        Command::Separate {
            model,
            input,
            output,
            conform,
            float,
        } => cmd_separate(&model, &input, &output, conform, float),
        Command::Transcribe {
            model,
            input,
            output,
            format,
            conform,
        } => cmd_transcribe(&model, &input, &output, format, conform),
        Command::Train {
            out,
            preset,
            steps,
            data,
            clips,
            seconds,
            resume,
            trace,
        } => {
            let (model_cfg, mut train_cfg) = match doc {
                Some(d) => (d.model, d.train),
                None => (ModelConfig::preset(&preset)?, default_train_config()),
            };
            if let Some(s) = cli.seed {
                train_cfg.seed = s;
            }
            if let Some(s) = steps {
                train_cfg.steps = s;
            }
            let trainer = match resume {
                Some(path) => {
                    let mut t = Trainer::from_checkpoint(Checkpoint::load(&path)?)?;
                    if let Some(s) = steps {
                        t = with_steps(t, s)?;
                    }
                    t
                }
                None => {
                    let model = MelRoFormer::new(model_cfg, train_cfg.seed)?;
                    Trainer::new(model, train_cfg)?
                }
            };
            cmd_train(trainer, data.as_deref(), clips, seconds, &out, trace.as_deref())
        }
        Command::Finetune {
            model,
            out,
            steps,
            data,
            clips,
            seconds,
            trace,
        } => {
            let mut train_cfg = doc.map_or_else(default_train_config, |d| d.train);
            if let Some(s) = cli.seed {
                train_cfg.seed = s;
            }
            if let Some(s) = steps {
                train_cfg.steps = s;
            }
            cmd_finetune(&model, train_cfg, data.as_deref(), clips, seconds, &out, trace.as_deref())
        }
        Command::EvalSdr { est, reference, csv } => cmd_eval_sdr(&est, &reference, csv.as_deref()),
        Command::EvalNotes {
            est,
            reference,
            onset_tol,
        } => cmd_eval_notes(&est, &reference, onset_tol),
    }
}

/// Library defaults with 3 s training crops.
fn default_train_config() -> TrainConfig {
    TrainConfig {
        crop_seconds: Some(3.0),
        ..TrainConfig::default()
    }
}

/// Resumed trainer with a new total step budget.
fn with_steps(t: Trainer, steps: u64) -> melrof_core::Result<Trainer> {
    let mut state = t.state().clone();
    state.config.steps = steps;
    Trainer::from_state(t.into_model(), state)
}

fn cmd_bandmap(sr: u32, nfft: usize, bands: usize, fmin: f64, fmax: Option<f64>, out: Option<&Path>) -> Outcome {
    let map = build_mel_band_map(sr, nfft, bands, fmin, fmax.unwrap_or(sr as f64 / 2.0))?;
    let counts = map.overlap_counts();
    let covered = counts.iter().filter(|&&c| c > 0).count();
    let max = counts.iter().copied().max().unwrap_or(0);
    let summary = format!(
        "{} bands over {} bins: {covered} covered, at most {max} bands per bin, {} band columns in total",
        map.num_bands(),
        map.bins(),
        map.total_width()
    );
    match out {
        Some(path) => {
            map.save(path)?;
            println!("{summary}");
        }
        None => {
            println!("{}", map.to_json());
            eprintln!("{summary}");
        }
    }
    Ok(())
}

fn load_model(path: &Path, mode: Mode) -> Result<MelRoFormer, Failure> {
    let model = Checkpoint::load(path)?.model;
    if model.mode() != mode {
        return Err(CoreError::ModeMismatch {
            expected: mode.to_string(),
            found: model.mode().to_string(),
        }
        .into());
    }
    Ok(model)
}

fn model_input(model: &MelRoFormer, path: &Path, conform_input: bool) -> Result<AudioSignal, Failure> {
    let x = read_wav(path)?;
    Ok(if conform_input { conform(&x, model)? } else { x })
}

fn cmd_separate(model: &Path, input: &Path, output: &Path, conform_input: bool, float: bool) -> Outcome {
    let model = load_model(model, Mode::Separation)?;
    let x = model_input(&model, input, conform_input)?;
    let vocals = separate(&model, &x)?;
    write_wav(output, &vocals, if float { WavFormat::Float32 } else { WavFormat::Pcm16 })?;
    println!("wrote {} samples to {}", vocals.len(), output.display());
    Ok(())
}

fn cmd_transcribe(model: &Path, input: &Path, output: &Path, format: NoteFormat, conform_input: bool) -> Outcome {
    let model = load_model(model, Mode::Transcription)?;
    let x = model_input(&model, input, conform_input)?;
    let notes = transcribe(&model, &x)?;
    match format {
        NoteFormat::Json => write_notes_jsonl(output, &notes)?,
        NoteFormat::Midi => write_midi(output, &notes)?,
    }
    println!("wrote {} notes to {}", notes.len(), output.display());
    Ok(())
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

fn read_notes(path: &Path) -> Result<Vec<NoteEvent>, Failure> {
    let midi = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"));
    Ok(if midi {
        notes_from_midi(&fs::read(path)?)?
    } else {
        read_notes_jsonl(path)?
    })
}

fn separation_pairs(model: &MelRoFormer, dir: &Path) -> Result<Vec<(AudioSignal, AudioSignal)>, Failure> {
    let mut songs: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|p| p.join("mixture.wav").is_file() && p.join("vocals.wav").is_file())
        .collect();
    songs.sort();
    if songs.is_empty() {
        return Err(CoreError::InvalidConfig(format!("no song folders with mixture.wav and vocals.wav in {}", dir.display())).into());
    }
    songs
        .iter()
        .map(|s| {
            let m = conform(&read_wav(s.join("mixture.wav"))?, model)?;
            let v = conform(&read_wav(s.join("vocals.wav"))?, model)?;
            Ok((m, v))
        })
        .collect()
}

fn note_clips(model: &MelRoFormer, dir: &Path) -> Result<Vec<NoteClip>, Failure> {
    let mut clips = Vec::new();
    for wav in wav_files(dir)? {
        let notes = ["jsonl", "mid", "midi"]
            .iter()
            .map(|e| wav.with_extension(e))
            .find(|p| p.is_file())
            .ok_or_else(|| CoreError::InvalidConfig(format!("no note list next to {}", wav.display())))?;
        clips.push(NoteClip {
            audio: conform(&read_wav(&wav)?, model)?,
            notes: read_notes(&notes)?,
        });
    }
    if clips.is_empty() {
        return Err(CoreError::InvalidConfig(format!("no WAV files in {}", dir.display())).into());
    }
    Ok(clips)
}

fn progress(t: &Trainer) -> melrof_core::Result<bool> {
    if let Some(row) = t.trace().last() {
        println!("step {} loss {:.6} lr {:.3e}", row.step, row.loss, row.lr);
    }
    Ok(false)
}

fn finish(trainer: &Trainer, out: &Path, trace: Option<&Path>) -> Outcome {
    trainer.checkpoint().save(out)?;
    if let Some(path) = trace {
        write_trace_csv(path, trainer.trace())?;
    }
    println!(
        "wrote {} checkpoint after {} steps to {}",
        trainer.model().mode(),
        trainer.step(),
        out.display()
    );
    Ok(())
}

fn cmd_train(mut trainer: Trainer, data: Option<&Path>, clips: usize, seconds: f64, out: &Path, trace: Option<&Path>) -> Outcome {
    let cfg = trainer.state().config.clone();
    let pairs = match data {
        Some(dir) => separation_pairs(trainer.model(), dir)?,
        None => {
            let sr = trainer.model().config().sample_rate;
            toy_separation_set(cfg.seed, clips, sr, seconds)?
                .into_iter()
                .map(|(m, v)| Ok((conform(&m, trainer.model())?, conform(&v, trainer.model())?)))
                .collect::<Result<_, Failure>>()?
        }
    };
    trainer.run(cfg.steps, &SeparationData::Pairs(pairs), Trainer::separation_step, &mut progress)?;
    finish(&trainer, out, trace)
}

fn cmd_finetune(
    model: &Path,
    cfg: TrainConfig,
    data: Option<&Path>,
    clips: usize,
    seconds: f64,
    out: &Path,
    trace: Option<&Path>,
) -> Outcome {
    let ckpt = Checkpoint::load(model)?;
    let mut trainer = match ckpt.model.mode() {
        Mode::Separation => Trainer::new(swap_head_for_transcription(&ckpt.model, cfg.seed)?, cfg.clone())?,
        Mode::Transcription => match ckpt.training {
            Some(_) => with_steps(Trainer::from_checkpoint(ckpt)?, cfg.steps)?,
            None => Trainer::new(ckpt.model, cfg.clone())?,
        },
    };
    let data = match data {
        Some(dir) => note_clips(trainer.model(), dir)?,
        None => {
            let sr = trainer.model().config().sample_rate;
            toy_transcription_set(cfg.seed, clips, sr, seconds)
                .into_iter()
                .map(|(audio, notes)| {
                    Ok(NoteClip {
                        audio: conform(&audio, trainer.model())?,
                        notes,
                    })
                })
                .collect::<Result<_, Failure>>()?
        }
    };
    let steps = trainer.state().config.steps;
    trainer.run(steps, data.as_slice(), Trainer::transcription_step, &mut progress)?;
    finish(&trainer, out, trace)
}

fn cmd_eval_sdr(est: &Path, reference: &Path, csv: Option<&Path>) -> Outcome {
    let pairs: Vec<(String, PathBuf, PathBuf)> = if est.is_dir() && reference.is_dir() {
        wav_files(reference)?
            .into_iter()
            .map(|r| {
                let name = r.file_name().expect("file").to_string_lossy().into_owned();
                (name.clone(), est.join(&name), r)
            })
            .collect()
    } else if est.is_dir() || reference.is_dir() {
        return Err(Failure::Usage("--est and --ref must both be files or both be directories".into()));
    } else {
        let name = reference.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        vec![(name, est.to_path_buf(), reference.to_path_buf())]
    };
    let mut rows = Vec::new();
    for (name, e, r) in pairs {
        rows.push((name, sdr(&read_wav(&e)?, &read_wav(&r)?)?));
    }
    let table = sdr_csv(&rows);
    print!("{table}");
    let reports: Vec<_> = rows.into_iter().map(|(_, r)| r).collect();
    println!("median_of_medians = {}", median_of_medians(&reports));
    if let Some(path) = csv {
        fs::write(path, table)?;
    }
    Ok(())
}

fn cmd_eval_notes(est: &Path, reference: &Path, onset_tol: f64) -> Outcome {
    if !(onset_tol >= 0.0) {
        return Err(Failure::Usage(format!("--onset-tol must be non-negative, got {onset_tol}")));
    }
    let tol = NoteTolerances {
        onset: onset_tol,
        ..NoteTolerances::default()
    };
    let report = note_fmeasures(&read_notes(est)?, &read_notes(reference)?, tol);
    print!("{}", report.to_text());
    Ok(())
}
