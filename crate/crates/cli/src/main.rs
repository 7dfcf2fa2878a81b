use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use nvsd::annotate::{
    audit_labels, energy_segment, infer_class_set, read_label_file, read_labeled_dir, write_label_file, LabelRecord,
    LabeledClip, DEFAULT_INFLATE,
};
use nvsd::audio::AudioClip;
use nvsd::classes::{ClassSet, NUM_SOUNDS};
use nvsd::eval::{evaluate, score_clips};
use nvsd::events::{optimize, PostProcConfig, SearchSpace};
use nvsd::metrics::DEFAULT_TOLERANCE;
use nvsd::personalize::{fit_head, NegativePool, PersonalizeConfig};
use nvsd::pipeline::Detector;
use nvsd::synthbench::{aggressor_clip, generate_corpus, write_corpus, SynthSpec};
use nvsd::tcn::{load_weights, save_weights, ModelWeights};
use nvsd::train::{TrainConfig, Trainer};
use nvsd_service::{AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "nvsd", version, about = "Streaming nonverbal sound event detection")]
struct Cli {
    /// Seed for every randomized step (overrides config files).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Defaults {
    /// Print the default configuration as JSON and exit.
    #[arg(long)]
    dump_defaults: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, required_unless_present = "dump_defaults")]
        out: Option<PathBuf>,
        #[command(flatten)]
        defaults: Defaults,
    },
    /// Energy-segment a directory of WAV files into a label file.
    Annotate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        class: String,
        /// Label file to write; standard output by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Train {
        #[arg(long, required_unless_present = "dump_defaults")]
        corpus: Option<PathBuf>,
        #[arg(long, required_unless_present = "dump_defaults")]
        aggressors: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "dump_defaults")]
        out: Option<PathBuf>,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[command(flatten)]
        defaults: Defaults,
    },
    /// Segmental scores as JSON on stdout, a table on stderr.
    Eval {
        #[arg(long, required_unless_present = "dump_defaults")]
        model: Option<PathBuf>,
        #[arg(long, required_unless_present = "dump_defaults")]
        eval: Option<PathBuf>,
        /// Aggressor-only clips for false positives per hour.
        #[arg(long)]
        noise: Option<PathBuf>,
        #[arg(long)]
        postproc: Option<PathBuf>,
        /// Report only one-active scores.
        #[arg(long)]
        one_active: bool,
        #[command(flatten)]
        defaults: Defaults,
    },
    /// Grid-search post-processing parameters.
    Optimize {
        #[arg(long, required_unless_present = "dump_defaults")]
        model: Option<PathBuf>,
        #[arg(long, required_unless_present = "dump_defaults")]
        eval: Option<PathBuf>,
        #[arg(long)]
        aggressors: Option<PathBuf>,
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        defaults: Defaults,
    },
    /// Event JSON lines on stdout as they occur.
    Detect {
        #[arg(long, required_unless_present = "dump_defaults")]
        model: Option<PathBuf>,
        #[arg(long)]
        postproc: Option<PathBuf>,
        #[arg(long, conflicts_with = "stdin_pcm")]
        wav: Option<PathBuf>,
        /// Raw little-endian s16 mono 16 kHz on standard input.
        #[arg(long)]
        stdin_pcm: bool,
        #[command(flatten)]
        defaults: Defaults,
    },
    /// Refit one class's head row on an enrollment recording.
    Personalize {
        #[arg(long, required_unless_present = "dump_defaults")]
        model: Option<PathBuf>,
        #[arg(long, required_unless_present = "dump_defaults")]
        enroll: Option<PathBuf>,
        #[arg(long, required_unless_present = "dump_defaults")]
        class: Option<String>,
        #[arg(long, default_value_t = 5)]
        shots: usize,
        #[arg(long, required_unless_present = "dump_defaults")]
        out: Option<PathBuf>,
        /// Negatives; synthetic aggressor noise when absent.
        #[arg(long)]
        aggressors: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        user_id: Option<String>,
        #[command(flatten)]
        defaults: Defaults,
    },
    /// Flag clips whose label disagrees with the model.
    Audit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Print every audited clip, not only the flagged ones.
        #[arg(long)]
        all: bool,
    },
    /// Run the streaming WebSocket service.
    Serve {
        #[arg(long, required_unless_present = "dump_defaults")]
        model: Option<PathBuf>,
        #[arg(long)]
        postproc: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8750)]
        port: u16,
        #[arg(long)]
        aggressors: Option<PathBuf>,
        #[command(flatten)]
        defaults: Defaults,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn json_or_default<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), |p| read_json(p))
}

fn print_line(line: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}")?;
    out.flush()?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    print_line(&serde_json::to_string_pretty(value)?)
}

fn model(path: &Path) -> Result<ModelWeights> {
    load_weights(path).with_context(|| format!("loading model {}", path.display()))
}

fn labeled_dir(dir: &Path, classes: &ClassSet) -> Result<Vec<LabeledClip>> {
    read_labeled_dir(dir, classes, DEFAULT_INFLATE).with_context(|| format!("reading corpus {}", dir.display()))
}

fn negatives(weights: &ModelWeights, dir: Option<&PathBuf>, seed: u64) -> Result<NegativePool> {
    let clips = match dir {
        Some(d) => labeled_dir(d, &weights.classes)?,
        None => {
            let spec = SynthSpec { seed, ..SynthSpec::default() };
            (0..3).map(|k| aggressor_clip(&spec, k, seed.wrapping_add(k), 0)).collect::<nvsd::Result<_>>()?
        }
    };
    Ok(NegativePool::from_clips(weights, &clips)?)
}

/// Sound classes present in the model, for scoring.
fn model_sounds(weights: &ModelWeights) -> Vec<usize> {
    weights.classes.named_sounds()
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth { spec, out, defaults } => {
            if defaults.dump_defaults {
                return print_json(&SynthSpec::default());
            }
            let mut spec: SynthSpec = json_or_default(spec.as_ref())?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let out = out.unwrap();
            let corpus = generate_corpus(&spec)?;
            write_corpus(&corpus, &out)?;
            std::fs::write(out.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
            eprintln!("wrote {:.1} min of audio to {}", corpus.duration_s() / 60.0, out.display());
        }
        Command::Annotate { input, class, out } => {
            let mut wavs: Vec<PathBuf> = std::fs::read_dir(&input)
                .with_context(|| format!("reading {}", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            wavs.sort();
            let mut records = Vec::with_capacity(wavs.len());
            for w in &wavs {
                let clip = AudioClip::read_wav(w)?;
                let segments = energy_segment(&clip, 0)?;
                let name = w.strip_prefix(&input).unwrap_or(w).to_string_lossy().into_owned();
                records.push(LabelRecord::new(name, &class, &segments));
            }
            match out {
                Some(p) => write_label_file(p, &records)?,
                None => {
                    for r in &records {
                        print_line(&serde_json::to_string(r)?)?;
                    }
                }
            }
        }
        Command::Train { corpus, aggressors, config, out, checkpoints, defaults } => {
            if defaults.dump_defaults {
                return print_json(&TrainConfig::default());
            }
            let mut cfg: TrainConfig = json_or_default(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let corpus_dir = corpus.unwrap();
            let classes = infer_class_set(&read_label_file(corpus_dir.join("labels.jsonl"))?)?;
            let sounds = labeled_dir(&corpus_dir, &classes)?;
            let aggr = labeled_dir(&aggressors.unwrap(), &classes)?;
            let mut trainer = Trainer::new(cfg).classes(classes);
            if let Some(dir) = checkpoints {
                trainer = trainer.checkpoint_dir(dir);
            }
            let trained = trainer.run(&sounds, &aggr)?;
            save_weights(&trained.weights, out.unwrap())?;
            print_json(&trained.report.epochs)?;
        }
        Command::Eval { model: m, eval, noise, postproc, one_active, defaults } => {
            if defaults.dump_defaults {
                return print_json(&PostProcConfig::default());
            }
            let w = model(&m.unwrap())?;
            let cfg: PostProcConfig = json_or_default(postproc.as_ref())?;
            let sounds = score_clips(&w, &labeled_dir(&eval.unwrap(), &w.classes)?)?;
            let noise = match noise {
                Some(d) => score_clips(&w, &labeled_dir(&d, &w.classes)?)?,
                None => Vec::new(),
            };
            let e = evaluate(&sounds, &noise, &cfg, &model_sounds(&w), DEFAULT_TOLERANCE)?.with_class_names(&w.classes);
            if one_active {
                print_json(&e.one_active)?;
            } else {
                print_json(&e)?;
            }
            eprint!("{}", e.all_active);
        }
        Command::Optimize { model: m, eval, aggressors, space, out, defaults } => {
            if defaults.dump_defaults {
                return print_json(&SearchSpace::default());
            }
            let w = model(&m.unwrap())?;
            let space: SearchSpace = json_or_default(space.as_ref())?;
            let sounds = score_clips(&w, &labeled_dir(&eval.unwrap(), &w.classes)?)?;
            let aggr = match aggressors {
                Some(d) => score_clips(&w, &labeled_dir(&d, &w.classes)?)?,
                None => Vec::new(),
            };
            let cfg = optimize(&space, &sounds, &aggr, &PostProcConfig::default())?;
            let text = serde_json::to_string_pretty(&cfg)?;
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print_line(&text)?,
            }
        }
        Command::Detect { model: m, postproc, wav, stdin_pcm, defaults } => {
            if defaults.dump_defaults {
                return print_json(&PostProcConfig::default());
            }
            let w = Arc::new(model(&m.unwrap())?);
            let cfg: PostProcConfig = json_or_default(postproc.as_ref())?;
            let classes = w.classes.clone();
            let mut det = Detector::new(w, cfg)?;
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            let mut emit = |samples: &[f32], out: &mut std::io::StdoutLock<'_>| -> Result<()> {
                for e in det.push(samples)?.events {
                    writeln!(out, "{}", e.to_json_line(&classes))?;
                    out.flush()?;
                }
                Ok(())
            };
            match (wav, stdin_pcm) {
                (Some(path), false) => {
                    let clip = AudioClip::read_wav(&path)?;
                    for chunk in clip.samples().chunks(160) {
                        emit(chunk, &mut out)?;
                    }
                }
                (None, true) => {
                    let mut stdin = std::io::stdin().lock();
                    let mut buf = vec![0u8; 3200];
                    let mut carry: Option<u8> = None;
                    loop {
                        let n = stdin.read(&mut buf)?;
                        if n == 0 {
                            break;
                        }
                        let mut bytes = Vec::with_capacity(n + 1);
                        bytes.extend(carry.take());
                        bytes.extend_from_slice(&buf[..n]);
                        if bytes.len() % 2 == 1 {
                            carry = bytes.pop();
                        }
                        emit(AudioClip::from_s16le_bytes(&bytes).samples(), &mut out)?;
                    }
                    if carry.is_some() {
                        bail!("odd number of bytes on standard input");
                    }
                }
                _ => bail!("give exactly one of --wav or --stdin-pcm"),
            }
        }
        Command::Personalize { model: m, enroll, class, shots, out, aggressors, config, user_id, defaults } => {
            if defaults.dump_defaults {
                return print_json(&PersonalizeConfig::default());
            }
            let w = model(&m.unwrap())?;
            let mut cfg: PersonalizeConfig = json_or_default(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if user_id.is_some() {
                cfg.user_id = user_id;
            }
            let class_name = class.unwrap();
            let c = w.classes.index_of(&class_name)?;
            if c >= NUM_SOUNDS {
                bail!("{class_name} is not a sound class");
            }
            let clip = AudioClip::read_wav(enroll.unwrap())?;
            let labeled = LabeledClip::annotate_sound(clip, c, cfg.inflate, 0)?;
            let pool = negatives(&w, aggressors.as_ref(), cfg.seed)?;
            let p = fit_head(&w, std::slice::from_ref(&labeled), &[c], shots, &pool, &cfg)?;
            save_weights(&p, out.unwrap())?;
            let summary = serde_json::json!({
                "class": class_name,
                "segments_found": labeled.segments.len(),
                "shots_used": shots.min(labeled.segments.len()),
            });
            print_line(&summary.to_string())?;
        }
        Command::Audit { model: m, corpus, all } => {
            let w = model(&m)?;
            let clips = labeled_dir(&corpus, &w.classes)?;
            let mut report = audit_labels(&w, &clips)?;
            if !all {
                report.entries.retain(|e| e.flagged);
            }
            let names = |i: usize| w.classes.name(i).to_string();
            let entries: Vec<_> = report
                .entries
                .iter()
                .map(|e| {
                    serde_json::json!({
                        "clip": clips[e.clip].clip.source.clone().unwrap_or_default(),
                        "given": names(e.given),
                        "predicted": names(e.predicted),
                        "confidence": e.confidence,
                        "flagged": e.flagged,
                    })
                })
                .collect();
            print_json(&serde_json::json!({ "entries": entries, "skipped": report.skipped }))?;
        }
        Command::Serve { model: m, postproc, host, port, aggressors, defaults } => {
            if defaults.dump_defaults {
                return print_json(&PostProcConfig::default());
            }
            let w = model(&m.unwrap())?;
            let mut config = ServiceConfig { postproc: json_or_default(postproc.as_ref())?, ..Default::default() };
            if let Some(s) = seed {
                config.personalize.seed = s;
            }
            let pool = negatives(&w, aggressors.as_ref(), config.personalize.seed)?;
            let state = Arc::new(AppState::new(w, pool, config)?);
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .with_context(|| format!("binding {host}:{port}"))?;
                eprintln!("listening on {}", listener.local_addr()?);
                nvsd_service::serve(listener, state).await?;
                Ok::<_, anyhow::Error>(())
            })?;
        }
    }
    Ok(())
}

/// Stable short code for the error's root cause.
fn error_kind(err: &anyhow::Error) -> &'static str {
    use nvsd::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::TooShort { .. } => "too_short",
                E::RateMismatch { .. } => "rate_mismatch",
                E::InvalidAudio(_) | E::WavFormat(_) | E::Wav(_) => "bad_audio",
                E::Shape { .. } | E::Format(_) | E::Version(_) | E::Truncated(_) => "bad_model",
                E::Config(_) | E::RowLength { .. } => "bad_config",
                E::SessionClosed => "session_closed",
                E::NonFinite { .. } | E::Diverged { .. } => "diverged",
                E::EnrollmentFailed(_) => "enrollment_failed",
                E::OverlappingSegments { .. } => "bad_labels",
                E::EmptyEvaluation | E::ZeroDuration => "empty_input",
                E::UnknownClass(_) => "unknown_class",
                E::Io { .. } => "io",
                E::Json(_) => "bad_json",
            };
        }
        if cause.is::<serde_json::Error>() {
            return "bad_json";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

fn fail(kind: &str, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": message.replace('\n', " ") });
    eprintln!("{line}");
    ExitCode::from(if kind == "usage" { 2 } else { 1 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string().lines().next().unwrap_or("bad arguments")),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose { "info" } else { "warn" }))
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // a closed pipe on stdout (`nvsd ... | head`) is not a failure
        Err(e)
            if e.chain()
                .any(|c| c.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => fail(error_kind(&e), &format!("{e:#}")),
    }
}

