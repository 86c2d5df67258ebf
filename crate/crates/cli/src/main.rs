use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ttswot::abcd::{format_units, parse_units, span_first_rows, write_posterior, PosteriorSequence, UnitSequence};
use ttswot::checkpoint::Checkpoint;
use ttswot::config::TrainConfig;
use ttswot::corpus::{generate_synthetic_corpus, read_triples, write_triples, Corpus, MAX_PHONES, TRIPLES};
use ttswot::dsp::{estimate_f0, read_wav, write_wav, F0Contour, SAMPLE_RATE};
use ttswot::eval::{abx_error, bitrate_units, dtw_kl, effective_category_count, levenshtein};
use ttswot::model::Model;
use ttswot::remez::{freq_response, VoicingFilters};
use ttswot::training::{format_log, train};
use ttswot::Error;

#[derive(Parser)]
#[command(name = "ttswot", version, about = "Unsupervised speech units with an echo-state encoder and a neural source-filter decoder")]
struct Cli {
    /// Master seed; overrides the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training config (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a corpus directory and write a checkpoint plus a CSV loss log.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss log; defaults to the checkpoint path with a `.csv` extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Encode a WAV into merged units.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also dump the span-reduced posterior.
        #[arg(long)]
        posterior: Option<PathBuf>,
    },
    /// Synthesize a WAV from a units file.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        units: PathBuf,
        #[arg(long)]
        speaker: usize,
        #[arg(long)]
        out: PathBuf,
        /// Utterance id inside the units file (default: first line).
        #[arg(long)]
        utt: Option<String>,
    },
    /// ABX error over a triples file.
    EvalAbx {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Defaults to `triples.csv` inside the corpus directory.
        #[arg(long)]
        triples: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = AbxMetric::Both)]
        metric: AbxMetric,
    },
    /// Bitrate and effective category count of the corpus encoding.
    EvalBitrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// F0 contours of the source input, the resynthesis and the target as CSV.
    PlotF0 {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        speaker: usize,
    },
    /// Design the vocoder FIR filters and dump taps and responses as CSV.
    DesignFir {
        #[arg(long, value_enum, default_value_t = FirPair::All)]
        pair: FirPair,
        #[arg(long)]
        out_dir: PathBuf,
        /// Response grid size over 0..8 kHz.
        #[arg(long, default_value_t = 512)]
        points: usize,
    },
    /// Generate the synthetic pseudo-phone corpus with its ABX triples.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        speakers: usize,
        #[arg(long, default_value_t = 6)]
        phones: usize,
        #[arg(long, default_value_t = 100)]
        utterances: usize,
    },
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum AbxMetric {
    Levenshtein,
    Dtw,
    Both,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum FirPair {
    Voiced,
    Voiceless,
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NanLoss { .. } | Error::NonFiniteGradient(_) | Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> ttswot::Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> ttswot::Result<Model> {
    Ok(Checkpoint::load(path)?.into_state()?.model)
}

fn write_text(path: &Path, text: &str) -> ttswot::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn utt_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "utt".into())
}

fn dispatch(cli: &Cli) -> ttswot::Result<()> {
    match &cli.cmd {
        Command::Train { corpus, out, log } => {
            let cfg = load_config(cli)?;
            let corpus = Corpus::load(corpus)?;
            let state = train(&corpus, &cfg, |s| Checkpoint::from_state(s).save(out))?;
            let log = log.clone().unwrap_or_else(|| out.with_extension("csv"));
            write_text(&log, &format_log(&state.log))?;
            let last = state.log.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!("trained {} iterations, final loss {last:.6}", state.iteration);
            Ok(())
        }
        Command::Encode { checkpoint, wav, out, posterior } => {
            let model = load_model(checkpoint)?;
            let wave = read_wav(wav)?;
            let post = model.posterior(&wave)?;
            let units = ttswot::abcd::map_decode(&post);
            write_text(out, &format!("{}\n", format_units(&utt_id(wav), &units)))?;
            if let Some(p) = posterior {
                write_posterior(p, &span_first_rows(&post))?;
            }
            Ok(())
        }
        Command::Synth { checkpoint, units, speaker, out, utt } => {
            let model = load_model(checkpoint)?;
            let text = std::fs::read_to_string(units).map_err(|e| Error::Io { path: units.clone(), source: e })?;
            let seqs = parse_units(&text)?;
            let seq = match utt {
                Some(id) => seqs.iter().find(|(u, _)| u == id).ok_or_else(|| Error::Parse(format!("no utterance `{id}` in {}", units.display())))?,
                None => seqs.first().ok_or_else(|| Error::Parse(format!("{} holds no utterances", units.display())))?,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
            let wave = model.synthesize(&seq.1, *speaker, &mut rng)?;
            write_wav(out, &wave, true)
        }
        Command::EvalAbx { checkpoint, corpus: dir, triples, metric } => {
            let model = load_model(checkpoint)?;
            let corpus = Corpus::load(dir)?;
            let triples = read_triples(&triples.clone().unwrap_or_else(|| dir.join(TRIPLES)))?;
            let index: HashMap<&str, usize> = corpus.utterances.iter().enumerate().map(|(i, u)| (u.file.as_str(), i)).collect();
            let lookup = |f: &str| index.get(f).copied().ok_or_else(|| Error::Parse(format!("triple refers to unknown file {f}")));
            let ids = triples
                .iter()
                .map(|[a, b, x]| Ok((lookup(a)?, lookup(b)?, lookup(x)?)))
                .collect::<ttswot::Result<Vec<_>>>()?;
            let posts = corpus.utterances.iter().map(|u| model.posterior(&u.wave)).collect::<ttswot::Result<Vec<PosteriorSequence>>>()?;
            if *metric != AbxMetric::Dtw {
                let units: Vec<UnitSequence> = posts.iter().map(ttswot::abcd::map_decode).collect();
                let e = abx_error(&ids, |&i, &j| Ok(levenshtein(&units[i].units, &units[j].units) as f64))?;
                println!("abx_levenshtein,{e:.3}");
            }
            if *metric != AbxMetric::Levenshtein {
                let spans: Vec<PosteriorSequence> = posts.iter().map(span_first_rows).collect();
                let e = abx_error(&ids, |&i, &j| dtw_kl(&spans[i], &spans[j]))?;
                println!("abx_dtw_kl,{e:.3}");
            }
            Ok(())
        }
        Command::EvalBitrate { checkpoint, corpus } => {
            let model = load_model(checkpoint)?;
            let corpus = Corpus::load(corpus)?;
            let units = corpus.utterances.iter().map(|u| model.encode(&u.wave)).collect::<ttswot::Result<Vec<_>>>()?;
            let rate = bitrate_units(&units, corpus.total_duration_sec())?;
            let frames: Vec<Vec<usize>> = units.iter().map(UnitSequence::expand).collect();
            println!("bitrate_bits_per_sec,{rate:.3}");
            println!("effective_categories,{:.3}", effective_category_count(&frames));
            Ok(())
        }
        Command::PlotF0 { checkpoint, wav, out, speaker } => {
            let model = load_model(checkpoint)?;
            let wave = read_wav(wav)?;
            let units = model.encode(&wave)?;
            let c1 = model.c1_track(&units, *speaker)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
            let synth = estimate_f0(&model.synthesize(&units, *speaker, &mut rng)?);
            let target = estimate_f0(&wave);
            write_text(out, &f0_plot_csv(&c1, &synth, &target))
        }
        Command::DesignFir { pair, out_dir, points } => {
            std::fs::create_dir_all(out_dir).map_err(|e| Error::Io { path: out_dir.clone(), source: e })?;
            let filters = VoicingFilters::design()?;
            for (name, f) in filters.all() {
                let keep = match pair {
                    FirPair::All => true,
                    FirPair::Voiced => name.starts_with("voiced"),
                    FirPair::Voiceless => name.starts_with("voiceless"),
                };
                if !keep {
                    continue;
                }
                let taps: String = f.taps.iter().map(|t| format!("{t:.17e}\n")).collect();
                write_text(&out_dir.join(format!("{name}_taps.csv")), &taps)?;
                let mags = freq_response(f, *points)?;
                let nyquist = SAMPLE_RATE as f64 / 2.0;
                let step = if mags.len() > 1 { nyquist / (mags.len() - 1) as f64 } else { 0.0 };
                let mut resp = String::from("freq_hz,magnitude\n");
                for (i, m) in mags.iter().enumerate() {
                    let _ = writeln!(resp, "{:.3},{m:.17e}", i as f64 * step);
                }
                write_text(&out_dir.join(format!("{name}_response.csv")), &resp)?;
            }
            Ok(())
        }
        Command::SynthCorpus { out, speakers, phones, utterances } => {
            if *phones == 0 || *phones > MAX_PHONES {
                return Err(Error::Config(format!("phones must lie in 1..={MAX_PHONES}")));
            }
            let syn = generate_synthetic_corpus(cli.seed.unwrap_or(0), *speakers, *phones, *utterances)?;
            syn.corpus.save(out)?;
            write_triples(out, &syn.corpus)?;
            println!("{} utterances, {:.1} s", syn.corpus.utterances.len(), syn.corpus.total_duration_sec());
            Ok(())
        }
    }
}

/// Rows at the estimator's 100 Hz frame times; the source column samples `exp(c₁)` there.
fn f0_plot_csv(c1: &[f64], synth: &F0Contour, target: &F0Contour) -> String {
    let mut s = String::from("time_sec,f0_source_exp_c1,f0_synth,f0_target\n");
    for (i, &tgt) in target.f0_hz.iter().enumerate() {
        let t = F0Contour::frame_time(i);
        let idx = ((t * SAMPLE_RATE as f64) as usize).min(c1.len().saturating_sub(1));
        let src = c1.get(idx).map(|v| v.exp()).unwrap_or(0.0);
        let syn = synth.f0_hz.get(i).copied().unwrap_or(0.0);
        let _ = writeln!(s, "{t:.4},{src:.3},{syn:.3},{tgt:.3}");
    }
    s
}
