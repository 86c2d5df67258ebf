//! Speech corpora on disk (`manifest.tsv` plus WAV files) and a deterministic
//! formant-synthesis corpus generator.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dsp::{read_wav, write_wav, Waveform, SAMPLE_RATE};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.tsv";
pub const TRIPLES: &str = "triples.csv";
pub const PHONE_SEC: f64 = 0.15;
pub const MAX_PHONES: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Relative to the corpus root.
    pub file: String,
    pub speaker: usize,
    pub gold: Option<Vec<usize>>,
    pub wave: Waveform,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
}

fn utt_id(file: &str) -> String {
    Path::new(file).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| file.to_string())
}

impl Corpus {
    /// Reads `dir/manifest.tsv` (`file \t speaker [\t gold]`) and every listed WAV.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut utterances = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Parse(format!("{} line {}: {m}", manifest.display(), n + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 2 {
                return Err(bad("expected `file<TAB>speaker[<TAB>gold]`"));
            }
            let speaker = cols[1].trim().parse().map_err(|_| bad("bad speaker id"))?;
            let gold = match cols.get(2) {
                Some(g) if !g.trim().is_empty() => {
                    Some(g.split_whitespace().map(|t| t.parse().map_err(|_| bad("bad gold label"))).collect::<Result<Vec<usize>>>()?)
                }
                _ => None,
            };
            let file = cols[0].to_string();
            let wave = read_wav(dir.join(&file))?;
            utterances.push(Utterance { id: utt_id(&file), file, speaker, gold, wave });
        }
        Ok(Corpus { utterances })
    }

    pub fn n_speakers(&self) -> usize {
        self.utterances.iter().map(|u| u.speaker + 1).max().unwrap_or(0)
    }

    pub fn total_duration_sec(&self) -> f64 {
        self.utterances.iter().map(|u| u.wave.duration_sec()).sum()
    }

    pub fn manifest_text(&self) -> String {
        let mut s = String::new();
        for u in &self.utterances {
            let gold = u.gold.as_ref().map(|g| g.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")).unwrap_or_default();
            let _ = writeln!(s, "{}\t{}\t{}", u.file, u.speaker, gold);
        }
        s
    }

    /// Writes every WAV (unnormalised) and the manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for u in &self.utterances {
            write_wav(dir.join(&u.file), &u.wave, false)?;
        }
        let manifest = dir.join(MANIFEST);
        std::fs::write(&manifest, self.manifest_text()).map_err(|e| Error::io(&manifest, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PhoneKind {
    /// Two formants in Hz.
    Vowel { f1: f64, f2: f64 },
    /// Band-passed noise: centre and bandwidth in Hz.
    Fricative { centre: f64, bandwidth: f64 },
}

/// Alternating vowels and fricatives so small inventories contain both.
pub const PHONES: [PhoneKind; MAX_PHONES] = [
    PhoneKind::Vowel { f1: 730.0, f2: 1090.0 },
    PhoneKind::Fricative { centre: 5500.0, bandwidth: 1500.0 },
    PhoneKind::Vowel { f1: 270.0, f2: 2290.0 },
    PhoneKind::Fricative { centre: 3000.0, bandwidth: 1000.0 },
    PhoneKind::Vowel { f1: 300.0, f2: 870.0 },
    PhoneKind::Fricative { centre: 1500.0, bandwidth: 1200.0 },
    PhoneKind::Vowel { f1: 530.0, f2: 1840.0 },
    PhoneKind::Fricative { centre: 7000.0, bandwidth: 1000.0 },
    PhoneKind::Vowel { f1: 570.0, f2: 840.0 },
    PhoneKind::Vowel { f1: 660.0, f2: 1720.0 },
    PhoneKind::Vowel { f1: 390.0, f2: 1990.0 },
    PhoneKind::Vowel { f1: 440.0, f2: 1020.0 },
];

const SPEAKER_PITCH: [f64; 4] = [110.0, 140.0, 180.0, 220.0];

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfile {
    pub pitch_hz: f64,
    /// Multiplies every formant and fricative centre, within ±10%.
    pub formant_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub speakers: Vec<SpeakerProfile>,
    pub n_phones: usize,
    /// Phone strings; utterance `s·n_speakers + k` is sentence `s` spoken by speaker `k`.
    pub sentences: Vec<Vec<usize>>,
}

fn resonance(f: f64, centre: f64, bw: f64) -> f64 {
    1.0 / (1.0 + ((f - centre) / (bw / 2.0)).powi(2))
}

/// One phone; `phase` carries the glottal phase across vowels.
fn render_phone(kind: PhoneKind, spk: &SpeakerProfile, n: usize, phase: &mut f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let ramp = (0.01 * SAMPLE_RATE as f64) as usize;
    let fs = SAMPLE_RATE as f64;
    let mut out = match kind {
        PhoneKind::Vowel { f1, f2 } => {
            let (f1, f2) = (f1 * spk.formant_scale, f2 * spk.formant_scale);
            let n_harm = ((fs / 2.0 - 200.0) / spk.pitch_hz) as usize;
            let amps: Vec<f64> = (1..=n_harm)
                .map(|h| {
                    let f = h as f64 * spk.pitch_hz;
                    (resonance(f, f1, 90.0) + 0.7 * resonance(f, f2, 120.0) + 0.01) / (h as f64).sqrt()
                })
                .collect();
            let norm = 0.5 / amps.iter().sum::<f64>().max(1e-9);
            (0..n)
                .map(|_| {
                    *phase += 2.0 * PI * spk.pitch_hz / fs;
                    norm * amps.iter().enumerate().map(|(h, a)| a * ((h + 1) as f64 * *phase).sin()).sum::<f64>()
                })
                .collect::<Vec<f64>>()
        }
        PhoneKind::Fricative { centre, bandwidth } => {
            let centre = (centre * spk.formant_scale).min(fs / 2.0 - bandwidth / 2.0 - 100.0);
            // Two cascaded resonators (RBJ band-pass, constant peak gain).
            let w0 = 2.0 * PI * centre / fs;
            let q = centre / bandwidth;
            let alpha = w0.sin() / (2.0 * q);
            let (b0, b2) = (alpha / (1.0 + alpha), -alpha / (1.0 + alpha));
            let (a1, a2) = (-2.0 * w0.cos() / (1.0 + alpha), (1.0 - alpha) / (1.0 + alpha));
            let white = Normal::new(0.0, 1.0).unwrap();
            let mut x: Vec<f64> = (0..n).map(|_| white.sample(rng)).collect();
            for _ in 0..2 {
                let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
                for v in x.iter_mut() {
                    let y = b0 * *v + b2 * x2 - a1 * y1 - a2 * y2;
                    x2 = x1;
                    x1 = *v;
                    y2 = y1;
                    y1 = y;
                    *v = y;
                }
            }
            let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
            x.iter().map(|v| 0.08 * v / rms).collect()
        }
    };
    for i in 0..ramp.min(n / 2) {
        let g = 0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos();
        out[i] *= g;
        out[n - 1 - i] *= g;
    }
    out
}

pub fn speaker_profiles(seed: u64, n_speakers: usize) -> Vec<SpeakerProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_speakers)
        .map(|k| SpeakerProfile {
            pitch_hz: SPEAKER_PITCH[k % SPEAKER_PITCH.len()] * (1.0 + 0.05 * (k / SPEAKER_PITCH.len()) as f64),
            formant_scale: rng.random_range(0.9..=1.1),
        })
        .collect()
}

/// Phone string for sentence `index`, drawn from its own derived stream.
pub fn sentence(seed: u64, index: usize, n_phones: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + index as u64);
    let mut out: Vec<usize> = Vec::with_capacity(len);
    while out.len() < len {
        let p = rng.random_range(0..n_phones);
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    out
}

pub fn render_utterance(seed: u64, index: usize, phones: &[usize], spk: &SpeakerProfile) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a11);
    rng.set_stream(index as u64);
    let n = (PHONE_SEC * SAMPLE_RATE as f64) as usize;
    let mut phase = 0.0;
    let samples = phones.iter().flat_map(|&p| render_phone(PHONES[p], spk, n, &mut phase, &mut rng)).collect();
    Waveform::new(samples).expect("finite synthesis")
}

const PHONES_PER_SENTENCE: usize = 8;

/// Sentences `first..first + count`, each spoken by every speaker.
pub fn synthesize_sentences(seed: u64, speakers: &[SpeakerProfile], n_phones: usize, first: usize, count: usize) -> Vec<(Vec<usize>, Vec<Utterance>)> {
    (first..first + count)
        .into_par_iter()
        .map(|s| {
            let phones = sentence(seed, s, n_phones, PHONES_PER_SENTENCE);
            let utts = speakers
                .iter()
                .enumerate()
                .map(|(k, spk)| {
                    let file = format!("s{s:04}_spk{k}.wav");
                    Utterance {
                        id: utt_id(&file),
                        file,
                        speaker: k,
                        gold: Some(phones.clone()),
                        wave: render_utterance(seed, s * speakers.len() + k, &phones, spk),
                    }
                })
                .collect();
            (phones, utts)
        })
        .collect()
}

/// `n_utts` utterances of 8 pseudo-phones (150 ms each); rounded down to whole sentences across speakers.
pub fn generate_synthetic_corpus(seed: u64, n_speakers: usize, n_phones: usize, n_utts: usize) -> Result<SyntheticCorpus> {
    if n_speakers == 0 || !(2..=MAX_PHONES).contains(&n_phones) {
        return Err(Error::Param(format!("need ≥ 1 speaker and 2..={MAX_PHONES} phones")));
    }
    let speakers = speaker_profiles(seed, n_speakers);
    let n_sent = n_utts.div_ceil(n_speakers);
    let mut sentences = Vec::new();
    let mut utterances = Vec::new();
    for (phones, utts) in synthesize_sentences(seed, &speakers, n_phones, 0, n_sent) {
        sentences.push(phones);
        utterances.extend(utts);
    }
    utterances.truncate(n_utts);
    Ok(SyntheticCorpus { corpus: Corpus { utterances }, speakers, n_phones, sentences })
}

/// ABX triples over utterance files: A and X share a sentence across speakers; B is another sentence by A's speaker.
pub fn abx_triples(corpus: &Corpus) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let utts = &corpus.utterances;
    for (a, ua) in utts.iter().enumerate() {
        let Some(ga) = &ua.gold else { continue };
        let x = utts.iter().position(|u| u.speaker != ua.speaker && u.gold.as_ref() == Some(ga));
        let b = utts.iter().position(|u| u.speaker == ua.speaker && u.gold.as_ref().is_some_and(|g| g != ga));
        if let (Some(x), Some(b)) = (x, b) {
            out.push((a, b, x));
        }
    }
    out
}

pub fn write_triples(dir: &Path, corpus: &Corpus) -> Result<PathBuf> {
    let path = dir.join(TRIPLES);
    let mut s = String::from("a_path,b_path,x_path\n");
    for (a, b, x) in abx_triples(corpus) {
        let u = &corpus.utterances;
        let _ = writeln!(s, "{},{},{}", u[a].file, u[b].file, u[x].file);
    }
    std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_triples(path: &Path) -> Result<Vec<[String; 3]>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (n == 0 && line.starts_with("a_path")) {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(Error::Parse(format!("{} line {}: expected a_path,b_path,x_path", path.display(), n + 1)));
        }
        out.push([cols[0].to_string(), cols[1].to_string(), cols[2].to_string()]);
    }
    Ok(out)
}
