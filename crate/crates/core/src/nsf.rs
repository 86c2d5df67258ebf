//! Harmonic-plus-noise neural source-filter vocoder.
//!
//! Units at 50 Hz pass through a BiLSTM and four transposed convolutions to a
//! 16 kHz conditioning sequence `c`. Its first channel is a log-F0 track that
//! drives a sine-harmonic source and a voiced/voiceless mixing weight; both
//! sources are shaped by dilated-convolution filter stacks and the fixed FIR pairs.

use std::f64::consts::PI;

use autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::params::{Bound, ParamId, ParamStore};
use crate::remez::VoicingFilters;
use crate::{Error, Result};

pub const N_HARMONICS: usize = 8;
pub const DITHER_STD: f64 = 0.003;
pub const NOISE_STD: f64 = 0.003;
pub const VOICING_SLOPE: f64 = 5.0;
/// Initial bias of the log-F0 channel, so `exp(c₁)` starts at 100 Hz.
pub const C1_INIT: f64 = 4.605_170_185_988_092;

#[derive(Clone, Debug, PartialEq)]
pub struct VocoderConfig {
    pub input_dim: usize,
    pub n_speakers: usize,
    pub speaker_dim: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub channels: usize,
    pub harmonic_blocks: usize,
    pub noise_blocks: usize,
    pub layers_per_block: usize,
    pub strides: Vec<usize>,
    pub kernels: Vec<usize>,
}

impl VocoderConfig {
    pub fn new(input_dim: usize, n_speakers: usize) -> Self {
        VocoderConfig {
            input_dim,
            n_speakers,
            speaker_dim: 128,
            lstm_hidden: 128,
            lstm_layers: 3,
            channels: 64,
            harmonic_blocks: 5,
            noise_blocks: 1,
            layers_per_block: 10,
            strides: vec![5, 4, 4, 4],
            kernels: vec![25, 16, 16, 16],
        }
    }

    /// Output samples per unit frame.
    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }

    /// Samples seen by one filter block: `1 + 2·(2^layers − 1)`.
    pub fn block_receptive_field(&self) -> usize {
        1 + 2 * ((1 << self.layers_per_block) - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.input_dim,
            self.n_speakers,
            self.speaker_dim,
            self.lstm_hidden,
            self.lstm_layers,
            self.channels,
            self.layers_per_block,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("vocoder dimensions must be positive".into()));
        }
        if self.strides.is_empty() || self.strides.len() != self.kernels.len() {
            return Err(Error::Config("upsampler strides and kernels must pair up".into()));
        }
        for (&s, &k) in self.strides.iter().zip(&self.kernels) {
            if s == 0 || k < s || (k - s) % 2 != 0 {
                return Err(Error::Config(format!("transposed conv kernel {k} incompatible with stride {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub speaker_id: usize,
    pub init_state_embed: Vec<f64>,
    pub frame_concat_embed: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmParams {
    /// `[4H × in]`
    pub w_ih: ParamId,
    /// `[4H × H]`
    pub w_hh: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterLayer {
    /// `[C × C × 3]`
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    /// `[C × C_cond × 1]`
    pub cond_w: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterBlock {
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub layers: Vec<FilterLayer>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocoder {
    pub cfg: VocoderConfig,
    pub spk_init: ParamId,
    pub spk_frame: ParamId,
    pub init_proj_w: ParamId,
    pub init_proj_b: ParamId,
    /// `[layer][direction]`
    pub lstm: Vec<[LstmParams; 2]>,
    pub upsamplers: Vec<(ParamId, ParamId)>,
    pub harmonic: Vec<FilterBlock>,
    pub noise: Vec<FilterBlock>,
    pub filters: VoicingFilters,
}

pub struct VocoderOutput<'t> {
    /// `[T]`
    pub wave: Var<'t>,
    /// `[C × T]`
    pub condition: Var<'t>,
    /// `[1 × T]` log-F0 track.
    pub c1: Var<'t>,
}

/// Raw excitation signals.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSignal {
    pub harmonic: Vec<f64>,
    pub noise: Vec<f64>,
}

fn bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl Vocoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: VocoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (e, h, c) = (cfg.speaker_dim, cfg.lstm_hidden, cfg.channels);
        let spk_init = store.add_uniform("voc.spk_init", &[cfg.n_speakers, e], 1.0, rng);
        let spk_frame = store.add_uniform("voc.spk_frame", &[cfg.n_speakers, e], 1.0, rng);
        let init_proj_w = store.add_uniform("voc.init_proj.w", &[e, 4 * h], bound(e), rng);
        let init_proj_b = store.add_zeros("voc.init_proj.b", &[4 * h]);
        let mut lstm = Vec::new();
        for l in 0..cfg.lstm_layers {
            let n_in = if l == 0 { cfg.input_dim + e } else { 2 * h };
            let mut dir = |d: &str| LstmParams {
                w_ih: store.add_uniform(format!("voc.lstm{l}.{d}.w_ih"), &[4 * h, n_in], bound(h), rng),
                w_hh: store.add_uniform(format!("voc.lstm{l}.{d}.w_hh"), &[4 * h, h], bound(h), rng),
                b: store.add_zeros(format!("voc.lstm{l}.{d}.b"), &[4 * h]),
            };
            let fwd = dir("fwd");
            let bwd = dir("bwd");
            lstm.push([fwd, bwd]);
        }
        let n_up = cfg.strides.len();
        let mut chans = vec![2 * h, h];
        chans.extend(std::iter::repeat_n(c, n_up - 1));
        chans[n_up] = c;
        let upsamplers = (0..n_up)
            .map(|i| {
                let (ci, co, k, s) = (chans[i], chans[i + 1], cfg.kernels[i], cfg.strides[i]);
                let w = store.add_uniform(format!("voc.up{i}.w"), &[ci, co, k], bound((ci * k / s).max(1)), rng);
                let b = store.add_zeros(format!("voc.up{i}.b"), &[co]);
                (w, b)
            })
            .collect::<Vec<_>>();
        store.get_mut(upsamplers[n_up - 1].1).data_mut()[0] = C1_INIT;
        let mut blocks = |path: &str, n: usize| -> Vec<FilterBlock> {
            (0..n)
                .map(|bi| {
                    let p = format!("voc.{path}{bi}");
                    FilterBlock {
                        in_w: store.add_uniform(format!("{p}.in.w"), &[c, 1, 1], 1.0, rng),
                        in_b: store.add_zeros(format!("{p}.in.b"), &[c]),
                        layers: (0..cfg.layers_per_block)
                            .map(|l| FilterLayer {
                                conv_w: store.add_uniform(format!("{p}.l{l}.conv.w"), &[c, c, 3], bound(3 * c), rng),
                                conv_b: store.add_zeros(format!("{p}.l{l}.conv.b"), &[c]),
                                cond_w: store.add_uniform(format!("{p}.l{l}.cond.w"), &[c, c, 1], bound(c), rng),
                            })
                            .collect(),
                        out_w: store.add_zeros(format!("{p}.out.w"), &[1, c, 1]),
                        out_b: store.add_zeros(format!("{p}.out.b"), &[1]),
                    }
                })
                .collect()
        };
        let harmonic = blocks("harm", cfg.harmonic_blocks);
        let noise = blocks("noise", cfg.noise_blocks);
        Ok(Vocoder {
            cfg,
            spk_init,
            spk_frame,
            init_proj_w,
            init_proj_b,
            lstm,
            upsamplers,
            harmonic,
            noise,
            filters: VoicingFilters::design()?,
        })
    }

    pub fn speaker(&self, store: &ParamStore, id: usize) -> Result<SpeakerEmbedding> {
        self.check_speaker(id)?;
        Ok(SpeakerEmbedding {
            speaker_id: id,
            init_state_embed: store.get(self.spk_init).row(id).to_vec(),
            frame_concat_embed: store.get(self.spk_frame).row(id).to_vec(),
        })
    }

    fn check_speaker(&self, id: usize) -> Result<()> {
        if id < self.cfg.n_speakers {
            Ok(())
        } else {
            Err(Error::UnknownSpeaker(id))
        }
    }

    fn lstm_pass<'t>(p: &Bound<'t>, lp: &LstmParams, rows: &[Var<'t>], h0: Var<'t>, c0: Var<'t>, reverse: bool) -> Result<Vec<Var<'t>>> {
        let hsz = h0.shape()[0];
        let (mut h, mut c) = (h0, c0);
        let mut out = vec![None; rows.len()];
        let order: Vec<usize> = if reverse { (0..rows.len()).rev().collect() } else { (0..rows.len()).collect() };
        for t in order {
            let hc = Var::lstm_cell(rows[t], h, c, p[lp.w_ih], p[lp.w_hh], p[lp.b])?.reshape(&[1, 2 * hsz])?;
            h = hc.slice_cols(0, hsz)?.reshape(&[hsz])?;
            c = hc.slice_cols(hsz, 2 * hsz)?.reshape(&[hsz])?;
            out[t] = Some(h);
        }
        Ok(out.into_iter().map(|v| v.expect("every frame visited")).collect())
    }

    /// `[S × input_dim]` units → `[C × hop·S]` conditioning.
    pub fn condition<'t>(&self, p: &Bound<'t>, units: Var<'t>, speaker: usize) -> Result<Var<'t>> {
        self.check_speaker(speaker)?;
        let tape = units.tape();
        let s = units.shape()[0];
        if s == 0 || units.shape().get(1) != Some(&self.cfg.input_dim) {
            return Err(Error::Shape(format!("units {:?}, expected [S × {}] with S ≥ 1", units.shape(), self.cfg.input_dim)));
        }
        let hsz = self.cfg.lstm_hidden;
        let frame_e = p[self.spk_frame].gather_rows(&vec![speaker; s])?;
        let init = p[self.spk_init].gather_rows(&[speaker])?.matmul(p[self.init_proj_w])?.add_row(p[self.init_proj_b])?;
        let piece = |i: usize| -> Result<Var<'t>> { Ok(init.slice_cols(i * hsz, (i + 1) * hsz)?.reshape(&[hsz])?) };
        let zero = tape.constant(Tensor::zeros(&[hsz]));
        let mut x = Var::concat_cols(&[units, frame_e])?;
        for (l, dirs) in self.lstm.iter().enumerate() {
            let rows: Vec<Var<'t>> = (0..s).map(|t| x.row(t)).collect::<std::result::Result<_, _>>()?;
            let (hf, cf, hb, cb) = if l == 0 { (piece(0)?, piece(1)?, piece(2)?, piece(3)?) } else { (zero, zero, zero, zero) };
            let fwd = Self::lstm_pass(p, &dirs[0], &rows, hf, cf, false)?;
            let bwd = Self::lstm_pass(p, &dirs[1], &rows, hb, cb, true)?;
            x = Var::concat_cols(&[Var::stack_rows(&fwd)?, Var::stack_rows(&bwd)?])?;
        }
        let mut y = x.transpose()?;
        let last = self.upsamplers.len() - 1;
        for (i, &(w, b)) in self.upsamplers.iter().enumerate() {
            y = y.transposed_conv1d(p[w], self.cfg.strides[i])?.add_col(p[b])?;
            if i < last {
                y = y.tanh()?;
            }
        }
        Ok(y)
    }

    /// Residual dilated-convolution stack over a `[1 × T]` signal conditioned on `[C × T]`.
    pub fn filter<'t>(p: &Bound<'t>, blocks: &[FilterBlock], x: Var<'t>, c: Var<'t>) -> Result<Var<'t>> {
        if x.shape().len() != 2 || x.shape()[0] != 1 || c.shape().len() != 2 || x.shape()[1] != c.shape()[1] {
            return Err(Error::Shape(format!("filter input {:?} vs conditioning {:?}", x.shape(), c.shape())));
        }
        let mut x = x;
        for block in blocks {
            let mut h = x.conv1d(p[block.in_w], 1)?.add_col(p[block.in_b])?;
            for (l, layer) in block.layers.iter().enumerate() {
                let pre = h.conv1d(p[layer.conv_w], 1 << l)?.add_col(p[layer.conv_b])?;
                let a = pre.add(c.conv1d(p[layer.cond_w], 1)?)?.tanh()?;
                h = h.add(a)?;
            }
            x = x.add(h.conv1d(p[block.out_w], 1)?.add_col(p[block.out_b])?)?;
        }
        Ok(x)
    }

    /// Full decoder graph: conditioning, sources, filters, FIR mixing.
    pub fn forward<'t>(&self, p: &Bound<'t>, units: Var<'t>, speaker: usize, rng: &mut impl Rng) -> Result<VocoderOutput<'t>> {
        let tape = units.tape();
        let c = self.condition(p, units, speaker)?;
        let t = c.shape()[1];
        let c1 = c.slice_rows(0, 1)?;
        let harm = harmonic_source_graph(c1, rng)?;
        let noise = tape.constant(Tensor::matrix(1, t, noise_source(t, rng))?);
        let h = Self::filter(p, &self.harmonic, harm, c)?;
        let n = Self::filter(p, &self.noise, noise, c)?;
        let f = &self.filters;
        let voiced = n.fir(&f.voiced_hp.taps)?.add(h.fir(&f.voiced_lp.taps)?)?;
        let unvoiced = n.fir(&f.unvoiced_hp.taps)?.add(h.fir(&f.unvoiced_lp.taps)?)?;
        let v = c1.scale(VOICING_SLOPE)?.sigmoid()?;
        let wave = unvoiced.add(v.mul(voiced.sub(unvoiced)?)?)?.reshape(&[t])?;
        Ok(VocoderOutput { wave, condition: c, c1 })
    }

    /// Conditioning sequence for a unit matrix, outside any training graph.
    pub fn condition_values(&self, store: &ParamStore, units: &Tensor, speaker: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        Ok((*self.condition(&p, tape.constant(units.clone()), speaker)?.value()).clone())
    }

    pub fn synthesize(&self, store: &ParamStore, units: &Tensor, speaker: usize, rng: &mut impl Rng) -> Result<Waveform> {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let out = self.forward(&p, tape.constant(units.clone()), speaker, rng)?;
        Waveform::new(out.wave.value().data().to_vec())
    }
}

fn normal_samples(n: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// i.i.d. Gaussian noise source.
pub fn noise_source(t: usize, rng: &mut impl Rng) -> Vec<f64> {
    normal_samples(t, NOISE_STD, rng)
}

/// Differentiable harmonic source from a `[1 × T]` log-F0 track.
pub fn harmonic_source_graph<'t>(c1: Var<'t>, rng: &mut impl Rng) -> Result<Var<'t>> {
    let t = c1.shape()[1];
    let phase = c1.exp()?.cumsum()?.scale(2.0 * PI / SAMPLE_RATE as f64)?;
    let mut e = c1.tape().constant(Tensor::matrix(1, t, normal_samples(t, DITHER_STD, rng))?);
    for h in 1..=N_HARMONICS {
        e = e.add(phase.scale(h as f64)?.sin()?.scale(0.1 / h as f64)?)?;
    }
    Ok(e)
}

/// `Σ_h (0.1/h)·sin(h·φ_t) + dither`, with `φ` the running phase of `exp(c1)`.
pub fn harmonic_source(c1: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let mut phase = 0.0;
    let dither = normal_samples(c1.len(), DITHER_STD, rng);
    c1.iter()
        .zip(dither)
        .map(|(&c, d)| {
            phase += 2.0 * PI * c.exp() / SAMPLE_RATE as f64;
            d + (1..=N_HARMONICS).map(|h| 0.1 / h as f64 * (h as f64 * phase).sin()).sum::<f64>()
        })
        .collect()
}
