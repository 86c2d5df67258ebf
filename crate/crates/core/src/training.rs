//! Losses, optimizer, schedules and the training loop.

use std::fmt::Write as _;

use autodiff::kernels::stft_power;
use autodiff::{Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::abcd::{kl_loss_graph, BottleneckMode};
use crate::config::TrainConfig;
use crate::corpus::Corpus;
use crate::dsp::{estimate_f0, F0Contour, SpectralConfig, Waveform, MFCC_HOP, MFCC_WINDOW, SAMPLE_RATE};
use crate::model::Model;
use crate::params::{Bound, ParamStore};
use crate::{Error, Result};

pub const SPECTRAL_EPS: f64 = 1e-5;
pub const F0_SCALE_HZ: f64 = 100.0;
pub const F0_CLAMP_HZ: f64 = 500.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralLossConfig {
    pub resolutions: [SpectralConfig; 3],
    pub epsilon: f64,
}

impl Default for SpectralLossConfig {
    fn default() -> Self {
        SpectralLossConfig {
            resolutions: [
                SpectralConfig::new(128, 80, 40),
                SpectralConfig::new(512, 400, 100),
                SpectralConfig::new(2048, 1920, 640),
            ],
            epsilon: SPECTRAL_EPS,
        }
    }
}

impl SpectralLossConfig {
    /// Shortest signal giving every resolution at least one frame.
    pub fn min_len(&self) -> usize {
        self.resolutions.iter().map(|r| r.frame_length).max().unwrap_or(0)
    }
}

fn check_len(len: usize, cfg: &SpectralLossConfig) -> Result<()> {
    if len < cfg.min_len() {
        return Err(Error::Length { len, min: cfg.min_len() });
    }
    Ok(())
}

/// Mean over resolutions of `1/(2LM) Σ (log(|y|²+ε) − log(|ŷ|²+ε))²`.
pub fn spectral_loss(y: &Waveform, y_hat: &Waveform, cfg: &SpectralLossConfig) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!("spectral loss on lengths {} and {}", y.len(), y_hat.len())));
    }
    check_len(y.len(), cfg)?;
    let mut total = 0.0;
    for r in &cfg.resolutions {
        let a = stft_power(y.samples(), r.frame_spec());
        let b = stft_power(y_hat.samples(), r.frame_spec());
        let sq: f64 = a.iter().zip(&b).map(|(p, q)| ((p + cfg.epsilon).ln() - (q + cfg.epsilon).ln()).powi(2)).sum();
        total += sq / (2.0 * a.len() as f64);
    }
    Ok(total / cfg.resolutions.len() as f64)
}

/// `log(|y|² + ε)` frames of a fixed target, one tensor per resolution.
pub fn target_log_spectra(y: &[f64], cfg: &SpectralLossConfig) -> Result<Vec<Tensor>> {
    check_len(y.len(), cfg)?;
    cfg.resolutions
        .iter()
        .map(|r| {
            let p = stft_power(y, r.frame_spec());
            let shape = [r.n_frames(y.len()), r.n_freqs()];
            Ok(Tensor::new(&shape, p.into_iter().map(|v| (v + cfg.epsilon).ln()).collect())?)
        })
        .collect()
}

/// Differentiable spectral loss of `y_hat` (1-D) against precomputed target spectra.
pub fn spectral_loss_graph<'t>(y_hat: Var<'t>, target: &[Tensor], cfg: &SpectralLossConfig) -> Result<Var<'t>> {
    let tape = y_hat.tape();
    let mut total: Option<Var<'t>> = None;
    for (r, t) in cfg.resolutions.iter().zip(target) {
        let lp = y_hat.rfft_power(r.frame_spec())?.affine(1.0, cfg.epsilon)?.log()?;
        let term = tape.constant(t.clone()).sub(lp)?.square()?.mean()?.scale(0.5)?;
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no spectral resolutions".into()))?;
    Ok(total.scale(1.0 / cfg.resolutions.len() as f64)?)
}

/// Step-holds a 100 Hz contour to `len` samples; unvoiced frames stay 0 Hz.
pub fn f0_reference_samples(f0: &F0Contour, len: usize) -> Vec<f64> {
    if f0.f0_hz.is_empty() {
        return vec![0.0; len];
    }
    (0..len).map(|n| f0.f0_hz[(n / MFCC_HOP).min(f0.f0_hz.len() - 1)]).collect()
}

/// `mean(((clamp(exp c1, 0, 500) − f0_ref)/100)²)` over samples.
pub fn f0_loss(c1: &[f64], f0_ref: &F0Contour) -> f64 {
    let reference = f0_reference_samples(f0_ref, c1.len());
    f0_loss_samples(c1, &reference)
}

pub fn f0_loss_samples(c1: &[f64], reference: &[f64]) -> f64 {
    let sum: f64 = c1
        .iter()
        .zip(reference)
        .map(|(c, r)| ((c.exp().clamp(0.0, F0_CLAMP_HZ) - r) / F0_SCALE_HZ).powi(2))
        .sum();
    sum / c1.len().max(1) as f64
}

pub fn f0_loss_graph<'t>(c1: Var<'t>, reference: &[f64]) -> Result<Var<'t>> {
    let r = c1.tape().constant(Tensor::new(&c1.shape(), reference.to_vec())?);
    Ok(c1.exp()?.clamp(0.0, F0_CLAMP_HZ)?.sub(r)?.scale(1.0 / F0_SCALE_HZ)?.square()?.mean()?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub total_iters: usize,
    pub lr0: f64,
    pub lr_halve_at: Vec<usize>,
    pub pretrain_iters: usize,
    pub tau_decay: f64,
    pub tau_min: f64,
    pub tau_interval: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule::from_config(&TrainConfig::default())
    }
}

impl TrainSchedule {
    pub fn from_config(c: &TrainConfig) -> Self {
        TrainSchedule {
            total_iters: c.total_iters,
            lr0: c.lr0,
            lr_halve_at: c.lr_halve_at.clone(),
            pretrain_iters: c.pretrain_iters,
            tau_decay: c.tau_decay,
            tau_min: c.tau_min,
            tau_interval: c.tau_interval,
        }
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        let halvings = self.lr_halve_at.iter().filter(|&&h| iter >= h).count();
        self.lr0 * 0.5f64.powi(halvings as i32)
    }

    /// Recomputed at multiples of the interval and held in between.
    pub fn tau_at(&self, iter: usize) -> f64 {
        let held = iter - iter % self.tau_interval.max(1);
        (-self.tau_decay * held as f64).exp().max(self.tau_min)
    }

    pub fn is_pretrain(&self, iter: usize) -> bool {
        iter < self.pretrain_iters
    }

    pub fn mode_at(&self, iter: usize, jitter: f64) -> BottleneckMode {
        if self.is_pretrain(iter) {
            BottleneckMode::Pretrain
        } else {
            BottleneckMode::Relaxed { tau: self.tau_at(iter), jitter }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// Bias-corrected Adam; rejects non-finite gradients before touching anything.
pub fn adam_step(store: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, lr: f64, cfg: AdamConfig) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(Error::Shape(format!("gradient shape {:?} for {}", g.shape(), store.name(id))));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(store.name(id).to_string()));
        }
    }
    state.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = store.get_mut(id).data_mut();
        for j in 0..g.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub iter: usize,
    pub lr: f64,
    pub tau: f64,
    pub l_spec: f64,
    pub l_kl: f64,
    pub l_f0: Option<f64>,
    pub total: f64,
}

pub const LOG_HEADER: &str = "iter,lr,tau,l_spec,l_kl,l_f0,total";

impl LossReport {
    pub fn csv_row(&self) -> String {
        let f0 = self.l_f0.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{},{},{}", self.iter, self.lr, self.tau, self.l_spec, self.l_kl, f0, self.total)
    }
}

pub fn format_log(reports: &[LossReport]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Objective from its parts; identical arithmetic for per-segment graphs and reports.
pub fn combine_losses(l_spec: f64, l_kl: f64, l_f0: Option<f64>, kl_weight: f64) -> f64 {
    match l_f0 {
        Some(f) => (l_spec + f) / 2.0 + kl_weight * l_kl,
        None => l_spec + kl_weight * l_kl,
    }
}

/// One training crop, with everything the loss needs precomputed.
#[derive(Clone, Debug)]
pub struct Segment {
    pub states: Tensor,
    pub target: Vec<Tensor>,
    pub speaker: usize,
    /// Waveform samples covered by the decoder output, `hop · S`.
    pub n_samples: usize,
    pub f0_ref: Option<Vec<f64>>,
    pub seed: u64,
}

impl Segment {
    pub fn new(model: &Model, crop: &Waveform, speaker: usize, seed: u64, with_f0: bool, cfg: &SpectralLossConfig) -> Result<Self> {
        let states = model.states(crop)?;
        let n_samples = model.hop() * states.n_frames();
        let y = &crop.samples()[..n_samples];
        let target = target_log_spectra(y, cfg)?;
        let f0_ref = with_f0.then(|| f0_reference_samples(&estimate_f0(crop), n_samples));
        Ok(Segment { states: states.states, target, speaker, n_samples, f0_ref, seed })
    }
}

pub struct SegmentLoss<'t> {
    pub total: Var<'t>,
    pub l_spec: Var<'t>,
    pub l_kl: Var<'t>,
    pub l_f0: Option<Var<'t>>,
}

/// The full per-segment objective on bound parameters. Randomness comes only from `seg.seed`.
pub fn segment_loss<'t>(
    model: &Model,
    p: &Bound<'t>,
    seg: &Segment,
    mode: BottleneckMode,
    n_dataset_frames: f64,
    cfg: &SpectralLossConfig,
) -> Result<SegmentLoss<'t>> {
    let tape = p.vars()[0].tape();
    let mut rng = ChaCha8Rng::seed_from_u64(seg.seed);
    let x = tape.constant(seg.states.clone());
    let bo = model.vae.forward(p, x, mode, &mut rng)?;
    let out = model.vocoder.forward(p, bo.output, seg.speaker, &mut rng)?;
    let l_spec = spectral_loss_graph(out.wave, &seg.target, cfg)?;
    let l_kl = kl_loss_graph(bo.log_probs, p[model.vae.theta_logits], &model.prior.alpha, seg.n_samples, n_dataset_frames)?;
    let w = model.config.kl_weight;
    let (total, l_f0) = match &seg.f0_ref {
        Some(r) => {
            let l_f0 = f0_loss_graph(out.c1, r)?;
            (l_spec.add(l_f0)?.scale(0.5)?.add(l_kl.scale(w)?)?, Some(l_f0))
        }
        None => (l_spec.add(l_kl.scale(w)?)?, None),
    };
    Ok(SegmentLoss { total, l_spec, l_kl, l_f0 })
}

struct SegmentResult {
    grads: Vec<Tensor>,
    l_spec: f64,
    l_kl: f64,
    l_f0: Option<f64>,
}

fn segment_pass(model: &Model, seg: &Segment, mode: BottleneckMode, n: f64, cfg: &SpectralLossConfig) -> Result<SegmentResult> {
    let tape = autodiff::Tape::new();
    let p = model.params.bind(&tape, true);
    let loss = segment_loss(model, &p, seg, mode, n, cfg)?;
    let (l_spec, l_kl, l_f0) = (loss.l_spec.item(), loss.l_kl.item(), loss.l_f0.map(|v| v.item()));
    let mut g = tape.backward(loss.total)?;
    let grads = p
        .vars()
        .iter()
        .zip(model.params.iter())
        .map(|(v, (_, t))| g.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok(SegmentResult { grads, l_spec, l_kl, l_f0 })
}

/// ESN frames produced from a waveform of `len` samples.
pub fn esn_frames(len: usize) -> usize {
    if len < MFCC_WINDOW {
        0
    } else {
        ((len - MFCC_WINDOW) / MFCC_HOP + 1) / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Completed iterations.
    pub iteration: usize,
    pub rng: ChaCha8Rng,
    pub log: Vec<LossReport>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, n_speakers: usize) -> Result<Self> {
        let model = Model::new(config, n_speakers)?;
        let adam = AdamState::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(TrainState { model, adam, iteration: 0, rng, log: Vec::new() })
    }
}

struct Crop {
    utt: usize,
    start: usize,
    len: usize,
    seed: u64,
}

/// Draws one batch worth of crops from the master stream; too-short files are redrawn.
fn draw_crops(rng: &mut ChaCha8Rng, corpus: &Corpus, batch: usize, max_len: usize, min_len: usize) -> Vec<Crop> {
    let mut out = Vec::with_capacity(batch);
    while out.len() < batch {
        let utt = rng.random_range(0..corpus.utterances.len());
        let n = corpus.utterances[utt].wave.len();
        if n < min_len {
            continue;
        }
        let (start, len) = if n > max_len { (rng.random_range(0..=n - max_len), max_len) } else { (0, n) };
        out.push(Crop { utt, start, len, seed: rng.next_u64() });
    }
    out
}

/// Shortest crop whose decoder output still spans the longest STFT frame.
pub fn min_crop_len(hop: usize, cfg: &SpectralLossConfig) -> usize {
    let mut len = MFCC_WINDOW;
    while hop * esn_frames(len) < cfg.min_len() {
        len += MFCC_HOP;
    }
    len
}

pub fn train(corpus: &Corpus, config: &TrainConfig, on_checkpoint: impl FnMut(&TrainState) -> Result<()>) -> Result<TrainState> {
    if corpus.utterances.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    let mut state = TrainState::new(config, corpus.n_speakers())?;
    run(&mut state, corpus, on_checkpoint)?;
    Ok(state)
}

/// Continues `state` up to `total_iters`, calling `on_checkpoint` every `checkpoint_every`
/// iterations and once at the end.
pub fn run(state: &mut TrainState, corpus: &Corpus, mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>) -> Result<()> {
    let cfg = state.model.config.clone();
    let schedule = TrainSchedule::from_config(&cfg);
    let spec = SpectralLossConfig::default();
    let min_len = min_crop_len(state.model.hop(), &spec);
    if !corpus.utterances.iter().any(|u| u.wave.len() >= min_len) {
        return Err(Error::Config(format!("no utterance reaches the minimum crop of {min_len} samples")));
    }
    if corpus.n_speakers() > state.model.n_speakers {
        return Err(Error::UnknownSpeaker(corpus.n_speakers() - 1));
    }
    let n_frames: f64 = corpus.utterances.iter().map(|u| esn_frames(u.wave.len()) as f64).sum();
    let max_len = ((cfg.max_segment_sec * SAMPLE_RATE as f64).round() as usize).max(min_len);
    let adam = AdamConfig { beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps };
    let mut last_saved = None;

    while state.iteration < cfg.total_iters {
        let iter = state.iteration;
        let lr = schedule.lr_at(iter);
        let tau = schedule.tau_at(iter);
        let mode = schedule.mode_at(iter, cfg.jitter);
        let crops = draw_crops(&mut state.rng, corpus, cfg.batch_size, max_len, min_len);

        let model = &state.model;
        let results: Vec<Result<SegmentResult>> = crops
            .par_iter()
            .map(|c| {
                let u = &corpus.utterances[c.utt];
                let crop = u.wave.slice(c.start, c.start + c.len);
                let seg = Segment::new(model, &crop, u.speaker, c.seed, cfg.f0_loss, &spec)?;
                segment_pass(model, &seg, mode, n_frames, &spec)
            })
            .collect();

        let b = crops.len() as f64;
        let mut grads: Option<Vec<Tensor>> = None;
        let (mut l_spec, mut l_kl, mut l_f0) = (0.0, 0.0, 0.0);
        for r in results {
            let r = r?;
            l_spec += r.l_spec / b;
            l_kl += r.l_kl / b;
            l_f0 += r.l_f0.unwrap_or(0.0) / b;
            match &mut grads {
                None => grads = Some(r.grads),
                Some(acc) => acc.iter_mut().zip(&r.grads).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let l_f0 = cfg.f0_loss.then_some(l_f0);
        let total = combine_losses(l_spec, l_kl, l_f0, cfg.kl_weight);
        if !total.is_finite() {
            return Err(Error::NanLoss { iteration: iter, l_spec, l_kl, total });
        }
        let mut grads = grads.expect("batch is non-empty");
        grads.iter_mut().for_each(|g| g.scale_assign(1.0 / b));
        for (id, g) in state.model.params.ids().zip(&grads) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(state.model.params.name(id).to_string()));
            }
        }
        clip_grad_norm(&mut grads, cfg.grad_clip);
        adam_step(&mut state.model.params, &grads, &mut state.adam, lr, adam)?;
        state.log.push(LossReport { iter, lr, tau, l_spec, l_kl, l_f0, total });
        state.iteration += 1;

        if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 && state.iteration < cfg.total_iters {
            on_checkpoint(state)?;
            last_saved = Some(state.iteration);
        }
    }
    if last_saved != Some(state.iteration) {
        on_checkpoint(state)?;
    }
    Ok(())
}
