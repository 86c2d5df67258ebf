//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero on
//! any failure. Pass criterion numbers as arguments to run a subset.

use std::cell::OnceCell;
use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use autodiff::{directional_check, gradient_check, CheckConfig, FrameSpec, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use ttswot::abcd::{format_units, jitter_indices, kl_categorical_term, kl_dirichlet, BottleneckMode, PosteriorSequence, UnitSequence, JITTER_PROB};
use ttswot::checkpoint::Checkpoint;
use ttswot::config::TrainConfig;
use ttswot::corpus::{generate_synthetic_corpus, synthesize_sentences, Corpus, SyntheticCorpus, Utterance};
use ttswot::dsp::{compute_mfcc, estimate_f0, Waveform};
use ttswot::eval::{abx_error, bitrate, dtw_kl, effective_category_count, kl_rows, levenshtein};
use ttswot::model::Model;
use ttswot::params::Bound;
use ttswot::remez::VoicingFilters;
use ttswot::reservoir::Reservoir;
use ttswot::training::{f0_reference_samples, segment_loss, target_log_spectra, train, Segment, SpectralLossConfig, TrainSchedule, TrainState};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn sine(hz: f64, n: usize, amp: f64) -> Waveform {
    Waveform::new((0..n).map(|i| amp * (2.0 * std::f64::consts::PI * hz * i as f64 / 16000.0).sin()).collect()).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn weighted_sum<'t>(v: Var<'t>, seed: u64) -> autodiff::Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, v.value().shape(), -1.0, 1.0);
    v.mul(v.tape().constant(w))?.sum()
}

fn op_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> autodiff::Result<Var<'t>>,
{
    gradient_check(inputs, f, CheckConfig::default()).map(|r| r.worst()).unwrap_or(f64::INFINITY)
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let c = rand_tensor(&mut rng, &[3, 4], 0.5, 2.0);
    let row = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let col = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    let sig = rand_tensor(&mut rng, &[100], -1.0, 1.0);
    let x = rand_tensor(&mut rng, &[3, 40], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[4, 3, 3], -0.5, 0.5);
    let xt = rand_tensor(&mut rng, &[3, 6], -1.0, 1.0);
    let wt = rand_tensor(&mut rng, &[3, 2, 25], -0.5, 0.5);
    let lstm = vec![
        rand_tensor(&mut rng, &[5], -1.0, 1.0),
        rand_tensor(&mut rng, &[4], -1.0, 1.0),
        rand_tensor(&mut rng, &[4], -1.0, 1.0),
        rand_tensor(&mut rng, &[16, 5], -0.8, 0.8),
        rand_tensor(&mut rng, &[16, 4], -0.8, 0.8),
        rand_tensor(&mut rng, &[16], -0.5, 0.5),
    ];
    let spec = FrameSpec { fft_bins: 32, frame_length: 24, stride: 10 };

    let ops: Vec<(&str, f64)> = vec![
        ("matmul", op_check(&[a.clone(), b.clone()], |_, v| weighted_sum(v[0].matmul(v[1])?, 2))),
        ("transpose", op_check(&[a.clone()], |_, v| weighted_sum(v[0].transpose()?, 3))),
        ("add", op_check(&[a.clone(), c.clone()], |_, v| weighted_sum(v[0].add(v[1])?, 4))),
        ("sub", op_check(&[a.clone(), c.clone()], |_, v| weighted_sum(v[0].sub(v[1])?, 5))),
        ("mul", op_check(&[a.clone(), c.clone()], |_, v| weighted_sum(v[0].mul(v[1])?, 6))),
        ("div", op_check(&[a.clone(), c.clone()], |_, v| weighted_sum(v[0].div(v[1])?, 7))),
        ("affine", op_check(&[a.clone()], |_, v| weighted_sum(v[0].affine(-2.5, 0.3)?, 8))),
        ("add_row", op_check(&[a.clone(), row.clone()], |_, v| weighted_sum(v[0].add_row(v[1])?, 9))),
        ("add_col", op_check(&[a.clone(), col.clone()], |_, v| weighted_sum(v[0].add_col(v[1])?, 10))),
        ("tanh", op_check(&[a.clone()], |_, v| weighted_sum(v[0].tanh()?, 11))),
        ("sigmoid", op_check(&[a.clone()], |_, v| weighted_sum(v[0].scale(3.0)?.sigmoid()?, 12))),
        ("exp", op_check(&[a.clone()], |_, v| weighted_sum(v[0].exp()?, 13))),
        ("log", op_check(&[c.clone()], |_, v| weighted_sum(v[0].log()?, 14))),
        ("sin", op_check(&[a.clone()], |_, v| weighted_sum(v[0].scale(4.0)?.sin()?, 15))),
        ("square", op_check(&[a.clone()], |_, v| weighted_sum(v[0].square()?, 16))),
        ("clamp", op_check(&[a.clone()], |_, v| weighted_sum(v[0].clamp(-0.5, 0.5)?, 17))),
        ("ln_gamma", op_check(&[c.clone()], |_, v| weighted_sum(v[0].ln_gamma()?, 18))),
        ("digamma", op_check(&[c.clone()], |_, v| weighted_sum(v[0].digamma()?, 19))),
        ("softmax_rows", op_check(&[a.clone()], |_, v| weighted_sum(v[0].softmax_rows()?, 20))),
        ("log_softmax_rows", op_check(&[a.clone()], |_, v| weighted_sum(v[0].log_softmax_rows()?, 21))),
        ("sum", op_check(&[a.clone()], |_, v| v[0].square()?.sum())),
        ("mean", op_check(&[a.clone()], |_, v| v[0].square()?.mean())),
        ("sum_rows", op_check(&[a.clone()], |_, v| weighted_sum(v[0].square()?.sum_rows()?, 22))),
        ("cumsum", op_check(&[a.clone()], |_, v| weighted_sum(v[0].cumsum()?, 23))),
        ("reshape", op_check(&[a.clone()], |_, v| weighted_sum(v[0].reshape(&[12])?, 24))),
        ("gather_rows", op_check(&[a.clone()], |_, v| weighted_sum(v[0].gather_rows(&[2, 0, 2, 1])?, 25))),
        ("slice_rows", op_check(&[a.clone()], |_, v| weighted_sum(v[0].slice_rows(1, 3)?, 26))),
        ("slice_cols", op_check(&[a.clone()], |_, v| weighted_sum(v[0].slice_cols(1, 3)?, 27))),
        ("concat_cols", op_check(&[a.clone(), c.clone()], |_, v| weighted_sum(Var::concat_cols(&[v[0], v[1]])?, 28))),
        ("stack_rows", op_check(&[row.clone(), row.clone()], |_, v| weighted_sum(Var::stack_rows(&[v[0], v[1], v[0]])?, 29))),
        ("fir", op_check(&[sig.clone()], |_, v| weighted_sum(v[0].fir(&[0.5, -0.25, 0.1, 0.05])?, 30))),
        ("conv1d", op_check(&[x.clone(), w.clone()], |_, v| weighted_sum(v[0].conv1d(v[1], 8)?, 31))),
        ("transposed_conv1d", op_check(&[xt, wt], |_, v| weighted_sum(v[0].transposed_conv1d(v[1], 5)?, 32))),
        (
            "lstm_cell",
            op_check(&lstm, |_, v| {
                let s1 = Var::lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5])?;
                let s2 = Var::lstm_cell(v[0], s1.slice_rows(0, 4)?, s1.slice_rows(4, 8)?, v[3], v[4], v[5])?;
                weighted_sum(s2, 33)
            }),
        ),
        ("rfft_power", op_check(&[sig], move |_, v| weighted_sum(v[0].rfft_power(spec)?, 34))),
    ];
    let (worst_op, worst_op_err) = ops.iter().fold(("", 0.0), |acc, &(n, e)| if e > acc.1 || e.is_nan() { (n, e) } else { acc });
    ensure(worst_op_err < 1e-4, format!("op {worst_op}: rel err {worst_op_err:.2e}"))?;

    let cfg = TrainConfig {
        esn_size: 24,
        mlp_hidden: 8,
        code_dim: 6,
        categories: 5,
        speaker_dim: 4,
        lstm_hidden: 4,
        lstm_layers: 1,
        channels: 4,
        harmonic_blocks: 1,
        noise_blocks: 1,
        layers_per_block: 2,
        ..TrainConfig::default()
    };
    let mut model = Model::new(&cfg, 2).unwrap();
    let c1_bias = model.vocoder.upsamplers.last().unwrap().1;
    model.params.get_mut(c1_bias).data_mut()[0] = 0.0;
    let spec = SpectralLossConfig::default();
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let relaxed = BottleneckMode::Relaxed { tau: 1.0, jitter: JITTER_PROB };
    let mut worst_graph = (String::new(), 0.0f64);
    for (mode, f0) in [(BottleneckMode::Pretrain, false), (relaxed, false), (relaxed, true)] {
        let mut seg = Segment::new(&model, &sine(180.0, 3000, 0.3), 1, 9, f0, &spec).unwrap();
        let tape = Tape::new();
        let p = model.params.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let bo = model.vae.forward(&p, tape.constant(seg.states.clone()), BottleneckMode::Pretrain, &mut rng).unwrap();
        let own = model.vocoder.synthesize(&model.params, &bo.output.value(), 0, &mut rng).unwrap();
        seg.target = target_log_spectra(own.samples(), &spec).unwrap();
        let n = seg.states.shape()[0] as f64;
        let report = directional_check(
            &inputs,
            |_, vars| {
                let p = Bound::from_vars(vars.to_vec());
                segment_loss(&model, &p, &seg, mode, n, &spec).map(|l| l.total).map_err(|e| autodiff::AdError::Usage(e.to_string()))
            },
            CheckConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        for (e, (name, _)) in report.max_rel_err.iter().zip(model.params.iter()) {
            if *e > worst_graph.1 || e.is_nan() {
                worst_graph = (format!("{name} ({mode:?}, f0 {f0})"), *e);
            }
        }
    }
    ensure(worst_graph.1 < 1e-4, format!("assembled objective: {} rel err {:.2e}", worst_graph.0, worst_graph.1))?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("took {secs:.1} s"))?;
    Ok(format!(
        "{} ops worst {:.1e} ({worst_op}); assembled objective worst {:.1e} over {} parameter groups; {secs:.1} s",
        ops.len(),
        worst_op_err,
        worst_graph.1,
        inputs.len()
    ))
}

/// Mean and standard error of `f` over `n` Dirichlet draws.
fn mc_mean(omega: &[f64], n: usize, rng: &mut ChaCha8Rng, f: impl Fn(&[f64]) -> f64) -> (f64, f64) {
    let gammas: Vec<Gamma<f64>> = omega.iter().map(|&w| Gamma::new(w, 1.0).unwrap()).collect();
    let (mut s, mut s2) = (0.0, 0.0);
    let mut pi = vec![0.0; omega.len()];
    for _ in 0..n {
        pi.iter_mut().zip(&gammas).for_each(|(p, g)| *p = g.sample(rng));
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= total);
        let v = f(&pi);
        s += v;
        s2 += v * v;
    }
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean).max(0.0);
    (mean, (var / n as f64).sqrt())
}

fn ln_dir_pdf(pi: &[f64], a: &[f64]) -> f64 {
    let sa: f64 = a.iter().sum();
    ln_gamma(sa) - a.iter().map(|&x| ln_gamma(x)).sum::<f64>() + pi.iter().zip(a).map(|(p, x)| (x - 1.0) * p.max(1e-300).ln()).sum::<f64>()
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_z = 0.0f64;
    for inst in 0..20 {
        let k = rng.random_range(2..=8);
        let omega: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..5.0)).collect();
        let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..3.0)).collect();
        let mut p: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let sp: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= sp);

        let closed = kl_dirichlet(&omega, &alpha).map_err(|e| e.to_string())?;
        let (mc, se) = mc_mean(&omega, 1_000_000, &mut rng, |pi| ln_dir_pdf(pi, &omega) - ln_dir_pdf(pi, &alpha));
        let z = (closed - mc).abs() / se;
        ensure(z <= 3.0, format!("instance {inst}: kl_dirichlet {closed:.6} vs MC {mc:.6} ± {se:.1e}"))?;
        worst_z = worst_z.max(z);

        let closed = kl_categorical_term(&p, &omega);
        let (mc, se) = mc_mean(&omega, 1_000_000, &mut rng, |pi| p.iter().zip(pi).map(|(pk, q)| pk * (pk.ln() - q.max(1e-300).ln())).sum());
        let z = (closed - mc).abs() / se;
        ensure(z <= 3.0, format!("instance {inst}: kl_categorical_term {closed:.6} vs MC {mc:.6} ± {se:.1e}"))?;
        worst_z = worst_z.max(z);

        let self_kl = kl_dirichlet(&alpha, &alpha).map_err(|e| e.to_string())?;
        ensure(self_kl.abs() <= 1e-12, format!("kl_dirichlet(α, α) = {self_kl:e}"))?;
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("20 instances, worst deviation {worst_z:.2} standard errors; {secs:.1} s"))
}

fn criterion_3() -> Outcome {
    let sched = TrainSchedule::from_config(&TrainConfig::default());
    let mut rows = Vec::new();
    for iter in [0usize, 4000, 15999, 16000, 20000, 24000, 32000, 33000, 35999] {
        let halvings = [16_000, 24_000, 32_000].iter().filter(|&&h| h <= iter).count() as i32;
        let lr = 4e-4 * 0.5f64.powi(halvings);
        let tau = (-1e-5 * (iter - iter % 1000) as f64).exp().max(0.5);
        ensure(sched.lr_at(iter) == lr, format!("lr({iter}) = {} want {lr}", sched.lr_at(iter)))?;
        ensure(sched.tau_at(iter) == tau, format!("tau({iter}) = {} want {tau}", sched.tau_at(iter)))?;
        ensure(sched.is_pretrain(iter) == (iter < 4000), format!("pretrain flag at {iter}"))?;
        rows.push(format!("{iter}:{lr:.0e}/{tau:.4}"));
    }
    ensure((0..36_000).all(|i| sched.tau_at(i) >= 0.5), "tau below 0.5")?;
    Ok(rows.join(" "))
}

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let filters = VoicingFilters::design().map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    for (name, f) in filters.all() {
        let n = f.taps.len();
        ensure((0..n).all(|i| f.taps[i] == f.taps[n - 1 - i]), format!("{name}: taps not symmetric"))?;
        ensure(f.extremal_hz.len() >= 7, format!("{name}: {} extrema", f.extremal_hz.len()))?;
        let mag: Vec<f64> = (0..=2048)
            .map(|k| {
                let w = 2.0 * std::f64::consts::PI * k as f64 / 4096.0;
                let (re, im) = f.taps.iter().enumerate().fold((0.0, 0.0), |(r, i), (t, h)| (r + h * (w * t as f64).cos(), i - h * (w * t as f64).sin()));
                re.hypot(im)
            })
            .collect();
        let hz = |k: usize| k as f64 * 16000.0 / 4096.0;
        let (lo, hi) = if name.starts_with("voiced") { (5000.0, 7000.0) } else { (1000.0, 3000.0) };
        let low_pass = name.ends_with("lowpass");
        let in_pass = |f: f64| if low_pass { f <= lo } else { f >= hi };
        let in_stop = |f: f64| if low_pass { f >= hi } else { f <= lo };
        let pass_min = (0..=2048).filter(|&k| in_pass(hz(k))).map(|k| mag[k]).fold(f64::INFINITY, f64::min);
        let stop_max = (0..=2048).filter(|&k| in_stop(hz(k))).map(|k| mag[k]).fold(0.0, f64::max);
        ensure(stop_max < pass_min, format!("{name}: stopband max {stop_max:.4} ≥ passband min {pass_min:.4}"))?;
        notes.push(format!("{name} {pass_min:.3}>{stop_max:.3}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 1.0, format!("took {secs:.3} s"))?;
    Ok(format!("{}; {:.0} ms", notes.join(", "), secs * 1e3))
}

fn criterion_5() -> Outcome {
    let cfg = TrainConfig {
        esn_size: 64,
        mlp_hidden: 8,
        code_dim: 6,
        categories: 5,
        speaker_dim: 4,
        lstm_hidden: 4,
        lstm_layers: 1,
        channels: 4,
        harmonic_blocks: 1,
        noise_blocks: 1,
        layers_per_block: 2,
        ..TrainConfig::default()
    };
    let model = Model::new(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for s in [1usize, 7, 50, 123] {
        let units = UnitSequence { units: vec![2], durations: vec![s] };
        let len = model.synthesize(&units, 1, &mut rng).map_err(|e| e.to_string())?.len();
        ensure(len == 320 * s, format!("S = {s}: {len} samples"))?;
    }
    let wave = sine(300.0, 16000, 0.4);
    let mfcc = compute_mfcc(&wave).map_err(|e| e.to_string())?.n_frames();
    let esn = model.states(&wave).map_err(|e| e.to_string())?.n_frames();
    ensure(mfcc == 98 && esn == 49, format!("1 s → {mfcc} MFCC, {esn} ESN frames"))?;
    Ok("lengths 320·S for S ∈ {1, 7, 50, 123}; 1 s → 98 MFCC → 49 ESN frames".into())
}

fn smoke_config() -> TrainConfig {
    TrainConfig {
        seed: 0,
        esn_size: 256,
        mlp_hidden: 32,
        code_dim: 32,
        categories: 32,
        speaker_dim: 32,
        lstm_hidden: 32,
        lstm_layers: 1,
        channels: 32,
        harmonic_blocks: 2,
        noise_blocks: 1,
        layers_per_block: 3,
        total_iters: 500,
        lr0: 2e-3,
        lr_halve_at: vec![222, 333, 444],
        pretrain_iters: 56,
        tau_decay: 7.2e-4,
        tau_interval: 14,
        batch_size: 4,
        max_segment_sec: 0.25,
        checkpoint_every: 200,
        ..TrainConfig::default()
    }
}

struct Run {
    state: TrainState,
    checkpoint: Vec<u8>,
    reservoir_at: Vec<(usize, bool)>,
    units_text: String,
    frames: Vec<Vec<usize>>,
}

struct Smoke {
    syn: SyntheticCorpus,
    held_out: Vec<Utterance>,
    fresh_reservoir: Reservoir,
    runs: [OnceCell<Result<Run, String>>; 4],
}

const BASE: usize = 0;
const REPEAT: usize = 1;
const NO_KL: usize = 2;
const WITH_F0: usize = 3;

impl Smoke {
    fn new() -> Self {
        let syn = generate_synthetic_corpus(0, 4, 6, 100).unwrap();
        let first_unseen = syn.sentences.len();
        let held_out = synthesize_sentences(0, &syn.speakers, syn.n_phones, first_unseen, 3).into_iter().flat_map(|(_, u)| u).take(10).collect();
        let fresh_reservoir = Model::new(&smoke_config(), 4).unwrap().reservoir;
        Smoke { syn, held_out, fresh_reservoir, runs: Default::default() }
    }

    fn run(&self, which: usize) -> Result<&Run, String> {
        self.runs[which]
            .get_or_init(|| {
                let base = smoke_config();
                let cfg = match which {
                    NO_KL => TrainConfig { kl_weight: 0.0, ..base },
                    WITH_F0 => TrainConfig { f0_loss: true, ..base },
                    _ => base,
                };
                let t0 = Instant::now();
                let mut reservoir_at = Vec::new();
                let state = train(&self.syn.corpus, &cfg, |s| {
                    reservoir_at.push((s.iteration, s.model.reservoir == self.fresh_reservoir));
                    Ok(())
                })
                .map_err(|e| e.to_string())?;
                let checkpoint = Checkpoint::from_state(&state).to_bytes();
                let (units_text, frames) = encode_corpus(&state.model, &self.syn.corpus)?;
                eprintln!("  smoke run {which} finished in {:.0} s", t0.elapsed().as_secs_f64());
                Ok(Run { state, checkpoint, reservoir_at, units_text, frames })
            })
            .as_ref()
            .map_err(Clone::clone)
    }
}

fn encode_corpus(model: &Model, corpus: &Corpus) -> Result<(String, Vec<Vec<usize>>), String> {
    let mut text = String::new();
    let mut frames = Vec::new();
    for u in &corpus.utterances {
        let units = model.encode(&u.wave).map_err(|e| e.to_string())?;
        text.push_str(&format_units(&u.id, &units));
        text.push('\n');
        frames.push(units.expand());
    }
    Ok((text, frames))
}

fn criterion_6(smoke: &Smoke) -> Outcome {
    let r = Reservoir::with_size(1, 2048);
    let density = r.density();
    ensure((0.095..=0.105).contains(&density), format!("density {:.4}", density))?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let noise: Vec<f64> = (0..40_000).map(|i| 0.3 * (i as f64 * 0.031).sin() + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
    let feats = compute_mfcc(&Waveform::new(noise).unwrap()).map_err(|e| e.to_string())?;
    let s0: Vec<f64> = (0..2048).map(|_| rng.random_range(-0.9..0.9)).collect();
    let a = r.trajectory(&feats, &vec![0.0; 2048]);
    let b = r.trajectory(&feats, &s0);
    let dist = a[199].iter().zip(&b[199]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    ensure(dist < 1e-6, format!("state distance after 200 frames {dist:.2e}"))?;

    let run = smoke.run(BASE)?;
    ensure(run.reservoir_at.first() == Some(&(200, true)), format!("reservoir check after 200 iterations: {:?}", run.reservoir_at))?;
    ensure(run.reservoir_at.iter().all(|&(_, same)| same), "reservoir changed during training")?;
    let fresh = Checkpoint::from_state(&TrainState::new(&smoke_config(), 4).unwrap());
    let trained = Checkpoint::from_bytes(&run.checkpoint).map_err(|e| e.to_string())?;
    let esn = |c: &Checkpoint| c.tensors.iter().filter(|t| t.name.starts_with("esn.")).cloned().collect::<Vec<_>>();
    ensure(esn(&fresh) == esn(&trained), "serialized reservoir tensors differ")?;
    Ok(format!("density {:.3}%; distance after 200 frames {dist:.1e}; reservoir identical after 200 and 500 iterations", 100.0 * density))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let idx = jitter_indices(100_000, JITTER_PROB, &mut rng);
    let rate = idx.iter().enumerate().filter(|&(i, &j)| i != j).count() as f64 / 1e5;
    ensure((0.11..=0.13).contains(&rate), format!("rate {rate}"))?;
    ensure(idx.iter().enumerate().all(|(i, &j)| i.abs_diff(j) <= 1), "jump larger than one frame")?;
    let ident = jitter_indices(100_000, 0.0, &mut rng);
    ensure(ident.iter().enumerate().all(|(i, &j)| i == j), "p = 0 is not the identity")?;
    Ok(format!("empirical rate {rate:.4} over 100000 frames; p = 0 identity"))
}

fn brute_dtw(a: &PosteriorSequence, b: &PosteriorSequence) -> f64 {
    fn walk(a: &PosteriorSequence, b: &PosteriorSequence, i: usize, j: usize, cost: f64, len: usize, best: &mut (f64, usize)) {
        let cost = cost + kl_rows(a.row(i), b.row(j));
        let len = len + 1;
        if i + 1 == a.n_frames() && j + 1 == b.n_frames() {
            if cost < best.0 || (cost == best.0 && len > best.1) {
                *best = (cost, len);
            }
            return;
        }
        if i + 1 < a.n_frames() {
            walk(a, b, i + 1, j, cost, len, best);
        }
        if j + 1 < b.n_frames() {
            walk(a, b, i, j + 1, cost, len, best);
        }
        if i + 1 < a.n_frames() && j + 1 < b.n_frames() {
            walk(a, b, i + 1, j + 1, cost, len, best);
        }
    }
    let mut best = (f64::INFINITY, 0);
    walk(a, b, 0, 0, 0.0, 0, &mut best);
    best.0 / best.1 as f64
}

fn edit_distance_oracle(a: &[usize], b: &[usize]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let sub = edit_distance_oracle(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
    sub.min(edit_distance_oracle(&a[1..], b) + 1).min(edit_distance_oracle(a, &b[1..]) + 1)
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let word = |rng: &mut ChaCha8Rng| -> Vec<usize> { (0..rng.random_range(0..7)).map(|_| rng.random_range(0..4)).collect() };
    for _ in 0..1000 {
        let (x, y, z) = (word(&mut rng), word(&mut rng), word(&mut rng));
        let (dxy, dyx, dxz, dyz) = (levenshtein(&x, &y), levenshtein(&y, &x), levenshtein(&x, &z), levenshtein(&y, &z));
        ensure(dxy == dyx, "symmetry")?;
        ensure((dxy == 0) == (x == y) && levenshtein(&x, &x) == 0, "identity of indiscernibles")?;
        ensure(dxz <= dxy + dyz, "triangle inequality")?;
        ensure(dxy == edit_distance_oracle(&x, &y), format!("{x:?} {y:?}: {dxy}"))?;
    }

    let post = |rng: &mut ChaCha8Rng, n: usize| -> PosteriorSequence {
        let mut data = Vec::new();
        for _ in 0..n {
            let r: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = r.iter().sum();
            data.extend(r.iter().map(|v| v / s));
        }
        PosteriorSequence { probs: Tensor::matrix(n, 3, data).unwrap() }
    };
    let mut dtw_cases = 0;
    for n in 1..=4 {
        for m in 1..=4 {
            for _ in 0..10 {
                let (a, b) = (post(&mut rng, n), post(&mut rng, m));
                let (d, o) = (dtw_kl(&a, &b).map_err(|e| e.to_string())?, brute_dtw(&a, &b));
                ensure((d - o).abs() <= 1e-12, format!("dtw {n}×{m}: {d} vs {o}"))?;
                dtw_cases += 1;
            }
        }
    }

    let v = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..128).map(|_| rng.sample(StandardNormal)).collect() };
    let triples: Vec<_> = (0..10_000).map(|_| (v(&mut rng), v(&mut rng), v(&mut rng))).collect();
    let abx = abx_error(&triples, |p, q| Ok(p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>())).map_err(|e| e.to_string())?;
    ensure((abx - 50.0).abs() <= 2.0, format!("random ABX {abx:.2}"))?;

    let uniform: Vec<usize> = (0..100_000).map(|_| rng.random_range(0..256)).collect();
    let rate = bitrate(&[uniform], 100_000.0 / 50.0).map_err(|e| e.to_string())?;
    ensure((rate - 400.0).abs() <= 1.0, format!("bitrate {rate:.2}"))?;
    Ok(format!("Levenshtein axioms on 1000 triples; dtw_kl = brute force on {dtw_cases} pairs; random ABX {abx:.2}%; uniform-256 bitrate {rate:.2} bit/s"))
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_9(smoke: &Smoke) -> Outcome {
    let secs = smoke.syn.corpus.total_duration_sec();
    ensure((secs - 120.0).abs() < 1.0, format!("corpus lasts {secs:.1} s"))?;
    let base = smoke.run(BASE)?;
    let totals: Vec<f64> = base.state.log.iter().map(|r| r.total).collect();
    ensure(totals.len() == 500, format!("{} log rows", totals.len()))?;
    ensure(base.state.log.iter().all(|r| r.total.is_finite() && r.l_spec.is_finite() && r.l_kl.is_finite()), "non-finite loss")?;
    let (first, last) = (median(&totals[..50]), median(&totals[450..]));
    ensure(last < first, format!("median loss first 50 {first:.4}, last 50 {last:.4}"))?;
    let k = smoke_config().categories as f64;
    let eff = effective_category_count(&base.frames);
    let eff_no_kl = effective_category_count(&smoke.run(NO_KL)?.frames);
    ensure(eff <= k, format!("effective count {eff:.2} > K"))?;
    ensure(eff < eff_no_kl, format!("effective count {eff:.2} with KL vs {eff_no_kl:.2} without"))?;
    Ok(format!("median loss {first:.4} → {last:.4}; effective categories {eff:.2} with KL vs {eff_no_kl:.2} without (K = {k})"))
}

fn f0_error(model: &Model, held_out: &[Utterance]) -> Result<f64, String> {
    let (mut sum, mut n) = (0.0, 0usize);
    for u in held_out {
        let units = model.encode(&u.wave).map_err(|e| e.to_string())?;
        let c1 = model.c1_track(&units, u.speaker).map_err(|e| e.to_string())?;
        let reference = f0_reference_samples(&estimate_f0(&u.wave), c1.len());
        for (c, r) in c1.iter().zip(&reference) {
            if *r > 0.0 {
                sum += (c.exp() - r).abs();
                n += 1;
            }
        }
    }
    ensure(n > 0, "no voiced frames in the held-out set")?;
    Ok(sum / n as f64)
}

fn criterion_10(smoke: &Smoke) -> Outcome {
    ensure(smoke.held_out.len() == 10, "held-out set")?;
    let plain = f0_error(&smoke.run(BASE)?.state.model, &smoke.held_out)?;
    let with_f0 = f0_error(&smoke.run(WITH_F0)?.state.model, &smoke.held_out)?;
    ensure(with_f0 < plain, format!("mean |exp(c1) − f0| {with_f0:.1} Hz with F0 loss vs {plain:.1} Hz without"))?;
    Ok(format!("mean |exp(c1) − f0| on voiced held-out frames: {plain:.1} Hz → {with_f0:.1} Hz"))
}

fn criterion_11(smoke: &Smoke) -> Outcome {
    let (a, b) = (smoke.run(BASE)?, smoke.run(REPEAT)?);
    ensure(a.checkpoint == b.checkpoint, "checkpoints differ")?;
    ensure(a.units_text == b.units_text, "unit outputs differ")?;
    Ok(format!("checkpoints ({} bytes) and unit files ({} utterances) byte-identical", a.checkpoint.len(), a.frames.len()))
}

fn main() -> ExitCode {
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let smoke = Smoke::new();
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "gradient suite", Box::new(criterion_1)),
        (2, "KL closed forms", Box::new(criterion_2)),
        (3, "schedules", Box::new(criterion_3)),
        (4, "Remez FIR design", Box::new(criterion_4)),
        (5, "rate chain", Box::new(criterion_5)),
        (6, "echo-state reservoir", Box::new(|| criterion_6(&smoke))),
        (7, "jitter", Box::new(criterion_7)),
        (8, "metrics", Box::new(criterion_8)),
        (9, "end-to-end smoke", Box::new(|| criterion_9(&smoke))),
        (10, "F0 variant", Box::new(|| criterion_10(&smoke))),
        (11, "determinism", Box::new(|| criterion_11(&smoke))),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS criterion {id} ({name}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
