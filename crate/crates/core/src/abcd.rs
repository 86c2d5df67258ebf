//! Attention-based categorical bottleneck with a Dirichlet prior.
//!
//! Logits are scaled dot products between a per-frame query and the columns of
//! a codebook `M`; the same `M` maps (relaxed) one-hot assignments back to
//! continuous vectors.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use autodiff::special::{digamma, ln_gamma};
use autodiff::{softmax_in_place, Tape, Tensor, Var};
use rand::Rng;

use crate::params::{Bound, ParamId, ParamStore};
use crate::reservoir::StateSequence;
use crate::{Error, Result};

pub const DEFAULT_CATEGORIES: usize = 256;
pub const DEFAULT_CODE_DIM: usize = 128;
pub const DEFAULT_HIDDEN: usize = 128;
pub const JITTER_PROB: f64 = 0.12;

const POSTERIOR_MAGIC: &[u8; 4] = b"ZPST";

/// MLP `input → hidden → hidden` with tanh, then a linear map to the code dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryNet {
    /// `(weight [in × out], bias [out])` per layer.
    pub layers: Vec<(ParamId, ParamId)>,
}

/// `[code_dim × K]`; columns are code vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Codebook {
    pub m: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbcdVae {
    pub query: QueryNet,
    pub codebook: Codebook,
    /// Unconstrained logits of θ; θ = softmax(logits).
    pub theta_logits: ParamId,
    pub code_dim: usize,
    pub n_categories: usize,
}

/// Per-frame categorical posteriors, `[S × K]` at 50 Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSequence {
    pub probs: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedAssignment {
    pub z_tilde: Tensor,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirichletPrior {
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirichletPosterior {
    pub theta_logits: Vec<f64>,
    pub omega: Vec<f64>,
}

/// MAP categories with contiguous repeats merged.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UnitSequence {
    pub units: Vec<usize>,
    pub durations: Vec<usize>,
}

/// How the bottleneck turns posteriors into decoder input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BottleneckMode {
    /// `probs · Mᵀ`, no sampling.
    Pretrain,
    /// Gumbel-softmax sample at temperature `tau`, then jitter.
    Relaxed { tau: f64, jitter: f64 },
    /// One-hot MAP assignment.
    Map,
}

pub struct BottleneckOutput<'t> {
    pub log_probs: Var<'t>,
    /// `[S × code_dim]`
    pub output: Var<'t>,
}

impl PosteriorSequence {
    pub const FRAME_RATE: f64 = 50.0;

    pub fn n_frames(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn n_categories(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }
}

impl DirichletPrior {
    pub fn uniform(k: usize) -> Self {
        DirichletPrior { alpha: vec![1.0; k] }
    }
}

impl DirichletPosterior {
    pub fn new(theta_logits: Vec<f64>, prior: &DirichletPrior, n_frames: f64) -> Self {
        let mut qd = DirichletPosterior { theta_logits, omega: Vec::new() };
        qd.omega = update_concentration(&qd, prior, n_frames);
        qd
    }

    pub fn theta(&self) -> Vec<f64> {
        let mut t = self.theta_logits.clone();
        softmax_in_place(&mut t);
        t
    }
}

impl UnitSequence {
    /// Run-length encodes a per-frame category sequence.
    pub fn from_frames(frames: &[usize]) -> Self {
        let mut seq = UnitSequence::default();
        for &u in frames {
            if seq.units.last() == Some(&u) {
                *seq.durations.last_mut().unwrap() += 1;
            } else {
                seq.units.push(u);
                seq.durations.push(1);
            }
        }
        seq
    }

    pub fn n_frames(&self) -> usize {
        self.durations.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn expand(&self) -> Vec<usize> {
        self.units.iter().zip(&self.durations).flat_map(|(&u, &d)| std::iter::repeat_n(u, d)).collect()
    }
}

impl AbcdVae {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        input_dim: usize,
        hidden: usize,
        code_dim: usize,
        n_categories: usize,
    ) -> Self {
        let dims = [input_dim, hidden, hidden, code_dim];
        let layers = (0..3)
            .map(|l| {
                let w = store.add_uniform(format!("abcd.mlp{l}.w"), &[dims[l], dims[l + 1]], 1.0 / (dims[l] as f64).sqrt(), rng);
                let b = store.add_zeros(format!("abcd.mlp{l}.b"), &[dims[l + 1]]);
                (w, b)
            })
            .collect();
        let m = store.add_uniform("abcd.codebook", &[code_dim, n_categories], 1.0, rng);
        let theta_logits = store.add_zeros("abcd.theta_logits", &[n_categories]);
        AbcdVae { query: QueryNet { layers }, codebook: Codebook { m }, theta_logits, code_dim, n_categories }
    }

    /// `[S × input] → [S × K]` logits `q·M / √code_dim`.
    pub fn logits<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        let last = self.query.layers.len() - 1;
        for (l, &(w, b)) in self.query.layers.iter().enumerate() {
            h = h.matmul(p[w])?.add_row(p[b])?;
            if l < last {
                h = h.tanh()?;
            }
        }
        Ok(h.matmul(p[self.codebook.m])?.scale(1.0 / (self.code_dim as f64).sqrt())?)
    }

    /// `z · Mᵀ`
    pub fn readout<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        Ok(z.matmul(p[self.codebook.m].transpose()?)?)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, mode: BottleneckMode, rng: &mut impl Rng) -> Result<BottleneckOutput<'t>> {
        let log_probs = self.logits(p, x)?.log_softmax_rows()?;
        let (s, k) = (log_probs.shape()[0], log_probs.shape()[1]);
        let z = match mode {
            BottleneckMode::Pretrain => log_probs.exp()?,
            BottleneckMode::Relaxed { tau, jitter } => {
                check_tau(tau)?;
                let g = x.tape().constant(sample_gumbel(s, k, rng));
                let z = log_probs.add(g)?.scale(1.0 / tau)?.softmax_rows()?;
                z.gather_rows(&jitter_indices(s, jitter, rng))?
            }
            BottleneckMode::Map => {
                let lp = log_probs.value();
                let map = argmax_rows(&lp);
                let mut onehot = Tensor::zeros(&[s, k]);
                for (i, &c) in map.iter().enumerate() {
                    onehot.data_mut()[i * k + c] = 1.0;
                }
                x.tape().constant(onehot)
            }
        };
        let output = self.readout(p, z)?;
        Ok(BottleneckOutput { log_probs, output })
    }

    pub fn dirichlet_posterior(&self, store: &ParamStore, prior: &DirichletPrior, n_frames: f64) -> DirichletPosterior {
        DirichletPosterior::new(store.get(self.theta_logits).data().to_vec(), prior, n_frames)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Param(format!("Gumbel-softmax temperature must be positive, got {tau}")))
    }
}

/// Posterior over categories for every state frame.
pub fn encode_posterior(vae: &AbcdVae, store: &ParamStore, x: &StateSequence) -> Result<PosteriorSequence> {
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let probs = vae.logits(&p, tape.constant(x.states.clone()))?.softmax_rows()?.value();
    let k = vae.n_categories;
    if let Some(bad) = probs.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { frame: bad / k });
    }
    Ok(PosteriorSequence { probs: (*probs).clone() })
}

/// Standard Gumbel noise, `[rows × cols]`.
pub fn sample_gumbel(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| -(-rng.random_range(f64::MIN_POSITIVE..1.0).ln()).ln()).collect();
    Tensor::matrix(rows, cols, data).expect("gumbel shape")
}

pub fn gumbel_softmax_sample(p: &PosteriorSequence, tau: f64, rng: &mut impl Rng) -> Result<RelaxedAssignment> {
    check_tau(tau)?;
    let (s, k) = (p.n_frames(), p.n_categories());
    let g = sample_gumbel(s, k, rng);
    let mut z = p.probs.clone();
    for (row, noise) in z.data_mut().chunks_mut(k.max(1)).zip(g.data().chunks(k.max(1))) {
        for (v, n) in row.iter_mut().zip(noise) {
            *v = (v.ln() + n) / tau;
        }
        softmax_in_place(row);
    }
    Ok(RelaxedAssignment { z_tilde: z, temperature: tau })
}

/// Source row for every frame after jitter: with probability `p` a frame takes
/// its left or right neighbour, with the missing neighbour at an edge replaced
/// by the existing one.
pub fn jitter_indices(s: usize, p: f64, rng: &mut impl Rng) -> Vec<usize> {
    (0..s)
        .map(|i| {
            let replace = rng.random::<f64>() < p;
            let left = rng.random_bool(0.5);
            if !replace || s == 1 {
                i
            } else if i == 0 {
                1
            } else if i == s - 1 || left {
                i - 1
            } else {
                i + 1
            }
        })
        .collect()
}

pub fn apply_jitter(z: &RelaxedAssignment, p_jitter: f64, rng: &mut impl Rng) -> RelaxedAssignment {
    let (s, k) = (z.z_tilde.shape()[0], z.z_tilde.shape()[1]);
    let idx = jitter_indices(s, p_jitter, rng);
    let mut data = Vec::with_capacity(s * k);
    for &i in &idx {
        data.extend_from_slice(z.z_tilde.row(i));
    }
    RelaxedAssignment { z_tilde: Tensor::matrix(s, k, data).expect("jitter shape"), temperature: z.temperature }
}

/// Rows of `z̃ · Mᵀ`, with `m` the `[code_dim × K]` codebook.
pub fn quantize_output(z: &RelaxedAssignment, m: &Tensor) -> Result<Tensor> {
    let (s, k) = (z.z_tilde.shape()[0], z.z_tilde.shape()[1]);
    let (d, k2) = m.dims2().ok_or_else(|| Error::Shape("codebook must be a matrix".into()))?;
    if k != k2 {
        return Err(Error::Shape(format!("assignment width {k} vs codebook width {k2}")));
    }
    let data = autodiff::kernels::matmul(z.z_tilde.data(), m.transpose2().data(), s, k, d);
    Ok(Tensor::matrix(s, d, data)?)
}

/// KL(Dir(ω) ‖ Dir(α)).
pub fn kl_dirichlet(omega: &[f64], alpha: &[f64]) -> Result<f64> {
    if omega.len() != alpha.len() {
        return Err(Error::Shape(format!("{} vs {} concentrations", omega.len(), alpha.len())));
    }
    if let Some(bad) = omega.iter().chain(alpha).find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Param(format!("concentration must be positive, got {bad}")));
    }
    let (so, sa): (f64, f64) = (omega.iter().sum(), alpha.iter().sum());
    let psi_sum = digamma(so);
    let mut kl = ln_gamma(so) - ln_gamma(sa);
    for (&w, &a) in omega.iter().zip(alpha) {
        kl += ln_gamma(a) - ln_gamma(w) + (w - a) * (digamma(w) - psi_sum);
    }
    Ok(kl.max(0.0))
}

/// `E_q[log q(z)] − E_q[log p(z | π)]` for one posterior row under `π ~ Dir(ω)`.
pub fn kl_categorical_term(p: &[f64], omega: &[f64]) -> f64 {
    let psi_sum = digamma(omega.iter().sum());
    p.iter()
        .zip(omega)
        .map(|(&pk, &w)| if pk > 0.0 { pk * pk.ln() - pk * (digamma(w) - psi_sum) } else { 0.0 })
        .sum()
}

/// Length of the run of equal categories containing each frame.
pub fn span_lengths(map_seq: &[usize]) -> Vec<usize> {
    let runs = UnitSequence::from_frames(map_seq);
    runs.durations.iter().flat_map(|&d| std::iter::repeat_n(d, d)).collect()
}

/// ω = α + N·θ
pub fn update_concentration(qd: &DirichletPosterior, pd: &DirichletPrior, n_frames: f64) -> Vec<f64> {
    pd.alpha.iter().zip(qd.theta()).map(|(a, t)| a + n_frames * t).collect()
}

/// Per-sequence KL regulariser for `S` frames of posteriors, a waveform of `t` samples,
/// and a dataset of `n` frames.
pub fn kl_loss(p: &PosteriorSequence, omega: &[f64], alpha: &[f64], t: usize, n: f64) -> Result<f64> {
    let s = p.n_frames();
    let u = span_lengths(&argmax_rows(&p.probs));
    let mut sum = s as f64 / n * kl_dirichlet(omega, alpha)?;
    for (i, &ui) in u.iter().enumerate() {
        sum += kl_categorical_term(p.row(i), omega) / ui as f64;
    }
    Ok(sum / t as f64)
}

/// Differentiable `KL(Dir(α + N·softmax(θ)) ‖ Dir(α))`. `Σω = Σα + N` does not depend on θ.
pub fn kl_dirichlet_graph<'t>(theta_logits: Var<'t>, alpha: &[f64], n: f64) -> Result<Var<'t>> {
    let omega = omega_graph(theta_logits, alpha, n)?;
    let tape = theta_logits.tape();
    let alpha_v = tape.constant(Tensor::matrix(1, alpha.len(), alpha.to_vec())?);
    let sa: f64 = alpha.iter().sum();
    let so = sa + n;
    let konst = ln_gamma(so) - ln_gamma(sa) + alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>();
    let cross = omega.sub(alpha_v)?.mul(omega.digamma()?.affine(1.0, -digamma(so))?)?.sum()?;
    Ok(cross.sub(omega.ln_gamma()?.sum()?)?.affine(1.0, konst)?)
}

fn omega_graph<'t>(theta_logits: Var<'t>, alpha: &[f64], n: f64) -> Result<Var<'t>> {
    let k = alpha.len();
    let theta = theta_logits.reshape(&[1, k])?.softmax_rows()?;
    let alpha_v = theta_logits.tape().constant(Tensor::matrix(1, k, alpha.to_vec())?);
    Ok(theta.scale(n)?.add(alpha_v)?)
}

/// Differentiable per-sequence KL regulariser from `[S × K]` log-posteriors.
/// Span lengths come from the current MAP sequence and carry no gradient.
pub fn kl_loss_graph<'t>(log_probs: Var<'t>, theta_logits: Var<'t>, alpha: &[f64], t: usize, n: f64) -> Result<Var<'t>> {
    let tape = log_probs.tape();
    let (s, k) = (log_probs.shape()[0], log_probs.shape()[1]);
    let u = span_lengths(&argmax_rows(&log_probs.value()));
    let inv_u = tape.constant(Tensor::vector(u.iter().map(|&x| 1.0 / x as f64).collect()));
    let probs = log_probs.exp()?;
    let neg_entropy = probs.mul(log_probs)?.sum_rows()?;
    let so = alpha.iter().sum::<f64>() + n;
    let psi = omega_graph(theta_logits, alpha, n)?.digamma()?.affine(1.0, -digamma(so))?.reshape(&[k, 1])?;
    let expected_log_prior = probs.matmul(psi)?.reshape(&[s])?;
    let d = neg_entropy.sub(expected_log_prior)?;
    let frames = d.mul(inv_u)?.sum()?;
    let dir = kl_dirichlet_graph(theta_logits, alpha, n)?.scale(s as f64 / n)?;
    Ok(frames.add(dir)?.scale(1.0 / t as f64)?)
}

/// Per-row argmax; ties go to the lowest index.
pub fn argmax_rows(m: &Tensor) -> Vec<usize> {
    let k = m.shape()[1];
    if k == 0 {
        return vec![0; m.shape()[0]];
    }
    m.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn map_decode(p: &PosteriorSequence) -> UnitSequence {
    UnitSequence::from_frames(&argmax_rows(&p.probs))
}

/// The first posterior row of every MAP span.
pub fn span_first_rows(p: &PosteriorSequence) -> PosteriorSequence {
    let runs = map_decode(p);
    let k = p.n_categories();
    let mut data = Vec::with_capacity(runs.len() * k);
    let mut start = 0;
    for &d in &runs.durations {
        data.extend_from_slice(p.row(start));
        start += d;
    }
    PosteriorSequence { probs: Tensor::matrix(runs.len(), k, data).expect("span rows") }
}

/// `utt_id\tunit:dur unit:dur ...`
pub fn format_units(utt_id: &str, seq: &UnitSequence) -> String {
    let mut line = format!("{utt_id}\t");
    for (i, (u, d)) in seq.units.iter().zip(&seq.durations).enumerate() {
        if i > 0 {
            line.push(' ');
        }
        let _ = write!(line, "{u}:{d}");
    }
    line
}

pub fn parse_units(text: &str) -> Result<Vec<(String, UnitSequence)>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Parse(format!("units line {}: {what}", ln + 1));
        let (id, rest) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        let mut seq = UnitSequence::default();
        for tok in rest.split_whitespace() {
            let (u, d) = tok.split_once(':').ok_or_else(|| bad("expected unit:duration"))?;
            let u: usize = u.parse().map_err(|_| bad("bad unit"))?;
            let d: usize = d.parse().map_err(|_| bad("bad duration"))?;
            if d == 0 {
                return Err(bad("zero duration"));
            }
            seq.units.push(u);
            seq.durations.push(d);
        }
        out.push((id.to_string(), seq));
    }
    Ok(out)
}

/// Binary posterior dump: `ZPST`, u32 S, u32 K, u32 reserved, then S·K little-endian f32.
pub fn write_posterior(path: &Path, p: &PosteriorSequence) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * p.probs.len());
    buf.extend_from_slice(POSTERIOR_MAGIC);
    buf.extend_from_slice(&(p.n_frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(p.n_categories() as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for &v in p.probs.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(|e| Error::io(path, e))
}

pub fn read_posterior(path: &Path) -> Result<PosteriorSequence> {
    let mut buf = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| Error::io(path, e))?;
    if buf.len() < 16 || &buf[..4] != POSTERIOR_MAGIC {
        return Err(Error::Parse(format!("{} is not a posterior dump", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap()) as usize;
    let (s, k) = (word(4), word(8));
    if buf.len() != 16 + 4 * s * k {
        return Err(Error::Parse(format!("{}: expected {s}×{k} values", path.display())));
    }
    let data = buf[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok(PosteriorSequence { probs: Tensor::matrix(s, k, data)? })
}
