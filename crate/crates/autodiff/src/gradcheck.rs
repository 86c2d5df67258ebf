//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Settings for [`gradient_check`].
#[derive(Clone, Copy, Debug)]
pub struct CheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates probed per input tensor (all of them when the tensor is smaller).
    pub probes: usize,
    pub seed: u64,
    /// Denominator floor as a fraction of the tensor's largest probed gradient, so that
    /// coordinates with vanishing gradients are judged against the tensor's scale.
    pub floor_fraction: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { step: 1e-5, probes: 32, seed: 0, floor_fraction: 1e-3 }
    }
}

/// Per-input outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_err: Vec<f64>,
    pub probed: Vec<usize>,
}

impl CheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central differences.
///
/// Every input is treated as trainable. Returns the max relative error per input.
pub fn gradient_check<F>(inputs: &[Tensor], f: F, cfg: CheckConfig) -> Result<CheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, x)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    };
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = CheckReport { max_rel_err: Vec::new(), probed: Vec::new() };
    for (ti, x) in inputs.iter().enumerate() {
        let n = x.len();
        let coords: Vec<usize> =
            if n <= cfg.probes { (0..n).collect() } else { sample(&mut rng, n, cfg.probes).into_vec() };
        let mut pairs = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = x.data()[c];
            work[ti].data_mut()[c] = orig + cfg.step;
            let fp = eval(&work)?;
            work[ti].data_mut()[c] = orig - cfg.step;
            let fm = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            pairs.push((analytic[ti].data()[c], (fp - fm) / (2.0 * cfg.step)));
        }
        let scale = pairs.iter().map(|(a, _)| a.abs()).fold(0.0, f64::max);
        let floor = (cfg.floor_fraction * scale).max(f64::MIN_POSITIVE);
        let worst = pairs
            .iter()
            .map(|(a, fd)| (a - fd).abs() / a.abs().max(fd.abs()).max(floor))
            .fold(0.0, f64::max);
        report.max_rel_err.push(worst);
        report.probed.push(coords.len());
    }
    Ok(report)
}

/// Directional variant of [`gradient_check`]: per input, one random direction supported on
/// `probes` coordinates (uniform ±1 weights, unit norm), compared against the central
/// difference of `f` along that direction.
pub fn directional_check<F>(inputs: &[Tensor], f: F, cfg: CheckConfig) -> Result<CheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, x)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    };
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = CheckReport { max_rel_err: Vec::new(), probed: Vec::new() };
    for (ti, x) in inputs.iter().enumerate() {
        let n = x.len();
        let coords: Vec<usize> =
            if n <= cfg.probes { (0..n).collect() } else { sample(&mut rng, n, cfg.probes).into_vec() };
        let mut weights: Vec<f64> = coords.iter().map(|_| rng.random_range(-1.0..=1.0)).collect();
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        weights.iter_mut().for_each(|w| *w /= norm);
        let a: f64 = coords.iter().zip(&weights).map(|(&c, w)| analytic[ti].data()[c] * w).sum();
        let shift = |work: &mut Vec<Tensor>, s: f64| {
            for (&c, w) in coords.iter().zip(&weights) {
                work[ti].data_mut()[c] = x.data()[c] + s * w;
            }
        };
        shift(&mut work, cfg.step);
        let fp = eval(&work)?;
        shift(&mut work, -cfg.step);
        let fm = eval(&work)?;
        shift(&mut work, 0.0);
        let fd = (fp - fm) / (2.0 * cfg.step);
        report.max_rel_err.push((a - fd).abs() / a.abs().max(fd.abs()).max(f64::MIN_POSITIVE));
        report.probed.push(coords.len());
    }
    Ok(report)
}
