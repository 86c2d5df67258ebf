//! Fixed random echo-state network run over MFCC frames, decimated from 100 Hz to 50 Hz.

use autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dsp::{FeatureSequence, FEATURE_DIM};

pub const DEFAULT_SIZE: usize = 2048;
pub const DENSITY: f64 = 0.1;
pub const SPECTRAL_RADIUS: f64 = 0.9;
pub const INPUT_SCALE: f64 = 0.1;
const POWER_ITERATIONS: usize = 100;

/// Compressed sparse rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub n: usize,
    pub row_ptr: Vec<u32>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.row_ptr[i] as usize, self.row_ptr[i + 1] as usize);
            *o = self.col_idx[a..b].iter().zip(&self.values[a..b]).map(|(&j, v)| v * x[j as usize]).sum();
        }
    }

    /// Geometric-mean growth of a normalised power iteration from the all-ones vector.
    pub fn spectral_radius_estimate(&self, iterations: usize) -> f64 {
        let mut v = vec![1.0 / (self.n as f64).sqrt(); self.n];
        let mut next = vec![0.0; self.n];
        let mut log_growth = 0.0;
        for _ in 0..iterations {
            self.mul_vec(&v, &mut next);
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            log_growth += norm.ln();
            for (a, b) in v.iter_mut().zip(&next) {
                *a = b / norm;
            }
        }
        (log_growth / iterations as f64).exp()
    }
}

/// Echo-state reservoir; weights never change after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Reservoir {
    pub size: usize,
    /// `[size × 39]`, row-major.
    pub w_in: Vec<f64>,
    pub w_rec: SparseMatrix,
    pub seed: u64,
    pub spectral_radius: f64,
}

/// Reservoir states at 50 Hz, `[frames × size]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateSequence {
    pub states: Tensor,
}

impl StateSequence {
    pub const FRAME_RATE: f64 = 50.0;

    pub fn n_frames(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.states.shape()[1]
    }
}

impl Reservoir {
    pub fn new(seed: u64) -> Self {
        Self::with_size(seed, DEFAULT_SIZE)
    }

    pub fn with_size(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_in = (0..size * FEATURE_DIM).map(|_| rng.random_range(-INPUT_SCALE..=INPUT_SCALE)).collect();
        let mut row_ptr = Vec::with_capacity(size + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0u32);
        for _ in 0..size {
            for j in 0..size {
                if rng.random_bool(DENSITY) {
                    col_idx.push(j as u32);
                    values.push(rng.sample::<f64, _>(StandardNormal));
                }
            }
            row_ptr.push(col_idx.len() as u32);
        }
        let mut w_rec = SparseMatrix { n: size, row_ptr, col_idx, values };
        let rho = w_rec.spectral_radius_estimate(POWER_ITERATIONS);
        if rho > 0.0 {
            let s = SPECTRAL_RADIUS / rho;
            w_rec.values.iter_mut().for_each(|v| *v *= s);
        }
        Reservoir { size, w_in, w_rec, seed, spectral_radius: SPECTRAL_RADIUS }
    }

    pub fn density(&self) -> f64 {
        self.w_rec.nnz() as f64 / (self.size * self.size) as f64
    }

    pub fn radius_estimate(&self) -> f64 {
        self.w_rec.spectral_radius_estimate(POWER_ITERATIONS)
    }

    /// Full-rate state trajectory starting from `s0`.
    pub fn trajectory(&self, feats: &FeatureSequence, s0: &[f64]) -> Vec<Vec<f64>> {
        let mut s = s0.to_vec();
        let mut rec = vec![0.0; self.size];
        let mut out = Vec::with_capacity(feats.n_frames());
        for t in 0..feats.n_frames() {
            let u = feats.frame(t);
            self.w_rec.mul_vec(&s, &mut rec);
            for (i, si) in s.iter_mut().enumerate() {
                let w = &self.w_in[i * FEATURE_DIM..(i + 1) * FEATURE_DIM];
                let drive: f64 = w.iter().zip(u).map(|(a, b)| a * b).sum();
                *si = (drive + rec[i]).tanh();
            }
            out.push(s.clone());
        }
        out
    }

    /// States from a zero initial state, keeping frames 1, 3, 5, … (100 Hz → 50 Hz).
    pub fn run(&self, feats: &FeatureSequence) -> StateSequence {
        let traj = self.trajectory(feats, &vec![0.0; self.size]);
        let kept: Vec<&Vec<f64>> = traj.iter().skip(1).step_by(2).collect();
        let mut data = Vec::with_capacity(kept.len() * self.size);
        for s in &kept {
            data.extend_from_slice(s);
        }
        StateSequence { states: Tensor::matrix(kept.len(), self.size, data).expect("state matrix shape") }
    }
}
