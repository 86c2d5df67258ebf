use std::f64::consts::PI;

use autodiff::kernels::hann_window;
use autodiff::Tensor;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::audio::Waveform;
use crate::error::{Error, Result};

pub const MFCC_WINDOW: usize = 400;
pub const MFCC_HOP: usize = 160;
pub const FEATURE_DIM: usize = 39;
const N_CEPS: usize = 13;
const N_MELS: usize = 26;
const N_FFT: usize = 512;
const PRE_EMPHASIS: f64 = 0.97;
const LOG_FLOOR: f64 = 1e-10;

/// 13 MFCCs with Δ and Δ² at 100 frames per second, `[frames × 39]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Tensor,
}

impl FeatureSequence {
    pub const FRAME_RATE: f64 = 100.0;

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        self.frames.row(i)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the mel scale over 0–8 kHz, `[N_MELS][N_FFT/2+1]`.
fn mel_filterbank() -> Vec<Vec<f64>> {
    let n_bins = N_FFT / 2 + 1;
    let top = hz_to_mel(8000.0);
    let edges: Vec<f64> = (0..N_MELS + 2).map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64)).collect();
    (0..N_MELS)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * 16000.0 / N_FFT as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Regression deltas over ±2 frames with edge replication.
fn deltas(x: &[[f64; N_CEPS]]) -> Vec<[f64; N_CEPS]> {
    let n = x.len() as isize;
    let at = |t: isize| &x[t.clamp(0, n - 1) as usize];
    (0..n)
        .map(|t| {
            let mut d = [0.0; N_CEPS];
            for (j, dj) in d.iter_mut().enumerate() {
                let mut acc = 0.0;
                for k in 1..=2isize {
                    acc += k as f64 * (at(t + k)[j] - at(t - k)[j]);
                }
                *dj = acc / 10.0;
            }
            d
        })
        .collect()
}

pub fn compute_mfcc(wave: &Waveform) -> Result<FeatureSequence> {
    let x = wave.samples();
    if x.len() < MFCC_WINDOW {
        return Err(Error::Length { len: x.len(), min: MFCC_WINDOW });
    }
    let mut emph = Vec::with_capacity(x.len());
    emph.push(x[0]);
    emph.extend(x.windows(2).map(|w| w[1] - PRE_EMPHASIS * w[0]));

    let n_frames = (x.len() - MFCC_WINDOW) / MFCC_HOP + 1;
    let window = hann_window(MFCC_WINDOW);
    let fb = mel_filterbank();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut ceps = Vec::with_capacity(n_frames);
    let dct_scale = (2.0 / N_MELS as f64).sqrt();
    for f in 0..n_frames {
        let start = f * MFCC_HOP;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < MFCC_WINDOW { Complex::new(emph[start + i] * window[i], 0.0) } else { Complex::new(0.0, 0.0) };
        }
        fft.process(&mut buf);
        let log_mel: Vec<f64> = fb
            .iter()
            .map(|filt| {
                let e: f64 = filt.iter().zip(&buf).map(|(w, c)| w * c.norm_sqr()).sum();
                e.max(LOG_FLOOR).ln()
            })
            .collect();
        let mut c = [0.0; N_CEPS];
        for (j, cj) in c.iter_mut().enumerate() {
            *cj = dct_scale
                * log_mel
                    .iter()
                    .enumerate()
                    .map(|(m, v)| v * (PI * j as f64 * (m as f64 + 0.5) / N_MELS as f64).cos())
                    .sum::<f64>();
        }
        ceps.push(c);
    }
    let d1 = deltas(&ceps);
    let d2 = deltas(&d1);
    let mut data = Vec::with_capacity(n_frames * FEATURE_DIM);
    for t in 0..n_frames {
        data.extend_from_slice(&ceps[t]);
        data.extend_from_slice(&d1[t]);
        data.extend_from_slice(&d2[t]);
    }
    Ok(FeatureSequence { frames: Tensor::matrix(n_frames, FEATURE_DIM, data).expect("feature matrix shape") })
}
