use std::io::Write;
use std::path::Path;

use super::audio::{Waveform, SAMPLE_RATE};
use super::mfcc::{MFCC_HOP, MFCC_WINDOW};
use crate::error::{Error, Result};

pub const F0_MIN_HZ: f64 = 60.0;
pub const F0_MAX_HZ: f64 = 400.0;
const VOICING_THRESHOLD: f64 = 0.45;
/// Among candidate peaks, the shortest lag within this fraction of the best correlation wins.
const OCTAVE_TOLERANCE: f64 = 0.9;

/// F0 track at 100 frames per second; `0.0` marks unvoiced frames.
#[derive(Clone, Debug, PartialEq)]
pub struct F0Contour {
    pub f0_hz: Vec<f64>,
}

impl F0Contour {
    pub const FRAME_RATE: f64 = 100.0;

    /// Centre time of frame `i` in seconds.
    pub fn frame_time(i: usize) -> f64 {
        (i * MFCC_HOP + MFCC_WINDOW / 2) as f64 / SAMPLE_RATE as f64
    }

    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.f0_hz.is_empty() {
            return 0.0;
        }
        self.f0_hz.iter().filter(|&&f| f > 0.0).count() as f64 / self.f0_hz.len() as f64
    }
}

/// Normalised cross-correlation pitch tracker: 25 ms frames every 10 ms, 60–400 Hz search.
pub fn estimate_f0(wave: &Waveform) -> F0Contour {
    let x = wave.samples();
    if x.len() < MFCC_WINDOW {
        return F0Contour { f0_hz: Vec::new() };
    }
    let fs = SAMPLE_RATE as f64;
    let min_lag = (fs / F0_MAX_HZ).floor() as usize;
    let max_lag = (fs / F0_MIN_HZ).ceil() as usize;
    let n_frames = (x.len() - MFCC_WINDOW) / MFCC_HOP + 1;
    let f0_hz = (0..n_frames)
        .map(|f| frame_f0(x, f * MFCC_HOP, min_lag, max_lag).unwrap_or(0.0))
        .collect();
    F0Contour { f0_hz }
}

fn frame_f0(x: &[f64], start: usize, min_lag: usize, max_lag: usize) -> Option<f64> {
    let end = (start + MFCC_WINDOW + max_lag + 1).min(x.len());
    let seg = &x[start..end];
    let mean = seg[..MFCC_WINDOW].iter().sum::<f64>() / MFCC_WINDOW as f64;
    let seg: Vec<f64> = seg.iter().map(|v| v - mean).collect();
    let e0: f64 = seg[..MFCC_WINDOW].iter().map(|v| v * v).sum();
    if e0 < 1e-10 * MFCC_WINDOW as f64 {
        return None;
    }
    // r[lag - min_lag - 1 ..] keeps one extra lag on each side for interpolation
    let lo = min_lag - 1;
    let hi = max_lag + 1;
    let mut r = vec![0.0; hi - lo + 1];
    for (i, lag) in (lo..=hi).enumerate() {
        let n = MFCC_WINDOW.min(seg.len().saturating_sub(lag));
        if n < MFCC_WINDOW / 4 {
            break;
        }
        let (mut xy, mut ea, mut eb) = (0.0, 0.0, 0.0);
        for k in 0..n {
            let (a, b) = (seg[k], seg[k + lag]);
            xy += a * b;
            ea += a * a;
            eb += b * b;
        }
        if ea > 0.0 && eb > 0.0 {
            r[i] = xy / (ea * eb).sqrt();
        }
    }
    let idx = |lag: usize| lag - lo;
    let best = (min_lag..=max_lag).map(|l| r[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
    if best < VOICING_THRESHOLD {
        return None;
    }
    let lag = (min_lag..=max_lag).find(|&l| {
        let v = r[idx(l)];
        v >= OCTAVE_TOLERANCE * best && v >= r[idx(l) - 1] && v >= r[idx(l) + 1]
    })?;
    let (a, b, c) = (r[idx(lag) - 1], r[idx(lag)], r[idx(lag) + 1]);
    let denom = a - 2.0 * b + c;
    let delta = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
    let f0 = SAMPLE_RATE as f64 / (lag as f64 + delta);
    Some(f0.clamp(F0_MIN_HZ, F0_MAX_HZ))
}

pub fn write_f0_csv(path: impl AsRef<Path>, contour: &F0Contour) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("time_sec,f0_hz\n");
    for (i, f) in contour.f0_hz.iter().enumerate() {
        out.push_str(&format!("{:.4},{:.3}\n", F0Contour::frame_time(i), f));
    }
    std::fs::File::create(path)
        .and_then(|mut fh| fh.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
