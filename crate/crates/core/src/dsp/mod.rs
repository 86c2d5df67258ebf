//! Waveform I/O, MFCC features, STFT power spectra and a reference F0 estimator.

mod audio;
mod f0;
mod mfcc;

use autodiff::kernels::{stft_power, FrameSpec};
use autodiff::Tensor;

pub use audio::{read_wav, write_wav, Waveform, SAMPLE_RATE};
pub use f0::{estimate_f0, write_f0_csv, F0Contour, F0_MAX_HZ, F0_MIN_HZ};
pub use mfcc::{compute_mfcc, FeatureSequence, FEATURE_DIM, MFCC_HOP, MFCC_WINDOW};

use crate::error::{Error, Result};

/// STFT framing: FFT size, frame length and stride in samples (Hann window).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpectralConfig {
    pub fft_bins: usize,
    pub frame_length: usize,
    pub stride: usize,
}

impl SpectralConfig {
    pub const fn new(fft_bins: usize, frame_length: usize, stride: usize) -> Self {
        SpectralConfig { fft_bins, frame_length, stride }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_length > self.fft_bins {
            return Err(Error::Config(format!(
                "frame length {} exceeds FFT size {}",
                self.frame_length, self.fft_bins
            )));
        }
        if self.stride == 0 || self.frame_length == 0 {
            return Err(Error::Config("stride and frame length must be positive".into()));
        }
        Ok(())
    }

    pub fn n_frames(&self, len: usize) -> usize {
        self.frame_spec().n_frames(len)
    }

    pub fn n_freqs(&self) -> usize {
        self.fft_bins / 2 + 1
    }

    pub fn frame_spec(&self) -> FrameSpec {
        FrameSpec { fft_bins: self.fft_bins, frame_length: self.frame_length, stride: self.stride }
    }
}

/// Linear power spectrogram, `[freqs × frames]`.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    pub power: Tensor,
    pub config: SpectralConfig,
}

impl Spectrogram {
    pub fn n_freqs(&self) -> usize {
        self.power.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.power.shape()[1]
    }

    pub fn total_power(&self) -> f64 {
        self.power.data().iter().sum()
    }
}

pub fn stft(wave: &Waveform, cfg: SpectralConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if wave.len() < cfg.frame_length {
        return Err(Error::Length { len: wave.len(), min: cfg.frame_length });
    }
    let frames = cfg.n_frames(wave.len());
    let data = stft_power(wave.samples(), cfg.frame_spec());
    let power = Tensor::matrix(frames, cfg.n_freqs(), data)
        .expect("stft_power returns frames × freqs")
        .transpose2();
    Ok(Spectrogram { power, config: cfg })
}
