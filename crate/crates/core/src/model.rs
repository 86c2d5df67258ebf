//! The assembled pipeline: reservoir, ABCD-VAE bottleneck and source-filter decoder.

use autodiff::Tensor;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::abcd::{encode_posterior, map_decode, AbcdVae, DirichletPrior, PosteriorSequence, UnitSequence};
use crate::config::TrainConfig;
use crate::dsp::{compute_mfcc, Waveform, MFCC_WINDOW};
use crate::nsf::{Vocoder, VocoderConfig};
use crate::params::ParamStore;
use crate::reservoir::{Reservoir, StateSequence};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub n_speakers: usize,
    pub reservoir: Reservoir,
    pub vae: AbcdVae,
    pub vocoder: Vocoder,
    pub params: ParamStore,
    pub prior: DirichletPrior,
}

impl Model {
    /// Draws the reservoir seed, then every parameter, from one stream seeded by `config.seed`.
    pub fn new(config: &TrainConfig, n_speakers: usize) -> Result<Self> {
        config.validate()?;
        if n_speakers == 0 {
            return Err(Error::Config("at least one speaker is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let reservoir = Reservoir::with_size(rng.next_u64(), config.esn_size);
        let mut params = ParamStore::new();
        let vae = AbcdVae::new(&mut params, &mut rng, config.esn_size, config.mlp_hidden, config.code_dim, config.categories);
        let vcfg = VocoderConfig {
            speaker_dim: config.speaker_dim,
            lstm_hidden: config.lstm_hidden,
            lstm_layers: config.lstm_layers,
            channels: config.channels,
            harmonic_blocks: config.harmonic_blocks,
            noise_blocks: config.noise_blocks,
            layers_per_block: config.layers_per_block,
            ..VocoderConfig::new(config.code_dim, n_speakers)
        };
        let vocoder = Vocoder::new(&mut params, &mut rng, vcfg)?;
        Ok(Model {
            config: config.clone(),
            n_speakers,
            reservoir,
            vae,
            vocoder,
            params,
            prior: DirichletPrior::uniform(config.categories),
        })
    }

    pub fn hop(&self) -> usize {
        self.vocoder.cfg.hop()
    }

    pub fn check_speaker(&self, speaker: usize) -> Result<()> {
        if speaker < self.n_speakers {
            Ok(())
        } else {
            Err(Error::UnknownSpeaker(speaker))
        }
    }

    /// MFCC then reservoir, 50 Hz.
    pub fn states(&self, wave: &Waveform) -> Result<StateSequence> {
        if wave.len() < MFCC_WINDOW {
            return Err(Error::Length { len: wave.len(), min: MFCC_WINDOW });
        }
        Ok(self.reservoir.run(&compute_mfcc(wave)?))
    }

    pub fn posterior(&self, wave: &Waveform) -> Result<PosteriorSequence> {
        encode_posterior(&self.vae, &self.params, &self.states(wave)?)
    }

    /// MAP units with run-length merging.
    pub fn encode(&self, wave: &Waveform) -> Result<UnitSequence> {
        Ok(map_decode(&self.posterior(wave)?))
    }

    /// Codebook columns for each frame of `units`, `[S × code_dim]`.
    pub fn unit_codes(&self, units: &UnitSequence) -> Result<Tensor> {
        let frames = units.expand();
        let (d, k) = (self.vae.code_dim, self.vae.n_categories);
        if let Some(&bad) = frames.iter().find(|&&u| u >= k) {
            return Err(Error::Param(format!("unit {bad} out of range for {k} categories")));
        }
        if frames.is_empty() {
            return Err(Error::Param("empty unit sequence".into()));
        }
        let m = self.params.get(self.vae.codebook.m).data();
        let data = frames.iter().flat_map(|&u| (0..d).map(move |r| m[r * k + u])).collect();
        Ok(Tensor::matrix(frames.len(), d, data)?)
    }

    pub fn synthesize(&self, units: &UnitSequence, speaker: usize, rng: &mut impl Rng) -> Result<Waveform> {
        self.check_speaker(speaker)?;
        self.vocoder.synthesize(&self.params, &self.unit_codes(units)?, speaker, rng)
    }

    /// The log-F0-like conditioning channel at 16 kHz.
    pub fn c1_track(&self, units: &UnitSequence, speaker: usize) -> Result<Vec<f64>> {
        self.check_speaker(speaker)?;
        let c = self.vocoder.condition_values(&self.params, &self.unit_codes(units)?, speaker)?;
        let t = c.shape()[1];
        Ok(c.data()[..t].to_vec())
    }

    /// Resynthesis straight from a waveform through the MAP bottleneck.
    pub fn resynthesize(&self, wave: &Waveform, speaker: usize, rng: &mut impl Rng) -> Result<Waveform> {
        self.synthesize(&self.encode(wave)?, speaker, rng)
    }
}
