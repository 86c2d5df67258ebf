//! `ZSTW` checkpoints: every learnable tensor, Adam moments, reservoir, schedule and RNG state.
//!
//! Layout (little-endian): magic `ZSTW`, u32 version, u32-length config text, u32 speaker
//! count, u64 reservoir seed, f64 reservoir radius, u64 completed iterations, u64 Adam step,
//! RNG (32-byte seed, u64 stream, u128 word position), u32 tensor count, then per tensor a
//! u32-length UTF-8 name, u8 dtype (0 = f32, 1 = u32), u32 rank, u32 dims and row-major data.

use std::path::Path;

use autodiff::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::params::ParamStore;
use crate::reservoir::Reservoir;
use crate::training::{AdamState, TrainState};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ZSTW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub n_speakers: usize,
    pub reservoir_seed: u64,
    pub reservoir_radius: f64,
    pub iteration: u64,
    pub adam_step: u64,
    pub rng: RngState,
    pub tensors: Vec<NamedTensor>,
}

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

fn f32_tensor(name: String, t: &Tensor) -> NamedTensor {
    NamedTensor { name, shape: t.shape().to_vec(), data: TensorData::F32(t.data().iter().map(|&v| v as f32).collect()) }
}

fn reservoir_tensors(r: &Reservoir) -> Vec<NamedTensor> {
    let n = r.size;
    vec![
        NamedTensor { name: "esn.w_in".into(), shape: vec![n, r.w_in.len() / n.max(1)], data: TensorData::F32(r.w_in.iter().map(|&v| v as f32).collect()) },
        NamedTensor { name: "esn.w_rec.row_ptr".into(), shape: vec![r.w_rec.row_ptr.len()], data: TensorData::U32(r.w_rec.row_ptr.clone()) },
        NamedTensor { name: "esn.w_rec.col_idx".into(), shape: vec![r.w_rec.col_idx.len()], data: TensorData::U32(r.w_rec.col_idx.clone()) },
        NamedTensor {
            name: "esn.w_rec.values".into(),
            shape: vec![r.w_rec.values.len()],
            data: TensorData::F32(r.w_rec.values.iter().map(|&v| v as f32).collect()),
        },
    ]
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        let m = &state.model;
        let mut tensors = Vec::new();
        for (name, t) in m.params.iter() {
            tensors.push(f32_tensor(format!("{PARAM}{name}"), t));
        }
        for ((name, _), (mt, vt)) in m.params.iter().zip(state.adam.m.iter().zip(&state.adam.v)) {
            tensors.push(f32_tensor(format!("{ADAM_M}{name}"), mt));
            tensors.push(f32_tensor(format!("{ADAM_V}{name}"), vt));
        }
        tensors.extend(reservoir_tensors(&m.reservoir));
        Checkpoint {
            config: m.config.clone(),
            n_speakers: m.n_speakers,
            reservoir_seed: m.reservoir.seed,
            reservoir_radius: m.reservoir.spectral_radius,
            iteration: state.iteration as u64,
            adam_step: state.adam.step,
            rng: RngState::capture(&state.rng),
            tensors,
        }
    }

    fn find(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    fn load_f32(&self, name: &str, like: &Tensor) -> Result<Tensor> {
        let t = self.find(name)?;
        if t.shape != like.shape() {
            return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, model expects {:?}", t.shape, like.shape())));
        }
        match &t.data {
            TensorData::F32(v) => Ok(Tensor::new(&t.shape, v.iter().map(|&x| x as f64).collect())?),
            TensorData::U32(_) => Err(Error::Checkpoint(format!("`{name}` is not f32"))),
        }
    }

    /// Rebuilds the model skeleton from the stored config, then fills every tensor by name.
    /// The reservoir is regenerated from its seed and checked against the stored matrices.
    pub fn into_state(&self) -> Result<TrainState> {
        let mut state = TrainState::new(&self.config, self.n_speakers)?;
        let model = &mut state.model;
        if model.reservoir.seed != self.reservoir_seed {
            model.reservoir = Reservoir::with_size(self.reservoir_seed, self.config.esn_size);
        }
        if reservoir_tensors(&model.reservoir) != self.tensors.iter().filter(|t| t.name.starts_with("esn.")).cloned().collect::<Vec<_>>()
            || model.reservoir.spectral_radius.to_bits() != self.reservoir_radius.to_bits()
        {
            return Err(Error::Checkpoint("stored reservoir does not match its seed".into()));
        }
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in model.params.iter() {
            params.add(name, self.load_f32(&format!("{PARAM}{name}"), t)?);
            m.push(self.load_f32(&format!("{ADAM_M}{name}"), t)?);
            v.push(self.load_f32(&format!("{ADAM_V}{name}"), t)?);
        }
        let expected = 3 * params.len() + 4;
        if self.tensors.len() != expected {
            return Err(Error::Checkpoint(format!("{} tensors, model has {expected}", self.tensors.len())));
        }
        model.params = params;
        state.adam = AdamState { m, v, step: self.adam_step };
        state.iteration = self.iteration as usize;
        state.rng = self.rng.restore();
        Ok(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_text();
        b.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        b.extend_from_slice(cfg.as_bytes());
        b.extend_from_slice(&(self.n_speakers as u32).to_le_bytes());
        b.extend_from_slice(&self.reservoir_seed.to_le_bytes());
        b.extend_from_slice(&self.reservoir_radius.to_le_bytes());
        b.extend_from_slice(&self.iteration.to_le_bytes());
        b.extend_from_slice(&self.adam_step.to_le_bytes());
        b.extend_from_slice(&self.rng.seed);
        b.extend_from_slice(&self.rng.stream.to_le_bytes());
        b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            b.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            b.extend_from_slice(t.name.as_bytes());
            b.push(match t.data {
                TensorData::F32(_) => 0,
                TensorData::U32(_) => 1,
            });
            b.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                TensorData::U32(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a ZSTW checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let config = TrainConfig::from_text(cfg_text)?;
        let n_speakers = r.u32()? as usize;
        let reservoir_seed = r.u64()?;
        let reservoir_radius = f64::from_le_bytes(r.array()?);
        let iteration = r.u64()?;
        let adam_step = r.u64()?;
        let seed: [u8; 32] = r.array()?;
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.array()?);
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let words = raw.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
            let data = match dtype {
                0 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
                1 => TensorData::U32(words.map(u32::from_le_bytes).collect()),
                d => return Err(Error::Checkpoint(format!("unknown dtype {d} for `{name}`"))),
            };
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            n_speakers,
            reservoir_seed,
            reservoir_radius,
            iteration,
            adam_step,
            rng: RngState { seed, stream, word_pos },
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_synthetic_corpus;
    use crate::training::train;

    fn small() -> TrainConfig {
        TrainConfig {
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
            batch_size: 2,
            max_segment_sec: 0.2,
            total_iters: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let syn = generate_synthetic_corpus(2, 2, 4, 2).unwrap();
        let state = train(&syn.corpus, &small(), |_| Ok(())).unwrap();
        let ck = Checkpoint::from_state(&state);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let restored = back.into_state().unwrap();
        assert_eq!(Checkpoint::from_state(&restored).to_bytes(), bytes);
        assert_eq!(restored.iteration, 3);
        assert_eq!(restored.adam.step, 3);
        assert_eq!(restored.rng, state.rng);
        assert_eq!(restored.model.reservoir, state.model.reservoir);
        for ((_, a), (_, b)) in restored.model.params.iter().zip(state.model.params.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ck");
        ck.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
    }

    #[test]
    fn rejects_bad_input() {
        let syn = generate_synthetic_corpus(2, 2, 4, 2).unwrap();
        let state = train(&syn.corpus, &TrainConfig { total_iters: 1, ..small() }, |_| Ok(())).unwrap();
        let bytes = Checkpoint::from_state(&state).to_bytes();
        let mut bumped = bytes.clone();
        bumped[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bumped), Err(Error::Checkpoint(m)) if m.contains("version 2")));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());

        let mut ck = Checkpoint::from_state(&state);
        ck.reservoir_seed ^= 1;
        assert!(ck.into_state().is_err());
        let mut ck = Checkpoint::from_state(&state);
        ck.tensors.retain(|t| t.name != "param/abcd.codebook");
        assert!(matches!(ck.into_state(), Err(Error::Checkpoint(m)) if m.contains("abcd.codebook")));
    }
}
