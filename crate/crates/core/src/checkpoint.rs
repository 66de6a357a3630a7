//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SGRL1"
//! u32 len, variant name bytes
//! u8 hn, f64 hn_bias
//! u64 × 9 SetConfig sizes, f64 edge_bias
//! u64 trainer step
//! [u8; 32] rng seed, u64 rng stream, u128 rng word position
//! u32 tensor count
//! per tensor: u32 name len, name bytes, u32 rank, u64 × rank dims, f64 × len values
//! ```
//!
//! Optimizer moments and the replay buffer are not stored; a resumed trainer
//! starts with fresh Adam state and an empty buffer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::actor_critic::{Actor, Critic};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::set::SetConfig;
use crate::td3::{Td3Config, Td3Trainer};
use crate::tensor::Tensor;
use crate::variants::{make_variant, ModelSpec, Variant, VariantKind};

pub const MAGIC: &[u8; 5] = b"SGRL1";

/// Prefixes of the four networks a trainer checkpoint carries.
pub const GROUPS: [&str; 4] = ["actor/", "actor_target/", "critic/", "critic_target/"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub variant: Variant,
    pub cfg: SetConfig,
    pub step: u64,
    pub rng: RngState,
    pub tensors: Vec<(String, Tensor)>,
}

fn push_store(out: &mut Vec<(String, Tensor)>, prefix: &str, store: &ParamStore) {
    for (name, t) in store.iter() {
        out.push((format!("{prefix}{name}"), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid shape")));
    }
}

impl Checkpoint {
    pub fn from_trainer(t: &Td3Trainer) -> Self {
        let mut tensors = Vec::new();
        push_store(&mut tensors, GROUPS[0], &t.actor.params);
        push_store(&mut tensors, GROUPS[1], &t.actor_target.params);
        push_store(&mut tensors, GROUPS[2], &t.critic.params);
        push_store(&mut tensors, GROUPS[3], &t.critic_target.params);
        Self { variant: t.spec.variant, cfg: t.spec.cfg.clone(), step: t.step, rng: RngState::capture(&t.rng), tensors }
    }

    /// Actor-only checkpoint, e.g. for evaluation artifacts.
    pub fn from_actor(actor: &Actor, cfg: &SetConfig) -> Self {
        let mut tensors = Vec::new();
        push_store(&mut tensors, GROUPS[0], &actor.params);
        Self {
            variant: actor.variant(),
            cfg: cfg.clone(),
            step: 0,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(0)),
            tensors,
        }
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        make_variant(self.variant, &self.cfg)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `store` from the tensors under `prefix`.
    /// Names and shapes must match exactly.
    fn fill(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{prefix}{}", store.name(id));
            let t = self.tensor(&key).ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Format(format!(
                    "tensor {key} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set_data(id, t.data().to_vec())?;
        }
        let expected = store.len();
        let found = self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)).count();
        if found != expected {
            return Err(Error::Format(format!("{found} tensors under {prefix}, model has {expected}")));
        }
        Ok(())
    }

    pub fn restore_actor(&self) -> Result<Actor> {
        let spec = self.spec()?;
        let mut actor = Actor::new(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.fill(GROUPS[0], &mut actor.params)?;
        Ok(actor)
    }

    pub fn restore_critic(&self, target: bool) -> Result<Critic> {
        let spec = self.spec()?;
        let mut critic = Critic::new(&spec, 2, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.fill(if target { GROUPS[3] } else { GROUPS[2] }, &mut critic.params)?;
        Ok(critic)
    }

    /// Rebuilds a trainer with the stored networks, step counter and RNG.
    pub fn restore_trainer(&self, env_cfg: EnvConfig, td3: Td3Config) -> Result<Td3Trainer> {
        let mut t = Td3Trainer::new(env_cfg, self.spec()?, td3)?;
        self.fill(GROUPS[0], &mut t.actor.params)?;
        self.fill(GROUPS[1], &mut t.actor_target.params)?;
        self.fill(GROUPS[2], &mut t.critic.params)?;
        self.fill(GROUPS[3], &mut t.critic_target.params)?;
        t.step = self.step;
        t.rng = self.rng.restore();
        Ok(t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        write_str(w, self.variant.kind.name())?;
        w.write_all(&[self.variant.hn as u8])?;
        w.write_all(&self.variant.hn_bias.to_le_bytes())?;
        let c = &self.cfg;
        for v in [c.layers, c.heads, c.width, c.qk_width, c.attn_hidden, c.matrix_side, c.matrix_hidden, c.c_m, c.c_u] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&c.edge_bias.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.stream.to_le_bytes())?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Parses a checkpoint. A wrong magic is a format error; running out of
    /// bytes surfaces as an io error.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
        }
        let name = read_str(r)?;
        let kind: VariantKind = name.parse().map_err(|_| Error::Format(format!("unknown variant {name:?}")))?;
        let hn = match read_array::<1>(r)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("bad hn flag {b}"))),
        };
        let hn_bias = f64::from_le_bytes(read_array(r)?);
        let mut sizes = [0usize; 9];
        for s in &mut sizes {
            *s = read_u64(r)? as usize;
        }
        let edge_bias = f64::from_le_bytes(read_array(r)?);
        let [layers, heads, width, qk_width, attn_hidden, matrix_side, matrix_hidden, c_m, c_u] = sizes;
        let cfg = SetConfig { layers, heads, width, qk_width, attn_hidden, matrix_side, matrix_hidden, c_m, c_u, edge_bias };
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        let step = read_u64(r)?;
        let rng = RngState {
            seed: read_array(r)?,
            stream: read_u64(r)?,
            word_pos: u128::from_le_bytes(read_array(r)?),
        };
        let count = read_u32(r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = read_str(r)?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= 1 << 28)
                .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let mut bytes = vec![0u8; len * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { variant: Variant { kind, hn, hn_bias }, cfg, step, rng, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 4096 {
        return Err(Error::Format(format!("name of {n} bytes")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format(e.to_string()))
}
