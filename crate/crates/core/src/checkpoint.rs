//! Binary checkpoints of the full training state.
//!
//! Layout: the 8-byte magic `ACORMCKP`, a little-endian `u32` format
//! version, a `u64` header length, the JSON header, the tensor data as
//! little-endian `f64`, and finally the SHA-256 of everything before it.
//! The header lists every tensor with its section, name, shape and offset.

use crate::config::TrainConfig;
use crate::episode::ReplayBuffer;
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::params::ParamStore;
use crate::tensor::Mat;
use crate::trainer::{EvalReport, Trainer};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"ACORMCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    section: String,
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    /// `u128` as a decimal string.
    word_pos: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
    td_optimizer_step: u64,
    contrastive_optimizer_step: u64,
    td_updates: u64,
    contrastive_updates: u64,
    env_steps: u64,
    episodes: u64,
    evaluations: Vec<(u64, EvalReport)>,
    rng: RngState,
    replay: Option<ReplayBuffer>,
}

const PARAMS: &str = "params";
const TARGET: &str = "target";

fn store_tensors<'a>(section: &str, store: &'a ParamStore, out: &mut Vec<(String, String, &'a Mat)>) {
    for (_, name, value) in store.iter() {
        out.push((section.to_string(), name.to_string(), value));
    }
}

fn adam_tensors<'a>(section: &str, opt: &'a Adam, store: &ParamStore, out: &mut Vec<(String, String, &'a Mat)>) {
    let (m, v) = opt.moments();
    for (kind, moments) in [("m", m), ("v", v)] {
        for (id, value) in opt.managed().iter().zip(moments) {
            out.push((format!("{section}.{kind}"), store.name(*id).to_string(), value));
        }
    }
}

/// Serializes the trainer. The replay buffer is included only on request.
pub fn to_bytes(trainer: &Trainer, include_replay: bool) -> Result<Vec<u8>> {
    let l = &trainer.learner;
    let mut tensors = Vec::new();
    store_tensors(PARAMS, &l.params, &mut tensors);
    store_tensors(TARGET, &l.target, &mut tensors);
    adam_tensors("td_optimizer", &l.td_optimizer, &l.params, &mut tensors);
    adam_tensors(
        "contrastive_optimizer",
        &l.contrastive_optimizer,
        &l.params,
        &mut tensors,
    );

    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (section, name, value) in &tensors {
        entries.push(TensorEntry {
            section: section.clone(),
            name: name.clone(),
            rows: value.rows(),
            cols: value.cols(),
            offset,
        });
        offset += value.len();
    }
    let header = Header {
        config: l.config.clone(),
        tensors: entries,
        td_optimizer_step: l.td_optimizer.step,
        contrastive_optimizer_step: l.contrastive_optimizer.step,
        td_updates: l.td_updates,
        contrastive_updates: l.contrastive_updates,
        env_steps: trainer.env_steps,
        episodes: trainer.episodes,
        evaluations: trainer.evaluations.clone(),
        rng: RngState {
            seed: trainer.rng.get_seed().to_vec(),
            stream: trainer.rng.get_stream(),
            word_pos: trainer.rng.get_word_pos().to_string(),
        },
        replay: include_replay.then(|| trainer.buffer.clone()),
    };
    let header = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(20 + header.len() + offset * 8 + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, value) in &tensors {
        for x in value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn restore_store(section: &str, store: &mut ParamStore, tensors: &HashMap<(String, String), Mat>) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let value = tensors
            .get(&(section.to_string(), name.clone()))
            .ok_or_else(|| corrupt(format!("missing tensor {section}/{name}")))?;
        store.set(id, value.clone())?;
    }
    Ok(())
}

fn restore_adam(
    section: &str,
    opt: &mut Adam,
    step: u64,
    store: &ParamStore,
    tensors: &HashMap<(String, String), Mat>,
) -> Result<()> {
    let fetch = |kind: &str| -> Result<Vec<Mat>> {
        opt.managed()
            .iter()
            .map(|id| {
                let key = (format!("{section}.{kind}"), store.name(*id).to_string());
                tensors
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| corrupt(format!("missing tensor {}/{}", key.0, key.1)))
            })
            .collect()
    };
    let m = fetch("m")?;
    let v = fetch("v")?;
    opt.restore(step, m, v)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let data_start = 20usize
        .checked_add(header_len)
        .filter(|&end| end <= body.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&body[20..data_start])?;
    let data = &body[data_start..];
    if data.len() % 8 != 0 {
        return Err(corrupt("tensor data is not a whole number of f64 values"));
    }

    let mut tensors = HashMap::new();
    for e in &header.tensors {
        let len = e.rows * e.cols;
        let (start, end) = (e.offset * 8, (e.offset + len) * 8);
        if end > data.len() {
            return Err(corrupt(format!("tensor {}/{} runs past the data", e.section, e.name)));
        }
        let values = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(
            (e.section.clone(), e.name.clone()),
            Mat::from_vec(e.rows, e.cols, values),
        );
    }

    let mut trainer = Trainer::new(header.config)?;
    let l = &mut trainer.learner;
    restore_store(PARAMS, &mut l.params, &tensors)?;
    restore_store(TARGET, &mut l.target, &tensors)?;
    restore_adam(
        "td_optimizer",
        &mut l.td_optimizer,
        header.td_optimizer_step,
        &l.params,
        &tensors,
    )?;
    restore_adam(
        "contrastive_optimizer",
        &mut l.contrastive_optimizer,
        header.contrastive_optimizer_step,
        &l.params,
        &tensors,
    )?;
    l.td_updates = header.td_updates;
    l.contrastive_updates = header.contrastive_updates;

    let seed: [u8; 32] = header
        .rng
        .seed
        .as_slice()
        .try_into()
        .map_err(|_| corrupt("rng seed must be 32 bytes"))?;
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| corrupt("bad rng word position"))?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);
    trainer.rng = rng;
    trainer.env_steps = header.env_steps;
    trainer.episodes = header.episodes;
    trainer.evaluations = header.evaluations;
    if let Some(buffer) = header.replay {
        trainer.buffer = buffer;
    }
    Ok(trainer)
}

/// Writes atomically via a temporary file in the same directory.
pub fn save(path: &Path, trainer: &Trainer, include_replay: bool) -> Result<()> {
    let bytes = to_bytes(trainer, include_replay)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Preset;

    #[test]
    fn round_trip_restores_everything() {
        let mut config = TrainConfig::with_preset(Preset::Easy);
        config.seed = 3;
        let mut trainer = Trainer::new(config).unwrap();
        trainer
            .learner
            .params
            .fill(&[trainer.learner.nets.mixer.hyper_b1.bias], 0.25);
        trainer.env_steps = 17;
        let bytes = to_bytes(&trainer, true).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.learner.params, trainer.learner.params);
        assert_eq!(back.learner.target, trainer.learner.target);
        assert_eq!(back.learner.td_optimizer, trainer.learner.td_optimizer);
        assert_eq!(back.rng, trainer.rng);
        assert_eq!(back.env_steps, 17);
        assert_eq!(to_bytes(&back, true).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let trainer = Trainer::new(TrainConfig::with_preset(Preset::Easy)).unwrap();
        let mut bytes = to_bytes(&trainer, false).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(from_bytes(b"not a checkpoint").is_err());
        let good = to_bytes(&trainer, false).unwrap();
        assert!(from_bytes(&good[..good.len() - 10]).is_err());
    }
}
