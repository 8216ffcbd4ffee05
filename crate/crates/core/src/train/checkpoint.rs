//! Checkpoint directories: a JSON manifest plus little-endian f32 blobs.
//!
//! ```text
//! manifest.json   config, config hash, step, rng state, parameter index
//! params.bin      every parameter, in index order
//! adam_m.bin      first moments of trainable parameters
//! adam_v.bin      second moments of trainable parameters
//! vocab.txt       one word per line
//! ```

use std::path::Path;

use kvlp_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::model::{Model, ModelConfig};
use crate::text::Vocab;
use crate::train::optim::AdamW;
use crate::train::pretrain::TrainConfig;

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS_BIN: &str = "params.bin";
pub const ADAM_M_BIN: &str = "adam_m.bin";
pub const ADAM_V_BIN: &str = "adam_v.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub path: String,
    pub shape: Vec<usize>,
    /// Offset in f32 elements into `params.bin`.
    pub offset: usize,
    pub trainable: bool,
}

/// Every random draw is keyed by `(seed, step)`, so this is the whole state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub config_hash: String,
    pub train: TrainConfig,
    pub step: usize,
    pub rng: RngState,
    pub optimizer_updates: u64,
    pub entity_ids: Vec<String>,
    pub params: Vec<ParamEntry>,
}

pub struct Checkpoint<T: Scalar> {
    pub manifest: Manifest,
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub vocab: Vocab,
}

fn to_le<T: Scalar>(values: impl Iterator<Item = T>) -> Vec<u8> {
    values.flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect()
}

fn from_le<T: Scalar>(bytes: &[u8], file: &str) -> Result<Vec<T>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Format {
            file: file.into(),
            line: 0,
            msg: "length is not a multiple of 4".into(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect())
}

/// Writes a checkpoint. Values are stored as f32; an f32 model round-trips
/// exactly.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    model: &Model<T>,
    opt: &AdamW<T>,
    train: &TrainConfig,
    step: usize,
    vocab: &Vocab,
    entity_ids: &[String],
) -> Result<Manifest> {
    std::fs::create_dir_all(dir).at(dir)?;
    let mut params = Vec::with_capacity(model.store.len());
    let mut offset = 0;
    for (_, p) in model.store.iter() {
        params.push(ParamEntry {
            path: p.path.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            trainable: p.trainable,
        });
        offset += p.value.len();
    }
    let manifest = Manifest {
        config: model.cfg.clone(),
        config_hash: model.cfg.hash(),
        train: train.clone(),
        step,
        rng: RngState {
            seed: train.seed,
            next_step: step,
        },
        optimizer_updates: opt.t,
        entity_ids: entity_ids.to_vec(),
        params,
    };
    let blob = to_le(model.store.iter().flat_map(|(_, p)| p.value.data().to_vec()));
    let m = to_le(opt.m.iter().flat_map(|t| t.data().to_vec()));
    let v = to_le(opt.v.iter().flat_map(|t| t.data().to_vec()));
    for (name, bytes) in [(PARAMS_BIN, blob), (ADAM_M_BIN, m), (ADAM_V_BIN, v)] {
        std::fs::write(dir.join(name), bytes).at(dir.join(name))?;
    }
    vocab.save(&dir.join(VOCAB_FILE))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST), json).at(dir.join(MANIFEST))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST);
    Ok(serde_json::from_str(&std::fs::read_to_string(&p).at(&p)?)?)
}

/// Loads a checkpoint. With `expected`, the stored configuration hash must
/// match it.
pub fn load_checkpoint<T: Scalar>(dir: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    let manifest = read_manifest(dir)?;
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::Compatibility("stored config does not match its hash".into()));
    }
    if let Some(cfg) = expected {
        if cfg.hash() != manifest.config_hash {
            return Err(Error::Compatibility(format!(
                "checkpoint config hash {} differs from expected {}",
                manifest.config_hash,
                cfg.hash()
            )));
        }
    }
    let cfg = manifest.config.clone();
    let table = Tensor::zeros([cfg.n_entities, cfg.entity_dim]);
    let pre = cfg.align_pre_gat.then(|| table.clone());
    let mut model = Model::<T>::new(cfg, table, pre, 0)?;
    let bytes = std::fs::read(dir.join(PARAMS_BIN)).at(dir.join(PARAMS_BIN))?;
    let values: Vec<T> = from_le(&bytes, PARAMS_BIN)?;
    if manifest.params.len() != model.store.len() {
        return Err(Error::Compatibility(format!(
            "{} stored parameters, model has {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    for entry in &manifest.params {
        let id = model
            .store
            .id(&entry.path)
            .ok_or_else(|| Error::Compatibility(format!("unknown parameter {}", entry.path)))?;
        let n: usize = entry.shape.iter().product();
        let slice = values
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| Error::Compatibility(format!("{} runs past the end of {}", entry.path, PARAMS_BIN)))?;
        model.store.set(id, Tensor::from_vec(entry.shape.clone(), slice.to_vec())?)?;
    }
    let mut opt = AdamW::new(manifest.train.adamw, &model.store);
    opt.t = manifest.optimizer_updates;
    for (name, slots) in [(ADAM_M_BIN, &mut opt.m), (ADAM_V_BIN, &mut opt.v)] {
        let bytes = std::fs::read(dir.join(name)).at(dir.join(name))?;
        let vals: Vec<T> = from_le(&bytes, name)?;
        let need: usize = slots.iter().map(|t| t.len()).sum();
        if vals.len() != need {
            return Err(Error::Compatibility(format!("{name} holds {} values, expected {need}", vals.len())));
        }
        let mut at = 0;
        for t in slots.iter_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&vals[at..at + n]);
            at += n;
        }
    }
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    if vocab.len() != manifest.config.encoder.vocab_size {
        return Err(Error::Compatibility(format!(
            "vocabulary of {} words for a model with {}",
            vocab.len(),
            manifest.config.encoder.vocab_size
        )));
    }
    Ok(Checkpoint {
        manifest,
        model,
        opt,
        vocab,
    })
}
