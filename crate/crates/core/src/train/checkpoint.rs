//! Binary checkpoints: an 8-byte magic, a little-endian `u64` manifest
//! length, a JSON manifest, then every tensor as raw little-endian `f32`s.
//!
//! Tensor names mirror the module hierarchy under one of the prefixes
//! `G.`, `D.`, `G_opt.m.`, `G_opt.v.`, `D_opt.m.` and `D_opt.v.`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::gan::{AdamState, Generator};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MAPGANCK";
pub const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha stream, enough to rebuild it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Integrity(format!("rng state has a malformed {what}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| bad("seed"))?;
        let word_pos: u128 = self.word_pos.parse().map_err(|_| bad("word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Completed steps.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Batches already consumed in the current epoch.
    pub cursor: usize,
    pub g_opt_step: u64,
    pub d_opt_step: u64,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
}

/// A loaded, integrity-checked checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    payload: Vec<f32>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let entry = &self.manifest.tensors[*self.index.get(name)?];
        let start = entry.offset as usize / 4;
        Tensor::new(&entry.shape, self.payload[start..start + entry.numel()].to_vec()).ok()
    }

    fn data(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let entry = self
            .index
            .get(name)
            .map(|&i| &self.manifest.tensors[i])
            .ok_or_else(|| Error::Integrity(format!("checkpoint has no tensor `{name}`")))?;
        if entry.shape != shape {
            return Err(Error::Integrity(format!(
                "tensor `{name}` has shape {:?}, model expects {shape:?}",
                entry.shape
            )));
        }
        let start = entry.offset as usize / 4;
        Ok(&self.payload[start..start + entry.numel()])
    }

    /// Copies every tensor named `<prefix>.<name>` into `module`. Nothing
    /// is written unless all of them are present with matching shapes.
    pub fn load_module<M: Module + ?Sized>(&self, prefix: &str, module: &mut M) -> Result<()> {
        let mut tensors = module.named_tensors_mut();
        let sources = tensors
            .iter()
            .map(|(name, t)| self.data(&format!("{prefix}.{name}"), t.shape()))
            .collect::<Result<Vec<_>>>()?;
        for ((_, t), src) in tensors.iter_mut().zip(sources) {
            t.data_mut().copy_from_slice(src);
        }
        Ok(())
    }

    pub fn load_adam(&self, prefix: &str, state: &mut AdamState, step: u64) -> Result<()> {
        let names = state.names().to_vec();
        let mut moments = Vec::with_capacity(2 * names.len());
        for (kind, tensors) in [("m", &state.m), ("v", &state.v)] {
            for (name, t) in names.iter().zip(tensors.iter()) {
                moments.push(self.data(&format!("{prefix}.{kind}.{name}"), t.shape())?);
            }
        }
        let (m, v) = moments.split_at(names.len());
        for (t, src) in state.m.iter_mut().zip(m).chain(state.v.iter_mut().zip(v)) {
            t.data_mut().copy_from_slice(src);
        }
        state.step = step;
        Ok(())
    }

    /// The generator alone, as needed for inference.
    pub fn generator(&self) -> Result<Generator> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Generator::new(self.manifest.config.generator.clone(), &mut rng)?;
        self.load_module("G", &mut g)?;
        Ok(g)
    }
}

/// Everything a checkpoint records, borrowed from a live trainer.
pub struct CheckpointSource<'a> {
    pub config: &'a TrainConfig,
    pub generator: &'a dyn Module,
    pub discriminator: &'a dyn Module,
    pub g_opt: &'a AdamState,
    pub d_opt: &'a AdamState,
    pub step: u64,
    pub epoch: u64,
    pub cursor: usize,
    pub rng: &'a ChaCha8Rng,
}

fn collect_tensors<'a>(src: &CheckpointSource<'a>) -> Vec<(String, &'a Tensor)> {
    let mut out = Vec::new();
    for (prefix, module) in [("G", src.generator), ("D", src.discriminator)] {
        out.extend(module.named_tensors().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
    }
    for (prefix, opt) in [("G_opt", src.g_opt), ("D_opt", src.d_opt)] {
        for (kind, tensors) in [("m", &opt.m), ("v", &opt.v)] {
            out.extend(opt.names().iter().zip(tensors.iter()).map(|(n, t)| (format!("{prefix}.{kind}.{n}"), t)));
        }
    }
    out
}

/// Writes a checkpoint atomically: a temporary sibling file is written in
/// full, synced, and renamed over `path`.
pub fn save_checkpoint(path: impl AsRef<Path>, src: &CheckpointSource<'_>) -> Result<()> {
    let path = path.as_ref();
    let tensors = collect_tensors(src);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.numel() as u64;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: src.config.clone(),
        step: src.step,
        epoch: src.epoch,
        cursor: src.cursor,
        g_opt_step: src.g_opt.step,
        d_opt_step: src.d_opt.step,
        rng: RngState::capture(src.rng),
        tensors: entries,
        payload_bytes: offset,
    };
    let header = serde_json::to_vec(&manifest).map_err(|e| Error::invalid(format!("manifest encoding: {e}")))?;

    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let file = fs::File::create(&tmp)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, t) in &tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn parse_header(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Integrity("manifest extends past end of file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::Integrity(format!("manifest is not valid: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    Ok((manifest, end))
}

/// Reads only the manifest.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_header(&bytes)?.0)
}

/// Reads and verifies a checkpoint: the payload must be exactly as long as
/// the manifest says and the tensors must tile it without gaps or overlap.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, start) = parse_header(&bytes)?;
    let payload = &bytes[start..];
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(Error::Integrity(format!(
            "payload is {} bytes, manifest declares {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    let mut index = HashMap::with_capacity(manifest.tensors.len());
    let mut expected = 0u64;
    for (i, entry) in manifest.tensors.iter().enumerate() {
        if entry.offset != expected {
            return Err(Error::Integrity(format!(
                "tensor `{}` starts at byte {}, expected {expected}",
                entry.name, entry.offset
            )));
        }
        expected += 4 * entry.numel() as u64;
        if index.insert(entry.name.clone(), i).is_some() {
            return Err(Error::Integrity(format!("tensor `{}` appears twice", entry.name)));
        }
    }
    if expected != manifest.payload_bytes {
        return Err(Error::Integrity(format!(
            "tensors cover {expected} bytes of a {}-byte payload",
            manifest.payload_bytes
        )));
    }
    let payload = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Checkpoint {
        manifest,
        payload,
        index,
    })
}

#[cfg(test)]
mod tests {
    use rand::RngCore;

    use super::*;

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        rng.set_stream(3);
        for _ in 0..37 {
            rng.next_u32();
        }
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        assert_eq!(restored, rng);
        assert_eq!(restored.next_u64(), rng.next_u64());

        let broken = RngState { seed: "zz".into(), ..state };
        assert!(matches!(broken.restore(), Err(Error::Integrity(_))));
    }

    #[test]
    fn garbage_is_not_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
        assert!(matches!(load_checkpoint(dir.path().join("missing.bin")), Err(Error::Io { .. })));
    }
}
