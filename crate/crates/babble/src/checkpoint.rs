//! Binary checkpoint format.
//!
//! Layout, all little-endian:
//!   magic "W2M1"
//!   32-byte config hash
//!   update counter (u64), temperature (f64), entry count (u32)
//!   per entry: name length (u16), UTF-8 name, rank (u8),
//!              one u64 per dimension, then the f64 payload.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"W2M1";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub update: u64,
    pub tau: f64,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Rebuild a model from a checkpoint's parameter entries. Optimizer and
/// bookkeeping entries are ignored; a classifier head is grown first when
/// the checkpoint carries one, so both pre-trained and fine-tuned
/// checkpoints restore cleanly.
pub fn load_model(cfg: &crate::model::ModelConfig, ckpt: &Checkpoint) -> Result<crate::model::SpeechModel> {
    let mut model = crate::model::SpeechModel::init(cfg.clone(), 0)?;
    if let Some(head) = ckpt.get("ctc/w") {
        if head.shape.len() != 2 || head.shape[1] < 2 {
            return Err(Error::Checkpoint(format!(
                "classifier entry has shape {:?}",
                head.shape
            )));
        }
        model.add_classifier(head.shape[1] - 1, 0);
    }
    let mut err: Option<Error> = None;
    model.visit_mut(|name, t| {
        if err.is_some() {
            return;
        }
        match ckpt.get(name) {
            Some(e) if e.shape == t.shape => t.data.copy_from_slice(&e.data),
            Some(e) => {
                err = Some(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {:?} does not match model shape {:?}",
                    e.shape, t.shape
                )));
            }
            None => err = Some(Error::Checkpoint(format!("checkpoint is missing {name}"))),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(model),
    }
}

/// SHA-256 over the canonical JSON of a config.
pub fn config_hash<T: serde::Serialize>(cfg: &T) -> Result<[u8; 32]> {
    let json = serde_json::to_string(cfg)?;
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    Ok(h.finalize().into())
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let f = fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    w.write_all(MAGIC)?;
    w.write_all(&ckpt.config_hash)?;
    w.write_all(&ckpt.update.to_le_bytes())?;
    w.write_all(&ckpt.tau.to_le_bytes())?;
    let count = u32::try_from(ckpt.entries.len())
        .map_err(|_| Error::Checkpoint("too many entries".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for e in &ckpt.entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {}", e.name)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        let rank = u8::try_from(e.shape.len())
            .map_err(|_| Error::Checkpoint(format!("{}: rank too large", e.name)))?;
        w.write_all(&[rank])?;
        let mut numel = 1usize;
        for &d in &e.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
            numel *= d;
        }
        if numel != e.data.len() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} does not match {} values",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
        for &x in &e.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = fs::File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(f);
    let ctx = |what: &str| format!("{}: truncated reading {what}", path.display());

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint(ctx("magic")))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            magic,
            MAGIC
        )));
    }
    let mut config_hash = [0u8; 32];
    r.read_exact(&mut config_hash).map_err(|_| Error::Checkpoint(ctx("config hash")))?;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(|_| Error::Checkpoint(ctx("update counter")))?;
    let update = u64::from_le_bytes(u64buf);
    r.read_exact(&mut u64buf).map_err(|_| Error::Checkpoint(ctx("temperature")))?;
    let tau = f64::from_le_bytes(u64buf);
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|_| Error::Checkpoint(ctx("entry count")))?;
    let count = u32::from_le_bytes(u32buf);

    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf).map_err(|_| Error::Checkpoint(ctx("name length")))?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|_| Error::Checkpoint(ctx("name")))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint(format!("{}: name is not UTF-8", path.display())))?;
        let mut rank_buf = [0u8; 1];
        r.read_exact(&mut rank_buf).map_err(|_| Error::Checkpoint(ctx("rank")))?;
        let mut shape = Vec::with_capacity(rank_buf[0] as usize);
        let mut numel = 1usize;
        for _ in 0..rank_buf[0] {
            r.read_exact(&mut u64buf).map_err(|_| Error::Checkpoint(ctx("dimension")))?;
            let d = u64::from_le_bytes(u64buf) as usize;
            shape.push(d);
            numel = numel.saturating_mul(d);
        }
        if numel > (1 << 32) {
            return Err(Error::Checkpoint(format!(
                "{}: entry {name} implausibly large ({numel} values)",
                path.display()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut u64buf)
                .map_err(|_| Error::Checkpoint(format!("{}: truncated payload in {name}", path.display())))?;
            data.push(f64::from_le_bytes(u64buf));
        }
        entries.push(Entry { name, shape, data });
    }
    Ok(Checkpoint { config_hash, update, tau, entries })
}
