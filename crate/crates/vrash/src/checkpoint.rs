//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "VRSHCKPT" | u32 version | u64 seed | u64 step
//! str model tag | str cell tag | str encoder cell tag | u32 hidden
//! u64 vocab fingerprint | str vocab text
//! u32 entry count | entries: str name, u32 rows, u32 cols, rows*cols f64
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use std::path::Path;

use thiserror::Error;
use vrash_core::autodiff::CellKind;
use vrash_core::models::{HeadSizes, ModelConfig};
use vrash_core::{Model, ModelKind, RngStream, Vocab};

pub const MAGIC: &[u8; 8] = b"VRSHCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("vocabulary fingerprint mismatch: checkpoint has {found:016x}, expected {expected:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub vocab: Vocab,
    pub model: Model,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.model.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut out, cfg.kind.tag());
        put_str(&mut out, &cfg.cell.tag());
        put_str(&mut out, &cfg.encoder_cell.tag());
        out.extend_from_slice(&(cfg.hidden as u32).to_le_bytes());
        out.extend_from_slice(&self.vocab.fingerprint().to_le_bytes());
        put_str(&mut out, &self.vocab.to_text());
        let store = &self.model.store;
        out.extend_from_slice(&(store.len() as u32).to_le_bytes());
        for id in store.ids() {
            let (r, c) = store.shape(id);
            put_str(&mut out, store.name(id));
            out.extend_from_slice(&(r as u32).to_le_bytes());
            out.extend_from_slice(&(c as u32).to_le_bytes());
            for v in store.value(id) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decode a checkpoint. With `expected` set, the stored vocabulary must
    /// have that fingerprint.
    pub fn from_bytes(bytes: &[u8], expected: Option<u64>) -> Result<Checkpoint, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let seed = r.u64()?;
        let step = r.u64()?;
        let invalid = |m: &str| CheckpointError::Invalid(m.to_string());
        let kind = ModelKind::parse(&r.string()?).ok_or_else(|| invalid("unknown model kind"))?;
        let cell = CellKind::parse(&r.string()?).ok_or_else(|| invalid("unknown cell"))?;
        let encoder_cell = CellKind::parse(&r.string()?).ok_or_else(|| invalid("unknown encoder cell"))?;
        let hidden = r.u32()? as usize;
        let found = r.u64()?;
        let vocab = Vocab::from_text(&r.string()?).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        if vocab.fingerprint() != found {
            return Err(invalid("vocabulary does not match its stored fingerprint"));
        }
        if let Some(expected) = expected {
            if expected != found {
                return Err(CheckpointError::FingerprintMismatch { expected, found });
            }
        }
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let len = rows.checked_mul(cols).ok_or_else(|| invalid("shape overflow"))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| invalid("shape overflow"))?)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.push((name, (rows, cols), values));
        }
        if r.pos != bytes.len() {
            return Err(invalid("trailing bytes"));
        }
        let config = ModelConfig {
            kind,
            cell,
            encoder_cell,
            hidden,
        };
        if hidden == 0 {
            return Err(invalid("hidden size is zero"));
        }
        let mut model = Model::new(config, HeadSizes::from_vocab(&vocab), &mut RngStream::new(seed)).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        model.load_parameters(&params).map_err(CheckpointError::Invalid)?;
        Ok(Checkpoint { seed, step, vocab, model })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<u64>) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::from_bytes(&std::fs::read(path)?, expected)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Invalid("non-UTF-8 string".into()))
    }
}

/// `{run_dir}/step{N}.ckpt`
pub fn checkpoint_path(run_dir: &Path, step: u64) -> std::path::PathBuf {
    run_dir.join(format!("step{step}.ckpt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use vrash_core::pipeline::DelayRatio;

    fn vocab() -> Vocab {
        Vocab {
            delay_ratios: vec![DelayRatio::new(1, 2), DelayRatio::from_integer(1)],
            octave_min: 4,
            octave_max: 6,
            meta_labels: vec!["a".into(), "b".into()],
        }
    }

    fn sample(kind: ModelKind) -> Checkpoint {
        let mut cfg = ModelConfig::new(kind);
        cfg.hidden = 6;
        let v = vocab();
        let model = Model::new(cfg, HeadSizes::from_vocab(&v), &mut RngStream::new(11)).unwrap();
        Checkpoint {
            seed: 11,
            step: 42,
            vocab: v,
            model,
        }
    }

    #[test]
    fn exact_read_back() {
        for kind in [ModelKind::Lm, ModelKind::Vae, ModelKind::Vrash] {
            let c = sample(kind);
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes, Some(c.vocab.fingerprint())).unwrap();
            assert_eq!(back.step, 42);
            assert_eq!(back.vocab, c.vocab);
            assert_eq!(back.model.config, c.model.config);
            for id in c.model.store.ids() {
                let a = c.model.store.value(id);
                let b = back.model.store.value(back.model.store.id(c.model.store.name(id)).unwrap());
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn refuses_mismatch_and_corruption() {
        let c = sample(ModelKind::Vrash);
        let bytes = c.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Some(c.vocab.fingerprint() ^ 1)),
            Err(CheckpointError::FingerprintMismatch { .. })
        ));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], None), Err(CheckpointError::Truncated)));
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT", None), Err(CheckpointError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2, None), Err(CheckpointError::UnsupportedVersion(2))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra, None), Err(CheckpointError::Invalid(_))));
    }
}
