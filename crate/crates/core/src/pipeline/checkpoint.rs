//! Checkpoint binary format (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "OTMLCKPT"
//! version  u32      1
//! count    u64      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8), rank u32, dims rank × u64, payload numel × f64
//! step     u64
//! digest   u64      FNV-1a of the config text
//! cfg_len  u32, config text (UTF-8)
//! ```
//!
//! Writes go to a sibling temporary file that is renamed into place.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::PipelineError;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OTMLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub step: u64,
    /// Rendered configuration the tensors were produced with.
    pub config: String,
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub checkpoint: Checkpoint,
    /// Set when the caller's expected digest differs from the stored one.
    pub digest_mismatch: bool,
}

/// 64-bit FNV-1a.
pub fn config_digest(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&config_digest(&self.config).to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(|_| PipelineError::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(PipelineError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(PipelineError::Version(version));
        }
        let count = r.u64()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            if len > MAX_NAME {
                return Err(PipelineError::Corrupt(format!("tensor name length {len}")));
            }
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| PipelineError::Corrupt("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            if rank > MAX_RANK {
                return Err(PipelineError::Corrupt(format!("tensor `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?).map_err(|_| PipelineError::Corrupt("dimension overflow".into()))?;
                numel = numel.checked_mul(d).ok_or_else(|| PipelineError::Corrupt("dimension overflow".into()))?;
                shape.push(d);
            }
            let nbytes = numel.checked_mul(8).ok_or_else(|| PipelineError::Corrupt("payload overflow".into()))?;
            let payload = r.take(nbytes)?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::from_vec(shape, data).map_err(|e| PipelineError::Corrupt(format!("tensor `{name}`: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(PipelineError::Corrupt(format!("duplicate tensor `{name}`")));
            }
        }
        let step = r.u64()?;
        let digest = r.u64()?;
        let len = r.u32()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| PipelineError::Corrupt("config text is not UTF-8".into()))?;
        if r.pos != bytes.len() {
            return Err(PipelineError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if config_digest(&config) != digest {
            return Err(PipelineError::Corrupt("stored digest does not match stored config".into()));
        }
        Ok(Self { tensors, step, config })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(PipelineError::Truncated { expected: n, found: remaining });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), PipelineError> {
    let file_name = path.file_name().ok_or_else(|| PipelineError::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&ckpt.to_bytes())?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        PipelineError::io(path, e)
    })
}

/// Load and validate a checkpoint. When `expected_digest` is given and differs
/// from the stored one, a warning is logged and the load still succeeds.
pub fn load_checkpoint(path: &Path, expected_digest: Option<u64>) -> Result<LoadedCheckpoint, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    let checkpoint = Checkpoint::from_bytes(&bytes)?;
    let digest_mismatch = expected_digest.is_some_and(|d| d != config_digest(&checkpoint.config));
    if digest_mismatch {
        log::warn!("{}: config digest differs from the current configuration", path.display());
    }
    Ok(LoadedCheckpoint { checkpoint, digest_mismatch })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert("a".to_string(), Tensor::from_vec(vec![2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        tensors.insert("b.bias".to_string(), Tensor::scalar(std::f64::consts::PI));
        tensors.insert("empty".to_string(), Tensor::zeros(&[0, 3]));
        Checkpoint { tensors, step: 42, config: "[train]\nsteps = 3\n".into() }
    }

    #[test]
    fn bitwise_round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        for (k, t) in &c.tensors {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(&back.tensors[k]));
        }
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..8], b"OTMLCKPT");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 3);
    }

    #[test]
    fn every_truncation_is_a_typed_error() {
        let b = sample().to_bytes();
        for cut in 0..b.len() {
            let e = Checkpoint::from_bytes(&b[..cut]).unwrap_err();
            assert!(matches!(e, PipelineError::Truncated { .. } | PipelineError::BadMagic), "cut {cut}: {e}");
        }
    }

    #[test]
    fn bad_magic_version_and_trailing() {
        let mut b = sample().to_bytes();
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(PipelineError::BadMagic)));
        let mut b = sample().to_bytes();
        b[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(PipelineError::Version(9))));
        let mut b = sample().to_bytes();
        b.push(0);
        assert!(matches!(Checkpoint::from_bytes(&b), Err(PipelineError::Corrupt(_))));
    }

    #[test]
    fn digest_mismatch_warns_but_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&sample(), &p).unwrap();
        let ok = load_checkpoint(&p, Some(config_digest("[train]\nsteps = 3\n"))).unwrap();
        assert!(!ok.digest_mismatch);
        let other = load_checkpoint(&p, Some(config_digest("something else"))).unwrap();
        assert!(other.digest_mismatch);
        assert_eq!(other.checkpoint, sample());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(config_digest(""), 0xcbf29ce484222325);
        assert_eq!(config_digest("a"), 0xaf63dc4c8601ec8c);
    }
}
