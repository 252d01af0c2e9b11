//! Versioned binary checkpoint container.
//!
//! ```text
//! magic "SSYNCKPT" | u32 version | u64 len | metadata JSON
//! u64 tensor count | per tensor: u32 len, name, u32 ndim, u64 dims.., f64 values..
//! sha256 of everything above
//! ```
//!
//! Integers and floats are little-endian. Tensors are sorted by name.
//! Optimizer moments, when present, are stored as `optim.m.{name}` and
//! `optim.v.{name}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::stylebank::{NetConfig, StyleBankParams};
use crate::trainer::AdamState;

const MAGIC: &[u8; 8] = b"SSYNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub version: u32,
    pub n_styles: usize,
    pub base_width: usize,
    pub iteration: u64,
    pub config_hash: String,
    /// Per-tensor optimizer step counts; empty when no optimizer state is
    /// stored.
    #[serde(default)]
    pub adam_steps: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: StyleBankParams,
    pub optimizer: Option<AdamState>,
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration}.bin")
}

/// The checkpoint with the highest iteration in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(it) = name
            .strip_prefix("ckpt_")
            .and_then(|s| s.strip_suffix(".bin"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| it > *b) {
            best = Some((it, path));
        }
    }
    Ok(best)
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{file_name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| "length overflow".to_string())
    }
}

type Tensors = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Tensors = BTreeMap::new();
        for (name, p) in self.params.named_params() {
            tensors.insert(name, (p.dims, p.values.to_vec()));
        }
        if let Some(opt) = &self.optimizer {
            let dims: BTreeMap<String, Vec<usize>> =
                tensors.iter().map(|(n, (d, _))| (n.clone(), d.clone())).collect();
            for (kind, moments) in [("m", &opt.m), ("v", &opt.v)] {
                for (name, values) in moments {
                    let d = dims.get(name).cloned().unwrap_or_else(|| vec![values.len()]);
                    tensors.insert(format!("optim.{kind}.{name}"), (d, values.clone()));
                }
            }
        }
        let mut meta = self.meta.clone();
        meta.version = FORMAT_VERSION;
        meta.n_styles = self.params.n_styles();
        meta.base_width = self.params.config().base_width;
        meta.adam_steps = self.optimizer.as_ref().map(|o| o.steps.clone()).unwrap_or_default();
        let meta_json = serde_json::to_vec(&meta).expect("metadata serializes");

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta_json);
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, (dims, values)) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err("not a checkpoint file (bad magic)".into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err("checksum mismatch".into());
        }
        let mut r = Reader { bytes: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let meta_len = r.len()?;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| format!("metadata: {e}"))?;
        let count = r.len()?;
        let mut tensors: Tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| e.to_string())?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.len()).collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or("tensor too large")?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name, (dims, values));
        }
        if r.pos != body.len() {
            return Err("trailing bytes after tensors".into());
        }

        let net = NetConfig { base_width: meta.base_width };
        let params = StyleBankParams::from_named(meta.n_styles, net, |name, dims| {
            let (d, v) = tensors.get(name).ok_or_else(|| format!("missing tensor {name}"))?;
            if d != dims {
                return Err(format!("{name}: dims {d:?}, expected {dims:?}"));
            }
            Ok(v.clone())
        })?;

        let mut optimizer = None;
        if !meta.adam_steps.is_empty() {
            let mut opt = AdamState::default();
            for (name, _) in params.named_params() {
                for (kind, store) in [("m", &mut opt.m), ("v", &mut opt.v)] {
                    if let Some((_, v)) = tensors.get(&format!("optim.{kind}.{name}")) {
                        store.insert(name.clone(), v.clone());
                    }
                }
            }
            opt.steps = meta.adam_steps.clone();
            optimizer = Some(opt);
        }
        Ok(Self { meta, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(with_optim: bool) -> Checkpoint {
        let params = StyleBankParams::init_with(3, 5, NetConfig { base_width: 2 }).unwrap();
        let optimizer = with_optim.then(|| {
            let mut o = AdamState::default();
            for (name, p) in params.named_params().into_iter().take(4) {
                o.m.insert(name.clone(), p.values.iter().map(|v| v * 0.5).collect());
                o.v.insert(name.clone(), p.values.iter().map(|v| v * v).collect());
                o.steps.insert(name, 7);
            }
            o
        });
        Checkpoint {
            meta: CheckpointMeta {
                version: FORMAT_VERSION,
                n_styles: 3,
                base_width: 2,
                iteration: 12,
                config_hash: "abc".into(),
                adam_steps: optimizer.as_ref().map(|o| o.steps.clone()).unwrap_or_default(),
            },
            params,
            optimizer,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for with_optim in [false, true] {
            let ck = sample(with_optim);
            let bytes = ck.to_bytes();
            assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
            assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample(true).to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().contains("checksum"));
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
        let good = sample(false).to_bytes();
        assert!(Checkpoint::from_bytes(&good[..good.len() - 40]).is_err());
    }

    #[test]
    fn save_load_and_latest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(latest_checkpoint(dir.path()).unwrap().is_none());
        let ck = sample(true);
        for it in [2u64, 10, 4] {
            ck.save(&dir.path().join(checkpoint_name(it))).unwrap();
        }
        fs::write(dir.path().join("ckpt_x.bin"), b"").unwrap();
        let (it, path) = latest_checkpoint(dir.path()).unwrap().unwrap();
        assert_eq!(it, 10);
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(!dir.path().join(".ckpt_10.bin.tmp").exists());
        assert!(matches!(
            Checkpoint::load(&dir.path().join("ckpt_x.bin")),
            Err(Error::Checkpoint { .. })
        ));
    }
}
