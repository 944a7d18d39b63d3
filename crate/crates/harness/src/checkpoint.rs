//! Binary checkpoint files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "CLFSEGCK" | u32 version
//! u64 len | network config as TOML
//! u64 epoch | u64 step | f64 best validation DSC
//! 3 sections (parameters, buffers, optimizer state), each:
//!   u64 count, then per record:
//!   u32 name len | name | u32 rank | u64 dims[rank] | f64 values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use clfseg_core::{NetworkConfig, ParamStore, Tensor};

use crate::config::network_diff;
use crate::error::{io_err, HarnessError, Result};
use crate::optim::RmsState;

pub const MAGIC: &[u8; 8] = b"CLFSEGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub params: ParamStore,
    pub optimizer: RmsState,
    /// Epochs completed (the next epoch to run).
    pub epoch: u64,
    pub step: u64,
    pub best_val_dsc: f64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = toml::to_string(&self.network).expect("network config serializes");
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.best_val_dsc.to_le_bytes());
        write_section(&mut out, self.params.iter());
        write_section(&mut out, self.params.buffers());
        write_section(&mut out, self.optimizer.iter().map(|(k, v)| (k.as_str(), v)));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let n = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|e| e.to_string())?;
        let network: NetworkConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let best_val_dsc = r.f64()?;
        let mut params = ParamStore::new();
        for (k, v) in r.section()? {
            params.insert(k, v);
        }
        for (k, v) in r.section()? {
            params.insert_buffer(k, v);
        }
        let optimizer: RmsState = r.section()?.into_iter().collect();
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self {
            network,
            params,
            optimizer,
            epoch,
            step,
            best_val_dsc,
        })
    }

    /// Writes to a temporary sibling and renames it into place, so an
    /// interrupted save never leaves a truncated file at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        fs::write(&tmp, self.to_bytes()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|message| HarnessError::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Errors with a field-by-field diff unless the checkpoint was saved
    /// for `expected`.
    pub fn check_network(&self, expected: &NetworkConfig) -> Result<()> {
        let diff = network_diff(&self.network, expected);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::ConfigMismatch(
                diff.into_iter().map(|d| format!("{d} (checkpoint != requested)")).collect(),
            ))
        }
    }
}

fn write_section<'a>(out: &mut Vec<u8>, items: impl Iterator<Item = (&'a str, &'a Tensor)>) {
    let items: Vec<_> = items.collect();
    out.extend_from_slice(&(items.len() as u64).to_le_bytes());
    for (name, t) in items {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
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
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn section(&mut self) -> std::result::Result<BTreeMap<String, Tensor>, String> {
        let count = self.u64()?;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let n = self.u32()? as usize;
            let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())?;
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            if len.checked_mul(8).is_none_or(|b| b > self.bytes.len() - self.pos) {
                return Err(format!("record `{name}` overruns the file"));
            }
            let data = (0..len).map(|_| self.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
            let t = Tensor::new(&shape, data).map_err(|e| format!("record `{name}`: {e}"))?;
            if out.insert(name.clone(), t).is_some() {
                return Err(format!("duplicate record `{name}`"));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clfseg_core::ClfSeg;

    fn sample() -> Checkpoint {
        let network = NetworkConfig {
            base_filters: 2,
            depth: 1,
            height: 4,
            width: 4,
            in_channels: 1,
            ..Default::default()
        };
        let params = ClfSeg::new(network.clone()).unwrap().init_params(3);
        let optimizer = params
            .iter()
            .map(|(k, v)| (k.to_string(), v.map(|x| x * x + 0.1)))
            .collect();
        Checkpoint {
            network,
            params,
            optimizer,
            epoch: 7,
            step: 123,
            best_val_dsc: 0.8125,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let b = c.to_bytes();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), b);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let b = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(&b[..20]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert_eq!(Checkpoint::from_bytes(&bad).unwrap_err(), "bad magic");
        let mut extra = b;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn mismatch_lists_fields() {
        let c = sample();
        let other = NetworkConfig { depth: 2, resnet_paths: 3, ..c.network.clone() };
        let err = c.check_network(&other).unwrap_err().to_string();
        assert!(err.contains("depth: 1 != 2") && err.contains("resnet_paths: 1 != 3"), "{err}");
        c.check_network(&c.network).unwrap();
    }

    #[test]
    fn save_is_atomic_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/model.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        assert!(!dir.path().join("sub/model.ckpt.tmp").exists());
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }
}
