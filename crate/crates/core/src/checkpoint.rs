//! Single-file checkpoints: header, config snapshot, optimizer state, a
//! name-indexed blob table for parameters, and a trailing content hash.
//!
//! Serialization is canonical (sorted names, little-endian), so
//! save -> load -> save is byte-identical and any run can be resumed
//! bit-exactly. Writes are atomic (write to a temp file, then rename).

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, VfmError};
use crate::optim::{AdamHyper, OptimizerState};
use crate::params::ParamStore;
use crate::tensor::TensorData;

pub const CKPT_MAGIC: &[u8; 4] = b"VFCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub config_text: String,
    pub params: ParamStore<f32>,
    pub opt: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(step: u64, config_text: impl Into<String>, params: ParamStore<f32>) -> Self {
        Checkpoint { step, config_text: config_text.into(), params, opt: None }
    }

    pub fn with_opt(mut self, opt: OptimizerState) -> Self {
        self.opt = Some(opt);
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        write_str(&mut buf, &self.config_text);

        match &self.opt {
            None => buf.push(0u8),
            Some(opt) => {
                buf.push(1u8);
                let h = opt.hyper;
                for v in [h.beta1, h.beta2, h.eps, h.weight_decay] {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                buf.extend_from_slice(&opt.step.to_le_bytes());
                let entries = opt.export();
                buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
                for (name, m, v) in entries {
                    write_str(&mut buf, &name);
                    buf.extend_from_slice(&(m.len() as u64).to_le_bytes());
                    for x in &m {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                    for x in &v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }

        let mut names: Vec<&str> = self.params.names().collect();
        names.sort_unstable();
        buf.extend_from_slice(&(names.len() as u32).to_le_bytes());
        for name in names {
            let t = self.params.get(name).expect("indexed");
            write_str(&mut buf, name);
            buf.push(0u8); // dtype f32
            buf.push(t.shape().len() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            buf.extend_from_slice(&((t.numel() * 4) as u64).to_le_bytes());
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }

        let hash: [u8; 32] = Sha256::digest(&buf).into();
        buf.extend_from_slice(&hash);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 48 {
            return Err(VfmError::Checkpoint("file too short".to_string()));
        }
        let (body, stored_hash) = bytes.split_at(bytes.len() - 32);
        let hash: [u8; 32] = Sha256::digest(body).into();
        if hash != stored_hash {
            return Err(VfmError::Checkpoint("content hash mismatch".to_string()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let magic = r.take(4)?;
        if magic != CKPT_MAGIC {
            return Err(VfmError::Checkpoint("bad magic".to_string()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(VfmError::Checkpoint(format!("unknown checkpoint version {version}")));
        }
        let step = r.u64()?;
        let config_text = r.string()?;

        let opt = if r.u8()? == 1 {
            let beta1 = r.f64()?;
            let beta2 = r.f64()?;
            let eps = r.f64()?;
            let weight_decay = r.f64()?;
            let opt_step = r.u64()?;
            let n = r.u32()? as usize;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let name = r.string()?;
                let len = r.u64()? as usize;
                let mut m = Vec::with_capacity(len);
                for _ in 0..len {
                    m.push(r.f64()?);
                }
                let mut v = Vec::with_capacity(len);
                for _ in 0..len {
                    v.push(r.f64()?);
                }
                entries.push((name, m, v));
            }
            Some(OptimizerState::import(
                AdamHyper { beta1, beta2, eps, weight_decay },
                opt_step,
                entries,
            ))
        } else {
            None
        };

        let n_params = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let name = r.string()?;
            let dtype = r.u8()?;
            if dtype != 0 {
                return Err(VfmError::Checkpoint(format!("unknown dtype {dtype} for `{name}`")));
            }
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let byte_len = r.u64()? as usize;
            let numel = byte_len / 4;
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let b = r.take(4)?;
                data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
            }
            params.insert(name, TensorData::new(shape, data)?);
        }
        Ok(Checkpoint { step, config_text, params, opt })
    }

    /// Atomic save: write `<path>.tmp`, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(VfmError::Checkpoint("truncated checkpoint".to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| VfmError::Checkpoint("non-utf8 string".to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamHyper;
    use crate::util::{rng_from, trunc_normal};

    fn random_params(seed: u64) -> ParamStore<f32> {
        let mut rng = rng_from(seed);
        let mut s = ParamStore::new();
        s.insert("b.w", TensorData::from_fn(vec![3, 2], |_| trunc_normal::<f32>(&mut rng, 1.0)));
        s.insert("a.w", TensorData::from_fn(vec![4], |_| trunc_normal::<f32>(&mut rng, 1.0)));
        s
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let mut opt = OptimizerState::new(AdamHyper { weight_decay: 0.05, ..Default::default() });
        let mut params = random_params(1);
        let mut grads = crate::params::GradMap::new();
        grads.insert("a.w".to_string(), vec![0.1, -0.2, 0.3, 0.0]);
        crate::optim::adamw_step(&mut params, &grads, &mut opt, 1e-3).unwrap();

        let ck = Checkpoint::new(7, "k = v\n", params).with_opt(opt);
        let bytes1 = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes1).unwrap();
        let bytes2 = back.to_bytes();
        assert_eq!(bytes1, bytes2);
        assert_eq!(back.step, 7);
        assert_eq!(back.config_text, "k = v\n");
        assert!(back.opt.is_some());
    }

    #[test]
    fn truncated_file_fails_hash() {
        let ck = Checkpoint::new(0, "", random_params(2));
        let mut bytes = ck.to_bytes();
        bytes.truncate(bytes.len() - 5);
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("hash"));
    }

    #[test]
    fn corrupted_byte_fails_hash() {
        let ck = Checkpoint::new(0, "", random_params(3));
        let mut bytes = ck.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn save_load_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = Checkpoint::new(3, "seed = 1\n", random_params(4));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }
}
