//! Binary checkpoint container: architecture, parameters, optimizer state
//! and free-form run metadata, little-endian throughout.
//!
//! Layout: magic, version, architecture (TOML text), metadata entries,
//! parameters (name, trainable flag, shape, f64 payload), then an optional
//! Adam block. Encoding is a pure function of the contents, so
//! save → load → save reproduces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::model::{Architecture, CcVae};
use crate::optim::{AdamConfig, AdamState, Moments};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CCVAECKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: CcVae,
    pub optimizer: Option<AdamState>,
    pub meta: BTreeMap<String, String>,
}

/// Writes `bytes` to a sibling temp file, syncs it, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

fn truncated() -> Error {
    Error::Checkpoint("truncated checkpoint".into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).ok_or_else(truncated)?;
        let s = self.bytes.get(self.at..end).ok_or_else(truncated)?;
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.bytes.len() {
            return Err(truncated());
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible tensor rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| self.len()).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > self.bytes.len() - self.at {
            return Err(truncated());
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<_>>()?;
        Tensor::new(&shape, data)
    }
}

impl Checkpoint {
    pub fn new(model: CcVae, optimizer: Option<AdamState>) -> Self {
        Checkpoint {
            model,
            optimizer,
            meta: BTreeMap::new(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let arch = toml::to_string(&self.model.arch).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.str(&arch);
        w.u64(self.meta.len() as u64);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.u64(self.model.params.len() as u64);
        for (name, p) in self.model.params.iter() {
            w.str(name);
            w.u8(p.trainable as u8);
            w.tensor(&p.value);
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => {
                w.u8(1);
                let c = opt.config;
                for v in [c.lr, c.beta1, c.beta2, c.eps] {
                    w.f64(v);
                }
                match c.clip {
                    None => w.u8(0),
                    Some(v) => {
                        w.u8(1);
                        w.f64(v);
                    }
                }
                w.u64(opt.step);
                w.u64(opt.moments.len() as u64);
                for (name, m) in &opt.moments {
                    w.str(name);
                    w.tensor(&m.m);
                    w.tensor(&m.v);
                }
            }
        }
        Ok(w.0)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let arch: Architecture =
            toml::from_str(&r.str()?).map_err(|e| Error::Checkpoint(format!("architecture: {e}")))?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.len()? {
            let k = r.str()?;
            meta.insert(k, r.str()?);
        }
        let mut params = ParamStore::new();
        for _ in 0..r.len()? {
            let name = r.str()?;
            let trainable = r.u8()? != 0;
            params.insert_with(&name, r.tensor()?, trainable)?;
        }
        let model = CcVae::from_parts(arch, params)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let clip = match r.u8()? {
                    0 => None,
                    _ => Some(r.f64()?),
                };
                let mut st = AdamState::new(AdamConfig {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    clip,
                })
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
                st.step = r.u64()?;
                for _ in 0..r.len()? {
                    let name = r.str()?;
                    let m = r.tensor()?;
                    let v = r.tensor()?;
                    let expected = model.params.value(&name).map_err(|_| {
                        Error::Checkpoint(format!("optimizer state for unknown parameter `{name}`"))
                    })?;
                    if m.shape() != expected.shape() || v.shape() != expected.shape() {
                        return Err(Error::Checkpoint(format!("optimizer state shape mismatch for `{name}`")));
                    }
                    st.moments.insert(name, Moments { m, v });
                }
                Some(st)
            }
            t => return Err(Error::Checkpoint(format!("bad optimizer tag {t}"))),
        };
        if r.at != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { model, optimizer, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
