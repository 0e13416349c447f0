//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CLCK" | version u16 | meta_len u32 | meta (UTF-8 "key=value\n" lines)
//! record*: name_len u16 | name | rank u8 | extent u32 × rank | f32 × product(extents)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::network::Network;
use super::spec::{ArchConfig, NetworkSpec};
use super::Architecture;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"CLCK";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Record {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        Tensor::new(&self.shape, self.data.iter().map(|&v| T::lit(v as f64)).collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub records: Vec<Record>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }
}

impl Checkpoint {
    /// Parameters, running statistics and architecture metadata of `net`.
    pub fn from_network<T: Real>(net: &Network<T>) -> Self {
        let mut ck = Checkpoint::default();
        net.spec().config.to_metadata(net.architecture(), &mut ck.metadata);
        net.visit_params(&mut |n, t| ck.records.push(Record::from_tensor(n, t)));
        net.visit_buffers(&mut |n, t| ck.records.push(Record::from_tensor(n, t)));
        ck
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn architecture(&self) -> Result<(Architecture, ArchConfig)> {
        ArchConfig::from_metadata(&self.metadata)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::invalid(format!("metadata entry `{k}` cannot be encoded")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for r in &self.records {
            let name_len = u16::try_from(r.name.len()).map_err(|_| Error::invalid("record name too long"))?;
            let rank = u8::try_from(r.shape.len()).map_err(|_| Error::invalid("record rank too large"))?;
            if r.shape.iter().product::<usize>() != r.data.len() {
                return Err(Error::shape(
                    "checkpoint",
                    r.name.clone(),
                    r.shape.iter().product::<usize>(),
                    r.data.len(),
                ));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(rank);
            for &e in &r.shape {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf, pos: 0 };
        if cur.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = cur.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let meta_len = cur.u32("metadata length")? as usize;
        let meta =
            std::str::from_utf8(cur.take(meta_len, "metadata")?).map_err(|_| cur.fail("metadata is not UTF-8"))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cur.fail(format!("malformed metadata line `{line}`")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let mut records = Vec::new();
        while cur.pos < buf.len() {
            let n = cur.u16("record name length")? as usize;
            let name = std::str::from_utf8(cur.take(n, "record name")?)
                .map_err(|_| cur.fail("record name is not UTF-8"))?
                .to_string();
            let rank = cur.u8("rank")? as usize;
            let shape = (0..rank)
                .map(|_| cur.u32("extent").map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let bytes = cur.take(len * 4, "record data")?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(Record { name, shape, data });
        }
        Ok(Checkpoint { metadata, records })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let mut f = fs::File::create(&tmp).map_err(Error::at_path(&tmp))?;
        f.write_all(&bytes).map_err(Error::at_path(&tmp))?;
        f.sync_all().map_err(Error::at_path(&tmp))?;
        drop(f);
        fs::rename(&tmp, path).map_err(Error::at_path(path))?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(Error::at_path(path))?;
        Self::from_bytes(&bytes)
    }
}

fn describe(arch: Architecture, cfg: &ArchConfig) -> String {
    format!(
        "{arch} classes={} frames={} size={} main={:?} support={:?} decision={} padding={} peephole={}",
        cfg.num_classes,
        cfg.frames,
        cfg.size,
        cfg.main_widths,
        cfg.support_widths,
        cfg.decision_width,
        cfg.padding.as_str(),
        cfg.peephole
    )
}

/// Copies parameters and running statistics from `ck` into `net`.
///
/// Fails with [`Error::ArchitectureMismatch`] unless the checkpoint was
/// written by a network of the same architecture and configuration.
pub fn load_into<T: Real>(net: &mut Network<T>, ck: &Checkpoint) -> Result<()> {
    let (arch, cfg) = ck.architecture()?;
    let ours = &net.spec().config;
    let same = arch == net.architecture()
        && cfg.num_classes == ours.num_classes
        && cfg.frames == ours.frames
        && cfg.size == ours.size
        && cfg.main_widths == ours.main_widths
        && (arch == Architecture::Stateful || cfg.support_widths == ours.support_widths)
        && cfg.decision_width == ours.decision_width
        && cfg.padding == ours.padding
        && cfg.peephole == ours.peephole;
    if !same {
        return Err(Error::ArchitectureMismatch {
            expected: describe(net.architecture(), ours),
            found: describe(arch, &cfg),
        });
    }
    let mut result = Ok(());
    let mut copy = |name: &str, t: &mut Tensor<T>| {
        if result.is_err() {
            return;
        }
        result = match ck.record(name) {
            None => Err(Error::ArchitectureMismatch {
                expected: format!("record `{name}`"),
                found: "no such record".into(),
            }),
            Some(r) if r.shape != t.shape() => Err(Error::ArchitectureMismatch {
                expected: format!("`{name}` {:?}", t.shape()),
                found: format!("{:?}", r.shape),
            }),
            Some(r) => {
                for (d, &v) in t.data_mut().iter_mut().zip(&r.data) {
                    *d = T::lit(v as f64);
                }
                Ok(())
            }
        };
    };
    net.visit_params_mut(&mut copy);
    net.visit_buffers_mut(&mut copy);
    result
}

pub fn save_checkpoint<T: Real>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_network(net).write(path)
}

/// Rebuilds the network described by the checkpoint metadata and loads it.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<(Network<T>, Checkpoint)> {
    let ck = Checkpoint::read(path)?;
    let (arch, cfg) = ck.architecture()?;
    let spec = match arch {
        Architecture::Stateless => NetworkSpec::stateless(cfg)?,
        Architecture::Stateful => NetworkSpec::stateful(cfg)?,
    };
    let mut net = Network::new(spec, 0)?;
    load_into(&mut net, &ck)?;
    Ok((net, ck))
}
