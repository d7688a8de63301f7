use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"ADNW";
const CHECKPOINT_VERSION: u32 = 1;
const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

/// Batch-norm running statistics for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Named collection of parameter tensors plus batch-norm buffers.
///
/// Insertion order is preserved; it fixes optimizer state layout and the
/// on-disk order of checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    stats: BTreeMap<String, RunningStats>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
            return i;
        }
        let i = self.tensors.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(tensor);
        i
    }

    pub fn insert_stats(&mut self, prefix: impl Into<String>, stats: RunningStats) {
        self.stats.insert(prefix.into(), stats);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.id(name)?;
        Ok(&mut self.tensors[i])
    }

    pub fn by_id(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn stats(&self, prefix: &str) -> Result<&RunningStats> {
        self.stats
            .get(prefix)
            .ok_or_else(|| Error::invalid(format!("unknown batch-norm layer {prefix:?}")))
    }

    pub fn stats_mut(&mut self, prefix: &str) -> Result<&mut RunningStats> {
        self.stats
            .get_mut(prefix)
            .ok_or_else(|| Error::invalid(format!("unknown batch-norm layer {prefix:?}")))
    }

    pub fn stats_iter(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.stats.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn stats_iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut RunningStats)> {
        self.stats.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_requires_grad_prefix(&mut self, prefix: &str, flag: bool) {
        for (name, t) in self.iter_mut() {
            if name.starts_with(prefix) {
                t.set_requires_grad(flag);
            }
        }
    }

    /// True when both sets hold the same names with the same shapes.
    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
            && self.stats.len() == other.stats.len()
            && self
                .stats
                .iter()
                .zip(&other.stats)
                .all(|((ka, a), (kb, b))| ka == kb && a.mean.len() == b.mean.len())
    }

    /// Flattens tensors and buffers into one named list, in checkpoint order.
    fn flat_entries(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::new(t.shape(), t.data().to_vec()).unwrap()))
            .collect();
        for (prefix, s) in &self.stats {
            let c = s.mean.len();
            out.push((
                format!("{prefix}{RUNNING_MEAN}"),
                Tensor::new(&[c], s.mean.clone()).unwrap(),
            ));
            out.push((
                format!("{prefix}{RUNNING_VAR}"),
                Tensor::new(&[c], s.var.clone()).unwrap(),
            ));
        }
        out
    }

    /// Serializes values (not gradients) in the `ADNW` checkpoint layout.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let entries = self.flat_entries();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (name, t) in &entries {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[t.rank() as u8])?;
            for &e in t.shape() {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Parses an `ADNW` checkpoint. Parameters come back trainable; entries
    /// ending in `.running_mean` / `.running_var` become batch-norm buffers.
    pub fn read_checkpoint<R: Read>(r: R) -> Result<ParamSet> {
        let mut cur = ByteReader::new(r);
        let magic = cur.take::<4>()?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not an ADNW file".into(),
            });
        }
        let version = u32::from_le_bytes(cur.take()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = u32::from_le_bytes(cur.take()?);
        let mut set = ParamSet::new();
        let mut means: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut vars: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cur.take()?) as usize;
            let at = cur.offset;
            let name = String::from_utf8(cur.take_vec(name_len)?).map_err(|_| Error::Format {
                offset: at,
                msg: "parameter name is not UTF-8".into(),
            })?;
            let rank = cur.take::<1>()?[0] as usize;
            if rank > super::tensor::MAX_RANK {
                return Err(Error::Format {
                    offset: cur.offset - 1,
                    msg: format!("rank {rank} too large"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(cur.take()?) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(cur.take()?));
            }
            if let Some(prefix) = name.strip_suffix(RUNNING_MEAN) {
                means.insert(prefix.to_string(), data);
            } else if let Some(prefix) = name.strip_suffix(RUNNING_VAR) {
                vars.insert(prefix.to_string(), data);
            } else {
                set.insert(name, Tensor::new(&shape, data)?.with_grad());
            }
        }
        for (prefix, mean) in means {
            let var = vars.remove(&prefix).ok_or_else(|| Error::Format {
                offset: cur.offset,
                msg: format!("running mean without variance for {prefix}"),
            })?;
            set.insert_stats(prefix, RunningStats { mean, var });
        }
        if let Some(prefix) = vars.keys().next() {
            return Err(Error::Format {
                offset: cur.offset,
                msg: format!("running variance without mean for {prefix}"),
            });
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<ParamSet> {
        let bytes = std::fs::read(path)?;
        ParamSet::read_checkpoint(&bytes[..])
    }
}

/// Reader that tracks its byte offset so truncation errors can name it.
pub(crate) struct ByteReader<R> {
    inner: R,
    pub(crate) offset: u64,
}

impl<R: Read> ByteReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        ByteReader { inner, offset: 0 }
    }

    pub(crate) fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    pub(crate) fn take_vec(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => {
                    return Err(Error::Format {
                        offset: self.offset + read as u64,
                        msg: format!("unexpected end of file (needed {} more bytes)", buf.len() - read),
                    })
                }
                Ok(k) => read += k,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }
}
