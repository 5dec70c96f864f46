//! Named parameter storage with gradient buffers and the binary checkpoint
//! format.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub type ParamId = usize;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered set of named parameters. Gradients accumulate additively until
/// [`ParamSet::zero_grads`] is called.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        let grad = Tensor::zeros(value.dims().to_vec());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        let entry = &mut self.entries[id];
        debug_assert_eq!(entry.grad.dims(), g.dims());
        for (dst, src) in entry.grad.data_mut().iter_mut().zip(g.data()) {
            *dst += src;
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

const CKPT_MAGIC: &[u8; 8] = b"LSPDCKPT";
const CKPT_VERSION: u32 = 1;

/// Writes a checkpoint: magic, version, then an ordered list of
/// `(u32 name length, name bytes, u32 ndim, u32 dims..., f32 LE payload)`.
/// `meta` entries are written first and conventionally use a `__meta.`
/// name prefix.
pub fn save_checkpoint(
    path: &Path,
    meta: &[(String, Tensor)],
    params: &ParamSet,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    let write_entry = |w: &mut std::io::BufWriter<std::fs::File>,
                           name: &str,
                           t: &Tensor|
     -> Result<()> {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.dims().len() as u32).to_le_bytes())?;
        for &d in t.dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    for (name, t) in meta {
        write_entry(&mut w, name, t)?;
    }
    for (_, e) in params.iter() {
        write_entry(&mut w, &e.name, &e.value)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads all checkpoint entries in file order.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != CKPT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported version {version}"
        )));
    }
    let mut entries = Vec::new();
    loop {
        match r.read_exact(&mut buf4) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(buf4) as usize;
        if name_len > 4096 {
            return Err(Error::CheckpointFormat("implausible name length".into()));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::CheckpointFormat("name is not utf-8".into()))?;
        r.read_exact(&mut buf4)?;
        let ndim = u32::from_le_bytes(buf4) as usize;
        if ndim > 8 {
            return Err(Error::CheckpointFormat("implausible rank".into()));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut buf4)?;
            dims.push(u32::from_le_bytes(buf4) as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut buf4)?;
            data.push(f32::from_le_bytes(buf4));
        }
        entries.push((name, Tensor::new(dims, data)));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_accumulation_is_additive() {
        let mut params = ParamSet::new();
        let id = params.register("w", Tensor::from_flat(vec![1.0, 2.0]));
        let g = Tensor::from_flat(vec![0.5, -0.5]);
        params.accumulate_grad(id, &g);
        params.accumulate_grad(id, &g);
        assert_eq!(params.grad(id).data(), &[1.0, -1.0]);
        params.zero_grads();
        assert_eq!(params.grad(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_order_and_bits() {
        let mut params = ParamSet::new();
        params.register("layer0.weight", Tensor::new(vec![2, 3], vec![0.1; 6]));
        params.register("layer0.bias", Tensor::from_flat(vec![-0.25, 0.75]));
        let meta = vec![("__meta.variant".to_string(), Tensor::scalar(2.0))];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&path, &meta, &params).unwrap();
        let entries = load_checkpoint(&path).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0].0, "__meta.variant");
        assert_eq!(entries[1].0, "layer0.weight");
        assert_eq!(entries[1].1.dims(), &[2, 3]);
        assert_eq!(entries[2].1.data(), &[-0.25, 0.75]);
    }

    #[test]
    fn foreign_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        std::fs::write(&path, b"garbagefile").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
