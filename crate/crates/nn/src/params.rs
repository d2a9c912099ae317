use std::io::{Read, Write};
use std::ops::Index;

use sha2::{Digest, Sha256};

use crate::error::{NnError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FSNPARM1";

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    /// Buffers (e.g. running statistics) are stored and hashed but never
    /// receive gradients.
    trainable: bool,
}

/// Owned, named parameter tensors of one network.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
    frozen: bool,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    /// Mutable access; refused once the set is frozen.
    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        if self.frozen {
            return Err(NnError::Frozen(self.entries[id.0].name.clone()));
        }
        Ok(&mut self.entries[id.0].value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Record every tensor on `graph`. With `track`, trainable tensors become
    /// gradient leaves; otherwise everything is a constant.
    pub fn bind<'g>(&self, graph: &'g Graph, track: bool) -> Bound<'g> {
        let track = track && !self.frozen;
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if track && e.trainable {
                    graph.leaf(e.value.clone())
                } else {
                    graph.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over the serialized archive, hex encoded.
    pub fn sha256_hex(&self) -> String {
        let mut bytes = Vec::new();
        self.write_archive(&mut bytes).expect("in-memory write");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Little-endian archive: magic, count, then per entry name, flag, dims, data.
    pub fn write_archive<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[u8::from(e.trainable)])?;
            w.write_all(&(e.value.shape().len() as u32).to_le_bytes())?;
            for &d in e.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in e.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Overwrite values from an archive written by [`ParamSet::write_archive`].
    /// Names, order and shapes must match this set exactly.
    pub fn load_archive<R: Read>(&mut self, mut r: R) -> Result<()> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Archive("bad magic".into()));
        }
        let count = read_u32(&mut r)? as usize;
        if count != self.entries.len() {
            return Err(NnError::Archive(format!(
                "archive has {count} tensors, network has {}",
                self.entries.len()
            )));
        }
        for e in &mut self.entries {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| NnError::Archive("utf8 name".into()))?;
            if name != e.name {
                return Err(NnError::Archive(format!(
                    "expected tensor {}, found {name}",
                    e.name
                )));
            }
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            if shape != e.value.shape() {
                return Err(NnError::Archive(format!(
                    "tensor {name}: archive shape {shape:?}, network shape {:?}",
                    e.value.shape()
                )));
            }
            for v in e.value.data_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// A [`ParamSet`] recorded on a graph.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    /// Gradient for every entry, aligned with the set's ids.
    pub fn grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

impl<'g> Index<ParamId> for Bound<'g> {
    type Output = Var<'g>;

    fn index(&self, id: ParamId) -> &Var<'g> {
        &self.vars[id.0]
    }
}
