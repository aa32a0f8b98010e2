//! Checkpoint format: `MEUN` magic, a version, an entry count, then one
//! length-prefixed named tensor per parameter and per batch-norm running
//! buffer, stored as little-endian f32.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::DataError;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"MEUN";
pub const VERSION: u32 = 1;

fn push_entry<T: Scalar>(out: &mut Vec<u8>, name: &str, value: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let s = value.shape();
    out.extend_from_slice(&4u32.to_le_bytes());
    for dim in [s.n, s.c, s.h, s.w] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in value.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

/// Serialize all parameters and buffers, in registration order.
pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<(), DataError> {
    let count = store.params().len() + store.buffers().len();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for p in store.params() {
        push_entry(&mut out, &p.name, &p.value);
    }
    for b in store.buffers() {
        push_entry(&mut out, &b.name, &b.value);
    }
    // write via a sibling temp file so a crash never leaves a torn checkpoint
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::Truncated { context: context.to_string() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_u32(&mut self, context: &str) -> Result<u32, DataError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Load a checkpoint into a model whose parameters are already registered.
/// All entries are staged and validated first; the store is only touched
/// once the whole file has parsed, so a bad file never leaves a partially
/// loaded model.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<(), DataError> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = r.read_u32("version")?;
    if version != VERSION {
        return Err(DataError::BadVersion { found: version, expected: VERSION });
    }
    let count = r.read_u32("entry count")? as usize;

    let mut staged: BTreeMap<String, (Shape, Vec<f32>)> = BTreeMap::new();
    for i in 0..count {
        let context = format!("entry {i}");
        let name_len = r.read_u32(&context)? as usize;
        let name = String::from_utf8(r.take(name_len, &context)?.to_vec())
            .map_err(|_| DataError::Truncated { context: format!("{context} name") })?;
        let rank = r.read_u32(&name)?;
        if rank != 4 {
            return Err(DataError::EntryShape {
                name,
                found: format!("rank {rank}"),
                expected: "rank 4".into(),
            });
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.read_u32(&name)? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let raw = r.take(4 * shape.numel(), &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        staged.insert(name, (shape, data));
    }

    // validate against the model before mutating anything
    for name in store
        .params()
        .iter()
        .map(|p| (&p.name, p.value.shape()))
        .chain(store.buffers().iter().map(|b| (&b.name, b.value.shape())))
    {
        let (pname, pshape) = name;
        match staged.get(pname) {
            None => return Err(DataError::MissingEntry { name: pname.clone() }),
            Some((shape, _)) if *shape != pshape => {
                return Err(DataError::EntryShape {
                    name: pname.clone(),
                    found: shape.to_string(),
                    expected: pshape.to_string(),
                });
            }
            Some(_) => {}
        }
    }
    let known: std::collections::BTreeSet<&String> = store
        .params()
        .iter()
        .map(|p| &p.name)
        .chain(store.buffers().iter().map(|b| &b.name))
        .collect();
    if let Some(extra) = staged.keys().find(|k| !known.contains(k)) {
        return Err(DataError::UnknownEntry { name: extra.clone() });
    }

    for p in store.params_mut() {
        let (_, data) = &staged[&p.name];
        for (dst, &src) in p.value.data_mut().iter_mut().zip(data.iter()) {
            *dst = T::from_f64(src as f64);
        }
    }
    for b in store.buffers_mut() {
        let (_, data) = &staged[&b.name];
        for (dst, &src) in b.value.data_mut().iter_mut().zip(data.iter()) {
            *dst = T::from_f64(src as f64);
        }
    }
    Ok(())
}
