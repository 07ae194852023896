//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"ABNNCKPT"
//! version u32
//! model   u32 length + UTF-8 bytes
//! count   u32
//! count × { name: u32 length + UTF-8, rank: u32, dims: rank × u64 }
//! payload f64 values of every tensor in table order
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use abnn::{ParamStore, Tensor};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{write_file, CliError, Result};

pub const MAGIC: &[u8; 8] = b"ABNNCKPT";
pub const VERSION: u32 = 1;

const MAX_RANK: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: String,
    pub params: ParamStore<f64>,
}

pub fn encode(model: &str, params: &ParamStore<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * params.numel());
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION).unwrap();
    put_str(&mut out, model);
    out.write_u32::<LittleEndian>(params.len() as u32).unwrap();
    for (name, t) in params.names().iter().zip(params.values()) {
        put_str(&mut out, name);
        out.write_u32::<LittleEndian>(t.rank() as u32).unwrap();
        for &d in t.shape() {
            out.write_u64::<LittleEndian>(d as u64).unwrap();
        }
    }
    for t in params.values() {
        for &v in t.data() {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LittleEndian>(s.len() as u32).unwrap();
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl<'a> Reader<'a> {
    fn need(&self, n: usize) -> Result<()> {
        let offset = self.cur.position() as usize;
        let left = self.cur.get_ref().len() - offset;
        if left < n {
            return Err(CliError::Truncated { offset, needed: n - left });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        self.need(4)?;
        Ok(self.cur.read_u32::<LittleEndian>()?)
    }

    fn u64(&mut self) -> Result<u64> {
        self.need(8)?;
        Ok(self.cur.read_u64::<LittleEndian>()?)
    }

    fn f64(&mut self) -> Result<f64> {
        self.need(8)?;
        Ok(self.cur.read_f64::<LittleEndian>()?)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32()? as usize;
        self.need(n)?;
        let mut buf = vec![0; n];
        self.cur.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|_| CliError::CorruptShapeTable(format!("{what} is not UTF-8")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CliError::CheckpointVersion("missing ABNNCKPT magic".into()));
    }
    let mut r = Reader { cur: Cursor::new(bytes) };
    r.cur.set_position(MAGIC.len() as u64);
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::CheckpointVersion(format!(
            "format version {version}, this build reads {VERSION}"
        )));
    }
    let model = r.string("model identifier")?;
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32()?;
        if rank > MAX_RANK {
            return Err(CliError::CorruptShapeTable(format!("tensor {i} ({name:?}) claims rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(usize::try_from(r.u64()?).map_err(|_| CliError::CorruptShapeTable(format!("{name:?} dimension overflows")))?);
        }
        table.push((name, dims));
    }
    let mut total = 0usize;
    for (name, dims) in &table {
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| total.checked_add(n))
            .ok_or_else(|| CliError::CorruptShapeTable(format!("{name:?} size overflows")))?;
        total = n;
    }
    r.need(total.checked_mul(8).ok_or_else(|| CliError::CorruptShapeTable("payload size overflows".into()))?)?;
    let mut params = ParamStore::new();
    for (name, dims) in table {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if params.find(&name).is_some() {
            return Err(CliError::CorruptShapeTable(format!("duplicate tensor {name:?}")));
        }
        params.add(name, Tensor::new(dims, data)?);
    }
    let rest = bytes.len() - r.cur.position() as usize;
    if rest != 0 {
        return Err(CliError::CorruptShapeTable(format!("{rest} bytes after the payload")));
    }
    Ok(Checkpoint { model, params })
}

pub fn save_checkpoint(path: &Path, model: &str, params: &ParamStore<f64>) -> Result<()> {
    write_file(path, &encode(model, params))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

impl Checkpoint {
    /// Copies the stored values into `store`, which must hold tensors of the
    /// same names and shapes (as built from the same model configuration).
    pub fn restore_into(&self, model: &str, store: &mut ParamStore<f64>) -> Result<()> {
        if self.model != model {
            return Err(CliError::ModelMismatch { expected: model.into(), found: self.model.clone() });
        }
        for (name, t) in self.params.names().iter().zip(self.params.values()) {
            let id = store.find(name).ok_or_else(|| CliError::ShapeMismatch {
                name: name.clone(),
                expected: Vec::new(),
                found: t.shape().to_vec(),
            })?;
            let expected = store.get(id).shape().to_vec();
            if expected != t.shape() {
                return Err(CliError::ShapeMismatch { name: name.clone(), expected, found: t.shape().to_vec() });
            }
        }
        if let Some(missing) = store.names().iter().find(|n| self.params.find(n).is_none()) {
            let id = store.find(missing).expect("listed name");
            return Err(CliError::ShapeMismatch {
                name: missing.clone(),
                expected: store.get(id).shape().to_vec(),
                found: Vec::new(),
            });
        }
        for (name, t) in self.params.names().iter().zip(self.params.values()) {
            let id = store.find(name).expect("checked above");
            store.set(id, t.clone())?;
        }
        Ok(())
    }

    /// One line per tensor: name, shape, element count.
    pub fn describe(&self) -> String {
        let mut s = format!("model {}\nversion {VERSION}\n{} tensors, {} values\n", self.model, self.params.len(), self.params.numel());
        for (name, t) in self.params.names().iter().zip(self.params.values()) {
            s.push_str(&format!("{name}\t{:?}\t{}\n", t.shape(), t.len()));
        }
        s
    }
}
