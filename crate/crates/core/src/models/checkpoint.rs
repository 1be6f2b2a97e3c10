//! Binary checkpoint container. All integers are little-endian `u32`, all
//! floats little-endian `f64`:
//!
//! ```text
//! magic        4 bytes  "NSQT"
//! version      u32      FORMAT_VERSION
//! kind         u32      0 = ar, 1 = nat, 2 = fs
//! d_model      u32
//! d_hidden     u32
//! n_layer      u32
//! n_head       u32
//! p_dropout    f64
//! vocab_size   u32
//! max_len      u32
//! n_lengths    u32      then n_lengths pairs (source len u32, target len u32)
//! n_tensors    u32      then per tensor:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   rank       u32
//!   dims       rank × u32
//!   payload    product(dims) × f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LengthTable, Model, ModelConfig, ModelKind};
use crate::tensor::{ParamStore, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NSQT";
pub const FORMAT_VERSION: u32 = 1;

fn kind_code(kind: ModelKind) -> u32 {
    match kind {
        ModelKind::Ar => 0,
        ModelKind::Nat => 1,
        ModelKind::Fs => 2,
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())
}

pub fn write_checkpoint(model: &Model, w: &mut impl Write) -> std::io::Result<()> {
    let c = model.config();
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&kind_code(model.kind()).to_le_bytes())?;
    for v in [c.d_model, c.d_hidden, c.n_layer, c.n_head] {
        put_u32(w, v)?;
    }
    w.write_all(&c.p_dropout.to_le_bytes())?;
    put_u32(w, c.vocab_size)?;
    put_u32(w, c.max_len)?;
    put_u32(w, model.length_table.len())?;
    for (k, v) in model.length_table.entries() {
        put_u32(w, k)?;
        put_u32(w, v)?;
    }
    let params = &model.params;
    put_u32(w, params.len())?;
    for (_, name, t) in params.iter() {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.rank())?;
        for &d in t.shape() {
            put_u32(w, d)?;
        }
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("checkpoint truncated reading {what}: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(what)?) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    let mut r = Reader { inner: r };
    let magic: [u8; 4] = r.bytes("magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"NSQT\"")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let kind = match r.u32("kind")? {
        0 => ModelKind::Ar,
        1 => ModelKind::Nat,
        2 => ModelKind::Fs,
        other => return Err(Error::Format(format!("unknown model kind code {other}"))),
    };
    let config = ModelConfig {
        d_model: r.u32("d_model")?,
        d_hidden: r.u32("d_hidden")?,
        n_layer: r.u32("n_layer")?,
        n_head: r.u32("n_head")?,
        p_dropout: r.f64("p_dropout")?,
        vocab_size: r.u32("vocab_size")?,
        max_len: r.u32("max_len")?,
    };
    let mut table = LengthTable::new();
    for _ in 0..r.u32("length table size")? {
        let k = r.u32("length key")?;
        let v = r.u32("length value")?;
        table.insert(k, v);
    }
    let mut store = ParamStore::new();
    for _ in 0..r.u32("tensor count")? {
        let len = r.u32("name length")?;
        let mut name = vec![0u8; len];
        r.inner
            .read_exact(&mut name)
            .map_err(|e| Error::Format(format!("checkpoint truncated reading a name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(format!("tensor name: {e}")))?;
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| r.f64(&name)).collect::<Result<Vec<_>>>()?;
        store.add(name, Tensor::new(shape, data)?)?;
    }
    let mut model = Model::new(config, kind, 0)?;
    if store.len() != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, a {kind} model has {}",
            store.len(),
            model.params.len()
        )));
    }
    model.load_params_from(&store)?;
    model.length_table = table;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(model, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}
