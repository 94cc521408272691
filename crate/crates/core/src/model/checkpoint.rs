//! Binary checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic     8 bytes  "GCNPCKPT"
//! version   u32      1
//! users     u64      M
//! items     u64      N
//! dim       u64      d
//! layers    u64      L
//! weights   f64 x (L+1)
//! seed      u64
//! epochs    u64
//! lr        f64
//! l2        f64
//! batch     u64
//! init_std  f64
//! users     f32 x M*d   row-major
//! items     f32 x N*d   row-major
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{EmbeddingTable, ModelConfig, TrainedModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GCNPCKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut out: W, model: &TrainedModel) -> std::io::Result<()> {
    let cfg = &model.config;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for v in [
        model.num_users(),
        model.num_items(),
        cfg.embed_dim,
        cfg.num_layers,
    ] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    for w in &cfg.layer_weights {
        out.write_all(&w.to_le_bytes())?;
    }
    out.write_all(&cfg.seed.to_le_bytes())?;
    out.write_all(&(cfg.epochs as u64).to_le_bytes())?;
    out.write_all(&cfg.learning_rate.to_le_bytes())?;
    out.write_all(&cfg.l2_reg.to_le_bytes())?;
    out.write_all(&(cfg.batch_size as u64).to_le_bytes())?;
    out.write_all(&cfg.init_std.to_le_bytes())?;
    for table in [&model.embeddings.users, &model.embeddings.items] {
        for v in table.iter() {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    out.flush()
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflow".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn table(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f32::from_le_bytes(self.bytes()?) as f64);
        }
        Ok(Array2::from_shape_vec((rows, cols), data).unwrap())
    }
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<TrainedModel> {
    let mut cur = Cursor { inner: input };
    if &cur.bytes::<8>()? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.bytes()?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let num_users = cur.usize()?;
    let num_items = cur.usize()?;
    let embed_dim = cur.usize()?;
    let num_layers = cur.usize()?;
    let layer_weights = (0..=num_layers)
        .map(|_| cur.f64())
        .collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        num_layers,
        embed_dim,
        layer_weights,
        seed: cur.u64()?,
        epochs: cur.usize()?,
        learning_rate: cur.f64()?,
        l2_reg: cur.f64()?,
        batch_size: cur.usize()?,
        init_std: cur.f64()?,
    };
    let users = cur.table(num_users, embed_dim)?;
    let items = cur.table(num_items, embed_dim)?;
    let mut trailing = [0u8; 1];
    if cur
        .inner
        .read(&mut trailing)
        .map_err(|e| Error::Checkpoint(e.to_string()))?
        != 0
    {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    TrainedModel::new(config, EmbeddingTable { users, items })
}

/// Writes the model. Embeddings are stored as `f32`.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &TrainedModel) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), model).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
