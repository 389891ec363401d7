//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "LTLMCKPT"
//! version      u32      currently 1
//! config       u32 byte length, then UTF-8 `key=value` lines (ModelConfig::to_kv)
//! vocabulary   u32 token count (0 = none), then per token: u32 length + UTF-8 bytes
//! parameters   u32 count, then per parameter:
//!                u32 name length + UTF-8 name
//!                u32 rank, then rank × u64 extents
//!                product(extents) × f64 values, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{LightTransformerLm, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LTLMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A loaded model and the vocabulary stored next to it, if any.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: LightTransformerLm,
    pub vocab: Option<Vec<String>>,
}

pub fn save_checkpoint(path: &Path, model: &LightTransformerLm, vocab: Option<&[String]>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_bytes(&mut out, model.config().to_kv().as_bytes())?;
    let tokens = vocab.unwrap_or(&[]);
    write_len(&mut out, tokens.len())?;
    for token in tokens {
        write_bytes(&mut out, token.as_bytes())?;
    }
    let params = model.parameters();
    write_len(&mut out, params.len())?;
    for p in &params {
        write_bytes(&mut out, p.name.as_bytes())?;
        write_len(&mut out, p.value.shape().len())?;
        for &extent in p.value.shape() {
            out.write_all(&(extent as u64).to_le_bytes())?;
        }
        for v in p.value.data().iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Loads a checkpoint. With `expected`, the stored config must match it
/// exactly; any difference is an error that names the first mismatching key.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let fail = |msg: String| Error::Checkpoint { path: PathBuf::from(path), msg };
    let mut input = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| fail("file too short".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let config_text =
        String::from_utf8(read_bytes(&mut input)?).map_err(|_| fail("config is not UTF-8".into()))?;
    let config = ModelConfig::from_kv(&config_text).map_err(|e| fail(e.to_string()))?;
    if let Some(expected) = expected {
        if &config != expected {
            let ours = config.to_kv();
            let theirs = expected.to_kv();
            let diff = ours
                .lines()
                .zip(theirs.lines())
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("stored {a}, expected {b}"))
                .unwrap_or_default();
            return Err(fail(format!("config mismatch: {diff}")));
        }
    }

    let vocab_len = read_u32(&mut input)? as usize;
    let mut vocab = Vec::with_capacity(vocab_len);
    for _ in 0..vocab_len {
        vocab.push(
            String::from_utf8(read_bytes(&mut input)?)
                .map_err(|_| fail("vocabulary token is not UTF-8".into()))?,
        );
    }
    if vocab_len > 0 && vocab_len != config.vocab_size {
        return Err(fail(format!(
            "stored vocabulary has {vocab_len} tokens but the model expects {}",
            config.vocab_size
        )));
    }

    let model = LightTransformerLm::new(config)?;
    let params = model.parameters();
    let count = read_u32(&mut input)? as usize;
    if count != params.len() {
        return Err(fail(format!("{count} parameters stored, model has {}", params.len())));
    }
    for p in &params {
        let name = String::from_utf8(read_bytes(&mut input)?)
            .map_err(|_| fail("parameter name is not UTF-8".into()))?;
        if name != p.name {
            return Err(fail(format!("expected parameter {}, found {name}", p.name)));
        }
        let rank = read_u32(&mut input)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut buf = [0u8; 8];
            input.read_exact(&mut buf)?;
            shape.push(u64::from_le_bytes(buf) as usize);
        }
        if shape != p.value.shape() {
            return Err(fail(format!(
                "parameter {name} has shape {shape:?}, model expects {:?}",
                p.value.shape()
            )));
        }
        let mut data = p.value.data_mut()?;
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            input.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(fail("trailing bytes after the last parameter".into()));
    }
    Ok(Checkpoint { model, vocab: (vocab_len > 0).then_some(vocab) })
}

fn write_len<W: Write>(out: &mut W, len: usize) -> Result<()> {
    let len = u32::try_from(len).map_err(|_| Error::contract("checkpoint", "section too large"))?;
    out.write_all(&len.to_le_bytes())?;
    Ok(())
}

fn write_bytes<W: Write>(out: &mut W, bytes: &[u8]) -> Result<()> {
    write_len(out, bytes.len())?;
    out.write_all(bytes)?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_bytes<R: Read>(input: &mut R) -> Result<Vec<u8>> {
    let len = read_u32(input)? as usize;
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf)?;
    Ok(buf)
}
