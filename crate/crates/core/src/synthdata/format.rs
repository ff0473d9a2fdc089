//! `PKDS` dataset files, little-endian:
//!
//! ```text
//! "PKDS" | version u32 | spec_len u32 | spec (TOML) | count u32 | count × record
//! record = id u64 | patches × patch_dim f64 | max_tokens × u32 | label u8 | meta_len u32 | meta
//! ```

use std::io::{Read, Write};

use super::{Dataset, Example, GenSpec, SceneMeta};
use crate::encoder::checkpoint::{read_f64s, read_u32, write_f64s, write_u32};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"PKDS";
pub const DATASET_VERSION: u32 = 1;
const MAX_SPEC: usize = 1 << 16;
const MAX_META: usize = 1 << 10;

pub fn write_dataset(w: &mut impl Write, data: &Dataset) -> Result<()> {
    let spec = toml::to_string(&data.spec).map_err(|e| Error::format(format!("cannot encode spec: {e}")))?;
    w.write_all(DATASET_MAGIC)?;
    write_u32(w, DATASET_VERSION as usize)?;
    write_u32(w, spec.len())?;
    w.write_all(spec.as_bytes())?;
    write_u32(w, data.examples.len())?;
    let mut buf = Vec::new();
    for ex in &data.examples {
        buf.clear();
        buf.extend_from_slice(&ex.id.to_le_bytes());
        write_f64s(&mut buf, &ex.patches)?;
        for &t in &ex.tokens {
            write_u32(&mut buf, t)?;
        }
        buf.push(u8::try_from(ex.label).map_err(|_| Error::format(format!("label {}", ex.label)))?);
        let meta = ex.meta.to_bytes();
        write_u32(&mut buf, meta.len())?;
        buf.extend_from_slice(&meta);
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("file too short for a dataset header"))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::format(format!("bad dataset magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != DATASET_VERSION as usize {
        return Err(Error::format(format!("unsupported dataset version {version}")));
    }
    let spec_len = read_u32(r)?;
    if spec_len > MAX_SPEC {
        return Err(Error::format(format!("spec of {spec_len} bytes")));
    }
    let mut spec = vec![0u8; spec_len];
    r.read_exact(&mut spec)?;
    let spec = String::from_utf8(spec).map_err(|_| Error::format("spec is not UTF-8"))?;
    let spec: GenSpec = toml::from_str(&spec).map_err(|e| Error::format(format!("bad spec echo: {e}")))?;
    spec.validate().map_err(|e| Error::format(e.to_string()))?;
    let count = read_u32(r)?;
    if count != spec.n_examples + spec.n_test {
        return Err(Error::format(format!(
            "{count} records but the spec describes {}",
            spec.n_examples + spec.n_test
        )));
    }
    let per = spec.patches * spec.patch_dim;
    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut id = [0u8; 8];
        r.read_exact(&mut id)?;
        let id = u64::from_le_bytes(id);
        let patches = read_f64s(r, per)?;
        let tokens = (0..spec.max_tokens).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
        if let Some(t) = tokens.iter().find(|&&t| t >= spec.vocab) {
            return Err(Error::format(format!("example {id}: token {t} outside vocab {}", spec.vocab)));
        }
        let mut label = [0u8; 1];
        r.read_exact(&mut label)?;
        if label[0] > 1 {
            return Err(Error::format(format!("example {id}: label {}", label[0])));
        }
        let meta_len = read_u32(r)?;
        if meta_len > MAX_META {
            return Err(Error::format(format!("example {id}: {meta_len} metadata bytes")));
        }
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        examples.push(Example {
            id,
            patches,
            tokens,
            label: label[0] as usize,
            meta: SceneMeta::from_bytes(&meta)?,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after last record"));
    }
    Ok(Dataset { spec, examples })
}
