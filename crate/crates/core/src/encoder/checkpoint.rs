//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "PEKD" | version u32 | count u32 | count × block
//! block = name_len u32 | name (UTF-8) | rank u32 | rank × dim u32 | f64 payload
//! ```
//!
//! Besides the parameter tensors a checkpoint carries a `meta/encoder` block
//! with the encoder dimensions and, for PEFT students, a `peft/meta/<variant>`
//! block with the attachment config, so a model can be rebuilt from the file
//! alone.

use std::io::{Read, Write};

use super::{DualEncoderModel, EncoderConfig};
use crate::error::{Error, Result};
use crate::peft::{self, AdapterConfig, LoraConfig, PeftVariant, PromptConfig};

pub const MAGIC: &[u8; 4] = b"PEKD";
pub const VERSION: u32 = 1;
const ENCODER_META: &str = "meta/encoder";
const PEFT_META: &str = "peft/meta/";
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

/// One named block of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

pub(crate) fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub(crate) fn write_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 8);
    v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_blocks(w: &mut impl Write, blocks: &[Block]) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION as usize)?;
    write_u32(w, blocks.len())?;
    for b in blocks {
        if b.dims.iter().product::<usize>() != b.values.len() {
            return Err(Error::format(format!("block {} has dims {:?} but {} values", b.name, b.dims, b.values.len())));
        }
        write_u32(w, b.name.len())?;
        w.write_all(b.name.as_bytes())?;
        write_u32(w, b.dims.len())?;
        for &d in &b.dims {
            write_u32(w, d)?;
        }
        write_f64s(w, &b.values)?;
    }
    Ok(())
}

pub fn read_blocks(r: &mut impl Read) -> Result<Vec<Block>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("file too short for a checkpoint header"))?;
    if &magic != MAGIC {
        return Err(Error::format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION as usize {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(r)?;
    let mut blocks = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(r)?;
        if len > MAX_NAME {
            return Err(Error::format(format!("block name of {len} bytes")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("block name is not UTF-8"))?;
        let rank = read_u32(r)?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(format!("block {name} has rank {rank}")));
        }
        let dims = (0..rank).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n < (1 << 31))
            .ok_or_else(|| Error::format(format!("block {name} has dims {dims:?}")))?;
        let values = read_f64s(r, n)?;
        blocks.push(Block { name, dims, values });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after last block"));
    }
    Ok(blocks)
}

fn encoder_meta(cfg: &EncoderConfig) -> Block {
    let values = [
        cfg.layers,
        cfg.vision_width,
        cfg.text_width,
        cfg.embed_dim,
        cfg.heads,
        cfg.patches,
        cfg.max_tokens,
        cfg.vocab,
        cfg.classes,
        cfg.mlp_ratio,
    ]
    .iter()
    .map(|&v| v as f64)
    .collect::<Vec<_>>();
    Block {
        name: ENCODER_META.into(),
        dims: vec![values.len()],
        values,
    }
}

fn decode_encoder_meta(b: &Block) -> Result<EncoderConfig> {
    let v: Vec<usize> = b.values.iter().map(|&x| x as usize).collect();
    let [layers, vision_width, text_width, embed_dim, heads, patches, max_tokens, vocab, classes, mlp_ratio] =
        v[..]
    else {
        return Err(Error::format(format!("{ENCODER_META} holds {} values", v.len())));
    };
    Ok(EncoderConfig {
        layers,
        vision_width,
        text_width,
        embed_dim,
        heads,
        patches,
        max_tokens,
        vocab,
        classes,
        mlp_ratio,
    })
}

fn peft_meta(variant: &PeftVariant) -> Block {
    let values = match variant {
        PeftVariant::Adapter(c) => vec![c.bottleneck as f64],
        PeftVariant::Prompt(c) => vec![c.length as f64],
        PeftVariant::Lora(c) => vec![c.rank as f64, c.gamma()],
    };
    Block {
        name: format!("{PEFT_META}{}", variant.tag()),
        dims: vec![values.len()],
        values,
    }
}

fn decode_peft_meta(b: &Block) -> Result<PeftVariant> {
    let tag = &b.name[PEFT_META.len()..];
    let v = &b.values;
    Ok(match (tag, v.len()) {
        ("adapter", 1) => PeftVariant::Adapter(AdapterConfig {
            bottleneck: v[0] as usize,
        }),
        ("prompt", 1) => PeftVariant::Prompt(PromptConfig { length: v[0] as usize }),
        ("lora", 2) => PeftVariant::Lora(LoraConfig {
            rank: v[0] as usize,
            gamma: Some(v[1]),
        }),
        _ => return Err(Error::format(format!("unrecognised PEFT metadata block {}", b.name))),
    })
}

impl DualEncoderModel {
    pub fn to_blocks(&self) -> Vec<Block> {
        let mut blocks = vec![encoder_meta(&self.config)];
        if let Some(p) = &self.peft {
            blocks.push(peft_meta(&p.variant));
        }
        blocks.extend(self.store.iter().map(|(_, name, t)| Block {
            name: name.to_string(),
            dims: t.shape().to_vec(),
            values: t.values().to_vec(),
        }));
        blocks
    }

    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        write_blocks(w, &self.to_blocks())
    }

    /// Rebuild a model from blocks. When `expected` is given the stored
    /// dimensions must match it; every tensor shape is checked either way.
    pub fn from_blocks(blocks: Vec<Block>, expected: Option<&EncoderConfig>) -> Result<Self> {
        let meta = blocks
            .iter()
            .find(|b| b.name == ENCODER_META)
            .ok_or_else(|| Error::format(format!("checkpoint lacks {ENCODER_META}")))?;
        let cfg = decode_encoder_meta(meta)?;
        if let Some(e) = expected {
            if *e != cfg {
                return Err(Error::format(format!(
                    "checkpoint encoder {cfg:?} does not match configured {e:?}"
                )));
            }
        }
        let mut model = DualEncoderModel::new(cfg, 0).map_err(|e| Error::format(e.to_string()))?;
        let peft_blocks: Vec<_> = blocks.iter().filter(|b| b.name.starts_with(PEFT_META)).collect();
        match peft_blocks.as_slice() {
            [] => {}
            [one] => {
                let variant = decode_peft_meta(one)?;
                peft::attach(&mut model, variant, 0)?;
            }
            _ => return Err(Error::format("checkpoint carries more than one PEFT attachment")),
        }
        let mut filled = vec![false; model.store.len()];
        for b in blocks {
            if b.name == ENCODER_META || b.name.starts_with(PEFT_META) {
                continue;
            }
            let id = model
                .store
                .id(&b.name)
                .ok_or_else(|| Error::format(format!("unexpected tensor {}", b.name)))?;
            let t = model.store.get_mut(id);
            if t.shape() != b.dims.as_slice() {
                return Err(Error::format(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    b.name,
                    b.dims,
                    t.shape()
                )));
            }
            if filled[id.0] {
                return Err(Error::format(format!("tensor {} appears twice", b.name)));
            }
            t.values_mut().copy_from_slice(&b.values);
            filled[id.0] = true;
        }
        if let Some(missing) = filled.iter().position(|f| !f) {
            let id = model.store.ids().nth(missing).expect("in range");
            return Err(Error::format(format!("checkpoint lacks tensor {}", model.store.name(id))));
        }
        Ok(model)
    }

    pub fn load(r: &mut impl Read, expected: Option<&EncoderConfig>) -> Result<Self> {
        Self::from_blocks(read_blocks(r)?, expected)
    }
}
