//! Activation dumps stored in the checkpoint block container.

use std::io::{Read, Write};

use pekd::analysiskit::{ActivationDump, Matrix};
use pekd::encoder::checkpoint::{read_blocks, write_blocks, Block};
use pekd::{Error, Result};

const IDS: &str = "dump/ids";
const TAG: &str = "dump/tag/";

pub fn write_dump(w: &mut impl Write, d: &ActivationDump) -> Result<()> {
    let mut blocks = vec![
        Block {
            name: format!("{TAG}{}", d.tag),
            dims: vec![1],
            values: vec![0.0],
        },
        Block {
            name: IDS.into(),
            dims: vec![d.ids.len()],
            values: d.ids.iter().map(|&i| i as f64).collect(),
        },
    ];
    for (branch, layers) in [("vision", &d.vision), ("text", &d.text)] {
        for (l, m) in layers.iter().enumerate() {
            blocks.push(Block {
                name: format!("dump/{branch}/{l}"),
                dims: vec![m.rows, m.cols],
                values: m.values.clone(),
            });
        }
    }
    write_blocks(w, &blocks)
}

pub fn read_dump(r: &mut impl Read) -> Result<ActivationDump> {
    let blocks = read_blocks(r)?;
    let mut tag = None;
    let mut ids = None;
    let mut vision = Vec::new();
    let mut text = Vec::new();
    for b in blocks {
        if let Some(t) = b.name.strip_prefix(TAG) {
            tag = Some(t.to_string());
        } else if b.name == IDS {
            ids = Some(b.values.iter().map(|&v| v as u64).collect::<Vec<_>>());
        } else {
            let parts: Vec<&str> = b.name.split('/').collect();
            let [_, branch, layer] = parts.as_slice() else {
                return Err(Error::Format(format!("unexpected dump block {}", b.name)));
            };
            let layer: usize = layer.parse().map_err(|_| Error::Format(format!("bad layer in {}", b.name)))?;
            let [rows, cols] = *b.dims.as_slice() else {
                return Err(Error::Format(format!("dump block {} is not a matrix", b.name)));
            };
            let target = match *branch {
                "vision" => &mut vision,
                "text" => &mut text,
                _ => return Err(Error::Format(format!("unexpected dump block {}", b.name))),
            };
            if layer != target.len() {
                return Err(Error::Format(format!("dump layers out of order at {}", b.name)));
            }
            target.push(Matrix::new(rows, cols, b.values)?);
        }
    }
    let ids = ids.ok_or_else(|| Error::Format("dump lacks example ids".into()))?;
    if vision.iter().chain(&text).any(|m| m.rows != ids.len()) {
        return Err(Error::Format("dump matrices disagree with the id count".into()));
    }
    Ok(ActivationDump {
        tag: tag.unwrap_or_default(),
        ids,
        vision,
        text,
    })
}
