//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "RDRTCKPT"
//! version  u32
//! hlen     u32      length of the JSON header in bytes
//! header   hlen     {"head": HeadConfig, "data": DatasetConfig | null, "blocks": [{"name", "shape"}]}
//! values   f64 LE   every block in header order, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{Head, HeadConfig, ParamSet};
use crate::taskgen::DatasetConfig;

pub const MAGIC: &[u8; 8] = b"RDRTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    head: HeadConfig,
    data: Option<DatasetConfig>,
    blocks: Vec<BlockHeader>,
}

/// A head plus the dataset it was trained on, if recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub head: Head,
    pub data: Option<DatasetConfig>,
}

pub fn write_checkpoint<W: Write>(mut out: W, head: &Head, data: Option<&DatasetConfig>) -> Result<()> {
    let params = head.params();
    let header = Header {
        head: head.config().clone(),
        data: data.cloned(),
        blocks: (0..params.len())
            .map(|i| BlockHeader {
                name: params.names()[i].clone(),
                shape: params.shape(i).to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let hlen = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    out.write_all(&hlen.to_le_bytes())?;
    out.write_all(&json)?;
    for block in params.values() {
        for v in block {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input
        .read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated preamble".into()))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file shorter than the magic bytes".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    let hlen = read_u32(&mut input)? as usize;
    let mut json = vec![0u8; hlen];
    input
        .read_exact(&mut json)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    let mut params = ParamSet::new();
    let mut buf = [0u8; 8];
    for block in header.blocks {
        let n: usize = block.shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            input
                .read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("truncated values in block {}", block.name)))?;
            values.push(f64::from_le_bytes(buf));
        }
        params.push(block.name, block.shape, values)?;
    }
    if input.read(&mut buf)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after the last block".into()));
    }
    Ok(Checkpoint {
        head: Head::from_params(&header.head, params)?,
        data: header.data,
    })
}

pub fn save_checkpoint(path: &Path, head: &Head, data: Option<&DatasetConfig>) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), head, data)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
