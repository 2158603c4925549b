//! Checkpoint layout (little-endian): the 12-byte magic `ASARS-CKPT-1`,
//! `u32` length + model config JSON, `u32` array count, then per array:
//! `u32` name length, name, `u8` learnable flag, `u32` rank, `u32` dims,
//! `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 12] = b"ASARS-CKPT-1";

pub fn write_checkpoint<W: Write>(w: &mut W, model: &Model<f32>) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    let json = serde_json::to_vec(&model.config)?;
    w.write_u32::<LE>(json.len() as u32)?;
    w.write_all(&json)?;
    w.write_u32::<LE>(model.params.len() as u32)?;
    for p in model.params.iter() {
        w.write_u32::<LE>(p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        w.write_u8(p.learnable as u8)?;
        let shape = p.tensor.shape();
        w.write_u32::<LE>(shape.len() as u32)?;
        for &d in shape {
            w.write_u32::<LE>(d as u32)?;
        }
        for &x in p.tensor.data() {
            w.write_f32::<LE>(x)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Model<f32>> {
    let mut magic = [0u8; 12];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for a checkpoint header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "incompatible checkpoint: expected magic {:?}, found {:?}",
            String::from_utf8_lossy(CHECKPOINT_MAGIC),
            String::from_utf8_lossy(&magic)
        )));
    }
    let n = r.read_u32::<LE>()? as usize;
    let mut json = vec![0u8; n];
    r.read_exact(&mut json)?;
    let config: ModelConfig = serde_json::from_slice(&json)?;
    config.validate()?;
    // The expected parameter layout for this config.
    let template = Model::<f32>::new(config.clone(), &vec![0.0; config.num_users], 0)?;

    let count = r.read_u32::<LE>()? as usize;
    if count != template.params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} arrays, config expects {}",
            template.params.len()
        )));
    }
    let mut params = ParamStore::new();
    for expected in template.params.iter() {
        let len = r.read_u32::<LE>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|e| Error::Format(format!("array name: {e}")))?;
        let learnable = r.read_u8()? != 0;
        let rank = r.read_u32::<LE>()? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u32::<LE>().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if name != expected.name
            || shape != expected.tensor.shape()
            || learnable != expected.learnable
        {
            return Err(Error::Format(format!(
                "array {name:?} {shape:?} does not match expected {:?} {:?}",
                expected.name,
                expected.tensor.shape()
            )));
        }
        let mut data = vec![0f32; shape.iter().product()];
        r.read_f32_into::<LE>(&mut data)?;
        params.insert(name, Tensor::new(shape, data)?, learnable)?;
    }
    Ok(Model { config, params })
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

/// Hex SHA-256 of the serialized checkpoint.
pub fn checkpoint_hash(model: &Model<f32>) -> Result<String> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model)?;
    Ok(hex::encode(Sha256::digest(&buf)))
}
