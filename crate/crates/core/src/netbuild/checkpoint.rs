//! Checkpoint files: one `ArchConfig` line terminated by `\n`, then for every
//! parameter in registry order a `u32` LE name length, the UTF-8 name, and an
//! NDT1 tensor record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{NetError, NetGraph, ParamStore, Result};
use crate::shapes::ArchConfig;
use crate::tensor::{read_ndt_from, write_ndt_to, Scalar, Tensor};

// Longest accepted config line / parameter name.
const MAX_HEADER: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ArchConfig,
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Checks names, order and shapes against `graph` and returns the store.
    pub fn into_params(self, graph: &NetGraph) -> Result<ParamStore<f32>> {
        if self.config != graph.config {
            return Err(NetError::Checkpoint(format!(
                "checkpoint config `{}` differs from `{}`",
                self.config.to_line(),
                graph.config.to_line()
            )));
        }
        if self.entries.len() != graph.params.len() {
            return Err(NetError::Checkpoint(format!(
                "{} tensors, graph has {} parameters",
                self.entries.len(),
                graph.params.len()
            )));
        }
        let mut tensors = Vec::with_capacity(self.entries.len());
        for ((name, t), spec) in self.entries.into_iter().zip(&graph.params) {
            if name != spec.name || t.shape() != spec.shape.as_slice() {
                return Err(NetError::Checkpoint(format!(
                    "entry `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            tensors.push(t);
        }
        Ok(ParamStore { tensors })
    }
}

pub fn write_checkpoint<T: Scalar, W: Write>(w: &mut W, graph: &NetGraph, params: &ParamStore<T>) -> Result<()> {
    w.write_all(graph.config.to_line().as_bytes())?;
    w.write_all(b"\n")?;
    for (spec, t) in graph.params.iter().zip(&params.tensors) {
        w.write_all(&(spec.name.len() as u32).to_le_bytes())?;
        w.write_all(spec.name.as_bytes())?;
        write_ndt_to(w, t)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > MAX_HEADER {
            return Err(NetError::Checkpoint("header line too long".into()));
        }
    }
    let line = String::from_utf8(line).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    let config = ArchConfig::from_line(&line).map_err(NetError::Checkpoint)?;

    let mut entries = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match r.read(&mut len[..1])? {
            0 => break,
            _ => r.read_exact(&mut len[1..])?,
        }
        let len = u32::from_le_bytes(len) as usize;
        if len > MAX_HEADER {
            return Err(NetError::Checkpoint(format!("name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        let t = read_ndt_from(r)?.ok_or_else(|| NetError::Checkpoint(format!("missing tensor for `{name}`")))?;
        entries.push((name, t));
    }
    Ok(Checkpoint { config, entries })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, graph: &NetGraph, params: &ParamStore<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, graph, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
