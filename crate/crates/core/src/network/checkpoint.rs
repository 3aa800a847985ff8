//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `VAFFCKPT`, a little-endian `u32` format version,
//! a `u64` manifest length, the JSON manifest, then every tensor listed in
//! the manifest as little-endian `f32` in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::nn::Module;

const MAGIC: &[u8; 8] = b"VAFFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub network: NetworkConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form state stored alongside the weights (training progress).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the network. With `expected`, the stored architecture must
    /// agree on topology, feature width, input mode and cell size.
    pub fn network(&self, expected: Option<&NetworkConfig>) -> Result<Network> {
        let stored = &self.manifest.network;
        if let Some(e) = expected {
            let mismatch = |what: &str, a: String, b: String| {
                Err(Error::IncompatibleCheckpoint(format!("{what}: checkpoint has {a}, requested {b}")))
            };
            if stored.encoder.topology != e.encoder.topology {
                return mismatch("topology", format!("{:?}", stored.encoder.topology), format!("{:?}", e.encoder.topology));
            }
            if stored.encoder.n_ch != e.encoder.n_ch {
                return mismatch("n_ch", stored.encoder.n_ch.to_string(), e.encoder.n_ch.to_string());
            }
            if stored.encoder.input_mode != e.encoder.input_mode {
                return mismatch(
                    "input_mode",
                    stored.encoder.input_mode.name().into(),
                    e.encoder.input_mode.name().into(),
                );
            }
            if stored.cell_size != e.cell_size {
                return mismatch("cell_size", stored.cell_size.to_string(), e.cell_size.to_string());
            }
        }
        let mut net = Network::new(*stored, 0)?;
        let mut problem = None;
        net.visit_mut(&mut |p| match self.tensor(&p.name) {
            Some(t) if t.shape() == p.value.shape() => p.value.assign(t),
            Some(t) => {
                problem.get_or_insert(format!("{} has shape {:?}, expected {:?}", p.name, t.shape(), p.value.shape()));
            }
            None => {
                problem.get_or_insert(format!("missing tensor {}", p.name));
            }
        });
        match problem {
            Some(msg) => Err(Error::IncompatibleCheckpoint(msg)),
            None => Ok(net),
        }
    }
}

/// Writes the network's parameters and buffers followed by `extra_tensors`.
pub fn save_checkpoint(
    path: &Path,
    net: &Network,
    extra: serde_json::Value,
    extra_tensors: &[(String, ArrayD<f32>)],
) -> Result<()> {
    let mut tensors: Vec<(String, ArrayD<f32>)> = Vec::new();
    net.visit(&mut |p| tensors.push((p.name.clone(), p.value.clone())));
    tensors.extend(extra_tensors.iter().cloned());
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        network: *net.config(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        extra,
    };
    let json = serde_json::to_vec(&manifest)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    // Write to a sibling file first so an interrupted save never clobbers
    // the previous checkpoint.
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        for (_, t) in &tensors {
            for &v in t.iter() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::IncompatibleCheckpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let len = r.read_u64::<LittleEndian>()? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    if manifest.format_version != version {
        return Err(Error::IncompatibleCheckpoint("manifest version disagrees with header".into()));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        let t = ArrayD::from_shape_vec(IxDyn(&e.shape), data).expect("length matches shape");
        tensors.push((e.name.clone(), t));
    }
    Ok(Checkpoint { manifest, tensors })
}
