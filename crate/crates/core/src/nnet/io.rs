//! Flat binary parameter container: `PHMNET01`, a little-endian `u32` header
//! length, a JSON header, then the parameters as little-endian floats.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{InputShape, LayerSpec, Network};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"PHMNET01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub dtype: String,
    pub input: InputShape,
    pub specs: Vec<LayerSpec>,
    pub param_count: usize,
    /// Free-form provenance (seed, training configuration, feature variant).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn write_network<T: Scalar, W: Write>(net: &Network<T>, meta: serde_json::Value, mut w: W) -> Result<()> {
    let header = ContainerHeader {
        dtype: T::DTYPE.to_string(),
        input: net.input_shape(),
        specs: net.specs().to_vec(),
        param_count: net.param_count(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for p in net.params() {
        match T::DTYPE {
            "f32" => w.write_all(&(p.as_f64() as f32).to_le_bytes())?,
            _ => w.write_all(&p.as_f64().to_le_bytes())?,
        }
    }
    Ok(())
}

pub fn read_network<T: Scalar, R: Read>(mut r: R) -> Result<(Network<T>, ContainerHeader)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Config("not a network container".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: ContainerHeader = serde_json::from_slice(&json)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Config(format!("container holds {}, requested {}", header.dtype, T::DTYPE)));
    }
    let mut net = Network::<T>::new(header.input, header.specs.clone())?;
    if net.param_count() != header.param_count {
        return Err(Error::Shape("parameter count does not match layer chain".into()));
    }
    for p in net.params_mut() {
        *p = match T::DTYPE {
            "f32" => {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                T::lit(f32::from_le_bytes(b) as f64)
            }
            _ => {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                T::lit(f64::from_le_bytes(b))
            }
        };
    }
    Ok((net, header))
}
