//! Binary parameter files: one JSON header line, then the values of
//! [`ModelParams::flatten`] as little-endian `f64`.
//!
//! ```text
//! {"format":"fedc2i-params-v1","activation":"tanh","layer_dims":[32,64,32],"classes":10,"hidden":32,"values":4522,"blocks":1}\n
//! <values * blocks * 8 bytes>
//! ```
//!
//! Optimizer checkpoints store three blocks (parameters, first moment,
//! second moment) and the Adam step in the header.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activation, Architecture, ModelParams, OptimizerState};

const FORMAT: &str = "fedc2i-params-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub activation: Activation,
    /// Input width followed by every representation layer width.
    pub layer_dims: Vec<usize>,
    pub classes: usize,
    /// Classifier input width `H`.
    pub hidden: usize,
    /// Values per block.
    pub values: usize,
    pub blocks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_step: Option<u64>,
}

impl Header {
    fn for_params(p: &ModelParams, blocks: usize, adam_step: Option<u64>) -> Self {
        let arch = p.architecture();
        let mut layer_dims = vec![arch.input_dim];
        layer_dims.extend(&arch.hidden);
        Header {
            format: FORMAT.into(),
            activation: arch.activation,
            layer_dims,
            classes: arch.classes,
            hidden: arch.feature_dim(),
            values: p.num_values(),
            blocks,
            adam_step,
        }
    }

    fn architecture(&self) -> Result<Architecture> {
        let (&input_dim, hidden) = self
            .layer_dims
            .split_first()
            .ok_or_else(|| Error::config("checkpoint header has no layer dims"))?;
        let arch = Architecture {
            input_dim,
            hidden: hidden.to_vec(),
            classes: self.classes,
            activation: self.activation,
        };
        if arch.feature_dim() != self.hidden {
            return Err(Error::config("checkpoint header hidden width mismatch"));
        }
        Ok(arch)
    }
}

fn encode(header: &Header, blocks: &[&ModelParams]) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    for p in blocks {
        for v in p.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(Header, Vec<ModelParams>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::config("checkpoint has no header line"))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])?;
    if header.format != FORMAT {
        return Err(Error::config(format!(
            "unknown checkpoint format `{}`",
            header.format
        )));
    }
    let arch = header.architecture()?;
    let body = &bytes[nl + 1..];
    if body.len() != header.values * header.blocks * 8 {
        return Err(Error::config(format!(
            "checkpoint body has {} bytes, header promises {}",
            body.len(),
            header.values * header.blocks * 8
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let blocks = values
        .chunks(header.values.max(1))
        .take(header.blocks)
        .map(|chunk| ModelParams::from_flat(&arch, chunk))
        .collect::<Result<Vec<_>>>()?;
    Ok((header, blocks))
}

pub fn encode_params(p: &ModelParams) -> Result<Vec<u8>> {
    encode(&Header::for_params(p, 1, None), &[p])
}

pub fn decode_params(bytes: &[u8]) -> Result<ModelParams> {
    let (header, mut blocks) = decode(bytes)?;
    if header.blocks != 1 {
        return Err(Error::config("expected a single-block parameter file"));
    }
    Ok(blocks.pop().unwrap())
}

pub fn write_params(p: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_params(p)?)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<ModelParams> {
    decode_params(&std::fs::read(path)?)
}

/// Parameters together with their Adam state.
pub fn write_client(p: &ModelParams, opt: &OptimizerState, path: &Path) -> Result<()> {
    let header = Header::for_params(p, 3, Some(opt.step));
    std::fs::write(
        path,
        encode(&header, &[p, &opt.first_moment, &opt.second_moment])?,
    )?;
    Ok(())
}

pub fn read_client(path: &Path) -> Result<(ModelParams, OptimizerState)> {
    let (header, blocks) = decode(&std::fs::read(path)?)?;
    let step = header
        .adam_step
        .ok_or_else(|| Error::config("client checkpoint lacks adam_step"))?;
    let [p, m, v]: [ModelParams; 3] = blocks
        .try_into()
        .map_err(|_| Error::config("client checkpoint must hold three blocks"))?;
    Ok((
        p,
        OptimizerState {
            first_moment: m,
            second_moment: v,
            step,
        },
    ))
}
