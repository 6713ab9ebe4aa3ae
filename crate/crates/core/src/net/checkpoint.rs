//! Binary checkpoint format.
//!
//! ```text
//! "SOSC" | u32 version | u32 header length | header JSON
//! then per tensor: u32 name length | name | u32 rank | u32 dims[rank] | f32 data (LE)
//! ```
//! All integers are little-endian. Tensors appear in layer order, each
//! layer's weight (rank 4) before its bias (rank 1).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ConvLayer, DetectorModel, ModelConfig, PRNG_NAME};
use super::tensor::Tensor;
use super::NetError;

pub const MAGIC: &[u8; 4] = b"SOSC";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    init_seed: u64,
    prng: String,
}

pub fn checkpoint_bytes(model: &DetectorModel) -> Vec<u8> {
    let header = Header {
        model: model.config.clone(),
        init_seed: model.init_seed,
        prng: PRNG_NAME.to_string(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + model.parameter_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for layer in &model.layers {
        let shape = layer.weight.shape();
        write_tensor(&mut out, &format!("{}.weight", layer.name), &shape, layer.weight.data());
        write_tensor(&mut out, &format!("{}.bias", layer.name), &[layer.bias.len()], &layer.bias);
    }
    out
}

fn write_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.pos.checked_add(n).ok_or(NetError::Truncated)?;
        let slice = self.bytes.get(self.pos..end).ok_or(NetError::Truncated)?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<DetectorModel, NetError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| NetError::BadMagic)? != MAGIC {
        return Err(NetError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NetError::Version(version));
    }
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| NetError::Header(e.to_string()))?;
    if header.prng != PRNG_NAME {
        return Err(NetError::Header(format!("unknown generator `{}`", header.prng)));
    }
    header.model.validate().map_err(NetError::Header)?;

    let mut layers = Vec::new();
    for (name, shape) in header.model.layer_shapes() {
        let weight = read_tensor(&mut r, &format!("{name}.weight"), &shape)?;
        let bias = read_tensor(&mut r, &format!("{name}.bias"), &[shape[0]])?;
        layers.push(ConvLayer {
            name,
            weight: Tensor::from_vec(shape, weight)?,
            bias,
        });
    }
    if r.pos != bytes.len() {
        return Err(NetError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(DetectorModel {
        config: header.model,
        init_seed: header.init_seed,
        layers,
    })
}

fn read_tensor(r: &mut Reader<'_>, expected_name: &str, expected_dims: &[usize]) -> Result<Vec<f32>, NetError> {
    let name_len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| NetError::Header("tensor name is not UTF-8".into()))?;
    if name != expected_name {
        return Err(NetError::MissingTensor {
            expected: expected_name.to_string(),
            found: name.to_string(),
        });
    }
    let rank = r.u32()? as usize;
    let dims = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    if dims != expected_dims {
        return Err(NetError::TensorShape {
            name: name.to_string(),
            expected: expected_dims.to_vec(),
            found: dims,
        });
    }
    let count: usize = dims.iter().product();
    let raw = r.take(count * 4)?;
    Ok(raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn save_checkpoint(model: &DetectorModel, path: &Path) -> Result<(), NetError> {
    std::fs::write(path, checkpoint_bytes(model)).map_err(|e| NetError::Io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<DetectorModel, NetError> {
    let bytes = std::fs::read(path).map_err(|e| NetError::Io(path.display().to_string(), e))?;
    checkpoint_from_bytes(&bytes)
}
