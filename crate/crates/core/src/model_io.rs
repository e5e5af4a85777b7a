//! Binary model container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PCNN"
//! 4       2     format version (u16 LE), currently 1
//! 6       2     input size S (u16 LE)
//! 8       2     layer count L (u16 LE)
//! 10      9·L   layer table: kind tag u8, inputs u32 LE, outputs u32 LE
//! ...           weight blobs, f32 LE, row-major, in layer order
//!               (conv: kernels [out,in,3,3] then bias [out];
//!                dense: weights [in,out] then bias [out])
//! ```
//!
//! Kind tags: 0 conv3x3, 1 relu, 2 maxpool2, 3 flatten, 4 dense, 5 softmax.

use std::path::Path;

use crate::error::{Error, ModelFormatError, Result};
use crate::network::{expected_specs, Layer, LayerKind, LayerSpec, Model};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PCNN";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 10;
pub const LAYER_ENTRY_BYTES: usize = 9;

pub fn encoded_len(model: &Model<f32>) -> usize {
    HEADER_BYTES + LAYER_ENTRY_BYTES * model.layers().len() + 4 * model.param_count()
}

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(model));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.input_size() as u16).to_le_bytes());
    out.extend_from_slice(&(model.layers().len() as u16).to_le_bytes());
    for spec in model.layer_specs() {
        out.push(spec.kind.tag());
        out.extend_from_slice(&(spec.inputs as u32).to_le_bytes());
        out.extend_from_slice(&(spec.outputs as u32).to_le_bytes());
    }
    for p in model.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Total length the file must have, once known.
    expected: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ModelFormatError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelFormatError::Truncated {
                expected: self.expected.max(self.pos + n),
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, ModelFormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<u32, ModelFormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, shape: &[usize]) -> std::result::Result<Tensor<f32>, ModelFormatError> {
        let n: usize = shape.iter().product();
        let raw = self.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::new(shape, data).expect("length matches shape"))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        expected: HEADER_BYTES,
    };
    let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(ModelFormatError::BadMagic(magic).into());
    }
    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(ModelFormatError::UnsupportedVersion(version).into());
    }
    let input_size = cur.u16()? as usize;
    let count = cur.u16()? as usize;
    cur.expected = HEADER_BYTES + LAYER_ENTRY_BYTES * count;

    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        let tag = cur.take(1)?[0];
        let kind = LayerKind::from_tag(tag)
            .ok_or_else(|| ModelFormatError::Architecture(format!("unknown layer tag {tag}")))?;
        specs.push(LayerSpec {
            kind,
            inputs: cur.u32()? as usize,
            outputs: cur.u32()? as usize,
        });
    }
    let expected = expected_specs(input_size).map_err(|e| ModelFormatError::Architecture(e.to_string()))?;
    if specs != expected {
        return Err(ModelFormatError::Architecture(format!(
            "layer table {specs:?} for input size {input_size}"
        ))
        .into());
    }
    let params: usize = specs
        .iter()
        .map(|s| match s.kind {
            LayerKind::Conv3x3 => s.outputs * s.inputs * 9 + s.outputs,
            LayerKind::Dense => s.inputs * s.outputs + s.outputs,
            _ => 0,
        })
        .sum();
    cur.expected += 4 * params;
    if bytes.len() < cur.expected {
        return Err(ModelFormatError::Truncated {
            expected: cur.expected,
            actual: bytes.len(),
        }
        .into());
    }
    if bytes.len() > cur.expected {
        return Err(ModelFormatError::TrailingBytes {
            actual: bytes.len() - cur.expected,
        }
        .into());
    }

    let mut layers = Vec::with_capacity(count);
    for s in &specs {
        layers.push(match s.kind {
            LayerKind::Conv3x3 => Layer::Conv {
                kernels: cur.f32s(&[s.outputs, s.inputs, 3, 3])?,
                bias: cur.f32s(&[s.outputs])?,
            },
            LayerKind::Dense => Layer::Dense {
                weights: cur.f32s(&[s.inputs, s.outputs])?,
                bias: cur.f32s(&[s.outputs])?,
            },
            LayerKind::Relu => Layer::Relu { channels: s.inputs },
            LayerKind::MaxPool2 => Layer::MaxPool2 { channels: s.inputs },
            LayerKind::Flatten => Layer::Flatten {
                channels: s.inputs,
                features: s.outputs,
            },
            LayerKind::Softmax => Layer::Softmax,
        });
    }
    Model::from_layers(input_size, layers)
}

/// Writes the model and returns the number of bytes written.
pub fn save_model(model: &Model<f32>, path: &Path) -> Result<usize> {
    if path.as_os_str().is_empty() {
        return Err(Error::Argument("empty model path".into()));
    }
    let bytes = to_bytes(model);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
