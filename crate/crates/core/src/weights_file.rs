//! Binary weights file.
//!
//! Little-endian, no padding:
//!
//! ```text
//! magic        8 bytes  "PECAS001"
//! name_len     u16
//! name         name_len bytes of UTF-8 ("pedestrian" or "eye")
//! records      u16      number of parameter records
//! per record:
//!   kind       u8       1 conv kernel, 2 conv bias, 3 dense weight, 4 dense bias
//!   rank       u8
//!   dims       rank x u32
//!   values     prod(dims) x f64, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LayerSpec, ModelSpec, ModelWeights};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PECAS001";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RecordKind {
    ConvKernel = 1,
    ConvBias = 2,
    DenseWeight = 3,
    DenseBias = 4,
}

impl RecordKind {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => RecordKind::ConvKernel,
            2 => RecordKind::ConvBias,
            3 => RecordKind::DenseWeight,
            4 => RecordKind::DenseBias,
            _ => return None,
        })
    }
}

fn record_kinds(spec: &ModelSpec) -> Vec<RecordKind> {
    let mut kinds = Vec::new();
    for layer in spec.layers() {
        match layer {
            LayerSpec::Conv { .. } => kinds.extend([RecordKind::ConvKernel, RecordKind::ConvBias]),
            LayerSpec::Dense { .. } => kinds.extend([RecordKind::DenseWeight, RecordKind::DenseBias]),
            _ => {}
        }
    }
    kinds
}

pub fn encode_model(weights: &ModelWeights) -> Result<Vec<u8>> {
    let name = weights.spec().name().as_bytes();
    let name_len = u16::try_from(name.len()).map_err(|_| Error::format("name", "longer than 65535 bytes"))?;
    let kinds = record_kinds(weights.spec());
    let count = u16::try_from(kinds.len()).map_err(|_| Error::format("record count", "too many records"))?;

    let mut out = Vec::with_capacity(32 + weights.params().iter().map(|p| p.len() * 8 + 16).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name);
    out.extend_from_slice(&count.to_le_bytes());
    for (kind, param) in kinds.iter().zip(weights.params()) {
        out.push(*kind as u8);
        out.push(param.rank() as u8);
        for &d in param.shape() {
            let d = u32::try_from(d).map_err(|_| Error::format("dims", "dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in param.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_model(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(weights)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                field,
                format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            )
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

/// Parses and validates a weights file image. Nothing is returned unless
/// the whole buffer is well-formed.
pub fn decode_model(bytes: &[u8]) -> Result<ModelWeights> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::format("magic", "not a PECAS001 weights file"));
    }
    let name_len = r.u16("name length")? as usize;
    let name = std::str::from_utf8(r.take(name_len, "name")?).map_err(|_| Error::format("name", "invalid UTF-8"))?;
    let spec = ModelSpec::by_name(name).ok_or_else(|| Error::format("name", format!("unknown model `{name}`")))?;
    let kinds = record_kinds(&spec);
    let shapes = spec.param_shapes();
    let count = r.u16("record count")? as usize;
    if count != kinds.len() {
        return Err(Error::format(
            "record count",
            format!("`{name}` model has {} records, file declares {count}", kinds.len()),
        ));
    }
    let mut params = Vec::with_capacity(count);
    for (i, (kind, shape)) in kinds.iter().zip(&shapes).enumerate() {
        let raw_kind = r.u8(&format!("record {i} kind"))?;
        if RecordKind::from_u8(raw_kind) != Some(*kind) {
            return Err(Error::format(format!("record {i} kind"), format!("expected {kind:?}, found {raw_kind}")));
        }
        let rank = r.u8(&format!("record {i} rank"))? as usize;
        let dims_field = format!("record {i} dims");
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&dims_field)? as usize);
        }
        if dims != *shape {
            return Err(Error::format(dims_field, format!("shape {dims:?} inconsistent with the architecture shape {shape:?}")));
        }
        let values_field = format!("record {i} values");
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8, &values_field)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(dims, data).map_err(|e| Error::format(&values_field, e.to_string()))?;
        params.push(tensor);
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes", format!("{} unexpected bytes after last record", bytes.len() - r.pos)));
    }
    ModelWeights::new(spec, params)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

/// Loads a model and checks that it is the named architecture.
pub fn load_model_expecting(path: impl AsRef<Path>, name: &str) -> Result<ModelWeights> {
    let weights = load_model(path)?;
    weights.expect_model(name)?;
    Ok(weights)
}
