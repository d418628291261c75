//! Model checkpoints.
//!
//! ```text
//! magic "XVCK" | u32 version | u64 header length | header (JSON ModelConfig)
//! u32 section count
//! per section: u32 name length | name | u32 ndim | u64 dims… | f64 data…
//! ```
//!
//! Integers and floats are little-endian; parameters are stored as f64, so a
//! save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"XVCK";
pub const VERSION: u32 = 1;

pub fn encode_model(params: &ModelParams) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(params.config())
        .map_err(|e| Error::Config(format!("cannot serialise model config: {e}")))?;
    let mut out = Vec::with_capacity(64 + header.len() + 8 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for (name, t) in params.named() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint {
                section: section.to_string(),
                message: format!("truncated at byte {}", self.bytes.len()),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, section: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, section: &str) -> Result<usize> {
        usize::try_from(self.u64(section)?).map_err(|_| Error::Checkpoint {
            section: section.to_string(),
            message: "length overflows".into(),
        })
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "header")? != MAGIC {
        return Err(Error::Checkpoint {
            section: "header".into(),
            message: "bad magic".into(),
        });
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(Error::Checkpoint {
            section: "header".into(),
            message: format!("unsupported version {version} (expected {VERSION})"),
        });
    }
    let header_len = r.len("header")?;
    let header = r.take(header_len, "header")?;
    let config: ModelConfig = serde_json::from_slice(header).map_err(|e| Error::Checkpoint {
        section: "header".into(),
        message: format!("invalid model config: {e}"),
    })?;
    let count = r.u32("header")? as usize;
    let mut named = Vec::with_capacity(count);
    for i in 0..count {
        let placeholder = format!("#{i}");
        let name_len = r.u32(&placeholder)? as usize;
        let name = String::from_utf8(r.take(name_len, &placeholder)?.to_vec()).map_err(|_| Error::Checkpoint {
            section: placeholder.clone(),
            message: "section name is not UTF-8".into(),
        })?;
        let ndim = r.u32(&name)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.len(&name)?);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.saturating_mul(8), &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint {
            section: name.clone(),
            message: e.to_string(),
        })?;
        named.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint {
            section: "trailer".into(),
            message: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        });
    }
    ModelParams::from_tensors(config, named)
}

pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    let bytes = encode_model(params)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pooling::Pooling;

    fn params() -> ModelParams {
        let cfg = ModelConfig::desk(3, 4, 2, 3, 2, Pooling::XIVECTOR).unwrap();
        let mut p = ModelParams::init(cfg, 21);
        let slot = p.layout().prior.unwrap();
        p.tensor_mut(slot.log_precision).data_mut()[1] = -1.0 / 3.0;
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let back = decode_model(&encode_model(&p).unwrap()).unwrap();
        assert_eq!(back.config(), p.config());
        for (a, b) in p.tensors().iter().zip(back.tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncated_section_is_named() {
        let bytes = encode_model(&params()).unwrap();
        match decode_model(&bytes[..bytes.len() - 3]).unwrap_err() {
            Error::Checkpoint { section, .. } => assert_eq!(section, "decoder.output.bias"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = encode_model(&params()).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode_model(&bytes),
            Err(Error::Checkpoint { ref section, .. }) if section == "header"
        ));
        bytes[0] = b'Z';
        assert!(decode_model(&bytes).is_err());
        assert!(decode_model(&[]).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = params();
        let mut other_cfg = p.config().clone();
        other_cfg.decoder.embedding_dim = 5;
        let q = ModelParams::init(other_cfg, 0);
        // Splice p's header with q's sections.
        let bp = encode_model(&p).unwrap();
        let bq = encode_model(&q).unwrap();
        let hl = |b: &[u8]| 16 + u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
        let mut spliced = bp[..hl(&bp)].to_vec();
        spliced.extend_from_slice(&bq[hl(&bq)..]);
        assert!(matches!(decode_model(&spliced), Err(Error::Checkpoint { .. })));
    }
}
