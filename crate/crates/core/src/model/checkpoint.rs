//! `FLXP` checkpoint files.
//!
//! Layout (little-endian): magic `FLXP`, version `u16`, config JSON length
//! `u32` and bytes, parameter count `u64`, parameters as `f64`, then the beta
//! and gamma anchors (`n_anchor` `f64` each).

use std::fs;
use std::path::Path;

use super::{AnchorSet, LocalGraspModel, ModelConfig, ModelError, ModelParams, Network};

const MAGIC: &[u8; 4] = b"FLXP";
const VERSION: u16 = 1;

pub fn encode_checkpoint(model: &LocalGraspModel) -> Vec<u8> {
    let cfg = serde_json::to_vec(model.config()).expect("config serialises");
    let n = model.params.len();
    let mut out = Vec::with_capacity(18 + cfg.len() + 8 * (n + 2 * model.anchors.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for v in model.params.values.iter().chain(&model.anchors.beta).chain(&model.anchors.gamma) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::CorruptCheckpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| ModelError::CorruptCheckpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<LocalGraspModel, ModelError> {
    let corrupt = |m: &str| ModelError::CorruptCheckpoint(m.to_string());
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(len)?).map_err(|e| corrupt(&format!("config: {e}")))?;
    let network = Network::new(&config)?;
    let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    if count != network.layout.len() {
        return Err(ModelError::ParamCount {
            expected: network.layout.len(),
            got: count,
        });
    }
    let values = r.f64s(count)?;
    let beta = r.f64s(config.n_anchor)?;
    let gamma = r.f64s(config.n_anchor)?;
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    let params = ModelParams { values };
    if !params.is_finite() || !beta.iter().chain(&gamma).all(|v| v.is_finite()) {
        return Err(corrupt("non-finite values"));
    }
    Ok(LocalGraspModel {
        network,
        params,
        anchors: AnchorSet { beta, gamma },
    })
}

pub fn save_checkpoint(model: &LocalGraspModel, path: &Path) -> Result<(), ModelError> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LocalGraspModel, ModelError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut model = LocalGraspModel::init(&ModelConfig::small(), 4).unwrap();
        model.anchors.beta[0] = -1.2345678901234567;
        let bytes = encode_checkpoint(&model);
        assert_eq!(&bytes[..4], b"FLXP");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.anchors, model.anchors);
        assert_eq!(back.config(), model.config());
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_fail() {
        let model = LocalGraspModel::init(&ModelConfig::small(), 4).unwrap();
        let bytes = encode_checkpoint(&model);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(ModelError::CorruptCheckpoint(_))));
        let mut nan = bytes.clone();
        let end = nan.len();
        nan[end - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode_checkpoint(&nan).is_err());
    }
}
