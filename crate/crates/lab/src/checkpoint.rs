//! Binary checkpoint format.
//!
//! Layout: magic `ASAMCKPT`, one version byte, a little-endian u32 length
//! prefix, that many bytes of UTF-8 `key = value` text (model spec plus
//! training metadata), then the flat parameter array as little-endian
//! 64-bit floats. Bit-exact and language-neutral.

use std::path::Path;
use std::sync::Arc;

use sharpness_core::models::ModelSpec;
use sharpness_core::ParameterVector64;

use crate::config::KvConfig;
use crate::csvio::fmt_f64;
use crate::error::{LabError, Result};

const MAGIC: &[u8; 8] = b"ASAMCKPT";
const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainMeta {
    pub seed: u64,
    pub steps: u64,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u8,
    pub spec: ModelSpec,
    pub params: ParameterVector64,
    pub meta: TrainMeta,
}

pub fn save_checkpoint(path: &Path, spec: &ModelSpec, params: &ParameterVector64, meta: &TrainMeta) -> Result<()> {
    let text = format!(
        "model = {spec}\nseed = {}\nsteps = {}\nfinal_train_loss = {}\nfinal_test_loss = {}\n",
        meta.seed,
        meta.steps,
        fmt_f64(meta.final_train_loss),
        fmt_f64(meta.final_test_loss),
    );
    let mut bytes = Vec::with_capacity(8 + 1 + 4 + text.len() + params.k() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.push(VERSION);
    bytes.extend_from_slice(&(text.len() as u32).to_le_bytes());
    bytes.extend_from_slice(text.as_bytes());
    for &v in params.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    let fail = |offset: usize, msg: String| LabError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 13 {
        return Err(fail(bytes.len(), "file too short for checkpoint header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail(0, format!("bad magic {:?}, expected {:?}", &bytes[..8], MAGIC)));
    }
    let version = bytes[8];
    if version != VERSION {
        return Err(fail(8, format!("unsupported checkpoint version {version}")));
    }
    let text_len = u32::from_le_bytes([bytes[9], bytes[10], bytes[11], bytes[12]]) as usize;
    let text_end = 13 + text_len;
    if bytes.len() < text_end {
        return Err(fail(bytes.len(), "truncated metadata text".into()));
    }
    let text = std::str::from_utf8(&bytes[13..text_end])
        .map_err(|e| fail(13 + e.valid_up_to(), "metadata text is not UTF-8".into()))?;
    let kv = KvConfig::parse(text).map_err(|e| fail(13, format!("metadata: {e}")))?;
    let spec_text = kv
        .get("model")
        .ok_or_else(|| fail(13, "metadata is missing the `model` key".into()))?;
    let spec: ModelSpec = spec_text
        .parse()
        .map_err(|e| fail(13, format!("model spec: {e}")))?;
    let meta = TrainMeta {
        seed: kv.get_u64("seed").map_err(|e| fail(13, e.to_string()))?.unwrap_or(0),
        steps: kv.get_u64("steps").map_err(|e| fail(13, e.to_string()))?.unwrap_or(0),
        final_train_loss: kv
            .get_f64("final_train_loss")
            .map_err(|e| fail(13, e.to_string()))?
            .unwrap_or(f64::NAN),
        final_test_loss: kv
            .get_f64("final_test_loss")
            .map_err(|e| fail(13, e.to_string()))?
            .unwrap_or(f64::NAN),
    };
    let layout = Arc::new(spec.layout().map_err(|e| fail(13, format!("layout: {e}")))?);
    let k = layout.k;
    let want = text_end + 8 * k;
    if bytes.len() < want {
        return Err(fail(
            bytes.len(),
            format!("parameter array truncated: want {k} floats ({} bytes)", 8 * k),
        ));
    }
    if bytes.len() > want {
        return Err(fail(want, format!("{} trailing bytes", bytes.len() - want)));
    }
    let mut values = Vec::with_capacity(k);
    for i in 0..k {
        let off = text_end + 8 * i;
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[off..off + 8]);
        values.push(f64::from_le_bytes(buf));
    }
    let params = ParameterVector64::new(values, layout)
        .map_err(|e| fail(text_end, format!("parameter vector: {e}")))?;
    Ok(Checkpoint { version, spec, params, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sharpness_core::models::build_model;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let spec: ModelSpec = "input=dim:3;layers=dense:5,dense:2".parse().unwrap();
        let w: ParameterVector64 = build_model(&spec, 77).unwrap();
        let meta = TrainMeta {
            seed: 77,
            steps: 1234,
            final_train_loss: 0.123456789123456789,
            final_test_loss: 0.3,
        };
        save_checkpoint(&path, &spec, &w, &meta).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.spec, spec);
        assert_eq!(back.meta, meta);
        let bits_a: Vec<u64> = w.values().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = back.params.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let spec: ModelSpec = "input=dim:2;layers=dense:3,dense:2".parse().unwrap();
        let w: ParameterVector64 = build_model(&spec, 1).unwrap();
        let meta = TrainMeta { seed: 1, steps: 1, final_train_loss: 0.0, final_test_loss: 0.0 };
        save_checkpoint(&path, &spec, &w, &meta).unwrap();
        let good = std::fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("byte 0"), "{err}");

        // Truncated parameters.
        std::fs::write(&path, &good[..good.len() - 5]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        // Trailing garbage.
        let mut bad = good.clone();
        bad.push(0);
        std::fs::write(&path, &bad).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }
}
