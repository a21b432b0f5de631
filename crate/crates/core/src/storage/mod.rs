//! On-disk formats: PM2F feature files, synthetic data, run results and
//! trained heads.

mod model;
mod pm2f;
mod results;
mod synth;

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use model::{ModelMeta, SavedModel, MODEL_MAGIC, MODEL_VERSION};
pub use pm2f::{
    dataset_to_pm2f, decode_pm2f, encode_pm2f, pm2f_to_dataset, pm2f_to_text_features, read_dataset, read_pm2f,
    read_text_features, text_features_to_pm2f, write_pm2f, FeatureRecord, Pm2fHeader, PM2F_HEADER_LEN, PM2F_MAGIC,
    PM2F_VERSION,
};
pub use results::{
    episodes_from_jsonl, episodes_to_jsonl, read_episodes, summary_from_run, write_results, EPISODES_FILE,
    SUMMARY_FILE,
};
pub use synth::{read_manifest, synth_generate, write_synth, SynthClass, SynthManifest, SynthOutput, SynthSpec};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of a slice of f64 values (little-endian bytes).
pub fn sha256_f64(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(sha256_f64(&[1.0]), sha256_hex(&1.0f64.to_le_bytes()));
    }
}
