//! Content hashes and the provenance record written next to every artifact.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::Model;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Hash of a model's config and the bit patterns of every parameter.
pub fn model_hash(model: &Model) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&model.config).expect("config serializes"));
    for t in &model.params {
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Hash of any serializable value through its JSON form.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("value serializes"))
}

pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// What produced an artifact and from which inputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub config_hash: String,
    /// Input path → content hash.
    pub inputs: Vec<(String, String)>,
    /// Output path → content hash.
    pub outputs: Vec<(String, String)>,
}

impl Provenance {
    pub fn new(command: &str, seed: u64, config_hash: String) -> Self {
        Self {
            command: command.to_string(),
            code_version: code_version(),
            seed,
            config_hash,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.push((path.display().to_string(), sha256_file(path)?));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> std::io::Result<()> {
        self.outputs.push((path.display().to_string(), sha256_file(path)?));
        Ok(())
    }

    /// True when every recorded output still exists with the recorded hash.
    pub fn outputs_intact(&self) -> bool {
        !self.outputs.is_empty()
            && self
                .outputs
                .iter()
                .all(|(p, h)| sha256_file(Path::new(p)).map(|x| &x == h).unwrap_or(false))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self).expect("serializes"))
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        serde_json::from_slice(&std::fs::read(path)?).map_err(std::io::Error::other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn model_hash_tracks_bits() {
        let mut cfg = crate::model::ModelConfig::new(10);
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.d_ff = 8;
        let mut m = Model::init(cfg).unwrap();
        let h = model_hash(&m);
        assert_eq!(h, model_hash(&m.clone()));
        let v = &mut m.params[0].data_mut()[0];
        *v = f64::from_bits(v.to_bits() + 1);
        assert_ne!(h, model_hash(&m));
    }
}
