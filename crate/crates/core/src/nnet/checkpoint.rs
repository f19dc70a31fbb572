//! Bit-exact parameter snapshots.
//!
//! File layout: a UTF-8 header of `key value` lines terminated by a line
//! `end`, followed by every tensor as raw little-endian f32 in the order
//! listed by the header's `tensor <name> <rows> <cols>` lines:
//!
//! ```text
//! dialogue-checkpoint
//! format_version 1
//! n_layers 2
//! ... remaining ModelConfig fields ...
//! vocab_fingerprint <sha256 hex>
//! meta <key> <value>          (zero or more)
//! tensor token_emb 120 32     (one per tensor, storage order)
//! payload_bytes <n>
//! end
//! <n bytes of f32 LE>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::params::tensor_shapes;
use super::{ModelConfig, ModelState, NnetError, Params};
use crate::seed::sha256_hex;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "dialogue-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    config: ModelConfig,
    vocab_fingerprint: String,
    params: Params<f32>,
    meta: BTreeMap<String, String>,
}

/// Deep copy of the live state; later training never touches it.
pub fn snapshot(state: &ModelState<f32>, vocab_fingerprint: &str) -> Checkpoint {
    Checkpoint {
        config: state.config.clone(),
        vocab_fingerprint: vocab_fingerprint.to_string(),
        params: state.params.clone(),
        meta: BTreeMap::new(),
    }
}

/// Rebuilds a model state, refusing checkpoints trained against another
/// vocabulary.
pub fn restore(checkpoint: &Checkpoint, vocab_fingerprint: &str) -> Result<ModelState<f32>, NnetError> {
    if checkpoint.vocab_fingerprint != vocab_fingerprint {
        return Err(NnetError::FingerprintMismatch {
            expected: vocab_fingerprint.to_string(),
            found: checkpoint.vocab_fingerprint.clone(),
        });
    }
    Ok(ModelState {
        config: checkpoint.config.clone(),
        params: checkpoint.params.clone(),
    })
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_fingerprint(&self) -> &str {
        &self.vocab_fingerprint
    }

    pub fn params(&self) -> &Params<f32> {
        &self.params
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    /// Attaches a header annotation (seeds, versions). Whitespace in the
    /// key and line breaks in the value are replaced.
    pub fn with_meta(mut self, key: &str, value: &str) -> Self {
        let key: String = key.chars().map(|c| if c.is_whitespace() { '_' } else { c }).collect();
        let value = value.replace(['\n', '\r'], " ");
        self.meta.insert(key, value);
        self
    }

    /// Restores against the expected config as well as the vocabulary.
    pub fn restore_checked(&self, config: &ModelConfig, vocab_fingerprint: &str) -> Result<ModelState<f32>, NnetError> {
        if &self.config != config {
            return Err(NnetError::ConfigMismatch);
        }
        restore(self, vocab_fingerprint)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut header = format!("{MAGIC}\nformat_version {CHECKPOINT_FORMAT_VERSION}\n");
        for (k, v) in config_fields(c) {
            header.push_str(&format!("{k} {v}\n"));
        }
        header.push_str(&format!("vocab_fingerprint {}\n", self.vocab_fingerprint));
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let shapes = tensor_shapes(c);
        for (name, [r, cols]) in &shapes {
            header.push_str(&format!("tensor {name} {r} {cols}\n"));
        }
        let n: usize = self.params.num_elements();
        header.push_str(&format!("payload_bytes {}\nend\n", n * 4));
        let mut bytes = header.into_bytes();
        bytes.reserve(n * 4);
        for t in self.params.tensors() {
            for v in t {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnetError> {
        let fmt = |m: String| NnetError::Format(m);
        let marker = b"\nend\n";
        let end = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| fmt("missing header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..end + 1]).map_err(|e| fmt(e.to_string()))?;
        let payload = &bytes[end + marker.len()..];
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(fmt("not a dialogue checkpoint".into()));
        }
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        let mut meta = BTreeMap::new();
        let mut tensors = Vec::new();
        for line in lines {
            let (key, rest) = line.split_once(' ').ok_or_else(|| fmt(format!("bad header line {line:?}")))?;
            match key {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => tensors.push(rest.to_string()),
                _ => {
                    if fields.insert(key, rest).is_some() {
                        return Err(fmt(format!("duplicate header key {key}")));
                    }
                }
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| fmt(format!("missing header key {k}")));
        let num = |k: &str| -> Result<usize, NnetError> { get(k)?.parse().map_err(|_| fmt(format!("bad value for {k}"))) };
        let version: u32 = get("format_version")?.parse().map_err(|_| fmt("bad format_version".into()))?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(fmt(format!("unsupported format version {version}")));
        }
        let config = ModelConfig {
            n_layers: num("n_layers")?,
            n_heads: num("n_heads")?,
            d_model: num("d_model")?,
            d_ff: num("d_ff")?,
            vocab_size: num("vocab_size")?,
            max_seq: num("max_seq")?,
            max_turns: num("max_turns")?,
            dropout_rate: get("dropout_rate")?.parse().map_err(|_| fmt("bad dropout_rate".into()))?,
            init_seed: get("init_seed")?.parse().map_err(|_| fmt("bad init_seed".into()))?,
        };
        config.validate()?;
        let expected: Vec<String> = tensor_shapes(&config)
            .iter()
            .map(|(n, [r, c])| format!("{n} {r} {c}"))
            .collect();
        if tensors != expected {
            return Err(fmt("tensor table does not match config".into()));
        }
        let payload_bytes = num("payload_bytes")?;
        if payload.len() != payload_bytes || payload_bytes != config.num_parameters() * 4 {
            return Err(fmt(format!(
                "payload has {} bytes, header says {payload_bytes}, config needs {}",
                payload.len(),
                config.num_parameters() * 4
            )));
        }
        let mut params = Params::<f32>::zeros(&config);
        let mut chunks = payload.chunks_exact(4);
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                let c = chunks.next().expect("length checked");
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        Ok(Checkpoint {
            config,
            vocab_fingerprint: get("vocab_fingerprint")?.to_string(),
            params,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnetError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, NnetError> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

fn config_fields(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("n_layers", c.n_layers.to_string()),
        ("n_heads", c.n_heads.to_string()),
        ("d_model", c.d_model.to_string()),
        ("d_ff", c.d_ff.to_string()),
        ("vocab_size", c.vocab_size.to_string()),
        ("max_seq", c.max_seq.to_string()),
        ("max_turns", c.max_turns.to_string()),
        ("dropout_rate", c.dropout_rate.to_string()),
        ("init_seed", c.init_seed.to_string()),
    ]
}
