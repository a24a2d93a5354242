//! Single-file checkpoint: an 8-byte magic, a little-endian `u32` version and
//! `u64` header length, a JSON header (spec, tensor table, metadata), then the
//! tensor payload as little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::spec::NetworkSpec;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CMORPHCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const VELOCITY: &str = "velocity/";
const MEANS: &str = "norm/means";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: Vec<(String, Tensor)>,
    /// SGD momentum buffers keyed like `params`; empty when not saved.
    pub velocity: Vec<(String, Tensor)>,
    /// Per-channel means subtracted from training inputs.
    pub norm_means: Option<Vec<f32>>,
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_network(net: &Network) -> Self {
        Checkpoint {
            spec: net.spec().clone(),
            params: net.export_params(),
            velocity: Vec::new(),
            norm_means: None,
            metadata: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload: Vec<f32> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: payload.len(),
            });
            payload.extend_from_slice(data);
        };
        for (name, t) in &self.params {
            push(format!("{PARAM}{name}"), t.shape().to_vec(), t.data());
        }
        for (name, t) in &self.velocity {
            push(format!("{VELOCITY}{name}"), t.shape().to_vec(), t.data());
        }
        if let Some(means) = &self.norm_means {
            push(MEANS.to_string(), vec![means.len()], means);
        }
        let header = Header {
            spec: self.spec.clone(),
            tensors,
            metadata: self.metadata.clone(),
        };
        let header = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + payload.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if header_len > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| bad(format!("bad header: {e}")))?;
        let raw = &body[header_len..];
        if !raw.len().is_multiple_of(4) {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let payload: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut expected = 0;
        let mut ckpt = Checkpoint {
            spec: header.spec,
            params: Vec::new(),
            velocity: Vec::new(),
            norm_means: None,
            metadata: header.metadata,
        };
        for entry in header.tensors {
            let len: usize = entry.shape.iter().product();
            if entry.offset != expected || entry.offset + len > payload.len() {
                return Err(bad(format!(
                    "tensor `{}` lies outside the payload (truncated file?)",
                    entry.name
                )));
            }
            expected += len;
            let data = payload[entry.offset..entry.offset + len].to_vec();
            if let Some(name) = entry.name.strip_prefix(PARAM) {
                ckpt.params
                    .push((name.to_string(), Tensor::from_vec(&entry.shape, data)?));
            } else if let Some(name) = entry.name.strip_prefix(VELOCITY) {
                ckpt.velocity
                    .push((name.to_string(), Tensor::from_vec(&entry.shape, data)?));
            } else if entry.name == MEANS {
                ckpt.norm_means = Some(data);
            } else {
                return Err(bad(format!("unknown tensor `{}`", entry.name)));
            }
        }
        if expected != payload.len() {
            return Err(bad("payload has trailing data"));
        }
        // Reject files whose tensors disagree with their own spec.
        ckpt.to_network()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::build(&self.spec)?;
        self.load_into(&mut net)?;
        Ok(net)
    }

    /// Copies parameters into an already-built network; any name or shape
    /// disagreement is reported with the offending layer.
    pub fn load_into(&self, net: &mut Network) -> Result<()> {
        net.import_params(&self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_weights, presets, InitPolicy};
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let mut net = Network::build(&presets::cellnet_i(24, 5, 7)).unwrap();
        init_weights(
            &mut net,
            &InitPolicy::default(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let mut ckpt = Checkpoint::from_network(&net);
        ckpt.velocity = ckpt
            .params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::full(t.shape(), -1e-3)))
            .collect();
        ckpt.norm_means = Some(vec![0.1, 0.2, 0.3, 0.4, 1.0 / 3.0]);
        ckpt.metadata = serde_json::json!({"epoch": 3, "lr": 0.001});
        ckpt
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = sample().to_bytes();
        for cut in [10, 30, bytes.len() - 3, bytes.len() - 4] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(Checkpoint::from_bytes(&bytes)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    #[test]
    fn loading_into_mismatched_network_names_the_layer() {
        let ckpt = sample();
        let mut other = Network::build(&presets::cellnet_i(24, 3, 7)).unwrap();
        let err = ckpt.load_into(&mut other).unwrap_err().to_string();
        assert!(err.contains("conv1"), "{err}");
    }
}
