//! Parameter checkpoints.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! "CEPK" | version: u32
//!        | spec_len: u32 | NetworkSpec as JSON
//!        | config_len: u32 | TrainConfig as JSON
//!        | meta_len: u32 | ModelMeta as JSON
//!        | seed: u64
//!        | layer_count: u32
//!        | per layer: n_weight: u32, n_weight f32 | n_bias: u32, n_bias f32
//! ```
//!
//! Optimizer state is not stored; a loaded network starts with fresh
//! moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerParams, Network, NetworkSpec, Parameters, TrainConfig};
use crate::error::{Error, Result};
use crate::masking::MaskStrategy;

const MAGIC: &[u8; 4] = b"CEPK";
const VERSION: u32 = 1;

/// Preprocessing facts a consumer of the checkpoint must reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    /// Pixel normalization, e.g. `x/127.5-1`.
    pub normalization: String,
    /// Per-channel value written into dropped pixels.
    pub fill: Vec<f64>,
    /// Mask strategy used during training.
    pub masks: MaskStrategy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub config: TrainConfig,
    pub meta: ModelMeta,
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for json in [
            serde_json::to_vec(&self.network.spec)?,
            serde_json::to_vec(&self.config)?,
            serde_json::to_vec(&self.meta)?,
        ] {
            out.extend_from_slice(&(json.len() as u32).to_le_bytes());
            out.extend_from_slice(&json);
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        let layers = &self.network.params.layers;
        out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
        for layer in layers {
            for arr in [&layer.weight, &layer.bias] {
                out.extend_from_slice(&(arr.len() as u32).to_le_bytes());
                for &v in arr.iter() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::corrupt("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::corrupt(
                "checkpoint",
                format!("unsupported version {version}"),
            ));
        }
        let spec: NetworkSpec = serde_json::from_slice(r.block()?)?;
        let config: TrainConfig = serde_json::from_slice(r.block()?)?;
        let meta: ModelMeta = serde_json::from_slice(r.block()?)?;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let weight = r.floats()?;
            let bias = r.floats()?;
            layers.push(LayerParams { weight, bias });
        }
        if !r.0.is_empty() {
            return Err(Error::corrupt("checkpoint", "trailing bytes"));
        }
        let network = Network::new(spec, Parameters::from_layers(layers))?;
        Ok(Self {
            network,
            config,
            meta,
            seed,
        })
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::corrupt("checkpoint", "unexpected end of data"));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn block(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let spec = NetworkSpec::context_encoder(8, &[2, 3]).unwrap();
        let network = Network::init(spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        Checkpoint {
            network,
            config: TrainConfig::default(),
            meta: ModelMeta {
                normalization: "x/127.5-1".into(),
                fill: vec![0.1, -0.2, 0.3],
                masks: MaskStrategy::Central { fraction: 0.25 },
            },
            seed: 42,
        }
    }

    #[test]
    fn bytes_are_stable_after_first_quantization() {
        let ck = sample();
        let once = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let bytes = once.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CEPK");
        let twice = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(twice, once);
        assert_eq!(twice.to_bytes().unwrap(), bytes);
        assert_eq!(twice.seed, 42);
        assert_eq!(twice.network.spec, ck.network.spec);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Corrupt { .. })
        ));
    }
}
