//! Cascade checkpoint container.
//!
//! ```text
//! "CCAS" | version: u32
//!        | manifest_len: u32 | CascadeManifest as JSON
//!        | stage1_len: u64 | stage-1 "CEPK" bytes, verbatim
//!        | stage2_len: u64 | stage-2 "CEPK" bytes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{sha256_hex, CascadeModel, FrozenStage, Inpainter};
use crate::error::{Error, Result};
use crate::masking::MaskStrategy;
use crate::nn::Checkpoint;

const MAGIC: &[u8; 4] = b"CCAS";
const VERSION: u32 = 1;
const KIND: &str = "cascade checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeManifest {
    /// `[height, width]` of stage 1 and stage 2.
    pub stage1_resolution: [usize; 2],
    pub stage2_resolution: [usize; 2],
    pub masks: MaskStrategy,
    pub stage1_seed: u64,
    pub stage2_seed: u64,
    pub stage1_sha256: String,
    pub stage2_sha256: String,
}

/// A cascade plus the stage-2 training record.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeCheckpoint {
    pub stage1: FrozenStage,
    pub stage2: Checkpoint,
    pub manifest: CascadeManifest,
}

impl CascadeCheckpoint {
    pub fn new(stage1: FrozenStage, stage2: Checkpoint) -> Result<Self> {
        let res = |c: &Checkpoint| [c.network.spec.input.height, c.network.spec.input.width];
        let manifest = CascadeManifest {
            stage1_resolution: res(stage1.checkpoint()),
            stage2_resolution: res(&stage2),
            masks: stage2.meta.masks,
            stage1_seed: stage1.checkpoint().seed,
            stage2_seed: stage2.seed,
            stage1_sha256: stage1.sha256(),
            stage2_sha256: sha256_hex(&stage2.to_bytes()?),
        };
        Ok(Self {
            stage1,
            stage2,
            manifest,
        })
    }

    pub fn model(&self) -> Result<CascadeModel> {
        CascadeModel::new(
            self.stage1.clone(),
            self.stage2.network.clone(),
            self.stage2.meta.fill.clone(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let stage2 = self.stage2.to_bytes()?;
        let mut out =
            Vec::with_capacity(manifest.len() + stage2.len() + self.stage1.bytes().len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for part in [self.stage1.bytes(), &stage2[..]] {
            out.extend_from_slice(&(part.len() as u64).to_le_bytes());
            out.extend_from_slice(part);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rest = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if rest.len() < n {
                return Err(Error::corrupt(KIND, "unexpected end of data"));
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(Error::corrupt(KIND, "bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::corrupt(
                KIND,
                format!("unsupported version {version}"),
            ));
        }
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let manifest: CascadeManifest = serde_json::from_slice(take(len)?)?;
        let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let stage1 = take(len)?.to_vec();
        let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let stage2 = take(len)?.to_vec();
        if !rest.is_empty() {
            return Err(Error::corrupt(KIND, "trailing bytes"));
        }
        if sha256_hex(&stage1) != manifest.stage1_sha256 {
            return Err(Error::corrupt(KIND, "stage-1 hash mismatch"));
        }
        if sha256_hex(&stage2) != manifest.stage2_sha256 {
            return Err(Error::corrupt(KIND, "stage-2 hash mismatch"));
        }
        let out = Self {
            stage1: FrozenStage::from_bytes(stage1)?,
            stage2: Checkpoint::from_bytes(&stage2)?,
            manifest,
        };
        out.model()?;
        Ok(out)
    }
}

pub fn write_cascade(path: &Path, checkpoint: &CascadeCheckpoint) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_cascade(path: &Path) -> Result<CascadeCheckpoint> {
    CascadeCheckpoint::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads either a single-encoder checkpoint or a cascade container.
pub fn read_model(path: &Path) -> Result<Inpainter> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        Ok(Inpainter::Cascade(
            CascadeCheckpoint::from_bytes(&bytes)?.model()?,
        ))
    } else {
        Inpainter::from_checkpoint(Checkpoint::from_bytes(&bytes)?)
    }
}
