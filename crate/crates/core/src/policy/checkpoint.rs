//! Binary checkpoint container.
//!
//! Layout: the magic line `DARTLAB-CKPT\n`, a little-endian `u64` header
//! length, a JSON header (config, grammar, manifest with per-parameter
//! trainability), then every parameter's values as little-endian `f64` in
//! manifest order. Values round-trip bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::PolicyConfig;
use super::model::PolicyModel;
use crate::autodiff::{ManifestEntry, Tensor};
use crate::error::{Error, Result};
use crate::router::SegmentGrammar;

const MAGIC: &[u8] = b"DARTLAB-CKPT\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: PolicyConfig,
    grammar: SegmentGrammar,
    manifest: Vec<ManifestEntry>,
    requires_grad: Vec<bool>,
}

impl PolicyModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            grammar: self.grammar,
            manifest: self.store.manifest(),
            requires_grad: self.store.iter().map(|(_, p)| p.requires_grad).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(
            MAGIC.len() + 8 + json.len() + 8 * self.store.iter().map(|(_, p)| p.value.numel()).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint {
            path: "<bytes>".into(),
            message: m.to_string(),
        };
        if !bytes.starts_with(MAGIC) {
            return Err(bad("missing magic"));
        }
        let mut off = MAGIC.len();
        let len_bytes: [u8; 8] = bytes
            .get(off..off + 8)
            .ok_or_else(|| bad("truncated header length"))?
            .try_into()
            .unwrap();
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        off += 8;
        let header: Header =
            serde_json::from_slice(bytes.get(off..off + hlen).ok_or_else(|| bad("truncated header"))?)?;
        off += hlen;
        if header.version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        // Rebuild the same parameter layout, then overwrite every value.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = PolicyModel::new(header.config.clone(), header.grammar, &mut rng)?;
        if model.store.manifest() != header.manifest {
            return Err(bad("manifest does not match the layout implied by the config"));
        }
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let shape = header.manifest[i].shape.clone();
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(off..off + 8 * n)
                .ok_or_else(|| bad("truncated tensor data"))?;
            off += 8 * n;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let p = model.store.get_mut(id);
            p.value = Tensor::new(shape, data)?;
            p.requires_grad = header.requires_grad[i];
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        PolicyModel::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint { message, .. } => Error::Checkpoint {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }
}
