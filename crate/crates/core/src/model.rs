//! The full trainable model and its checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"DKPT" | u32 version | u64 header length | header JSON | f64 blocks...
//! ```
//!
//! The header carries the encoder config, the ordered block manifest
//! (`name`, `rows`, `cols`) and optionally the vocabulary. Loading rebuilds
//! the expected manifest from the config and refuses any mismatch.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::corpus::Vocabulary;
use crate::decoder::DecoderParams;
use crate::encoder::{EncoderConfig, EncoderModel, Init};
use crate::injection::InjectionParams;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct DkplmModel {
    pub encoder: EncoderModel,
    pub injection: InjectionParams,
    pub decoder: DecoderParams,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    blocks: Vec<BlockEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vec<String>>,
}

impl DkplmModel {
    pub fn new(config: EncoderConfig, seed: u64, delta_d: f64) -> Result<Self> {
        Self::with_init(config, [Init::Random(seed), Init::Random(seed ^ 0x5151_0001), Init::Random(seed ^ 0x5151_0002)], delta_d)
    }

    /// Every block zero except `delta_d`.
    pub fn zeros(config: EncoderConfig, delta_d: f64) -> Result<Self> {
        Self::with_init(config, [Init::Zeros; 3], delta_d)
    }

    fn with_init(config: EncoderConfig, init: [Init; 3], delta_d: f64) -> Result<Self> {
        let mut encoder = EncoderModel::new(config, init[0])?;
        let injection = InjectionParams::register(&mut encoder, init[1]);
        let decoder = DecoderParams::register(&mut encoder, init[2], delta_d)?;
        Ok(Self { encoder, injection, decoder })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn store(&self) -> &ParamStore {
        self.encoder.store()
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.encoder.store_mut()
    }

    pub fn to_bytes(&self, vocab: Option<&Vocabulary>) -> Result<Vec<u8>> {
        let store = self.store();
        let header = Header {
            config: self.config().clone(),
            blocks: store
                .blocks()
                .iter()
                .map(|b| BlockEntry { name: b.name.clone(), rows: b.value.rows(), cols: b.value.cols() })
                .collect(),
            vocab: vocab.map(|v| v.tokens().to_vec()),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * store.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for b in store.blocks() {
            for v in b.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<Vocabulary>)> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing DKPT magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut model = Self::zeros(header.config.clone(), 1.0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let expected = model.store().blocks();
        if expected.len() != header.blocks.len() {
            return Err(Error::Checkpoint(format!("expected {} blocks, header lists {}", expected.len(), header.blocks.len())));
        }
        for (e, h) in expected.iter().zip(&header.blocks) {
            if e.name != h.name || e.value.shape() != (h.rows, h.cols) {
                return Err(Error::Checkpoint(format!(
                    "block {} {:?} does not match header entry {} ({}, {})",
                    e.name,
                    e.value.shape(),
                    h.name,
                    h.rows,
                    h.cols
                )));
            }
        }
        let mut offset = 16 + hlen;
        let ids: Vec<_> = model.store().ids().collect();
        for id in ids {
            let m = model.store_mut().get_mut(id);
            let need = 8 * m.len();
            let raw = bytes.get(offset..offset + need).ok_or_else(|| bad("truncated parameter data"))?;
            for (v, chunk) in m.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            offset += need;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after parameter data"));
        }
        if !model.store().is_finite() {
            return Err(bad("non-finite parameter values"));
        }
        let vocab = header.vocab.map(Vocabulary::from_token_list).transpose()?;
        if let Some(v) = &vocab {
            if v.len() != header.config.vocab_size {
                return Err(Error::Checkpoint(format!("vocabulary of {} does not match vocab_size {}", v.len(), header.config.vocab_size)));
            }
        }
        Ok((model, vocab))
    }

    pub fn save(&self, path: &Path, vocab: Option<&Vocabulary>) -> Result<()> {
        let bytes = self.to_bytes(vocab)?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<Vocabulary>)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
