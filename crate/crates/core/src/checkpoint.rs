//! Binary checkpoint container: a magic tag, a format version, a JSON header
//! and raw little-endian tensor payloads.
//!
//! ```text
//! "SVCK" | u32 version | u64 header_len | header JSON | tensor bytes...
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::model::{ModelDims, SpeakerRegistry, GENERATOR_PREFIXES};
use crate::nn::{AdamConfig, AdamState};
use crate::pitch::F0Stats;
use crate::training::Stage;
use crate::util::write_atomic;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SVCK";

const PARAM: &str = "param/";
const WREG: &str = "wreg/";

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: Config,
    pub dims: ModelDims,
    /// Stage that produced the checkpoint; `None` for a fresh initialization.
    pub stage: Option<Stage>,
    /// Steps completed within `stage`.
    pub step: u64,
    pub rng: Option<RngState>,
    pub speakers: SpeakerRegistry,
    /// Pooled log-F0 statistics per speaker id.
    pub target_stats: BTreeMap<String, F0Stats>,
}

/// Adam moments for one parameter group.
#[derive(Debug, Clone)]
pub struct OptimizerSnapshot {
    pub config: AdamConfig,
    pub state: AdamState,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub generator: OptimizerSnapshot,
    pub discriminator: OptimizerSnapshot,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: Option<OptimizerState>,
    /// Frozen pre-adaptation parameters for the weight regularizer.
    pub wreg_ref: Option<BTreeMap<String, Tensor>>,
}

#[derive(Serialize, Deserialize)]
struct TensorIndex {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    generator: (AdamConfig, u64),
    discriminator: (AdamConfig, u64),
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    optimizer: Option<OptimizerMeta>,
    tensors: Vec<TensorIndex>,
}

fn dtype_tag(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Contract(format!("cannot store {other:?} tensors"))),
    }
}

fn encode(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        other => return Err(Error::Contract(format!("cannot store {other:?} tensors"))),
    }
    Ok(())
}

fn decode(ix: &TensorIndex, bytes: &[u8]) -> Result<Tensor> {
    let n: usize = ix.shape.iter().product();
    let t = match ix.dtype.as_str() {
        "f32" if bytes.len() == n * 4 => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, ix.shape.as_slice(), &Device::Cpu)?
        }
        "f64" if bytes.len() == n * 8 => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, ix.shape.as_slice(), &Device::Cpu)?
        }
        _ => {
            return Err(Error::Format(format!(
                "tensor `{}`: {} bytes do not fit {} {:?}",
                ix.name,
                bytes.len(),
                ix.dtype,
                ix.shape
            )))
        }
    };
    Ok(t)
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut blobs: Vec<(String, &Tensor)> = Vec::new();
        blobs.extend(self.params.iter().map(|(k, t)| (format!("{PARAM}{k}"), t)));
        if let Some(opt) = &self.optimizer {
            for (tag, snap) in [("g", &opt.generator), ("d", &opt.discriminator)] {
                blobs.extend(snap.state.m.iter().map(|(k, t)| (format!("opt.{tag}.m/{k}"), t)));
                blobs.extend(snap.state.v.iter().map(|(k, t)| (format!("opt.{tag}.v/{k}"), t)));
            }
        }
        if let Some(r) = &self.wreg_ref {
            blobs.extend(r.iter().map(|(k, t)| (format!("{WREG}{k}"), t)));
        }
        let mut data = Vec::new();
        let mut tensors = Vec::with_capacity(blobs.len());
        for (name, t) in blobs {
            let offset = data.len() as u64;
            encode(t, &mut data)?;
            tensors.push(TensorIndex {
                name,
                dtype: dtype_tag(t.dtype())?.to_string(),
                shape: t.dims().to_vec(),
                offset,
                len: data.len() as u64 - offset,
            });
        }
        let header = Header {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                ..self.meta.clone()
            },
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                generator: (o.generator.config, o.generator.state.step),
                discriminator: (o.discriminator.config, o.discriminator.state.step),
            }),
            tensors,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Serde(e.to_string()))?;
        let mut bytes = Vec::with_capacity(16 + header.len() + data.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&data);
        write_atomic(path.as_ref(), &bytes)
    }

    /// Everything: parameters, optimizer moments and the regularizer reference.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read(path.as_ref(), |_| true)
    }

    /// Generator parameters and metadata only, for inference.
    pub fn load_generator(path: impl AsRef<Path>) -> Result<Self> {
        read(path.as_ref(), |name| {
            name.strip_prefix(PARAM)
                .is_some_and(|p| GENERATOR_PREFIXES.iter().any(|g| p.starts_with(g)))
        })
    }

    /// Parameters under any of `prefixes`.
    pub fn params_with_prefix(&self, prefixes: &[&str]) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, t)| (k.clone(), t.clone()))
            .collect()
    }
}

fn read(path: &Path, keep: impl Fn(&str) -> bool) -> Result<Checkpoint> {
    let io = |e| Error::io(path, e);
    let mut f = std::fs::File::open(path).map_err(io)?;
    let mut fixed = [0u8; 16];
    f.read_exact(&mut fixed)
        .map_err(|_| Error::Format(format!("{} is too short for a checkpoint", path.display())))?;
    if &fixed[..4] != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(fixed[8..16].try_into().unwrap());
    let mut header = vec![0u8; header_len as usize];
    f.read_exact(&mut header).map_err(io)?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.meta.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: header.meta.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let base = 16 + header_len;
    let mut groups: BTreeMap<&str, BTreeMap<String, Tensor>> = BTreeMap::new();
    for ix in &header.tensors {
        if !keep(&ix.name) {
            continue;
        }
        let (group, name) = ix
            .name
            .split_once('/')
            .ok_or_else(|| Error::Format(format!("tensor name `{}` has no group", ix.name)))?;
        f.seek(SeekFrom::Start(base + ix.offset)).map_err(io)?;
        let mut buf = vec![0u8; ix.len as usize];
        f.read_exact(&mut buf).map_err(io)?;
        groups
            .entry(match group {
                "param" => "param",
                "wreg" => "wreg",
                "opt.g.m" => "opt.g.m",
                "opt.g.v" => "opt.g.v",
                "opt.d.m" => "opt.d.m",
                "opt.d.v" => "opt.d.v",
                other => return Err(Error::Format(format!("unknown tensor group `{other}`"))),
            })
            .or_default()
            .insert(name.to_string(), decode(ix, &buf)?);
    }
    let mut take = |g: &str| groups.remove(g).unwrap_or_default();
    let params = take("param");
    let wreg = take("wreg");
    let (gm, gv, dm, dv) = (take("opt.g.m"), take("opt.g.v"), take("opt.d.m"), take("opt.d.v"));
    let optimizer = match header.optimizer {
        Some(o) if keep("opt.g.m/") || !gm.is_empty() => Some(OptimizerState {
            generator: OptimizerSnapshot {
                config: o.generator.0,
                state: AdamState {
                    step: o.generator.1,
                    m: gm,
                    v: gv,
                },
            },
            discriminator: OptimizerSnapshot {
                config: o.discriminator.0,
                state: AdamState {
                    step: o.discriminator.1,
                    m: dm,
                    v: dv,
                },
            },
        }),
        _ => None,
    };
    let has_wreg = header.tensors.iter().any(|t| t.name.starts_with(WREG)) && keep(WREG);
    Ok(Checkpoint {
        meta: header.meta,
        params,
        optimizer,
        wreg_ref: has_wreg.then_some(wreg),
    })
}
