//! Binary checkpoints.
//!
//! Layout: `CCOE`, a little-endian u32 format version, a little-endian u32
//! header length, the UTF-8 JSON header, then the payload. The header names
//! every tensor and its shape in canonical order; the payload is those
//! tensors' little-endian f32 values back to back, so its length equals the
//! component's parameter bytes. The header carries the SHA-256 of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lifecycle::{ExpertRegistry, PushOutcome};
use crate::model::{BackboneModel, ExpertSubnetwork, FeedForward, LayerNorm, Linear, ModelConfig, Params};
use crate::routing::{PlannerExpert, Scorer};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CCOE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Backbone,
    Expert,
    Planner,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertMeta {
    pub id: u32,
    pub domain: String,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerMeta {
    pub candidates: Vec<u32>,
    pub uncalibrated: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub kind: ComponentKind,
    pub config: ModelConfig,
    pub frozen: bool,
    pub expert: Option<ExpertMeta>,
    pub planner: Option<PlannerMeta>,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
    /// Hex SHA-256 of the payload.
    pub digest: String,
}

/// A decoded component.
#[derive(Debug, Clone, PartialEq)]
pub enum Component {
    Backbone(BackboneModel),
    Expert(ExpertSubnetwork),
    Planner(PlannerExpert),
}

impl Component {
    pub fn kind(&self) -> ComponentKind {
        match self {
            Component::Backbone(_) => ComponentKind::Backbone,
            Component::Expert(_) => ComponentKind::Expert,
            Component::Planner(_) => ComponentKind::Planner,
        }
    }

    pub fn param_bytes(&self) -> usize {
        match self {
            Component::Backbone(b) => b.param_bytes(),
            Component::Expert(e) => e.param_bytes(),
            Component::Planner(p) => p.param_bytes(),
        }
    }
}

fn encode_params(
    kind: ComponentKind,
    config: ModelConfig,
    frozen: bool,
    expert: Option<ExpertMeta>,
    planner: Option<PlannerMeta>,
    params: &dyn Params,
) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    params.visit("", &mut |name, t| {
        tensors.push(TensorEntry { name, shape: t.shape().to_vec() });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = Header {
        kind,
        config,
        frozen,
        expert,
        planner,
        tensors,
        payload_bytes: payload.len(),
        digest: hex::encode(Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn encode_backbone(b: &BackboneModel) -> Vec<u8> {
    encode_params(ComponentKind::Backbone, *b.config(), b.is_frozen(), None, None, b)
}

/// `config` is the backbone configuration the expert was built for.
pub fn encode_expert(e: &ExpertSubnetwork, config: &ModelConfig) -> Vec<u8> {
    let meta = ExpertMeta { id: e.id, domain: e.domain.clone(), positions: e.positions().to_vec() };
    encode_params(ComponentKind::Expert, *config, false, Some(meta), None, e)
}

pub fn encode_planner(p: &PlannerExpert, config: &ModelConfig) -> Vec<u8> {
    let e = &p.expert;
    let meta = ExpertMeta { id: e.id, domain: e.domain.clone(), positions: e.positions().to_vec() };
    let pm = PlannerMeta { candidates: p.candidates().to_vec(), uncalibrated: p.uncalibrated().to_vec() };
    encode_params(ComponentKind::Planner, *config, false, Some(meta), Some(pm), p)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corruption(msg.into())
}

/// Verifies magic, version, header and digest, returning the header and raw
/// tensors by name.
fn read_raw(bytes: &[u8]) -> Result<(Header, BTreeMap<String, Tensor>)> {
    if bytes.len() < 12 {
        return Err(corrupt("file shorter than the fixed preamble"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(corrupt("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    let payload = &body[hlen..];
    if payload.len() != header.payload_bytes {
        return Err(corrupt(format!("payload is {} bytes, header says {}", payload.len(), header.payload_bytes)));
    }
    if hex::encode(Sha256::digest(payload)) != header.digest {
        return Err(corrupt("payload digest mismatch"));
    }
    let mut tensors = BTreeMap::new();
    let mut off = 0;
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = off + 4 * n;
        if end > payload.len() {
            return Err(corrupt("tensor directory overruns payload"));
        }
        let data = payload[off..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| corrupt(e.to_string()))?;
        if tensors.insert(entry.name.clone(), t).is_some() {
            return Err(corrupt(format!("duplicate tensor {}", entry.name)));
        }
        off = end;
    }
    if off != payload.len() {
        return Err(corrupt("payload has trailing bytes"));
    }
    Ok((header, tensors))
}

struct Tensors(BTreeMap<String, Tensor>);

impl Tensors {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.0.remove(name).ok_or_else(|| corrupt(format!("missing tensor {name}")))
    }

    fn take_shaped(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.take(name)?;
        if t.shape() != shape {
            return Err(corrupt(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    }

    fn ffn(&mut self, prefix: &str, d: usize) -> Result<FeedForward> {
        let up_w = self.take(&format!("{prefix}.up.weight"))?;
        if up_w.shape().len() != 2 || up_w.shape()[0] != d {
            return Err(corrupt(format!("{prefix}.up.weight has shape {:?}", up_w.shape())));
        }
        let w = up_w.shape()[1];
        Ok(FeedForward {
            norm: LayerNorm {
                gain: self.take_shaped(&format!("{prefix}.norm.gain"), &[d])?,
                bias: self.take_shaped(&format!("{prefix}.norm.bias"), &[d])?,
            },
            up: Linear { weight: up_w, bias: self.take_shaped(&format!("{prefix}.up.bias"), &[w])? },
            down: Linear {
                weight: self.take_shaped(&format!("{prefix}.down.weight"), &[w, d])?,
                bias: self.take_shaped(&format!("{prefix}.down.bias"), &[d])?,
            },
        })
    }

    fn expert(&mut self, prefix: &str, meta: &ExpertMeta, config: &ModelConfig) -> Result<ExpertSubnetwork> {
        let layers = (0..meta.positions.len())
            .map(|j| self.ffn(&format!("{prefix}layers.{j}"), config.d_model))
            .collect::<Result<Vec<_>>>()?;
        let e = ExpertSubnetwork::new(meta.id, meta.domain.clone(), meta.positions.clone(), layers)
            .map_err(|e| corrupt(e.to_string()))?;
        e.validate_for(config).map_err(|e| corrupt(e.to_string()))?;
        Ok(e)
    }

    fn finish(self) -> Result<()> {
        match self.0.keys().next() {
            Some(k) => Err(corrupt(format!("unexpected tensor {k}"))),
            None => Ok(()),
        }
    }
}

/// Decodes and verifies a checkpoint.
pub fn decode(bytes: &[u8]) -> Result<(Header, Component)> {
    let (header, raw) = read_raw(bytes)?;
    let config = header.config;
    config.validate().map_err(|e| corrupt(e.to_string()))?;
    let mut ts = Tensors(raw);
    let d = config.d_model;
    let component = match header.kind {
        ComponentKind::Backbone => {
            let b = BackboneModel::from_named(config, header.frozen, &mut |name, shape| ts.take_shaped(name, shape))?;
            Component::Backbone(b)
        }
        ComponentKind::Expert => {
            let meta = header.expert.as_ref().ok_or_else(|| corrupt("expert header without metadata"))?;
            Component::Expert(ts.expert("", meta, &config)?)
        }
        ComponentKind::Planner => {
            let meta = header.expert.as_ref().ok_or_else(|| corrupt("planner header without expert metadata"))?;
            let pm = header.planner.as_ref().ok_or_else(|| corrupt("planner header without candidates"))?;
            let expert = ts.expert("expert.", meta, &config)?;
            let indicators = ts.take_shaped("indicators", &[pm.candidates.len() + 1, d])?;
            let scorer = Scorer {
                wq: ts.take_shaped("scorer.wq", &[d, d])?,
                wk: ts.take_shaped("scorer.wk", &[d, d])?,
                wv: ts.take_shaped("scorer.wv", &[d, d])?,
                head_w: ts.take_shaped("scorer.head_w", &[d])?,
                head_b: ts.take_shaped("scorer.head_b", &[1])?,
            };
            let p = PlannerExpert::from_parts(expert, indicators, pm.candidates.clone(), pm.uncalibrated.clone(), scorer)
                .map_err(|e| corrupt(e.to_string()))?;
            Component::Planner(p)
        }
    };
    ts.finish()?;
    Ok((header, component))
}

/// Writes through a temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

pub fn save_backbone(b: &BackboneModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_backbone(b))
}

pub fn save_expert(e: &ExpertSubnetwork, config: &ModelConfig, path: &Path) -> Result<()> {
    write_atomic(path, &encode_expert(e, config))
}

pub fn save_planner(p: &PlannerExpert, config: &ModelConfig, path: &Path) -> Result<()> {
    write_atomic(path, &encode_planner(p, config))
}

pub fn load_checkpoint(path: &Path) -> Result<(Header, Component)> {
    decode(&fs::read(path)?)
}

fn wrong_kind(path: &Path, want: &str, got: ComponentKind) -> Error {
    Error::Config(format!("{} holds a {got:?} checkpoint, expected {want}", path.display()))
}

pub fn load_backbone(path: &Path) -> Result<BackboneModel> {
    match load_checkpoint(path)? {
        (_, Component::Backbone(b)) => Ok(b),
        (h, _) => Err(wrong_kind(path, "backbone", h.kind)),
    }
}

/// Loads an expert and checks it was built for `config`.
pub fn load_expert(path: &Path, config: &ModelConfig) -> Result<ExpertSubnetwork> {
    match load_checkpoint(path)? {
        (h, Component::Expert(e)) => {
            if h.config != *config {
                return Err(Error::Config(format!("{} was built for a different backbone", path.display())));
            }
            Ok(e)
        }
        (h, _) => Err(wrong_kind(path, "expert", h.kind)),
    }
}

pub fn load_planner(path: &Path, config: &ModelConfig) -> Result<PlannerExpert> {
    match load_checkpoint(path)? {
        (h, Component::Planner(p)) => {
            if h.config != *config {
                return Err(Error::Config(format!("{} was built for a different backbone", path.display())));
            }
            Ok(p)
        }
        (h, _) => Err(wrong_kind(path, "planner", h.kind)),
    }
}

/// Loads an expert checkpoint and pushes it. A load failure leaves the
/// registry untouched.
pub fn push_checkpoint(registry: &mut ExpertRegistry, path: &Path) -> Result<PushOutcome> {
    let e = load_expert(path, registry.backbone().config())?;
    registry.push(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, d_ff: 16, vocab: 260, max_seq: 16 }
    }

    #[test]
    fn backbone_round_trip_is_canonical() {
        let mut b = BackboneModel::init(cfg(), &mut Rng::new(3)).unwrap();
        b.freeze();
        let bytes = encode_backbone(&b);
        let (h, c) = decode(&bytes).unwrap();
        assert_eq!(h.payload_bytes, b.param_bytes());
        assert_eq!(h.digest, b.digest());
        let Component::Backbone(b2) = c else { panic!("wrong kind") };
        assert_eq!(b2, b);
        assert_eq!(encode_backbone(&b2), bytes);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let b = BackboneModel::init(cfg(), &mut Rng::new(3)).unwrap();
        let e = ExpertSubnetwork::pruned_from(&b, 7, "copy", vec![1], 4).unwrap();
        let bytes = encode_expert(&e, &cfg());
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Corruption(_))));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Corruption(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(Error::Version { found: 2, expected: 1 })));
        let (_, c) = decode(&bytes).unwrap();
        assert_eq!(c, Component::Expert(e));
    }
}
