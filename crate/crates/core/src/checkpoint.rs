//! Versioned weight container.
//!
//! Layout: magic `SFMACKPT`, u32 format version, u64 header length, a JSON
//! header (metadata, tensor index per group, SHA-256 of the payload), then
//! the payload of little-endian `f64` values.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterSet, AdapterSpec, PlacementConfig};
use crate::codec::{site_channels, CodecConfig, CodecWeights};
use crate::entropy::FactorizedPrior;
use crate::error::{Error, Result};
use crate::scalable::{MaskGenerator, MaskGeneratorConfig};
use crate::task::{ConvClassifier, TaskModelConfig};
use crate::tensor::{load_named, named_tensors, ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"SFMACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload in values.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: BTreeMap<String, String>,
    groups: BTreeMap<String, Vec<Entry>>,
    payload_sha256: String,
}

/// Named groups of named tensors plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub groups: BTreeMap<String, BTreeMap<String, Tensor>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    /// Stores every parameter of `p` under group `name`.
    pub fn add_group<P: ParamSet + ?Sized>(&mut self, name: &str, p: &P) {
        self.groups.insert(name.to_string(), named_tensors(p, ""));
    }

    /// Overwrites `p` from group `name`; every parameter must be present
    /// with a matching shape, and the group must hold nothing else.
    pub fn load_group<P: ParamSet + ?Sized>(&self, name: &str, p: &mut P) -> Result<()> {
        let g = self
            .groups
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing group {name:?}")))?;
        load_named(p, "", g)?;
        let expected = named_tensors(p, "").len();
        if expected != g.len() {
            return Err(Error::Checkpoint(format!(
                "group {name:?} holds {} tensors, model has {expected}",
                g.len()
            )));
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata {key:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut groups = BTreeMap::new();
        let mut offset = 0;
        for (g, tensors) in &self.groups {
            let mut entries = Vec::new();
            for (name, t) in tensors {
                entries.push(Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                for v in t.iter() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                offset += t.len();
            }
            groups.insert(g.clone(), entries);
        }
        let header = Header {
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
            groups,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated checkpoint header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let payload = &body[hlen..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(bad("payload checksum mismatch"));
        }
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of values"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut groups = BTreeMap::new();
        for (g, entries) in header.groups {
            let mut tensors = BTreeMap::new();
            for e in entries {
                let n: usize = e.shape.iter().product();
                let data = values
                    .get(e.offset..e.offset + n)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the payload", e.name)))?;
                let t = Tensor::from_shape_vec(e.shape, data.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
                tensors.insert(e.name, t);
            }
            groups.insert(g, tensors);
        }
        Ok(Checkpoint {
            meta: header.meta,
            groups,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config serializes")
}

fn from_json<T: for<'de> Deserialize<'de>>(ck: &Checkpoint, key: &str) -> Result<T> {
    serde_json::from_str(ck.meta(key)?).map_err(|e| Error::Checkpoint(format!("bad {key} metadata: {e}")))
}

fn check_kind(ck: &Checkpoint, kind: &str) -> Result<()> {
    let found = ck.meta("kind")?;
    if found != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found {found}"
        )));
    }
    Ok(())
}

/// Base codec and hyper-latent prior.
pub fn base_checkpoint(codec: &CodecWeights, prior: &FactorizedPrior) -> Checkpoint {
    let mut ck = Checkpoint::new()
        .with_meta("kind", "base")
        .with_meta("codec", to_json(&codec.config));
    ck.add_group("codec", codec);
    ck.add_group("prior", prior);
    ck
}

pub fn load_base(ck: &Checkpoint) -> Result<(CodecWeights, FactorizedPrior)> {
    check_kind(ck, "base")?;
    let config: CodecConfig = from_json(ck, "codec")?;
    let mut codec = CodecWeights::init(config, 0)?;
    let mut prior = FactorizedPrior::new(config.n_channels);
    ck.load_group("codec", &mut codec)?;
    ck.load_group("prior", &mut prior)?;
    Ok((codec, prior))
}

/// Adapter set with the `AdapterSpec` and placement needed to rebuild it.
pub fn adapter_checkpoint(adapters: &AdapterSet, spec: &AdapterSpec) -> Checkpoint {
    let mut ck = Checkpoint::new()
        .with_meta("kind", "adapters")
        .with_meta("spec", to_json(spec))
        .with_meta("placement", to_json(&adapters.placement));
    ck.add_group("adapters", adapters);
    ck
}

pub fn load_adapters(ck: &Checkpoint, codec: &CodecConfig) -> Result<(AdapterSet, AdapterSpec)> {
    check_kind(ck, "adapters")?;
    let spec: AdapterSpec = from_json(ck, "spec")?;
    let placement: PlacementConfig = from_json(ck, "placement")?;
    let mut set = AdapterSet::init(&spec, &placement, |s| site_channels(codec, s), 0)?;
    ck.load_group("adapters", &mut set)?;
    Ok((set, spec))
}

pub fn task_checkpoint(model: &ConvClassifier, config: &TaskModelConfig) -> Checkpoint {
    let mut ck = Checkpoint::new()
        .with_meta("kind", "task")
        .with_meta("task", to_json(config));
    ck.add_group("task", model);
    ck
}

pub fn load_task(ck: &Checkpoint) -> Result<ConvClassifier> {
    check_kind(ck, "task")?;
    let config: TaskModelConfig = from_json(ck, "task")?;
    let mut m = ConvClassifier::init(&config, 0)?;
    ck.load_group("task", &mut m)?;
    Ok(m)
}

/// Mask generator and decoder adapters of the scalable mode.
pub fn scalable_checkpoint(
    gen: &MaskGenerator,
    config: &MaskGeneratorConfig,
    adapters: &AdapterSet,
    spec: &AdapterSpec,
) -> Checkpoint {
    let mut ck = adapter_checkpoint(adapters, spec)
        .with_meta("kind", "scalable")
        .with_meta("generator", to_json(config))
        .with_meta("latent_channels", gen.latent_channels().to_string());
    ck.add_group("mask", gen);
    ck
}

pub fn load_scalable(ck: &Checkpoint, codec: &CodecConfig) -> Result<(MaskGenerator, AdapterSet, AdapterSpec)> {
    check_kind(ck, "scalable")?;
    let config: MaskGeneratorConfig = from_json(ck, "generator")?;
    let mut gen = MaskGenerator::init(codec.m_channels, &config, 0)?;
    ck.load_group("mask", &mut gen)?;
    let spec: AdapterSpec = from_json(ck, "spec")?;
    let placement: PlacementConfig = from_json(ck, "placement")?;
    let mut set = AdapterSet::init(&spec, &placement, |s| site_channels(codec, s), 0)?;
    ck.load_group("adapters", &mut set)?;
    Ok((gen, set, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Linear;
    use rand::SeedableRng;

    #[test]
    fn roundtrip_and_integrity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let a = Linear::init(3, 2, &mut rng);
        let mut ck = Checkpoint::new().with_meta("kind", "test");
        ck.add_group("head", &a);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let mut b = Linear::zeros(3, 2);
        back.load_group("head", &mut b).unwrap();
        assert_eq!(a.checksum(), b.checksum());

        let mut corrupt = bytes.clone();
        *corrupt.last_mut().unwrap() ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&corrupt), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = Linear::zeros(4, 2);
        assert!(back.load_group("head", &mut wrong).is_err());
        assert!(back.load_group("missing", &mut b).is_err());
    }

    #[test]
    fn bundles_rebuild_models() {
        let config = CodecConfig {
            n_channels: 4,
            m_channels: 6,
        };
        let codec = CodecWeights::init(config, 5).unwrap();
        let prior = FactorizedPrior::new(4);
        let ck = Checkpoint::from_bytes(&base_checkpoint(&codec, &prior).to_bytes()).unwrap();
        let (c2, p2) = load_base(&ck).unwrap();
        assert_eq!(c2.checksum(), codec.checksum());
        assert_eq!(p2, prior);
        assert!(matches!(load_task(&ck), Err(Error::Checkpoint(_))));

        let spec = AdapterSpec {
            middle_dim: 3,
            ..Default::default()
        };
        let set = AdapterSet::init(&spec, &PlacementConfig::default(), |s| site_channels(&config, s), 1).unwrap();
        let (s2, spec2) = load_adapters(&adapter_checkpoint(&set, &spec), &config).unwrap();
        assert_eq!((s2, spec2), (set, spec));
    }
}
