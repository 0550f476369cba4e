//! Checkpoint files: `"SAMA"`, a u32 version, a u64 header length, a JSON
//! header (tensor table, partition labels, config snapshot), then raw
//! little-endian f32 blobs in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::plm::{Plm, PlmConfig, Segmenter};
use crate::pmm::{Pmm, PmmConfig};
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"SAMA";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub plm: Option<PlmConfig>,
    pub pmm: Option<PmmConfig>,
    /// Checksum of the backbone tensors the adapters were trained against.
    pub backbone_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Frozen,
    Trainable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub partition: BTreeMap<String, Role>,
    pub train: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    partition: BTreeMap<String, Role>,
    config: ModelConfig,
    train: Option<TrainConfig>,
}

/// Short identifier of a set of backbone tensors.
pub fn backbone_id(params: &ParamStore) -> String {
    params.checksum(crate::backbone::NS)[..16].to_string()
}

fn at(offset: usize, message: impl Into<String>) -> Error {
    Error::format(format!("offset {offset}"), message)
}

impl Checkpoint {
    /// Wraps parameters; tensors matching `trainable` are labelled as such.
    pub fn new(config: ModelConfig, params: ParamStore, trainable: impl Fn(&str) -> bool, train: Option<TrainConfig>) -> Self {
        let partition = params
            .names()
            .map(|n| (n.clone(), if trainable(n) { Role::Trainable } else { Role::Frozen }))
            .collect();
        Self { config, params, partition, train }
    }

    /// Fresh backbone-only checkpoint.
    pub fn from_backbone(cfg: BackboneConfig, params: ParamStore) -> Self {
        let id = backbone_id(&params);
        let config = ModelConfig { backbone: cfg, plm: None, pmm: None, backbone_id: id };
        Self::new(config, params, |_| false, None)
    }

    /// Content hash of every tensor.
    pub fn id(&self) -> String {
        self.params.checksum("")[..16].to_string()
    }

    pub fn backbone(&self) -> Result<Backbone> {
        Backbone::new(self.config.backbone.clone())
    }

    pub fn plm(&self) -> Result<Option<Plm>> {
        self.config.plm.clone().map(Plm::new).transpose()
    }

    pub fn pmm(&self) -> Result<Option<Pmm>> {
        self.config.pmm.clone().map(Pmm::new).transpose()
    }

    pub fn segmenter(&self) -> Result<Segmenter> {
        let bb = self.backbone()?;
        Ok(match self.plm()? {
            Some(plm) => Segmenter::with_plm(bb, plm, self.params.clone()),
            None => Segmenter { backbone: bb, plm: None, params: self.params.clone() },
        })
    }

    /// Adapter tensors only; the backbone is referenced by id.
    pub fn adapter_only(&self) -> Checkpoint {
        let mut params = self.params.subset(crate::plm::NS);
        params.extend(self.params.subset(crate::pmm::NS));
        let partition = self.partition.iter().filter(|(k, _)| params.contains(k)).map(|(k, v)| (k.clone(), *v)).collect();
        Checkpoint { config: self.config.clone(), params, partition, train: self.train.clone() }
    }

    /// Plugs the adapters of `adapter` into `backbone`. A differing backbone
    /// id is allowed but reported as a warning.
    pub fn attach(backbone: &Checkpoint, adapter: &Checkpoint) -> Result<(Checkpoint, Vec<String>)> {
        if backbone.config.backbone != adapter.config.backbone {
            return Err(Error::Config("adapter was built for a different backbone architecture".into()));
        }
        let mut warnings = Vec::new();
        let id = backbone_id(&backbone.params);
        if id != adapter.config.backbone_id {
            warnings.push(format!("adapter trained on backbone {} but loaded over {id}", adapter.config.backbone_id));
        }
        let mut params = backbone.params.subset(crate::backbone::NS);
        params.extend(adapter.params.subset(crate::plm::NS));
        params.extend(adapter.params.subset(crate::pmm::NS));
        let mut config = adapter.config.clone();
        config.backbone_id = id;
        let ck = Checkpoint::new(config, params, |n| adapter.partition.get(n) == Some(&Role::Trainable), adapter.train.clone());
        Ok((ck, warnings))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            tensors.push(TensorEntry { name: name.clone(), dtype: "f32".into(), shape: t.shape().to_vec(), offset });
            offset += 4 * t.len() as u64;
        }
        let header = Header {
            tensors,
            partition: self.partition.clone(),
            config: self.config.clone(),
            train: self.train.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        if buf.len() < PREAMBLE {
            return Err(at(buf.len(), "file shorter than the 16-byte preamble"));
        }
        if &buf[..4] != MAGIC {
            return Err(at(0, "bad magic"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(at(4, format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes"));
        if hlen > (buf.len() - PREAMBLE) as u64 {
            return Err(at(8, format!("header length {hlen} exceeds file size {}", buf.len())));
        }
        let data_start = PREAMBLE + hlen as usize;
        let header: Header = serde_json::from_slice(&buf[PREAMBLE..data_start])
            .map_err(|e| at(PREAMBLE, format!("header JSON: {e}")))?;
        let mut params = ParamStore::new();
        let mut expected = 0u64;
        for e in &header.tensors {
            let pos = data_start as u64 + e.offset;
            if e.dtype != "f32" {
                return Err(at(pos as usize, format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected {
                return Err(at(pos as usize, format!("{}: blobs must be contiguous", e.name)));
            }
            let n: usize = e.shape.iter().product();
            let end = pos + 4 * n as u64;
            if end > buf.len() as u64 {
                return Err(at(pos as usize, format!("{}: blob truncated", e.name)));
            }
            let data: Vec<f32> = buf[pos as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(e.name.clone(), Tensor::new(&e.shape, data)?);
            expected += 4 * n as u64;
        }
        let end = data_start as u64 + expected;
        if end != buf.len() as u64 {
            return Err(at(end as usize, format!("{} trailing bytes", buf.len() as u64 - end)));
        }
        if let Some(k) = header.partition.keys().find(|k| !params.contains(k)) {
            return Err(at(PREAMBLE, format!("partition names unknown tensor {k}")));
        }
        Ok(Checkpoint { config: header.config, params, partition: header.partition, train: header.train })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path.display(), e))?;
        Checkpoint::from_bytes(&buf)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.partition.iter().filter(|(_, r)| **r == Role::Trainable).map(|(k, _)| k.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = BackboneConfig::tiny();
        let bb = Backbone::new(cfg.clone()).unwrap();
        let mut params = bb.init(3);
        let plm = Plm::new(PlmConfig::for_channels(cfg.channels)).unwrap();
        params.extend(plm.init(4));
        let config = ModelConfig {
            backbone: cfg,
            plm: Some(plm.cfg.clone()),
            pmm: None,
            backbone_id: backbone_id(&params),
        };
        Checkpoint::new(config, params, |n| n.starts_with("plm."), Some(TrainConfig::default()))
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let ck = sample();
        let a = ck.to_bytes();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), a);
        assert_eq!(&a[..4], b"SAMA");
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let good = sample().to_bytes();
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format { location, .. }) if location == "offset 0"));
        let mut b = good.clone();
        b[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format { location, .. }) if location == "offset 8"));
        let mut b = good.clone();
        b[8..16].copy_from_slice(&3u64.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format { location, .. }) if location == "offset 16"));
        assert!(matches!(Checkpoint::from_bytes(&good[..good.len() - 2]), Err(Error::Format { .. })));
        assert!(matches!(Checkpoint::from_bytes(&good[..5]), Err(Error::Format { .. })));
        let mut b = good;
        b[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format { location, .. }) if location == "offset 4"));
    }

    #[test]
    fn attach_warns_on_foreign_backbone() {
        let ck = sample();
        let adapter = ck.adapter_only();
        assert!(adapter.params.names().all(|n| n.starts_with("plm.")));
        let same = Checkpoint::from_backbone(ck.config.backbone.clone(), ck.params.subset("backbone."));
        let (_, w) = Checkpoint::attach(&same, &adapter).unwrap();
        assert!(w.is_empty());
        let other_bb = Backbone::new(ck.config.backbone.clone()).unwrap().init(99);
        let other = Checkpoint::from_backbone(ck.config.backbone.clone(), other_bb);
        let (merged, w) = Checkpoint::attach(&other, &adapter).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(merged.params.checksum("backbone."), other.params.checksum("backbone."));
        assert_eq!(merged.params.checksum("plm."), ck.params.checksum("plm."));
    }
}
