//! `CHEF` checkpoints: config echo plus every named tensor.
//!
//! Layout, all integers u32 little-endian:
//!
//! ```text
//! "CHEF" | version (=1) | header length | header JSON
//!        | tensor count | count × (name length | name | TNSR record)
//! ```
//!
//! The header holds the config (paths stripped) and the completed step
//! count. Tensors are the frozen backbone (`frozen/…`), the bridge
//! (`bridge/…`) and the Adam moments (`optim/bridge/…/m`, `…/v`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::Backbones;
use crate::bridge::{BridgeParams, Model, Trainer};
use crate::config::{Config, Paths};
use crate::data::tnsr::{self, Reader};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"CHEF";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: Config,
    trainer_step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub backbones: Backbones,
    pub bridge: BridgeParams,
    pub trainer: Trainer,
}

fn moment_names(param: &str) -> (String, String) {
    (format!("optim/{param}/m"), format!("optim/{param}/v"))
}

impl Checkpoint {
    /// Fresh bridge and optimizer around already-built backbones.
    pub fn initial(config: &Config, backbones: Backbones) -> Result<Self> {
        let bridge = BridgeParams::init(config)?;
        let trainer = Trainer::new(&bridge, config.optim);
        Ok(Self {
            config: Self::echo(config),
            backbones,
            bridge,
            trainer,
        })
    }

    fn echo(config: &Config) -> Config {
        Config {
            paths: Paths::default(),
            ..config.clone()
        }
    }

    pub fn model(&self) -> Model<'_> {
        Model::new(&self.backbones, &self.bridge)
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.extend(self.backbones.store.iter().map(|(n, t)| (n.to_string(), t)));
        out.extend(self.bridge.store.iter().map(|(n, t)| (n.to_string(), t)));
        for ((name, _), state) in self.bridge.store.iter().zip(&self.trainer.states) {
            let (m, v) = moment_names(name);
            out.push((m, &state.m));
            out.push((v, &state.v));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            config: Self::echo(&self.config),
            trainer_step: self.trainer.step,
        })
        .expect("header serializes");
        let tensors = self.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            tnsr::encode(t, &mut out);
        }
        out
    }

    /// Parses and validates a checkpoint. The tensor layout is rebuilt from
    /// the config echo and every stored tensor must match it by name and
    /// shape, with nothing missing and nothing extra.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(4)? != MAGIC {
            return Err(r.fail(0, "bad magic, expected CHEF"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(4, format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let at = r.pos();
        let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| r.fail(at, format!("header: {e}")))?;
        let config = header.config;
        config.validate()?;
        let mut ckpt = Self {
            backbones: Backbones::layout(&config)?,
            bridge: BridgeParams::layout(&config)?,
            trainer: Trainer::new(&BridgeParams::<f32>::layout(&config)?, config.optim),
            config,
        };
        ckpt.trainer.step = header.trainer_step;
        for s in &mut ckpt.trainer.states {
            s.t = header.trainer_step;
        }

        let mut stored: BTreeMap<String, Tensor> = BTreeMap::new();
        let count = r.u32()?;
        for _ in 0..count {
            let at = r.pos();
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| r.fail(at, "tensor name is not UTF-8"))?
                .to_string();
            let t = r.tensor()?;
            if stored.insert(name.clone(), t).is_some() {
                return Err(r.fail(at, format!("duplicate tensor {name}")));
            }
        }
        if !r.at_end() {
            return Err(r.fail(r.pos(), "trailing bytes after last tensor"));
        }

        let mut take = |name: &str, slot: &mut Tensor| -> Result<()> {
            let t = stored.remove(name).ok_or_else(|| Error::CheckpointShape {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                found: Vec::new(),
            })?;
            if t.shape() != slot.shape() {
                return Err(Error::CheckpointShape {
                    name: name.to_string(),
                    expected: slot.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            *slot = t;
            Ok(())
        };
        for id in ckpt.backbones.store.ids().collect::<Vec<_>>() {
            let name = ckpt.backbones.store.name(id).to_string();
            take(&name, ckpt.backbones.store.get_mut(id))?;
        }
        for (i, id) in ckpt.bridge.store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let name = ckpt.bridge.store.name(id).to_string();
            take(&name, ckpt.bridge.store.get_mut(id))?;
            let (m, v) = moment_names(&name);
            take(&m, &mut ckpt.trainer.states[i].m)?;
            take(&v, &mut ckpt.trainer.states[i].v)?;
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                msg: format!("unexpected tensor {extra} for this config"),
            });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn sha256(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
