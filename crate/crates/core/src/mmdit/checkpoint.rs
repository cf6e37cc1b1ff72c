//! `FFCK` checkpoint files: config, parameters and their EMA shadow, sealed
//! with a CRC-32 over everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::json;
use crate::tensor::{put_string, Cursor};

use super::config::ModelConfig;
use super::params::ModelParams;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub ema: ModelParams,
}

fn put_section(out: &mut Vec<u8>, p: &ModelParams) {
    out.extend_from_slice(&(p.len() as u32).to_le_bytes());
    for (name, t) in p.iter() {
        put_string(out, name);
        out.extend(t.to_bytes());
    }
}

fn read_section(cur: &mut Cursor<'_>, what: &str) -> Result<ModelParams> {
    let n = cur.u32(what)? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..n {
        let at = cur.offset();
        let name = cur.string("parameter name")?;
        let t = cur.tensor()?;
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::format(at, format!("duplicate parameter {name}")));
        }
    }
    Ok(ModelParams::from_map(map))
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams, ema: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        ema.check_against(&config)?;
        Ok(Self { config, params, ema })
    }

    /// Fresh checkpoint whose EMA equals the parameters.
    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        let ema = params.clone();
        Self::new(config, params, ema)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_string(&mut out, &json::canonical(&self.config)?);
        put_section(&mut out, &self.params);
        put_section(&mut out, &self.ema);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::format(bytes.len(), "checkpoint too short"));
        }
        let body = &bytes[..bytes.len() - 4];
        let mut stored = [0u8; 4];
        stored.copy_from_slice(&bytes[bytes.len() - 4..]);
        let stored = u32::from_le_bytes(stored);
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::format(
                body.len(),
                format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            ));
        }
        let mut cur = Cursor::new(body);
        if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic, expected FFCK"));
        }
        let version = cur.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let at = cur.offset();
        let cfg_json = cur.string("config")?;
        let config: ModelConfig =
            serde_json::from_str(&cfg_json).map_err(|e| Error::format(at, format!("config: {e}")))?;
        let params = read_section(&mut cur, "parameter count")?;
        let ema = read_section(&mut cur, "EMA parameter count")?;
        if cur.remaining() != 0 {
            return Err(Error::format(cur.offset(), "trailing bytes before checksum"));
        }
        Self::new(config, params, ema)
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
