//! `VPTMCKPT` tensor container.
//!
//! ```text
//! magic    8 bytes  "VPTMCKPT"
//! version  u16
//! count    u32
//! count x {
//!     name_len u32, name (UTF-8),
//!     rank u32, dims u64 x rank,
//!     values f32 x product(dims)
//! }
//! ```
//!
//! Everything little-endian. Values are stored as `f32`; loading widens
//! them exactly, so save -> load -> save is byte-identical.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::vit::{Backbone, BackboneConfig};

pub const CKPT_MAGIC: &[u8; 8] = b"VPTMCKPT";
pub const CKPT_VERSION: u16 = 1;
const META_BACKBONE: &str = "meta.backbone";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Entries whose name starts with `prefix`, prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        let mut ps = ParamSet::new();
        for (n, t) in &self.entries {
            if let Some(rest) = n.strip_prefix(prefix) {
                ps.insert(rest, t.clone());
            }
        }
        ps
    }

    pub fn extend_with_prefix(&mut self, prefix: &str, params: &ParamSet) {
        for p in params.iter() {
            self.push(format!("{prefix}{}", p.name), p.value.clone());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.write_u16::<LittleEndian>(CKPT_VERSION).unwrap();
        out.write_u32::<LittleEndian>(self.entries.len() as u32).unwrap();
        for (name, t) in &self.entries {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u32::<LittleEndian>(t.rank() as u32).unwrap();
            for &d in t.shape() {
                out.write_u64::<LittleEndian>(d as u64).unwrap();
            }
            for &v in t.data() {
                out.write_f32::<LittleEndian>(v as f32).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let truncated = |cur: &Cursor<&[u8]>, what: &str| Error::Format {
            offset: cur.position(),
            detail: format!("truncated while reading {what}"),
        };
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)
            .map_err(|_| truncated(&cur, "magic"))?;
        if &magic != CKPT_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(CKPT_MAGIC).into(),
                found: String::from_utf8_lossy(&magic).into(),
            });
        }
        let version = cur
            .read_u16::<LittleEndian>()
            .map_err(|_| truncated(&cur, "version"))?;
        if version != CKPT_VERSION {
            return Err(Error::Format {
                offset: 8,
                detail: format!("unsupported version {version}"),
            });
        }
        let count = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| truncated(&cur, "entry count"))?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = cur
                .read_u32::<LittleEndian>()
                .map_err(|_| truncated(&cur, "name length"))? as usize;
            let at = cur.position();
            if at as usize + len > bytes.len() {
                return Err(truncated(&cur, "name"));
            }
            let mut name = vec![0u8; len];
            cur.read_exact(&mut name).map_err(|_| truncated(&cur, "name"))?;
            let name = String::from_utf8(name).map_err(|_| Error::Format {
                offset: at,
                detail: "name is not UTF-8".into(),
            })?;
            let rank = cur
                .read_u32::<LittleEndian>()
                .map_err(|_| truncated(&cur, "rank"))?;
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(
                    cur.read_u64::<LittleEndian>()
                        .map_err(|_| truncated(&cur, "dims"))? as usize,
                );
            }
            let numel: usize = shape.iter().product();
            let remaining = bytes.len() as u64 - cur.position();
            if (numel as u64) * 4 > remaining {
                return Err(truncated(&cur, &format!("values of `{name}`")));
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(cur.read_f32::<LittleEndian>().unwrap() as f64);
            }
            entries.push((name, Tensor::new(shape, data)?));
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(Error::Format {
                offset: cur.position(),
                detail: "trailing bytes".into(),
            });
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn config_to_tensor(c: &BackboneConfig) -> Tensor {
    let v = [
        c.image_size,
        c.channels,
        c.patch_size,
        c.hidden_dim,
        c.depth,
        c.heads,
        c.mlp_ratio,
        c.vocab_size,
    ];
    Tensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect()).unwrap()
}

fn config_from_tensor(t: &Tensor) -> Result<BackboneConfig> {
    let v = t.data();
    if v.len() != 8 || v.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad `{META_BACKBONE}` entry"),
        });
    }
    let u = |i: usize| v[i] as usize;
    let cfg = BackboneConfig {
        image_size: u(0),
        channels: u(1),
        patch_size: u(2),
        hidden_dim: u(3),
        depth: u(4),
        heads: u(5),
        mlp_ratio: u(6),
        vocab_size: u(7),
    };
    cfg.validate()?;
    Ok(cfg)
}

impl Backbone {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push(META_BACKBONE, config_to_tensor(&self.config));
        ck.extend_with_prefix("", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck
            .get(META_BACKBONE)
            .ok_or_else(|| Error::UnknownName(META_BACKBONE.into()))?;
        let cfg = config_from_tensor(meta)?;
        Backbone::from_params(cfg, &ck.with_prefix(""))
    }

    /// Serialized backbone bytes; equal bytes mean bit-identical weights.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        self.to_checkpoint().to_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedStream;

    #[test]
    fn backbone_round_trip_is_bit_exact() {
        let mut rng = SeedStream::new(11).rng("init");
        let cfg = BackboneConfig {
            depth: 1,
            vocab_size: 16,
            ..BackboneConfig::desk()
        };
        let bb = Backbone::init(cfg, &mut rng).unwrap();
        let bytes = bb.checkpoint_bytes();
        let back = Backbone::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.checkpoint_bytes(), bytes);
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = Checkpoint::new().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let mut ck = Checkpoint::new();
        ck.push("w", Tensor::ones(&[3, 3]));
        let bytes = ck.to_bytes();
        match Checkpoint::from_bytes(&bytes[..bytes.len() - 2]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 8),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_dims_allowed() {
        let mut ck = Checkpoint::new();
        ck.push("prompt.prompts", Tensor::zeros(&[0, 4]));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.get("prompt.prompts").unwrap().shape(), &[0, 4]);
    }
}
