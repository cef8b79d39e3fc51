//! Versioned little-endian checkpoint files.
//!
//! Layout:
//!
//! ```text
//! "PATC"  version:u32  side:u32 hidden:u32 classes:u32 mode:u32
//! parameters as f64, in ModelParams::arrays order
//! has_ema:u8  [EMA parameters as f64, same order]
//! epoch:u64  meta_len:u32  meta: key=value text (config, metrics, member class)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::numcore::{Arch, Dims, ModelParams};
use crate::training::{TrainConfig, TrainMode};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PATC";
pub const CHECKPOINT_VERSION: u32 = 1;

const METRIC_PREFIX: &str = "metric.";
const INT_CLASS_KEY: &str = "int_class";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mode: TrainMode,
    pub params: ModelParams,
    pub ema: Option<ModelParams>,
    pub config: TrainConfig,
    pub epoch: usize,
    pub metrics: KvMap,
    /// Class index of a single-class `int` member.
    pub int_class: Option<usize>,
}

impl Checkpoint {
    /// The averaged parameters when present, otherwise the raw ones.
    pub fn eval_params(&self) -> &ModelParams {
        self.ema.as_ref().unwrap_or(&self.params)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let dims = self.params.dims;
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [
            CHECKPOINT_VERSION,
            dims.side as u32,
            dims.hidden as u32,
            dims.classes as u32,
            self.mode.code(),
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        write_params(&mut w, &self.params)?;
        match &self.ema {
            Some(e) => {
                w.write_all(&[1])?;
                write_params(&mut w, e)?;
            }
            None => w.write_all(&[0])?,
        }
        w.write_all(&(self.epoch as u64).to_le_bytes())?;
        let mut meta = KvMap::new();
        self.config.to_kv(&mut meta);
        for (k, v) in &self.metrics {
            meta.insert(format!("{METRIC_PREFIX}{k}"), v.clone());
        }
        if let Some(k) = self.int_class {
            meta.insert(INT_CLASS_KEY.into(), k.to_string());
        }
        let text = kv::format(&meta);
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let side = read_u32(&mut r)? as usize;
        let hidden = read_u32(&mut r)? as usize;
        let classes = read_u32(&mut r)? as usize;
        let mode = Arch::from_code(read_u32(&mut r)?)?;
        let dims = Dims { side, hidden, classes };
        let params = read_params(&mut r, mode, dims)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let ema = match flag[0] {
            0 => None,
            1 => Some(read_params(&mut r, mode, dims)?),
            other => return Err(Error::Format(format!("bad EMA flag {other}"))),
        };
        let mut epoch = [0u8; 8];
        r.read_exact(&mut epoch)?;
        let len = read_u32(&mut r)? as usize;
        let mut text = vec![0u8; len];
        r.read_exact(&mut text)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let text = String::from_utf8(text).map_err(|_| Error::Format("checkpoint metadata is not UTF-8".into()))?;
        let meta = kv::parse(&text)?;
        let int_class = match meta.get(INT_CLASS_KEY) {
            Some(v) => Some(
                v.parse()
                    .map_err(|_| Error::Format(format!("bad int_class '{v}'")))?,
            ),
            None => None,
        };
        let metrics = meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(METRIC_PREFIX).map(|m| (m.to_string(), v.clone())))
            .collect();
        Ok(Self {
            mode,
            params,
            ema,
            config: TrainConfig::from_kv(&meta)?,
            epoch: u64::from_le_bytes(epoch) as usize,
            metrics,
            int_class,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(fs::read(path)?.as_slice())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_params<W: Write>(w: &mut W, p: &ModelParams) -> Result<()> {
    let mut buf = Vec::with_capacity(p.num_params() * 8);
    for a in p.arrays() {
        for v in a {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_params<R: Read>(r: &mut R, mode: Arch, dims: Dims) -> Result<ModelParams> {
    let mut p = ModelParams::zeros(mode, dims);
    let mut buf = vec![0u8; p.num_params() * 8];
    r.read_exact(&mut buf)?;
    let mut chunks = buf.chunks_exact(8);
    for a in p.arrays_mut() {
        for (v, c) in a.iter_mut().zip(&mut chunks) {
            *v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
    }
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn sample(mode: Arch, ema: bool) -> Checkpoint {
        let mut rng = substream(61, mode.name());
        let dims = Dims { side: 4, hidden: 5, classes: 3 };
        let params = ModelParams::init(mode, dims, &mut rng);
        let mut metrics = KvMap::new();
        metrics.insert("train_loss".into(), "0.123".into());
        Checkpoint {
            mode,
            ema: ema.then(|| ModelParams::init(mode, dims, &mut rng)),
            params,
            config: TrainConfig {
                ema: ema.then_some(0.9),
                ..TrainConfig::default()
            },
            epoch: 7,
            metrics,
            int_class: (mode == Arch::Int).then_some(2),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for mode in [Arch::Det, Arch::Int, Arch::PatT] {
            for ema in [false, true] {
                let ck = sample(mode, ema);
                let bytes = ck.to_bytes().unwrap();
                let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
                assert_eq!(back, ck);
                assert_eq!(back.to_bytes().unwrap(), bytes);
            }
        }
    }

    #[test]
    fn rejects_bad_headers() {
        let mut bytes = sample(Arch::Det, false).to_bytes().unwrap();
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(
            Checkpoint::read_from(wrong_version.as_slice()),
            Err(Error::Format(_))
        ));
        let mut wrong_mode = bytes.clone();
        wrong_mode[20] = 7;
        assert!(Checkpoint::read_from(wrong_mode.as_slice()).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::read_from(bytes.as_slice()).is_err());
        let short = &sample(Arch::Det, false).to_bytes().unwrap()[..40];
        assert!(Checkpoint::read_from(short).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample(Arch::PatT, true);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
