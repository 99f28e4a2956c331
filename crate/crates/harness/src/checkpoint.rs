//! Self-contained binary checkpoints.
//!
//! Layout, little-endian: magic `FTFC`, `u16` version, `u32` tensor count, then
//! per tensor a `u16`-prefixed UTF-8 name, `u8` rank, `u32` dims and `f32`
//! data; a CRC-32 of all preceding bytes closes the file.
//!
//! Everything besides the model tensors travels as extra named tensors:
//! `adam.m.<name>` and `adam.v.<name>` hold the moments, `meta.config` the
//! TOML config one byte per value, `meta.loss_curve` the epoch losses, and
//! `meta.epoch`, `meta.step`, `meta.lr` integers (or `f64` bits) split into
//! 16-bit chunks, each exact in `f32`. Shuffling and augmentation streams are
//! derived from `(seed, epoch)`, so the config and epoch fix the random state.

use std::collections::HashMap;
use std::path::Path;

use fatformer::FatFormer;
use numcore::{AdamConfig, AdamState, ParamStore};

use crate::{HarnessError, Result, TrainConfig};

pub const MAGIC: &[u8; 4] = b"FTFC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: FatFormer,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub loss_curve: Vec<f32>,
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
    /// Byte offset of the entry, for error messages.
    offset: usize,
}

fn chunks16(v: u64) -> Vec<f32> {
    (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect()
}

fn unchunk16(e: &Entry) -> Result<u64> {
    if e.data.len() != 4 {
        return Err(corrupt(
            e.offset,
            format!("{} holds {} values, expected 4", e.name, e.data.len()),
        ));
    }
    let mut v = 0u64;
    for (i, &x) in e.data.iter().enumerate() {
        if !(0.0..65536.0).contains(&x) || x.fract() != 0.0 {
            return Err(corrupt(e.offset, format!("{} chunk {x} out of range", e.name)));
        }
        v |= (x as u64) << (16 * i);
    }
    Ok(v)
}

fn corrupt(offset: usize, detail: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint {
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn encode(entries: &[(String, Vec<usize>, &[f32])]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, data) in entries {
        out.extend_from_slice(&u16::try_from(name.len()).expect("tensor names are short").to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&u32::try_from(d).expect("dims fit in u32").to_le_bytes());
        }
        for x in *data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

fn decode(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(corrupt(4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let offset = r.pos;
        let n = r.u16("name length")? as usize;
        let raw = r.take(n, "name")?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| corrupt(offset + 2, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let shape = (0..rank).map(|_| r.u32("dim")).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|l| l.checked_mul(4))
            .ok_or_else(|| corrupt(offset, format!("{name}: shape {shape:?} overflows")))?;
        let data = r
            .take(len, &name)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(Entry {
            name,
            shape,
            data,
            offset,
        });
    }
    let crc_at = r.pos;
    let stored = u32::from_le_bytes(r.take(4, "checksum")?.try_into().unwrap());
    if r.pos != buf.len() {
        return Err(corrupt(r.pos, format!("{} trailing bytes", buf.len() - r.pos)));
    }
    if crc32fast::hash(&buf[..crc_at]) != stored {
        return Err(corrupt(crc_at, "checksum mismatch"));
    }
    Ok(entries)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        for (_, name, t) in self.store.iter() {
            entries.push((name.to_string(), t.shape().to_vec(), t.data()));
        }
        for (id, name, t) in self.store.iter() {
            entries.push((format!("adam.m.{name}"), t.shape().to_vec(), self.adam.moments(id).0));
        }
        for (id, name, t) in self.store.iter() {
            entries.push((format!("adam.v.{name}"), t.shape().to_vec(), self.adam.moments(id).1));
        }
        let config: Vec<f32> = self.config.to_toml().bytes().map(f32::from).collect();
        let epoch = chunks16(self.epoch as u64);
        let step = chunks16(self.adam.step_count());
        let lr = chunks16(self.adam.config.lr.to_bits());
        entries.push(("meta.config".into(), vec![config.len()], &config));
        entries.push(("meta.epoch".into(), vec![4], &epoch));
        entries.push(("meta.step".into(), vec![4], &step));
        entries.push(("meta.lr".into(), vec![4], &lr));
        entries.push(("meta.loss_curve".into(), vec![self.loss_curve.len()], &self.loss_curve));
        encode(&entries)
    }

    /// Parses and validates a whole file before building any state, so a
    /// corrupt file never yields a partial checkpoint.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let entries = decode(buf)?;
        let mut by_name: HashMap<&str, &Entry> = HashMap::new();
        for e in &entries {
            if by_name.insert(&e.name, e).is_some() {
                return Err(corrupt(e.offset, format!("duplicate tensor {}", e.name)));
            }
        }
        let need = |name: &str| -> Result<&Entry> {
            by_name
                .get(name)
                .copied()
                .ok_or_else(|| corrupt(buf.len(), format!("missing tensor {name}")))
        };
        let cfg = need("meta.config")?;
        let bytes: Vec<u8> = cfg
            .data
            .iter()
            .map(|&x| {
                if (0.0..256.0).contains(&x) && x.fract() == 0.0 {
                    Ok(x as u8)
                } else {
                    Err(corrupt(cfg.offset, "meta.config holds a non-byte value"))
                }
            })
            .collect::<Result<_>>()?;
        let text = String::from_utf8(bytes).map_err(|_| corrupt(cfg.offset, "meta.config is not UTF-8"))?;
        let config = TrainConfig::from_toml(&text).map_err(|e| corrupt(cfg.offset, format!("meta.config: {e}")))?;
        let epoch = unchunk16(need("meta.epoch")?)? as usize;
        let step = unchunk16(need("meta.step")?)?;
        let lr = f64::from_bits(unchunk16(need("meta.lr")?)?);
        let loss_curve = need("meta.loss_curve")?.data.clone();

        let (model, mut store) = FatFormer::build::<f32>(&config.model_config(), config.seed)?;
        let expected = 3 * store.len() + 5;
        if entries.len() != expected {
            return Err(corrupt(6, format!("{} tensors, expected {expected}", entries.len())));
        }
        let mut ms = Vec::with_capacity(store.len());
        let mut vs = Vec::with_capacity(store.len());
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let shape = store.get(id).shape().to_vec();
            let fetch = |key: String| -> Result<Vec<f32>> {
                let e = need(&key)?;
                if e.shape != shape {
                    return Err(corrupt(
                        e.offset,
                        format!("{key}: shape {:?}, model expects {shape:?}", e.shape),
                    ));
                }
                Ok(e.data.clone())
            };
            let data = fetch(name.clone())?;
            ms.push(fetch(format!("adam.m.{name}"))?);
            vs.push(fetch(format!("adam.v.{name}"))?);
            store.get_mut(id).data_mut().copy_from_slice(&data);
        }
        let adam = AdamState::from_parts(
            AdamConfig {
                lr,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: 1e-8,
            },
            step,
            ms,
            vs,
        )?;
        Ok(Checkpoint {
            config,
            model,
            store,
            adam,
            epoch,
            loss_curve,
        })
    }

    /// Writes through a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
