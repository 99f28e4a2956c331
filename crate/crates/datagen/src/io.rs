//! On-disk layout: `manifest.txt` plus one `<split>.ftfd` file per split.
//!
//! Split file: magic `FTFD`, version `u16`, image count `u32`, then per image
//! label `u8`, family `u8` and `3·32·32` little-endian `f32` pixels.

use std::fs;
use std::path::Path;

use numcore::Tensor;
use sha2::{Digest, Sha256};

use crate::splits::{DatasetBundle, Split, SplitKind};
use crate::synth::{Family, LabeledImage, CHANNELS, IMAGE_SIZE, PIXELS};
use crate::{DataError, Result};

pub const MAGIC: &[u8; 4] = b"FTFD";
pub const FORMAT_VERSION: u16 = 1;
pub const MANIFEST: &str = "manifest.txt";

pub fn encode_split(images: &[LabeledImage]) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + images.len() * (2 + 4 * PIXELS));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(images.len() as u32).to_le_bytes());
    for img in images {
        out.push(img.label);
        out.push(img.family.code());
        for v in img.pixels.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(DataError::Corrupt {
                offset: self.pos as u64,
                detail: format!("file ends inside {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn corrupt(&self, at: usize, detail: String) -> DataError {
        DataError::Corrupt {
            offset: at as u64,
            detail,
        }
    }
}

/// Parses a split file. Seeds are not stored, so they are filled in from
/// `seeds_from` in file order.
pub fn decode_split(buf: &[u8], seeds_from: u64) -> Result<Vec<LabeledImage>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.corrupt(0, "bad magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("two bytes"));
    if version != FORMAT_VERSION {
        return Err(r.corrupt(4, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(r.take(4, "count")?.try_into().expect("four bytes")) as usize;
    let mut images = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let at = r.pos;
        let head = r.take(2, "image header")?;
        let (label, family) = (head[0], head[1]);
        let family = Family::from_code(family).map_err(|e| r.corrupt(at + 1, e.to_string()))?;
        if label != family.label() {
            return Err(r.corrupt(at, format!("label {label} does not match family {}", family.tag())));
        }
        let raw = r.take(4 * PIXELS, "pixel data")?;
        let px: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
            .collect();
        images.push(LabeledImage {
            pixels: Tensor::new(&[CHANNELS, IMAGE_SIZE, IMAGE_SIZE], px).expect("pixel count is fixed"),
            label,
            family,
            seed: seeds_from + i as u64,
        });
    }
    if r.pos != buf.len() {
        return Err(r.corrupt(r.pos, format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(images)
}

/// Hex SHA-256 of `blob <len>\0<bytes>`, the object hash git uses in its
/// SHA-256 repository format.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn manifest(bundle: &DatasetBundle) -> String {
    let mut m = String::new();
    m.push_str(&format!("format_version={FORMAT_VERSION}\n"));
    m.push_str(&format!("image_size={IMAGE_SIZE}\n"));
    m.push_str(&format!("base_seed={}\n", bundle.base_seed));
    m.push_str(&format!("artifact_amplitude={}\n", bundle.amplitude));
    for s in bundle.splits() {
        let name = s.kind.name();
        m.push_str(&format!("{name}.count={}\n", s.len()));
        m.push_str(&format!("{name}.seeds={}..{}\n", s.seeds.start, s.seeds.end));
        m.push_str(&format!("{name}.hash={}\n", content_hash(&encode_split(&s.images))));
    }
    m
}

pub fn manifest_hash(bundle: &DatasetBundle) -> String {
    content_hash(manifest(bundle).as_bytes())
}

pub fn save(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in bundle.splits() {
        fs::write(dir.join(format!("{}.ftfd", s.kind.name())), encode_split(&s.images))?;
    }
    fs::write(dir.join(MANIFEST), manifest(bundle))?;
    Ok(())
}

fn field<'a>(lines: &'a [(String, String)], key: &str) -> Result<&'a str> {
    lines
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| DataError::Config(format!("manifest lacks {key}")))
}

fn parse<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse()
        .map_err(|_| DataError::Config(format!("manifest value {key}={v:?} is malformed")))
}

/// Loads a saved bundle and checks every split file against the manifest hashes.
pub fn load(dir: &Path) -> Result<DatasetBundle> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let lines: Vec<(String, String)> = text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    let version: u16 = parse(field(&lines, "format_version")?, "format_version")?;
    if version != FORMAT_VERSION {
        return Err(DataError::Config(format!("manifest version {version}")));
    }
    let base_seed = parse(field(&lines, "base_seed")?, "base_seed")?;
    let amplitude = parse(field(&lines, "artifact_amplitude")?, "artifact_amplitude")?;
    let mut splits = Vec::new();
    for kind in SplitKind::ALL {
        let name = kind.name();
        let key = format!("{name}.seeds");
        let seeds = field(&lines, &key)?;
        let (a, b) = seeds
            .split_once("..")
            .ok_or_else(|| DataError::Config(format!("manifest value {key}={seeds:?} is malformed")))?;
        let seeds = parse::<u64>(a, &key)?..parse::<u64>(b, &key)?;
        let bytes = fs::read(dir.join(format!("{name}.ftfd")))?;
        let want = field(&lines, &format!("{name}.hash"))?;
        if content_hash(&bytes) != want {
            return Err(DataError::Config(format!(
                "{name}.ftfd does not match its manifest hash"
            )));
        }
        let images = decode_split(&bytes, seeds.start)?;
        let count: usize = parse(field(&lines, &format!("{name}.count"))?, "count")?;
        if images.len() != count {
            return Err(DataError::Config(format!(
                "{name} holds {} images, manifest says {count}",
                images.len()
            )));
        }
        splits.push(Split { kind, seeds, images });
    }
    let mut it = splits.into_iter();
    let mut next = || it.next().expect("four splits");
    Ok(DatasetBundle {
        base_seed,
        amplitude,
        train: next(),
        val: next(),
        test_in: next(),
        test_cross: next(),
    })
}
