//! Binary sequence files and the tab-separated dataset manifest.
//!
//! Sequence layout (little endian): `b"IIPS"`, then u32 version, C, F, V,
//! persons and label, then `C*F*V*persons` f32 coordinates in `(c, f, v, b)`
//! row-major order. Coordinates are stored at f32 precision.

use std::fs;
use std::path::{Path, PathBuf};

use super::{SkeletonSequence, CHANNELS};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;

pub const SEQUENCE_MAGIC: &[u8; 4] = b"IIPS";
pub const SEQUENCE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4;

pub fn encode_sequence(seq: &SkeletonSequence) -> Vec<u8> {
    let s = seq.coords().shape();
    let mut buf = Vec::with_capacity(HEADER_LEN + seq.coords().len() * 4);
    buf.extend_from_slice(SEQUENCE_MAGIC);
    for v in [
        SEQUENCE_VERSION,
        s[0] as u32,
        s[1] as u32,
        s[2] as u32,
        s[3] as u32,
        seq.label() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &x in seq.coords().data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    buf
}

pub fn decode_sequence(bytes: &[u8]) -> Result<SkeletonSequence> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("truncated header"));
    }
    if &bytes[..4] != SEQUENCE_MAGIC {
        return Err(Error::format(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != SEQUENCE_VERSION {
        return Err(Error::format(format!(
            "unsupported sequence version {version}"
        )));
    }
    let (c, f, v, b, label) = (
        word(1) as usize,
        word(2) as usize,
        word(3) as usize,
        word(4) as usize,
        word(5) as usize,
    );
    if c != CHANNELS {
        return Err(Error::format(format!(
            "expected {CHANNELS} channels, header says {c}"
        )));
    }
    let n = c
        .checked_mul(f)
        .and_then(|x| x.checked_mul(v))
        .and_then(|x| x.checked_mul(b))
        .ok_or_else(|| Error::format("header dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if Some(payload.len()) != n.checked_mul(4) {
        return Err(Error::format(format!(
            "payload holds {} bytes but header [C={c}, F={f}, V={v}, B={b}] needs {}",
            payload.len(),
            n * 4
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|w| f32::from_le_bytes(w.try_into().unwrap()) as f64)
        .collect();
    SkeletonSequence::new(Tensor::new(&[c, f, v, b], data)?, label)
}

pub fn save_sequence(seq: &SkeletonSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_sequence(seq)).map_err(|e| Error::io(path, e))
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<SkeletonSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sequence(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path as written in the manifest (relative paths are resolved against
    /// the manifest's directory by [`DatasetManifest::resolve`]).
    pub path: PathBuf,
    pub label: usize,
    pub subject: u32,
    pub camera: u32,
}

/// `path<TAB>label<TAB>subject<TAB>camera`, one sample per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            entries,
            base_dir: base_dir.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    /// One more than the largest label.
    pub fn num_classes(&self) -> usize {
        self.entries.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self.entries.iter().find(|e| e.label >= num_classes) {
            Some(e) => Err(Error::LabelOutOfRange {
                label: e.label,
                num_classes,
            }),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                format!(
                    "{}\t{}\t{}\t{}\n",
                    e.path.display(),
                    e.label,
                    e.subject,
                    e.camera
                )
            })
            .collect()
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::format(format!(
                    "manifest line {}: expected 4 tab-separated fields, got {}",
                    i + 1,
                    fields.len()
                )));
            }
            let num = |s: &str, what: &str| -> Result<u64> {
                s.trim().parse().map_err(|_| {
                    Error::format(format!("manifest line {}: bad {what} `{s}`", i + 1))
                })
            };
            entries.push(ManifestEntry {
                path: PathBuf::from(fields[0]),
                label: num(fields[1], "label")? as usize,
                subject: num(fields[2], "subject")? as u32,
                camera: num(fields[3], "camera")? as u32,
            });
        }
        Ok(DatasetManifest::new(entries, base_dir))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load_sequences(&self) -> Result<Vec<SkeletonSequence>> {
        self.entries
            .iter()
            .map(|e| {
                let seq = load_sequence(self.resolve(e))?;
                if seq.label() != e.label {
                    return Err(Error::format(format!(
                        "{}: file label {} disagrees with manifest label {}",
                        e.path.display(),
                        seq.label(),
                        e.label
                    )));
                }
                Ok(seq)
            })
            .collect()
    }
}
