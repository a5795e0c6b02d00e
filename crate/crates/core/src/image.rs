//! Object files, executables and the padding metadata carried between
//! assembly, pad removal and linking.
//!
//! Both containers are textual JSON documents; `code` is hex encoded and is
//! the only bit-exact payload.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{IsaConfig, OP_HALT, OP_NOP};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed document: {0}")]
    Malformed(String),
    #[error("invalid image: {0}")]
    Invariant(String),
}

impl From<serde_json::Error> for ImageError {
    fn from(e: serde_json::Error) -> Self {
        ImageError::Malformed(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum PadKind {
    /// Indirect-jump target moved to a bundle start.
    AlignTarget = 1,
    /// Call moved to the end of a bundle so its return point is aligned.
    CallEnd = 2,
    /// Instruction moved to avoid straddling a bundle boundary.
    CrossBundle = 3,
}

impl TryFrom<u8> for PadKind {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(PadKind::AlignTarget),
            2 => Ok(PadKind::CallEnd),
            3 => Ok(PadKind::CrossBundle),
            _ => Err(format!("unknown pad kind {v}")),
        }
    }
}

impl From<PadKind> for u8 {
    fn from(k: PadKind) -> u8 {
        k as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadRecord {
    pub offset: usize,
    pub size: usize,
    pub kind: PadKind,
}

impl PadRecord {
    pub fn end(&self) -> usize {
        self.offset + self.size
    }
}

/// A 2-byte little-endian absolute address field filled in by the linker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relocation {
    pub offset: usize,
    pub symbol: String,
}

/// Symbols whose name starts with `.` are local to their object.
pub fn is_local_symbol(name: &str) -> bool {
    name.starts_with('.')
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectImage {
    #[serde(with = "hex_bytes")]
    pub code: Vec<u8>,
    pub symbols: BTreeMap<String, usize>,
    pub relocations: Vec<Relocation>,
    pub pad_info: Vec<PadRecord>,
    pub entry: String,
}

impl ObjectImage {
    pub fn total_padding(&self) -> usize {
        self.pad_info.iter().map(|p| p.size).sum()
    }

    /// Checks every structural invariant of an object under `isa`.
    pub fn check(&self, isa: &IsaConfig) -> Result<(), ImageError> {
        let bad = |m: String| Err(ImageError::Invariant(m));
        let b = isa.bundle_size;
        let len = self.code.len();
        if len == 0 || len % b != 0 {
            return bad(format!("code length {len} is not a nonzero multiple of {b}"));
        }
        if self.code[len - b..].iter().any(|&x| x != OP_NOP) {
            return bad("final bundle is not an all-NOP merge bundle".into());
        }
        let mut prev_end: Option<usize> = None;
        for p in &self.pad_info {
            if p.size >= b {
                return bad(format!("pad at {} has size {} >= bundle size", p.offset, p.size));
            }
            if p.end() > len {
                return bad(format!("pad at {} runs past end of code", p.offset));
            }
            if let Some(e) = prev_end {
                if p.offset < e {
                    return bad(format!("pad at {} overlaps or is out of order", p.offset));
                }
            }
            // Offsets are strictly increasing even for empty records.
            prev_end = Some(p.end().max(p.offset + 1));
        }
        for r in &self.relocations {
            if r.offset + 2 > len {
                return bad(format!("relocation at {} runs past end of code", r.offset));
            }
        }
        for (name, &off) in &self.symbols {
            if off > len {
                return bad(format!("symbol {name} at {off} is outside the object"));
            }
        }
        if !self.symbols.contains_key(&self.entry) {
            return bad(format!("entry symbol {} is not defined", self.entry));
        }
        Ok(())
    }

    /// Offsets covered by relocation fields.
    pub fn relocation_bytes(&self) -> impl Iterator<Item = usize> + '_ {
        self.relocations.iter().flat_map(|r| [r.offset, r.offset + 1])
    }
}

pub fn serialize_object(obj: &ObjectImage) -> String {
    serde_json::to_string_pretty(obj).expect("object serialization cannot fail")
}

pub fn parse_object(text: &str, isa: &IsaConfig) -> Result<ObjectImage, ImageError> {
    let obj: ObjectImage = serde_json::from_str(text)?;
    obj.check(isa)?;
    Ok(obj)
}

/// A linked program image occupying the whole code region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Executable {
    #[serde(with = "hex_bytes")]
    pub code: Vec<u8>,
    pub entry: usize,
    pub isa: IsaConfig,
}

impl Executable {
    pub fn check(&self) -> Result<(), ImageError> {
        self.isa
            .check()
            .map_err(|e| ImageError::Invariant(e.to_string()))?;
        if self.code.len() != self.isa.code_region_size {
            return Err(ImageError::Invariant(format!(
                "code length {} != code region size {}",
                self.code.len(),
                self.isa.code_region_size
            )));
        }
        if !self.isa.is_bundle_aligned(self.entry) || self.entry >= self.code.len() {
            return Err(ImageError::Invariant(format!(
                "entry {:#x} is not a bundle start inside the code region",
                self.entry
            )));
        }
        Ok(())
    }
}

/// Fills `code` up to the code region size: NOP bundles whose very last byte
/// is a HALT, so straight-line execution through fill stops instead of
/// running off the region.
pub fn fill_region(code: &mut Vec<u8>, isa: &IsaConfig) {
    if code.len() < isa.code_region_size {
        code.resize(isa.code_region_size, OP_NOP);
        *code.last_mut().unwrap() = OP_HALT;
    }
}

pub fn serialize_executable(exe: &Executable) -> String {
    serde_json::to_string_pretty(exe).expect("executable serialization cannot fail")
}

pub fn parse_executable(text: &str) -> Result<Executable, ImageError> {
    let exe: Executable = serde_json::from_str(text)?;
    exe.check()?;
    Ok(exe)
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}
