//! Pad-free representation of an object used to re-emit code with different
//! cross-bundle pad sizes.
//!
//! Positions in a [`Layout`] are offsets into the instruction stream with all
//! padding stripped. Alignment requirements (function entries, address-taken
//! labels, call ends) are kept as anchors and re-padded on every build, so
//! only cross-bundle pad sizes are free parameters.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::image::{is_local_symbol, ObjectImage, PadKind, PadRecord, Relocation};
use crate::isa::{decode, Instruction, IsaConfig, OP_JMP, OP_NOP};

/// Prefix of the local symbols created for nop-skip jumps.
pub(crate) const SKIP_SYMBOL_PREFIX: &str = ".S";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("conditional branch at {at:#x} cannot reach {target:#x}")]
    JccOutOfRange { at: usize, target: usize },
    #[error("object stream is not linearly decodable at stripped offset {0:#x}")]
    Undecodable(usize),
    #[error("branch target {0:#x} points into padding")]
    TargetInPad(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Anchor {
    /// Next byte must start a bundle.
    AlignStart,
    /// Next `len` bytes must end exactly at a bundle end.
    CallEnd { len: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub stream: Vec<u8>,
    /// (position of the Jcc, position of its target)
    pub jccs: Vec<(usize, usize)>,
    pub symbols: BTreeMap<String, usize>,
    pub relocs: Vec<(usize, String)>,
    /// Cross-bundle pad slots: (position, size), ordered by position.
    pub slots: Vec<(usize, usize)>,
    /// Ordered by position; at one position AlignStart precedes CallEnd.
    pub anchors: Vec<(usize, Anchor)>,
    pub entry: String,
}

/// A padding site in stream order, as seen by greedy pad removal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Site {
    Slot(usize),
    Anchor,
}

impl Layout {
    pub fn slot_sizes(&self) -> Vec<usize> {
        self.slots.iter().map(|&(_, s)| s).collect()
    }

    /// Padding sites (cross-bundle slots and anchors) in stream order.
    pub fn sites(&self) -> Vec<Site> {
        let mut v: Vec<(usize, u8, Site)> = self
            .slots
            .iter()
            .enumerate()
            .map(|(i, &(at, _))| (at, 1, Site::Slot(i)))
            .chain(self.anchors.iter().map(|&(at, _)| (at, 0, Site::Anchor)))
            .collect();
        v.sort_by_key(|&(at, order, _)| (at, order));
        v.into_iter().map(|(_, _, s)| s).collect()
    }

    /// Emits the object with the given cross-bundle slot sizes.
    pub fn build(&self, sizes: &[usize], isa: &IsaConfig) -> Result<ObjectImage, LayoutError> {
        assert_eq!(sizes.len(), self.slots.len());
        let b = isa.bundle_size;
        let n = self.stream.len();
        let mut code = Vec::with_capacity(n + n / 4 + 2 * b);
        let mut addr_of = vec![0usize; n + 1];
        // Labels precede call-end and cross-bundle pads at their position.
        let mut label_of = vec![0usize; n + 1];
        let mut pad_info = Vec::new();
        let mut slot = 0;
        let mut anchor = 0;
        for s in 0..=n {
            label_of[s] = code.len();
            while anchor < self.anchors.len() && self.anchors[anchor].0 == s {
                let (size, kind) = match self.anchors[anchor].1 {
                    Anchor::AlignStart => ((b - code.len() % b) % b, PadKind::AlignTarget),
                    Anchor::CallEnd { len } => ((b - (code.len() + len) % b) % b, PadKind::CallEnd),
                };
                push_pad(&mut code, &mut pad_info, size, kind);
                if kind == PadKind::AlignTarget {
                    label_of[s] = code.len();
                }
                anchor += 1;
            }
            while slot < self.slots.len() && self.slots[slot].0 == s {
                push_pad(&mut code, &mut pad_info, sizes[slot], PadKind::CrossBundle);
                slot += 1;
            }
            addr_of[s] = code.len();
            if s < n {
                code.push(self.stream[s]);
            }
        }
        let rounded = code.len().div_ceil(b) * b;
        code.resize(rounded + b, OP_NOP);

        for &(at, target) in &self.jccs {
            let a = addr_of[at];
            let t = label_of[target] as isize;
            let off = t - (a as isize + 3);
            if !(i8::MIN as isize..=i8::MAX as isize).contains(&off) {
                return Err(LayoutError::JccOutOfRange { at: a, target: t as usize });
            }
            code[a + 2] = off as i8 as u8;
        }
        let symbols = self
            .symbols
            .iter()
            .map(|(k, &v)| (k.clone(), label_of[v]))
            .collect();
        let relocations = self
            .relocs
            .iter()
            .map(|(at, sym)| Relocation { offset: addr_of[*at], symbol: sym.clone() })
            .collect();
        Ok(ObjectImage {
            code,
            symbols,
            relocations,
            pad_info,
            entry: self.entry.clone(),
        })
    }

    /// Recovers the layout of an assembled (possibly optimized or nop-skipped)
    /// object.
    pub fn from_object(obj: &ObjectImage, isa: &IsaConfig) -> Result<Layout, LayoutError> {
        let len = obj.code.len();
        let mut in_pad = vec![false; len];
        // Branches may target the first byte of a pad, where its label sits.
        let mut pad_start = vec![false; len];
        for p in &obj.pad_info {
            in_pad[p.offset..p.end()].iter_mut().for_each(|x| *x = true);
            pad_start[p.offset] = true;
        }
        // stripped[a] = stripped position of original address a
        let mut stripped = vec![0usize; len + 1];
        let mut orig_of = Vec::with_capacity(len);
        let mut stream = Vec::with_capacity(len);
        for a in 0..len {
            stripped[a] = stream.len();
            if !in_pad[a] {
                stream.push(obj.code[a]);
                orig_of.push(a);
            }
        }
        stripped[len] = stream.len();

        let symbols: BTreeMap<String, usize> = obj
            .symbols
            .iter()
            .filter(|(k, _)| !k.starts_with(SKIP_SYMBOL_PREFIX))
            .map(|(k, &v)| (k.clone(), stripped[v]))
            .collect();
        let relocs: Vec<(usize, String)> = obj
            .relocations
            .iter()
            .filter(|r| !in_pad[r.offset])
            .map(|r| (stripped[r.offset], r.symbol.clone()))
            .collect();

        let mut insns = Vec::new();
        let mut pos = 0;
        while pos < stream.len() {
            let insn = decode(&stream, pos).map_err(|_| LayoutError::Undecodable(pos))?;
            insns.push((pos, insn));
            pos += insn.len();
        }
        // Trailing fill and the merge bundle are not part of the stream.
        let mut floor = symbols.values().copied().max().unwrap_or(0);
        floor = floor.max(relocs.iter().map(|(a, _)| a + 2).max().unwrap_or(0));
        floor = floor.max(obj.pad_info.iter().map(|p| stripped[p.offset]).max().unwrap_or(0));
        while let Some(&(p, Instruction::Nop)) = insns.last() {
            if p < floor {
                break;
            }
            insns.pop();
        }
        stream.truncate(insns.last().map_or(0, |&(p, i)| p + i.len()).max(floor));

        let mut jccs = Vec::new();
        for &(pos, insn) in &insns {
            if let Instruction::Jcc { off, .. } = insn {
                let orig = orig_of[pos];
                let t = orig as isize + 3 + off as isize;
                if t < 0 || t as usize > len {
                    return Err(LayoutError::TargetInPad(orig));
                }
                let t = t as usize;
                if t < len && in_pad[t] && !pad_start[t] {
                    return Err(LayoutError::TargetInPad(t));
                }
                jccs.push((pos, stripped[t]));
            }
        }

        let mut slots = Vec::new();
        let mut anchors: Vec<(usize, Anchor)> = Vec::new();
        let call_len_at = |s: usize| -> usize {
            match insns.binary_search_by_key(&s, |&(p, _)| p) {
                Ok(i) => match insns[i].1 {
                    Instruction::And { .. } => 6,
                    other => other.len(),
                },
                Err(_) => 3,
            }
        };
        for p in &obj.pad_info {
            let at = stripped[p.offset];
            match p.kind {
                PadKind::CrossBundle => slots.push((at, p.size)),
                PadKind::AlignTarget => anchors.push((at, Anchor::AlignStart)),
                PadKind::CallEnd => anchors.push((at, Anchor::CallEnd { len: call_len_at(at) })),
            }
        }
        for (name, &at) in &symbols {
            if !is_local_symbol(name) {
                anchors.push((at, Anchor::AlignStart));
            }
        }
        let mask = isa.mask_const();
        for (i, &(pos, insn)) in insns.iter().enumerate() {
            match insn {
                Instruction::Call { .. } => anchors.push((pos, Anchor::CallEnd { len: 3 })),
                Instruction::And { rd, imm } if imm == mask => {
                    if let Some(&(_, Instruction::Callr { rs })) = insns.get(i + 1) {
                        if rs == rd {
                            anchors.push((pos, Anchor::CallEnd { len: 6 }));
                        }
                    }
                }
                _ => {}
            }
        }
        anchors.sort_by_key(|&(at, a)| (at, matches!(a, Anchor::CallEnd { .. })));
        anchors.dedup();
        // A far call keeps its explicit AlignStart; otherwise one of each kind
        // per position is enough.
        let mut dedup: Vec<(usize, Anchor)> = Vec::new();
        for a in anchors {
            if dedup.iter().rev().take_while(|x| x.0 == a.0).any(|x| {
                std::mem::discriminant(&x.1) == std::mem::discriminant(&a.1)
            }) {
                continue;
            }
            dedup.push(a);
        }
        slots.sort_by_key(|&(at, _)| at);

        Ok(Layout {
            stream,
            jccs,
            symbols,
            relocs,
            slots,
            anchors: dedup,
            entry: obj.entry.clone(),
        })
    }
}

fn push_pad(code: &mut Vec<u8>, pad_info: &mut Vec<PadRecord>, size: usize, kind: PadKind) {
    if size == 0 {
        return;
    }
    pad_info.push(PadRecord { offset: code.len(), size, kind });
    code.resize(code.len() + size, OP_NOP);
}

/// Replaces each padding region of 16 or more NOPs by a direct jump over it,
/// followed by the remaining NOPs. The jump target is expressed as a local
/// relocation so the object stays position independent.
pub fn emit_nop_skip(obj: &ObjectImage, isa: &IsaConfig) -> ObjectImage {
    const THRESHOLD: usize = 16;
    let mut out = obj.clone();
    let b = isa.bundle_size;
    for p in &obj.pad_info {
        if p.size < THRESHOLD || p.offset % b > b - 3 {
            continue;
        }
        if obj.code[p.offset..p.end()].iter().any(|&x| x != OP_NOP) {
            continue;
        }
        let sym = format!("{SKIP_SYMBOL_PREFIX}{}", p.end());
        out.code[p.offset] = OP_JMP;
        out.code[p.offset + 1] = 0;
        out.code[p.offset + 2] = 0;
        out.symbols.insert(sym.clone(), p.end());
        out.relocations.push(Relocation { offset: p.offset + 1, symbol: sym });
    }
    out.relocations.sort_by_key(|r| r.offset);
    out
}
