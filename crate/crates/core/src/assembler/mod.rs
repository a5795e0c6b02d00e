//! Lowers [`ProgramIR`] to an [`ObjectImage`] with bundle padding.
//!
//! Padding follows three rules: function entries and address-taken labels
//! start a bundle, calls end a bundle, and no instruction straddles a bundle
//! boundary. Indirect jumps and calls are emitted as `and rS, MASK` followed
//! by the jump, and the pair is padded as one unit.

mod ir;

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

pub use ir::{Function, IrInsn, ParseError, ProgramIR, Stmt};

use crate::image::ObjectImage;
use crate::isa::{Instruction, IsaConfig, Reg, LINK_REG};
pub use crate::layout::emit_nop_skip;
use crate::layout::{Anchor, Layout, LayoutError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PadMode {
    Vanilla,
    /// Vanilla layout, used as the starting point of greedy pad removal.
    CbiSeed,
    /// Drops every cross-bundle pad. Produces code the validator rejects.
    UnsafeNoType3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PadPolicy {
    pub mode: PadMode,
    pub nop_skip: bool,
}

impl PadPolicy {
    pub fn vanilla() -> Self {
        PadPolicy { mode: PadMode::Vanilla, nop_skip: true }
    }

    pub fn cbi_seed() -> Self {
        PadPolicy { mode: PadMode::CbiSeed, nop_skip: false }
    }

    pub fn unsafe_no_type3() -> Self {
        PadPolicy { mode: PadMode::UnsafeNoType3, nop_skip: true }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AsmError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("label `{0}` defined more than once")]
    Redefined(String),
    #[error("conditional branch to undefined label `{0}`")]
    UndefinedLocal(String),
    #[error("unit of {0} bytes cannot fit in a bundle")]
    TooLong(usize),
    #[error("program has no functions")]
    Empty,
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

struct Unit {
    bytes: Vec<u8>,
    /// (offset inside the unit, symbol)
    relocs: Vec<(usize, String)>,
    jcc: Option<String>,
    call: bool,
    far: bool,
}

impl Unit {
    fn insn(i: Instruction) -> Unit {
        Unit { bytes: i.encode(), relocs: Vec::new(), jcc: None, call: false, far: false }
    }

    fn masked(rs: Reg, tail: Instruction, mask: u16) -> Unit {
        let mut bytes = Instruction::And { rd: rs, imm: mask }.encode();
        tail.encode_into(&mut bytes);
        Unit { bytes, relocs: Vec::new(), jcc: None, call: false, far: false }
    }
}

/// Maps IR label names to object symbol names: function names and
/// address-taken labels are global, every other label is object-local.
fn symbol_table(ir: &ProgramIR) -> Result<HashMap<String, String>, AsmError> {
    let mut names = HashMap::new();
    let mut define = |label: &str, global: bool| -> Result<(), AsmError> {
        let sym = if global { label.to_string() } else { format!(".L{label}") };
        if names.insert(label.to_string(), sym).is_some() {
            return Err(AsmError::Redefined(label.to_string()));
        }
        Ok(())
    };
    for f in &ir.functions {
        define(&f.name, true)?;
        for st in &f.body {
            if let Stmt::Label { name, taken } = st {
                define(name, *taken)?;
            }
        }
    }
    Ok(names)
}

pub fn assemble(ir: &ProgramIR, policy: PadPolicy, isa: &IsaConfig) -> Result<ObjectImage, AsmError> {
    let layout = lower(ir, policy.mode, isa)?;
    let obj = layout.build(&layout.slot_sizes(), isa)?;
    Ok(if policy.nop_skip { emit_nop_skip(&obj, isa) } else { obj })
}

pub fn assemble_text(text: &str, policy: PadPolicy, isa: &IsaConfig) -> Result<ObjectImage, AsmError> {
    assemble(&ProgramIR::parse(text)?, policy, isa)
}

pub(crate) fn lower(ir: &ProgramIR, mode: PadMode, isa: &IsaConfig) -> Result<Layout, AsmError> {
    let first = ir.functions.first().ok_or(AsmError::Empty)?;
    let names = symbol_table(ir)?;
    let sym_of = |label: &str| names.get(label).cloned().unwrap_or_else(|| label.to_string());
    let mask = isa.mask_const();
    let b = isa.bundle_size;

    let mut stream: Vec<u8> = Vec::new();
    let mut addr = 0usize;
    let mut label_pos: BTreeMap<String, usize> = BTreeMap::new();
    let mut symbols = BTreeMap::new();
    let mut relocs = Vec::new();
    let mut slots = Vec::new();
    let mut anchors = Vec::new();
    let mut pending_jccs: Vec<(usize, String)> = Vec::new();

    for func in &ir.functions {
        let mut pending: Vec<&str> = vec![&func.name];
        let mut align = true;
        for st in &func.body {
            let insn = match st {
                Stmt::Label { name, taken } => {
                    pending.push(name);
                    align |= *taken;
                    continue;
                }
                Stmt::Insn(i) => i,
            };
            let unit = match insn {
                IrInsn::Plain(i) => Unit::insn(*i),
                IrInsn::MoviSym { rd, label } => {
                    let mut u = Unit::insn(Instruction::Movi { rd: *rd, imm: 0 });
                    u.relocs.push((2, sym_of(label)));
                    u
                }
                IrInsn::JmpSym(label) => {
                    let mut u = Unit::insn(Instruction::Jmp { addr: 0 });
                    u.relocs.push((1, sym_of(label)));
                    u
                }
                IrInsn::CallSym(label) => {
                    let mut u = Unit::insn(Instruction::Call { addr: 0 });
                    u.relocs.push((1, sym_of(label)));
                    u.call = true;
                    u
                }
                IrInsn::Jcc { cc, label } => {
                    let mut u = Unit::insn(Instruction::Jcc { cc: *cc, off: 0 });
                    u.jcc = Some(label.clone());
                    u
                }
                IrInsn::Jmpr(rs) => Unit::masked(*rs, Instruction::Jmpr { rs: *rs }, mask),
                IrInsn::Ret => Unit::masked(LINK_REG, Instruction::Jmpr { rs: LINK_REG }, mask),
                IrInsn::Callr { rs, far } => {
                    let mut u = Unit::masked(*rs, Instruction::Callr { rs: *rs }, mask);
                    u.call = true;
                    u.far = *far;
                    u
                }
                IrInsn::Bytes(bytes) => Unit {
                    bytes: bytes.clone(),
                    relocs: Vec::new(),
                    jcc: None,
                    call: false,
                    far: false,
                },
            };
            let n = unit.bytes.len();
            if n > b {
                return Err(AsmError::TooLong(n));
            }
            let pos = stream.len();
            for l in pending.drain(..) {
                label_pos.insert(l.to_string(), pos);
                symbols.insert(sym_of(l), pos);
            }
            if align || (unit.call && unit.far) {
                anchors.push((pos, Anchor::AlignStart));
                addr += (b - addr % b) % b;
                align = false;
            }
            if unit.call {
                anchors.push((pos, Anchor::CallEnd { len: n }));
                addr += (b - (addr + n) % b) % b;
            } else if !isa.within_bundle(addr, n) && mode != PadMode::UnsafeNoType3 {
                let pad = b - addr % b;
                slots.push((pos, pad));
                addr += pad;
            }
            for (off, sym) in unit.relocs {
                relocs.push((pos + off, sym));
            }
            if let Some(label) = unit.jcc {
                pending_jccs.push((pos, label));
            }
            stream.extend_from_slice(&unit.bytes);
            addr += n;
        }
        let end = stream.len();
        for l in pending {
            label_pos.insert(l.to_string(), end);
            symbols.insert(sym_of(l), end);
        }
    }

    let jccs = pending_jccs
        .into_iter()
        .map(|(pos, label)| {
            label_pos
                .get(&label)
                .map(|&t| (pos, t))
                .ok_or(AsmError::UndefinedLocal(label))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let entry = if names.contains_key("main") { "main".to_string() } else { first.name.clone() };
    Ok(Layout { stream, jccs, symbols, relocs, slots, anchors, entry })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{PadKind, PadRecord};
    use crate::isa::{decode, InsnClass, OP_JMP, OP_NOP};

    fn isa() -> IsaConfig {
        IsaConfig::default()
    }

    fn nops(n: usize) -> String {
        "    nop\n".repeat(n)
    }

    #[test]
    fn cross_bundle_pad() {
        let src = format!(".func main\n{}    movi r1, 0x1234\n    halt\n", nops(30));
        let obj = assemble_text(&src, PadPolicy::cbi_seed(), &isa()).unwrap();
        assert_eq!(obj.pad_info, vec![PadRecord { offset: 30, size: 2, kind: PadKind::CrossBundle }]);
        assert_eq!(&obj.code[32..36], &[0x10, 0x01, 0x34, 0x12]);

        let unsafe_obj = assemble_text(&src, PadPolicy::unsafe_no_type3(), &isa()).unwrap();
        assert!(unsafe_obj.pad_info.is_empty());
        assert_eq!(&unsafe_obj.code[30..34], &[0x10, 0x01, 0x34, 0x12]);
    }

    #[test]
    fn call_end_pad() {
        let src = format!(".func main\n{}    call main\n    halt\n", nops(10));
        let obj = assemble_text(&src, PadPolicy::cbi_seed(), &isa()).unwrap();
        assert_eq!(obj.pad_info, vec![PadRecord { offset: 10, size: 19, kind: PadKind::CallEnd }]);
        assert_eq!(obj.code[29], 0x21);
        assert_eq!(obj.relocations[0].offset, 30);
        assert_eq!(obj.code[32], 0xF4);
    }

    #[test]
    fn nop_skip_rules() {
        let src = format!(".func main\n{}    call main\n    halt\n", nops(10));
        let obj = assemble_text(&src, PadPolicy::vanilla(), &isa()).unwrap();
        assert_eq!(obj.code[10], OP_JMP);
        let r = obj.relocations.iter().find(|r| r.offset == 11).unwrap();
        assert_eq!(obj.symbols[&r.symbol], 29);
        assert!(obj.code[13..29].iter().all(|&x| x == OP_NOP));
        // merge bundle untouched
        let n = obj.code.len();
        assert!(obj.code[n - 32..].iter().all(|&x| x == OP_NOP));

        let small = format!(".func main\n{}    call main\n    halt\n", nops(21));
        let obj = assemble_text(&small, PadPolicy::vanilla(), &isa()).unwrap();
        assert_eq!(obj.pad_info[0].size, 8);
        assert!(obj.code[21..29].iter().all(|&x| x == OP_NOP));
    }

    #[test]
    fn indirect_is_masked_and_aligned() {
        let src = format!(
            ".func main\n{}    movi r2, f\n    callr r2\n    halt\n.func f\n{}    ret\n",
            nops(27),
            nops(29)
        );
        let obj = assemble_text(&src, PadPolicy::vanilla(), &isa()).unwrap();
        obj.check(&isa()).unwrap();
        assert_eq!(obj.symbols["f"] % 32, 0);
        let mut pos = 0;
        let mut seen = 0;
        let mut prev: Option<(usize, Instruction)> = None;
        while pos < obj.code.len() {
            let i = decode(&obj.code, pos).unwrap();
            assert!(isa().within_bundle(pos, i.len()), "crossing at {pos}");
            if matches!(i.class(), InsnClass::IndirectBranch | InsnClass::IndirectCall) {
                let (ppos, p) = prev.unwrap();
                assert!(matches!(p, Instruction::And { imm: 0xFFE0, .. }));
                assert!(isa().within_bundle(ppos, 6));
                seen += 1;
            }
            prev = Some((pos, i));
            pos += i.len();
        }
        assert_eq!(seen, 2);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            assemble_text(".func f\nx:\nx:\n  nop\n", PadPolicy::vanilla(), &isa()),
            Err(AsmError::Redefined(_))
        ));
        assert!(matches!(
            assemble_text(".func f\n  jz nowhere\n", PadPolicy::vanilla(), &isa()),
            Err(AsmError::UndefinedLocal(_))
        ));
        let far = format!(".func f\nl:\n{}  jz l\n", nops(200));
        assert!(matches!(
            assemble_text(&far, PadPolicy::vanilla(), &isa()),
            Err(AsmError::Layout(LayoutError::JccOutOfRange { .. }))
        ));
        assert!(matches!(assemble_text("", PadPolicy::vanilla(), &isa()), Err(AsmError::Empty)));
    }

    #[test]
    fn deterministic_and_layout_recoverable() {
        let src = format!(
            ".func main\n    movi r3, 5\nloop:\n{}    movi r1, 0x4242\n    call g\n    addi r3, -1\n    movi r0, 0\n    cmp r3, r0\n    jnz loop\n    halt\n.func g\n    ret\n",
            nops(29)
        );
        let a = assemble_text(&src, PadPolicy::cbi_seed(), &isa()).unwrap();
        let b = assemble_text(&src, PadPolicy::cbi_seed(), &isa()).unwrap();
        assert_eq!(a, b);
        let layout = Layout::from_object(&a, &isa()).unwrap();
        assert_eq!(layout.build(&layout.slot_sizes(), &isa()).unwrap(), a);
        let v = assemble_text(&src, PadPolicy::vanilla(), &isa()).unwrap();
        let lv = Layout::from_object(&v, &isa()).unwrap();
        assert_eq!(lv.build(&lv.slot_sizes(), &isa()).unwrap(), a);
    }
}
