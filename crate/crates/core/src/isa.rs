//! MiniCISC instruction set: encodings, decoding and instruction classes.
//!
//! Instructions are 1 to 4 bytes long and are not prefix-free, so decoding
//! the same bytes from different offsets yields different (overlapping)
//! instruction streams. The validator depends on that property.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const OP_NOP: u8 = 0x90;
pub const OP_MOVI: u8 = 0x10;
pub const OP_MOV: u8 = 0x11;
pub const OP_ADD: u8 = 0x12;
pub const OP_ADDI: u8 = 0x13;
pub const OP_CMP: u8 = 0x14;
pub const OP_JMP: u8 = 0x20;
pub const OP_CALL: u8 = 0x21;
pub const OP_JCC: u8 = 0x22;
pub const OP_AND: u8 = 0x30;
pub const OP_JMPR: u8 = 0x40;
pub const OP_CALLR: u8 = 0x41;
pub const OP_LOAD: u8 = 0x50;
pub const OP_STORE: u8 = 0x51;
pub const OP_RET: u8 = 0xC3;
pub const OP_SYSCALL: u8 = 0xCC;
pub const OP_HALT: u8 = 0xF4;

/// Longest encoding in the table.
pub const MAX_INSN_LEN: usize = 4;

/// Register used for return addresses by `CALL`/`CALLR`.
pub const LINK_REG: Reg = Reg(6);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IsaError {
    #[error("register index {0} out of range (0..8)")]
    BadRegister(u8),
    #[error("invalid isa configuration: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(u8);

impl Reg {
    pub fn new(index: u8) -> Result<Self, IsaError> {
        if index < 8 {
            Ok(Reg(index))
        } else {
            Err(IsaError::BadRegister(index))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn byte(self) -> u8 {
        self.0
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Condition codes for `Jcc`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Z = 0,
    Nz = 1,
    N = 2,
    Nn = 3,
}

impl Cond {
    pub fn from_byte(b: u8) -> Option<Cond> {
        match b {
            0 => Some(Cond::Z),
            1 => Some(Cond::Nz),
            2 => Some(Cond::N),
            3 => Some(Cond::Nn),
            _ => None,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Cond::Z => "jz",
            Cond::Nz => "jnz",
            Cond::N => "jn",
            Cond::Nn => "jnn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    Nop,
    Movi { rd: Reg, imm: u16 },
    Mov { rd: Reg, rs: Reg },
    Add { rd: Reg, rs: Reg },
    Addi { rd: Reg, imm: i8 },
    Cmp { rd: Reg, rs: Reg },
    Jmp { addr: u16 },
    Call { addr: u16 },
    Jcc { cc: Cond, off: i8 },
    And { rd: Reg, imm: u16 },
    Jmpr { rs: Reg },
    Callr { rs: Reg },
    Load { rd: Reg, rs: Reg, imm: i8 },
    Store { rd: Reg, rs: Reg, imm: i8 },
    Ret,
    Syscall,
    Halt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InsnClass {
    NonControlFlow,
    DirectBranch,
    DirectCall,
    IndirectBranch,
    IndirectCall,
    Mask,
    Nop,
    Halt,
    Forbidden,
}

impl Instruction {
    pub fn opcode(&self) -> u8 {
        match self {
            Instruction::Nop => OP_NOP,
            Instruction::Movi { .. } => OP_MOVI,
            Instruction::Mov { .. } => OP_MOV,
            Instruction::Add { .. } => OP_ADD,
            Instruction::Addi { .. } => OP_ADDI,
            Instruction::Cmp { .. } => OP_CMP,
            Instruction::Jmp { .. } => OP_JMP,
            Instruction::Call { .. } => OP_CALL,
            Instruction::Jcc { .. } => OP_JCC,
            Instruction::And { .. } => OP_AND,
            Instruction::Jmpr { .. } => OP_JMPR,
            Instruction::Callr { .. } => OP_CALLR,
            Instruction::Load { .. } => OP_LOAD,
            Instruction::Store { .. } => OP_STORE,
            Instruction::Ret => OP_RET,
            Instruction::Syscall => OP_SYSCALL,
            Instruction::Halt => OP_HALT,
        }
    }

    pub fn len(&self) -> usize {
        encoded_len(self.opcode()).expect("every instruction has a defined opcode")
    }

    pub fn class(&self) -> InsnClass {
        classify(self)
    }

    /// Bytes of this instruction, exactly `self.len()` of them.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MAX_INSN_LEN);
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.opcode());
        match *self {
            Instruction::Nop
            | Instruction::Ret
            | Instruction::Syscall
            | Instruction::Halt => {}
            Instruction::Movi { rd, imm } | Instruction::And { rd, imm } => {
                out.push(rd.byte());
                out.extend_from_slice(&imm.to_le_bytes());
            }
            Instruction::Mov { rd, rs } | Instruction::Add { rd, rs } | Instruction::Cmp { rd, rs } => {
                out.push(rd.byte());
                out.push(rs.byte());
            }
            Instruction::Addi { rd, imm } => {
                out.push(rd.byte());
                out.push(imm as u8);
            }
            Instruction::Jmp { addr } | Instruction::Call { addr } => {
                out.extend_from_slice(&addr.to_le_bytes());
            }
            Instruction::Jcc { cc, off } => {
                out.push(cc as u8);
                out.push(off as u8);
            }
            Instruction::Jmpr { rs } | Instruction::Callr { rs } => out.push(rs.byte()),
            Instruction::Load { rd, rs, imm } | Instruction::Store { rd, rs, imm } => {
                out.push(rd.byte());
                out.push(rs.byte());
                out.push(imm as u8);
            }
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Instruction::Nop => write!(f, "nop"),
            Instruction::Movi { rd, imm } => write!(f, "movi {rd}, {imm:#06x}"),
            Instruction::Mov { rd, rs } => write!(f, "mov {rd}, {rs}"),
            Instruction::Add { rd, rs } => write!(f, "add {rd}, {rs}"),
            Instruction::Addi { rd, imm } => write!(f, "addi {rd}, {imm}"),
            Instruction::Cmp { rd, rs } => write!(f, "cmp {rd}, {rs}"),
            Instruction::Jmp { addr } => write!(f, "jmp {addr:#06x}"),
            Instruction::Call { addr } => write!(f, "call {addr:#06x}"),
            Instruction::Jcc { cc, off } => write!(f, "{} {off:+}", cc.mnemonic()),
            Instruction::And { rd, imm } => write!(f, "and {rd}, {imm:#06x}"),
            Instruction::Jmpr { rs } => write!(f, "jmpr *{rs}"),
            Instruction::Callr { rs } => write!(f, "callr *{rs}"),
            Instruction::Load { rd, rs, imm } => write!(f, "load {rd}, [{rs}{imm:+}]"),
            Instruction::Store { rd, rs, imm } => write!(f, "store [{rs}{imm:+}], {rd}"),
            Instruction::Ret => write!(f, "ret"),
            Instruction::Syscall => write!(f, "syscall"),
            Instruction::Halt => write!(f, "halt"),
        }
    }
}

/// Encoding length for a first byte, or `None` if the opcode is undefined.
pub fn encoded_len(opcode: u8) -> Option<usize> {
    match opcode {
        OP_NOP | OP_RET | OP_SYSCALL | OP_HALT => Some(1),
        OP_JMPR | OP_CALLR => Some(2),
        OP_MOV | OP_ADD | OP_ADDI | OP_CMP | OP_JMP | OP_CALL | OP_JCC => Some(3),
        OP_MOVI | OP_AND | OP_LOAD | OP_STORE => Some(4),
        _ => None,
    }
}

pub fn classify(insn: &Instruction) -> InsnClass {
    match insn {
        Instruction::Nop => InsnClass::Nop,
        Instruction::Halt => InsnClass::Halt,
        Instruction::And { .. } => InsnClass::Mask,
        Instruction::Jmp { .. } | Instruction::Jcc { .. } => InsnClass::DirectBranch,
        Instruction::Call { .. } => InsnClass::DirectCall,
        Instruction::Jmpr { .. } => InsnClass::IndirectBranch,
        Instruction::Callr { .. } => InsnClass::IndirectCall,
        Instruction::Ret | Instruction::Syscall => InsnClass::Forbidden,
        Instruction::Movi { .. }
        | Instruction::Mov { .. }
        | Instruction::Add { .. }
        | Instruction::Addi { .. }
        | Instruction::Cmp { .. }
        | Instruction::Load { .. }
        | Instruction::Store { .. } => InsnClass::NonControlFlow,
    }
}

/// Why a byte position does not start an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecodeError {
    UndefinedOpcode,
    BadRegister,
    BadCondition,
    Truncated,
}

/// Decodes the instruction starting at `offset`. Total: every offset inside
/// `code` yields either an instruction or a `DecodeError`.
pub fn decode(code: &[u8], offset: usize) -> Result<Instruction, DecodeError> {
    let op = *code.get(offset).ok_or(DecodeError::Truncated)?;
    let len = encoded_len(op).ok_or(DecodeError::UndefinedOpcode)?;
    if offset + len > code.len() {
        return Err(DecodeError::Truncated);
    }
    let b = &code[offset..offset + len];
    let reg = |i: usize| Reg::new(b[i]).map_err(|_| DecodeError::BadRegister);
    let imm16 = || u16::from_le_bytes([b[2], b[3]]);
    let insn = match op {
        OP_NOP => Instruction::Nop,
        OP_RET => Instruction::Ret,
        OP_SYSCALL => Instruction::Syscall,
        OP_HALT => Instruction::Halt,
        OP_MOVI => Instruction::Movi { rd: reg(1)?, imm: imm16() },
        OP_AND => Instruction::And { rd: reg(1)?, imm: imm16() },
        OP_MOV => Instruction::Mov { rd: reg(1)?, rs: reg(2)? },
        OP_ADD => Instruction::Add { rd: reg(1)?, rs: reg(2)? },
        OP_CMP => Instruction::Cmp { rd: reg(1)?, rs: reg(2)? },
        OP_ADDI => Instruction::Addi { rd: reg(1)?, imm: b[2] as i8 },
        OP_JMP => Instruction::Jmp { addr: u16::from_le_bytes([b[1], b[2]]) },
        OP_CALL => Instruction::Call { addr: u16::from_le_bytes([b[1], b[2]]) },
        OP_JCC => Instruction::Jcc {
            cc: Cond::from_byte(b[1]).ok_or(DecodeError::BadCondition)?,
            off: b[2] as i8,
        },
        OP_JMPR => Instruction::Jmpr { rs: reg(1)? },
        OP_CALLR => Instruction::Callr { rs: reg(1)? },
        OP_LOAD => Instruction::Load { rd: reg(1)?, rs: reg(2)?, imm: b[3] as i8 },
        OP_STORE => Instruction::Store { rd: reg(1)?, rs: reg(2)?, imm: b[3] as i8 },
        _ => unreachable!("encoded_len covers every opcode"),
    };
    Ok(insn)
}

/// Address-space parameters shared by every stage of the toolchain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsaConfig {
    pub bundle_size: usize,
    pub code_region_size: usize,
    pub data_region_size: usize,
}

impl Default for IsaConfig {
    fn default() -> Self {
        IsaConfig {
            bundle_size: 32,
            code_region_size: 65536,
            data_region_size: 65536,
        }
    }
}

impl IsaConfig {
    pub fn new(
        bundle_size: usize,
        code_region_size: usize,
        data_region_size: usize,
    ) -> Result<Self, IsaError> {
        let cfg = IsaConfig {
            bundle_size,
            code_region_size,
            data_region_size,
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), IsaError> {
        let bad = |m: &str| Err(IsaError::BadConfig(m.to_string()));
        if !self.bundle_size.is_power_of_two() || self.bundle_size < 8 {
            return bad("bundle size must be a power of two >= 8");
        }
        if !self.code_region_size.is_power_of_two() || self.code_region_size > 1 << 16 {
            return bad("code region size must be a power of two <= 65536");
        }
        if self.code_region_size < self.bundle_size {
            return bad("bundle size must divide the code region size");
        }
        if self.data_region_size == 0 || self.data_region_size > 1 << 16 {
            return bad("data region size must be in 1..=65536");
        }
        Ok(())
    }

    /// Immediate of the sandboxing `AND`: keeps the target inside the code
    /// region and clears the in-bundle offset bits.
    pub fn mask_const(&self) -> u16 {
        ((self.code_region_size - 1) & !(self.bundle_size - 1)) as u16
    }

    pub fn is_bundle_aligned(&self, addr: usize) -> bool {
        addr % self.bundle_size == 0
    }

    pub fn bundle_of(&self, addr: usize) -> usize {
        addr / self.bundle_size
    }

    /// True when `[start, start + len)` lies inside a single bundle.
    pub fn within_bundle(&self, start: usize, len: usize) -> bool {
        len == 0 || self.bundle_of(start) == self.bundle_of(start + len - 1)
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn arb_insn() -> impl Strategy<Value = Instruction> {
        let reg = (0u8..8).prop_map(|i| Reg::new(i).unwrap());
        let cond = (0u8..4).prop_map(|c| Cond::from_byte(c).unwrap());
        prop_oneof![
            Just(Instruction::Nop),
            Just(Instruction::Ret),
            Just(Instruction::Syscall),
            Just(Instruction::Halt),
            (reg.clone(), any::<u16>()).prop_map(|(rd, imm)| Instruction::Movi { rd, imm }),
            (reg.clone(), reg.clone()).prop_map(|(rd, rs)| Instruction::Mov { rd, rs }),
            (reg.clone(), reg.clone()).prop_map(|(rd, rs)| Instruction::Add { rd, rs }),
            (reg.clone(), any::<i8>()).prop_map(|(rd, imm)| Instruction::Addi { rd, imm }),
            (reg.clone(), reg.clone()).prop_map(|(rd, rs)| Instruction::Cmp { rd, rs }),
            any::<u16>().prop_map(|addr| Instruction::Jmp { addr }),
            any::<u16>().prop_map(|addr| Instruction::Call { addr }),
            (cond, any::<i8>()).prop_map(|(cc, off)| Instruction::Jcc { cc, off }),
            (reg.clone(), any::<u16>()).prop_map(|(rd, imm)| Instruction::And { rd, imm }),
            reg.clone().prop_map(|rs| Instruction::Jmpr { rs }),
            reg.clone().prop_map(|rs| Instruction::Callr { rs }),
            (reg.clone(), reg.clone(), any::<i8>())
                .prop_map(|(rd, rs, imm)| Instruction::Load { rd, rs, imm }),
            (reg.clone(), reg, any::<i8>())
                .prop_map(|(rd, rs, imm)| Instruction::Store { rd, rs, imm }),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(i in arb_insn()) {
            let bytes = i.encode();
            prop_assert_eq!(bytes.len(), i.len());
            prop_assert_eq!(decode(&bytes, 0), Ok(i));
        }

        #[test]
        fn decode_is_total(bytes in proptest::collection::vec(any::<u8>(), 1..16), off in 0usize..16) {
            let off = off % bytes.len();
            if let Ok(i) = decode(&bytes, off) {
                prop_assert!(off + i.len() <= bytes.len());
                prop_assert_eq!(&i.encode()[..], &bytes[off..off + i.len()]);
            }
        }
    }
}
