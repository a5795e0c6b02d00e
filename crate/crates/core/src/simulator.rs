//! Reference interpreter with a sandbox policy monitor and a direct-mapped
//! branch target buffer for indirect branches.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Executable;
use crate::isa::{decode, Cond, InsnClass, Instruction, LINK_REG};

pub const DEFAULT_FUEL: u64 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BtbConfig {
    pub index_bits: u32,
}

impl Default for BtbConfig {
    fn default() -> Self {
        BtbConfig { index_bits: 9 }
    }
}

impl BtbConfig {
    pub fn entries(&self) -> usize {
        1 << self.index_bits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    InvalidInstruction,
    Forbidden,
    UnalignedIndirect,
    PcOutOfRegion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub pc: usize,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineState {
    pub pc: usize,
    pub regs: [u16; 8],
    pub z: bool,
    pub n: bool,
    pub data: Vec<u8>,
    pub halted: bool,
}

impl MachineState {
    pub fn new(pc: usize, data_size: usize) -> Self {
        MachineState { pc, regs: [0; 8], z: false, n: false, data: vec![0; data_size], halted: false }
    }

    /// FNV-1a over the registers and the data region.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let regs = self.regs.iter().flat_map(|r| r.to_le_bytes());
        for b in regs.chain(self.data.iter().copied()) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    fn load16(&self, addr: usize) -> u16 {
        let d = self.data.len();
        u16::from_le_bytes([self.data[addr % d], self.data[(addr + 1) % d]])
    }

    fn store16(&mut self, addr: usize, v: u16) {
        let d = self.data.len();
        let [lo, hi] = v.to_le_bytes();
        self.data[addr % d] = lo;
        self.data[(addr + 1) % d] = hi;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimResult {
    pub insns_executed: u64,
    pub indirect_branches: u64,
    pub btb_misses: u64,
    pub nop_insns: u64,
    pub violations: Vec<Violation>,
    #[serde(with = "hex_u64")]
    pub final_digest: u64,
    pub halted: bool,
    pub fuel_exhausted: bool,
}

mod hex_u64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map_err(serde::de::Error::custom)
    }
}

fn cond_holds(cc: Cond, z: bool, n: bool) -> bool {
    match cc {
        Cond::Z => z,
        Cond::Nz => !z,
        Cond::N => n,
        Cond::Nn => !n,
    }
}

/// Runs `exe` from `start` (default: its entry) for at most `fuel`
/// instructions.
pub fn run(exe: &Executable, fuel: u64, btb: BtbConfig, start: Option<usize>) -> SimResult {
    run_state(exe, fuel, btb, start).0
}

pub fn run_state(
    exe: &Executable,
    fuel: u64,
    btb: BtbConfig,
    start: Option<usize>,
) -> (SimResult, MachineState) {
    let isa = &exe.isa;
    let code = &exe.code;
    let region = isa.code_region_size;
    let mut st = MachineState::new(start.unwrap_or(exe.entry), isa.data_region_size);
    let mut table: Vec<Option<u16>> = vec![None; btb.entries()];
    let mask = btb.entries() - 1;
    let mut res = SimResult {
        insns_executed: 0,
        indirect_branches: 0,
        btb_misses: 0,
        nop_insns: 0,
        violations: Vec::new(),
        final_digest: 0,
        halted: false,
        fuel_exhausted: false,
    };
    let violate = |pc: usize, kind| Some(Violation { pc, kind });

    let violation = loop {
        if res.insns_executed >= fuel {
            res.fuel_exhausted = true;
            break None;
        }
        let pc = st.pc;
        if pc >= region || pc >= code.len() {
            break violate(pc, ViolationKind::PcOutOfRegion);
        }
        let Ok(insn) = decode(code, pc) else {
            break violate(pc, ViolationKind::InvalidInstruction);
        };
        if insn.class() == InsnClass::Forbidden {
            break violate(pc, ViolationKind::Forbidden);
        }
        let next = pc + insn.len();
        let r = &mut st.regs;
        let mut new_pc = next;
        match insn {
            Instruction::Nop => res.nop_insns += 1,
            Instruction::Halt => {
                res.insns_executed += 1;
                st.halted = true;
                break None;
            }
            Instruction::Movi { rd, imm } => r[rd.index()] = imm,
            Instruction::Mov { rd, rs } => r[rd.index()] = r[rs.index()],
            Instruction::Add { rd, rs } => r[rd.index()] = r[rd.index()].wrapping_add(r[rs.index()]),
            Instruction::Addi { rd, imm } => {
                r[rd.index()] = r[rd.index()].wrapping_add(imm as i16 as u16)
            }
            Instruction::Cmp { rd, rs } => {
                let (a, b) = (r[rd.index()], r[rs.index()]);
                st.z = a == b;
                st.n = (a as i16) < (b as i16);
            }
            Instruction::And { rd, imm } => r[rd.index()] &= imm,
            Instruction::Load { rd, rs, imm } => {
                let addr = (r[rs.index()] as i64 + imm as i64).rem_euclid(isa.data_region_size as i64);
                st.regs[rd.index()] = st.load16(addr as usize);
            }
            Instruction::Store { rd, rs, imm } => {
                let addr = (r[rs.index()] as i64 + imm as i64).rem_euclid(isa.data_region_size as i64);
                let v = r[rd.index()];
                st.store16(addr as usize, v);
            }
            Instruction::Jmp { addr } => new_pc = addr as usize,
            Instruction::Call { addr } => {
                r[LINK_REG.index()] = next as u16;
                new_pc = addr as usize;
            }
            Instruction::Jcc { cc, off } => {
                if cond_holds(cc, st.z, st.n) {
                    let t = next as i64 + off as i64;
                    if t < 0 {
                        break violate(pc, ViolationKind::PcOutOfRegion);
                    }
                    new_pc = t as usize;
                }
            }
            Instruction::Jmpr { rs } | Instruction::Callr { rs } => {
                let target = r[rs.index()];
                if !isa.is_bundle_aligned(target as usize) {
                    break violate(pc, ViolationKind::UnalignedIndirect);
                }
                if matches!(insn, Instruction::Callr { .. }) {
                    r[LINK_REG.index()] = next as u16;
                }
                res.indirect_branches += 1;
                let slot = &mut table[pc & mask];
                if *slot != Some(target) {
                    res.btb_misses += 1;
                    *slot = Some(target);
                }
                new_pc = target as usize;
            }
            Instruction::Ret | Instruction::Syscall => unreachable!("forbidden"),
        }
        res.insns_executed += 1;
        st.pc = new_pc;
    };
    res.violations.extend(violation);
    res.halted = st.halted;
    res.final_digest = st.digest();
    (res, st)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Comparison {
    pub vanilla: SimResult,
    pub cbi: SimResult,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Divergence {
    #[error("vanilla build did not terminate cleanly: {0:?}")]
    VanillaFault(Box<SimResult>),
    #[error("optimized build did not terminate cleanly: {0:?}")]
    CbiFault(Box<SimResult>),
    #[error("final states differ: {vanilla:016x} vs {cbi:016x}")]
    State { vanilla: u64, cbi: u64 },
}

fn clean(r: &SimResult) -> bool {
    r.violations.is_empty() && r.halted
}

/// Runs two builds of one program and checks that they end in the same state.
pub fn compare_builds(
    vanilla: &Executable,
    cbi: &Executable,
    fuel: u64,
    btb: BtbConfig,
) -> Result<Comparison, Divergence> {
    let v = run(vanilla, fuel, btb, None);
    let c = run(cbi, fuel, btb, None);
    if !clean(&v) {
        return Err(Divergence::VanillaFault(Box::new(v)));
    }
    if !clean(&c) {
        return Err(Divergence::CbiFault(Box::new(c)));
    }
    if v.final_digest != c.final_digest {
        return Err(Divergence::State { vanilla: v.final_digest, cbi: c.final_digest });
    }
    Ok(Comparison { vanilla: v, cbi: c })
}
