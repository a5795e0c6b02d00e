//! Code validators.
//!
//! [`validate_singlepass`] checks the one instruction stream that starts at
//! address 0 and forbids instructions that straddle a bundle boundary.
//! [`validate_multipass`] starts a stream at every bundle start so that
//! cross-bundle instructions are allowed as long as every overlapping stream
//! is itself safe; streams stop as soon as they reach an address that an
//! earlier stream already validated, which keeps the total work linear.
//! [`oracle_validate`] is an independent brute-force model of the same
//! policy used to cross-check the multipass validator.

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::isa::{decode, DecodeError, InsnClass, Instruction, IsaConfig, OP_JCC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum RuleSet {
    /// Memory accesses are contained by the runtime; LOAD and STORE are plain
    /// instructions.
    Permissive,
    /// STORE is only legal as `and rS, MASK; store [rS+imm], rD`.
    Restricted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FailReason {
    Invalid(DecodeError),
    Forbidden,
    /// Indirect jump or call not preceded by its mask in the same bundle.
    BareIndirect,
    /// STORE outside a masked pair under [`RuleSet::Restricted`].
    UnmaskedStore,
    TargetOutOfRegion { target: i64 },
    CrossesBundle,
    /// A direct branch at `address` targets a non-instruction address.
    TargetNotValid { target: usize },
    BundleStartNotValid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Failure {
    pub address: usize,
    pub reason: FailReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Lint {
    /// Direct call whose return point is not bundle aligned.
    CallNotAtBundleEnd,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub verdict: bool,
    pub valid: Vec<bool>,
    pub target: Vec<bool>,
    pub first_failure: Option<Failure>,
    pub checks_performed: usize,
    pub lints: Vec<(usize, Lint)>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    schema: u32,
    verdict: bool,
    first_failure: Option<&'a Failure>,
    checks_performed: usize,
    valid_count: usize,
    target_count: usize,
    lints: &'a [(usize, Lint)],
}

impl ValidationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ReportJson {
            schema: 1,
            verdict: self.verdict,
            first_failure: self.first_failure.as_ref(),
            checks_performed: self.checks_performed,
            valid_count: self.valid.iter().filter(|&&v| v).count(),
            target_count: self.target.iter().filter(|&&v| v).count(),
            lints: &self.lints,
        })
        .expect("report serialization cannot fail")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Match {
    /// Mask plus the guarded instruction; only the first is a valid start.
    Masked(usize),
    NonControl(usize),
    Direct { len: usize, target: i64, call: bool },
    Fail(FailReason),
}

fn match_masked(code: &[u8], pos: usize, isa: &IsaConfig, rules: RuleSet) -> Option<usize> {
    let Ok(Instruction::And { rd, imm }) = decode(code, pos) else {
        return None;
    };
    if imm != isa.mask_const() {
        return None;
    }
    let guarded = decode(code, pos + 4).ok()?;
    let ok = match guarded {
        Instruction::Jmpr { rs } | Instruction::Callr { rs } => rs == rd,
        Instruction::Store { rs, .. } => rules == RuleSet::Restricted && rs == rd,
        _ => false,
    };
    let len = 4 + guarded.len();
    (ok && isa.within_bundle(pos, len)).then_some(len)
}

fn match_at(code: &[u8], pos: usize, isa: &IsaConfig, rules: RuleSet) -> Match {
    if let Some(len) = match_masked(code, pos, isa, rules) {
        return Match::Masked(len);
    }
    let insn = match decode(code, pos) {
        Ok(i) => i,
        Err(e) => return Match::Fail(FailReason::Invalid(e)),
    };
    let len = insn.len();
    match insn.class() {
        InsnClass::NonControlFlow => match insn {
            Instruction::Store { .. } if rules == RuleSet::Restricted => {
                Match::Fail(FailReason::UnmaskedStore)
            }
            _ => Match::NonControl(len),
        },
        InsnClass::Nop | InsnClass::Halt | InsnClass::Mask => Match::NonControl(len),
        InsnClass::DirectBranch | InsnClass::DirectCall => {
            let target = match insn {
                Instruction::Jmp { addr } | Instruction::Call { addr } => addr as i64,
                Instruction::Jcc { off, .. } => (pos + len) as i64 + off as i64,
                _ => unreachable!(),
            };
            Match::Direct { len, target, call: insn.class() == InsnClass::DirectCall }
        }
        InsnClass::IndirectBranch | InsnClass::IndirectCall => Match::Fail(FailReason::BareIndirect),
        InsnClass::Forbidden => Match::Fail(FailReason::Forbidden),
    }
}

struct Scan<'a> {
    code: &'a [u8],
    isa: &'a IsaConfig,
    rules: RuleSet,
    valid: Vec<bool>,
    target: Vec<bool>,
    /// One branch that targets each recorded address, for diagnostics.
    target_src: Vec<u32>,
    checks: usize,
    lints: Vec<(usize, Lint)>,
    /// Sorted start offsets of relocation fields in an unlinked object.
    reloc_fields: &'a [usize],
}

impl<'a> Scan<'a> {
    fn new(code: &'a [u8], isa: &'a IsaConfig, rules: RuleSet) -> Self {
        let n = code.len();
        Scan {
            code,
            isa,
            rules,
            valid: vec![false; n],
            target: vec![false; n],
            target_src: vec![u32::MAX; n],
            checks: 0,
            lints: Vec::new(),
            reloc_fields: &[],
        }
    }

    /// Checks one instruction at `pos` and returns the next stream position.
    fn step(&mut self, pos: usize, single: bool) -> Result<usize, Failure> {
        self.valid[pos] = true;
        self.checks += 1;
        let fail = |reason| Failure { address: pos, reason };
        let len = match match_at(self.code, pos, self.isa, self.rules) {
            Match::Fail(r) => return Err(fail(r)),
            Match::Masked(len) | Match::NonControl(len) => len,
            Match::Direct { len, .. }
                if self.code[pos] != OP_JCC && self.reloc_fields.binary_search(&(pos + 1)).is_ok() =>
            {
                // Resolved by the linker to a symbol, which is an instruction start.
                len
            }
            Match::Direct { len, target, call } => {
                if target < 0 || target >= self.isa.code_region_size as i64 {
                    return Err(fail(FailReason::TargetOutOfRegion { target }));
                }
                let t = target as usize;
                if t < self.code.len() {
                    self.target[t] = true;
                    if self.target_src[t] == u32::MAX {
                        self.target_src[t] = pos as u32;
                    }
                }
                if call && (pos + len) % self.isa.bundle_size != 0 {
                    self.lints.push((pos, Lint::CallNotAtBundleEnd));
                }
                len
            }
        };
        if single && !self.isa.within_bundle(pos, len) {
            return Err(fail(FailReason::CrossesBundle));
        }
        Ok(pos + len)
    }

    fn finish(self, failure: Option<Failure>, check_aligned: bool) -> ValidationReport {
        let mut first_failure = failure;
        if first_failure.is_none() {
            for i in 0..self.code.len() {
                if self.target[i] && !self.valid[i] {
                    first_failure = Some(Failure {
                        address: self.target_src[i] as usize,
                        reason: FailReason::TargetNotValid { target: i },
                    });
                    break;
                }
                if check_aligned && self.isa.is_bundle_aligned(i) && !self.valid[i] {
                    first_failure = Some(Failure { address: i, reason: FailReason::BundleStartNotValid });
                    break;
                }
            }
        }
        ValidationReport {
            verdict: first_failure.is_none(),
            valid: self.valid,
            target: self.target,
            first_failure,
            checks_performed: self.checks,
            lints: self.lints,
        }
    }
}

/// Validates every instruction stream that starts at a bundle start.
pub fn validate_multipass(code: &[u8], isa: &IsaConfig, rules: RuleSet) -> ValidationReport {
    multipass(Scan::new(code, isa, rules))
}

fn multipass(mut scan: Scan<'_>) -> ValidationReport {
    let isa = scan.isa;
    let size = scan.code.len();
    let mut failure = None;
    let mut bundle_start = 0;
    'outer: while bundle_start < size {
        let mut pos = bundle_start;
        while pos < size && !scan.valid[pos] {
            match scan.step(pos, false) {
                Ok(next) => pos = next,
                Err(f) => {
                    failure = Some(f);
                    break 'outer;
                }
            }
        }
        bundle_start += isa.bundle_size;
    }
    scan.finish(failure, true)
}

/// Validates the single stream from address 0; no instruction may cross a
/// bundle boundary.
pub fn validate_singlepass(code: &[u8], isa: &IsaConfig, rules: RuleSet) -> ValidationReport {
    let mut scan = Scan::new(code, isa, rules);
    let mut pos = 0;
    let mut failure = None;
    while pos < code.len() {
        match scan.step(pos, true) {
            Ok(next) => pos = next,
            Err(f) => {
                failure = Some(f);
                break;
            }
        }
    }
    scan.finish(failure, false)
}

/// Multipass validation of an unlinked object. A direct JMP or CALL whose
/// address field is exactly a relocation field is not target-checked, since
/// the linker fills it with a symbol address. `reloc_fields` must be sorted.
pub fn validate_object(
    code: &[u8],
    reloc_fields: &[usize],
    isa: &IsaConfig,
    rules: RuleSet,
) -> ValidationReport {
    let mut scan = Scan::new(code, isa, rules);
    scan.reloc_fields = reloc_fields;
    multipass(scan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Single,
    Multi,
}

pub fn validate(code: &[u8], isa: &IsaConfig, rules: RuleSet, mode: Mode) -> ValidationReport {
    match mode {
        Mode::Single => validate_singlepass(code, isa, rules),
        Mode::Multi => validate_multipass(code, isa, rules),
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("image of {0} bytes exceeds the oracle limit of {ORACLE_MAX_LEN}")]
    TooLarge(usize),
}

pub const ORACLE_MAX_LEN: usize = 4096;

/// Reference model of the multipass policy. Walks every stream from every
/// bundle start to its end without memoization and collects the set of
/// instruction starts and direct-branch targets.
pub fn oracle_validate(code: &[u8], isa: &IsaConfig, rules: RuleSet) -> Result<bool, OracleError> {
    let n = code.len();
    if n > ORACLE_MAX_LEN {
        return Err(OracleError::TooLarge(n));
    }
    let mask = isa.mask_const();
    let mut starts = BTreeSet::new();
    let mut targets = BTreeSet::new();
    for seed in (0..n).step_by(isa.bundle_size) {
        let mut pos = seed;
        while pos < n {
            starts.insert(pos);
            let Ok(insn) = decode(code, pos) else {
                return Ok(false);
            };
            // An AND with the sandbox mask may guard the next instruction.
            if let Instruction::And { rd, imm } = insn {
                if imm == mask {
                    if let Ok(next) = decode(code, pos + 4) {
                        let guarded = match next {
                            Instruction::Jmpr { rs } | Instruction::Callr { rs } => rs == rd,
                            Instruction::Store { rs, .. } => {
                                rs == rd && rules == RuleSet::Restricted
                            }
                            _ => false,
                        };
                        let end = pos + 4 + next.len();
                        if guarded && pos / isa.bundle_size == (end - 1) / isa.bundle_size {
                            pos = end;
                            continue;
                        }
                    }
                }
            }
            let dst = match insn {
                Instruction::Ret | Instruction::Syscall => return Ok(false),
                Instruction::Jmpr { .. } | Instruction::Callr { .. } => return Ok(false),
                Instruction::Store { .. } if rules == RuleSet::Restricted => return Ok(false),
                Instruction::Jmp { addr } | Instruction::Call { addr } => Some(addr as i64),
                Instruction::Jcc { off, .. } => Some(pos as i64 + 3 + off as i64),
                _ => None,
            };
            if let Some(d) = dst {
                if !(0..isa.code_region_size as i64).contains(&d) {
                    return Ok(false);
                }
                if (d as usize) < n {
                    targets.insert(d as usize);
                }
            }
            pos += insn.len();
        }
    }
    Ok(targets.is_subset(&starts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{OP_HALT, OP_NOP};

    fn isa() -> IsaConfig {
        IsaConfig::default()
    }

    fn both(code: &[u8]) -> (ValidationReport, bool) {
        (
            validate_multipass(code, &isa(), RuleSet::Permissive),
            oracle_validate(code, &isa(), RuleSet::Permissive).unwrap(),
        )
    }

    #[test]
    fn all_nops_and_halt() {
        let mut code = vec![OP_NOP; 32];
        code[31] = OP_HALT;
        let (r, o) = both(&code);
        assert!(r.verdict && o);
        assert!(r.valid.iter().all(|&v| v));
        assert_eq!(r.checks_performed, 32);
    }

    #[test]
    fn mask_pair_split_across_bundles() {
        let mut code = vec![OP_NOP; 64];
        code[28..32].copy_from_slice(&[0x30, 0x01, 0xE0, 0xFF]);
        code[32..34].copy_from_slice(&[0x40, 0x01]);
        let (r, o) = both(&code);
        assert!(!r.verdict && !o);
        assert_eq!(
            r.first_failure,
            Some(Failure { address: 32, reason: FailReason::BareIndirect })
        );
    }

    #[test]
    fn masked_pair_accepted_second_half_not_valid() {
        let mut code = vec![OP_NOP; 32];
        code[0..6].copy_from_slice(&[0x30, 0x01, 0xE0, 0xFF, 0x40, 0x01]);
        let (r, o) = both(&code);
        assert!(r.verdict && o);
        assert!(r.valid[0] && !r.valid[4]);

        // wrong register
        code[5] = 0x02;
        assert!(!validate_multipass(&code, &isa(), RuleSet::Permissive).verdict);
        // jumping into the second half
        code[5] = 0x01;
        code[6..9].copy_from_slice(&[0x20, 0x04, 0x00]);
        let (r, o) = both(&code);
        assert!(!r.verdict && !o);
        assert_eq!(r.first_failure.unwrap().reason, FailReason::TargetNotValid { target: 4 });
        assert_eq!(r.first_failure.unwrap().address, 6);
    }

    #[test]
    fn cross_bundle_jump_matches_oracle() {
        let mut code = vec![OP_NOP; 64];
        code[30..33].copy_from_slice(&[0x20, 0x11, 0x00]);
        let (r, o) = both(&code);
        assert_eq!(r.verdict, o);
        assert!(!r.verdict);

        // A crossing MOVI whose tail decodes as NOPs passes multipass only.
        let mut code = vec![OP_NOP; 64];
        code[30..34].copy_from_slice(&[0x10, 0x00, 0x90, 0x90]);
        let (r, o) = both(&code);
        assert!(r.verdict && o);
        let s = validate_singlepass(&code, &isa(), RuleSet::Permissive);
        assert_eq!(s.first_failure.unwrap().reason, FailReason::CrossesBundle);
    }

    #[test]
    fn forbidden_bytes() {
        let mut code = vec![OP_NOP; 32];
        code[0] = 0xCC;
        let (r, o) = both(&code);
        assert!(!r.verdict && !o);
        code[0] = OP_NOP;
        code[7] = 0xC3;
        let s = validate_singlepass(&code, &isa(), RuleSet::Permissive);
        assert_eq!(s.first_failure, Some(Failure { address: 7, reason: FailReason::Forbidden }));
    }

    #[test]
    fn direct_targets() {
        let mut code = vec![OP_NOP; 64];
        // jz -8 from address 0: negative target
        code[0..3].copy_from_slice(&[0x22, 0x00, 0xF8]);
        let r = validate_multipass(&code, &isa(), RuleSet::Permissive);
        assert_eq!(r.first_failure.unwrap().reason, FailReason::TargetOutOfRegion { target: -5 });
        // JMP beyond the image but inside the region is not recorded.
        code[0..3].copy_from_slice(&[0x20, 0x00, 0x10]);
        assert!(validate_multipass(&code, &isa(), RuleSet::Permissive).verdict);
        let small = IsaConfig::new(32, 2048, 256).unwrap();
        assert!(!validate_multipass(&code, &small, RuleSet::Permissive).verdict);
        assert!(!oracle_validate(&code, &small, RuleSet::Permissive).unwrap());
    }

    #[test]
    fn call_lint() {
        let mut code = vec![OP_NOP; 32];
        code[0..3].copy_from_slice(&[0x21, 0x00, 0x00]);
        let r = validate_multipass(&code, &isa(), RuleSet::Permissive);
        assert!(r.verdict);
        assert_eq!(r.lints, vec![(0, Lint::CallNotAtBundleEnd)]);
    }

    #[test]
    fn restricted_store() {
        let mut code = vec![OP_NOP; 32];
        code[0..4].copy_from_slice(&[0x51, 0x00, 0x01, 0x00]);
        assert!(validate_multipass(&code, &isa(), RuleSet::Permissive).verdict);
        let r = validate_multipass(&code, &isa(), RuleSet::Restricted);
        assert_eq!(r.first_failure.unwrap().reason, FailReason::UnmaskedStore);
        code[0..8].copy_from_slice(&[0x30, 0x01, 0xE0, 0xFF, 0x51, 0x00, 0x01, 0x05]);
        assert!(validate_multipass(&code, &isa(), RuleSet::Restricted).verdict);
        assert!(oracle_validate(&code, &isa(), RuleSet::Restricted).unwrap());
    }

    #[test]
    fn object_relocation_fields_skip_target_check() {
        let small = IsaConfig::new(32, 2048, 256).unwrap();
        let mut code = vec![OP_NOP; 32];
        code[0..3].copy_from_slice(&[0x20, 0xC3, 0xC3]);
        assert!(!validate_multipass(&code, &small, RuleSet::Permissive).verdict);
        assert!(validate_object(&code, &[1], &small, RuleSet::Permissive).verdict);
        assert!(!validate_object(&code, &[2], &small, RuleSet::Permissive).verdict);
    }

    #[test]
    fn oracle_size_limit() {
        let code = vec![OP_NOP; 8192];
        assert_eq!(
            oracle_validate(&code, &isa(), RuleSet::Permissive),
            Err(OracleError::TooLarge(8192))
        );
    }
}
