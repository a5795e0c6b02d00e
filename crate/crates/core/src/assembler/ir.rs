//! Textual program IR: one statement per line.
//!
//! ```text
//! .func main            ; function entry, always bundle aligned
//!     movi r3, 10
//! loop:                 ; local label
//!     call helper
//!     addi r3, -1
//!     movi r0, 0
//!     cmp r3, r0
//!     jnz loop
//!     halt
//! *handler:             ; address-taken label, bundle aligned
//!     ret               ; lowered to `and r6, MASK; jmpr r6`
//! ```

use std::fmt;

use thiserror::Error;

use crate::isa::{Cond, Instruction, Reg};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

/// An instruction-level IR statement. Symbolic operands are resolved by the
/// assembler; `Ret`, `Jmpr` and `Callr` are lowered to masked pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IrInsn {
    Plain(Instruction),
    MoviSym { rd: Reg, label: String },
    JmpSym(String),
    CallSym(String),
    Jcc { cc: Cond, label: String },
    Jmpr(Reg),
    /// `far` places the call at the end of a fresh bundle instead of the
    /// current one (layout randomization).
    Callr { rs: Reg, far: bool },
    Ret,
    /// Raw bytes emitted as one unit; used for hand-built fixtures.
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stmt {
    Label { name: String, taken: bool },
    Insn(IrInsn),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub body: Vec<Stmt>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProgramIR {
    pub functions: Vec<Function>,
}

impl ProgramIR {
    pub fn parse(text: &str) -> Result<ProgramIR, ParseError> {
        let mut prog = ProgramIR::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |msg: String| ParseError { line, msg };
            let s = raw.split([';', '#']).next().unwrap().trim();
            if s.is_empty() {
                continue;
            }
            if let Some(name) = s.strip_prefix(".func") {
                let name = name.trim();
                if !is_ident(name) {
                    return Err(err(format!("bad function name `{name}`")));
                }
                prog.functions.push(Function { name: name.to_string(), body: Vec::new() });
                continue;
            }
            let func = prog
                .functions
                .last_mut()
                .ok_or_else(|| err("statement outside of a function".into()))?;
            if let Some(label) = s.strip_suffix(':') {
                let (taken, name) = match label.strip_prefix('*') {
                    Some(n) => (true, n),
                    None => (false, label),
                };
                if !is_ident(name) {
                    return Err(err(format!("bad label `{name}`")));
                }
                func.body.push(Stmt::Label { name: name.to_string(), taken });
                continue;
            }
            func.body.push(Stmt::Insn(parse_insn(s).map_err(err)?));
        }
        Ok(prog)
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_reg(s: &str) -> Result<Reg, String> {
    let idx = s
        .trim()
        .strip_prefix('r')
        .and_then(|d| d.parse::<u8>().ok())
        .ok_or_else(|| format!("expected register, got `{s}`"))?;
    Reg::new(idx).map_err(|e| e.to_string())
}

fn parse_int(s: &str) -> Result<i64, String> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let v = if let Some(h) = body.strip_prefix("0x") {
        i64::from_str_radix(h, 16)
    } else {
        body.parse::<i64>()
    }
    .map_err(|_| format!("expected integer, got `{s}`"))?;
    Ok(if neg { -v } else { v })
}

fn parse_u16(s: &str) -> Result<u16, String> {
    let v = parse_int(s)?;
    if (-(1 << 15)..(1 << 16)).contains(&v) {
        Ok(v as u16)
    } else {
        Err(format!("immediate {v} does not fit in 16 bits"))
    }
}

fn parse_i8(s: &str) -> Result<i8, String> {
    let v = parse_int(s)?;
    i8::try_from(v).map_err(|_| format!("immediate {v} does not fit in 8 bits"))
}

/// `[rS+imm]` or `[rS]`
fn parse_mem(s: &str) -> Result<(Reg, i8), String> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|x| x.strip_suffix(']'))
        .ok_or_else(|| format!("expected memory operand, got `{s}`"))?;
    match inner.find(['+', '-']) {
        Some(i) => {
            let reg = parse_reg(&inner[..i])?;
            let imm = parse_i8(inner[i..].trim_start_matches('+'))?;
            Ok((reg, imm))
        }
        None => Ok((parse_reg(inner)?, 0)),
    }
}

fn is_number(s: &str) -> bool {
    s.trim().starts_with(|c: char| c.is_ascii_digit() || c == '-')
}

fn parse_insn(s: &str) -> Result<IrInsn, String> {
    let (mn, rest) = match s.find(char::is_whitespace) {
        Some(i) => (&s[..i], s[i..].trim()),
        None => (s, ""),
    };
    let ops: Vec<&str> = if rest.is_empty() {
        Vec::new()
    } else {
        rest.split(',').map(str::trim).collect()
    };
    let want = |n: usize| -> Result<(), String> {
        if ops.len() == n {
            Ok(())
        } else {
            Err(format!("`{mn}` takes {n} operand(s), got {}", ops.len()))
        }
    };
    let label = |s: &str| -> Result<String, String> {
        if is_ident(s) {
            Ok(s.to_string())
        } else {
            Err(format!("bad label `{s}`"))
        }
    };
    use Instruction as I;
    let plain = IrInsn::Plain;
    Ok(match mn {
        "nop" => { want(0)?; plain(I::Nop) }
        "halt" => { want(0)?; plain(I::Halt) }
        "syscall" => { want(0)?; plain(I::Syscall) }
        "ret" => { want(0)?; IrInsn::Ret }
        "movi" => {
            want(2)?;
            let rd = parse_reg(ops[0])?;
            if is_number(ops[1]) {
                plain(I::Movi { rd, imm: parse_u16(ops[1])? })
            } else {
                IrInsn::MoviSym { rd, label: label(ops[1])? }
            }
        }
        "mov" | "add" | "cmp" => {
            want(2)?;
            let (rd, rs) = (parse_reg(ops[0])?, parse_reg(ops[1])?);
            plain(match mn {
                "mov" => I::Mov { rd, rs },
                "add" => I::Add { rd, rs },
                _ => I::Cmp { rd, rs },
            })
        }
        "addi" => { want(2)?; plain(I::Addi { rd: parse_reg(ops[0])?, imm: parse_i8(ops[1])? }) }
        "and" => { want(2)?; plain(I::And { rd: parse_reg(ops[0])?, imm: parse_u16(ops[1])? }) }
        "jmp" | "call" => {
            want(1)?;
            if is_number(ops[0]) {
                let addr = parse_u16(ops[0])?;
                plain(if mn == "jmp" { I::Jmp { addr } } else { I::Call { addr } })
            } else if mn == "jmp" {
                IrInsn::JmpSym(label(ops[0])?)
            } else {
                IrInsn::CallSym(label(ops[0])?)
            }
        }
        "jz" | "jnz" | "jn" | "jnn" => {
            want(1)?;
            let cc = match mn {
                "jz" => Cond::Z,
                "jnz" => Cond::Nz,
                "jn" => Cond::N,
                _ => Cond::Nn,
            };
            IrInsn::Jcc { cc, label: label(ops[0])? }
        }
        "jmpr" => { want(1)?; IrInsn::Jmpr(parse_reg(ops[0].trim_start_matches('*'))?) }
        "callr" | "callr.far" => {
            want(1)?;
            IrInsn::Callr { rs: parse_reg(ops[0].trim_start_matches('*'))?, far: mn == "callr.far" }
        }
        "load" => {
            want(2)?;
            let (rs, imm) = parse_mem(ops[1])?;
            plain(I::Load { rd: parse_reg(ops[0])?, rs, imm })
        }
        "store" => {
            want(2)?;
            let (rs, imm) = parse_mem(ops[0])?;
            plain(I::Store { rd: parse_reg(ops[1])?, rs, imm })
        }
        ".bytes" => {
            let bytes = rest
                .split_whitespace()
                .map(|b| {
                    u8::from_str_radix(b.trim_start_matches("0x"), 16)
                        .map_err(|_| format!("bad byte `{b}`"))
                })
                .collect::<Result<Vec<u8>, String>>()?;
            if bytes.is_empty() {
                return Err(".bytes needs at least one byte".into());
            }
            IrInsn::Bytes(bytes)
        }
        _ => return Err(format!("unknown mnemonic `{mn}`")),
    })
}

impl fmt::Display for IrInsn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IrInsn::Plain(i) => match *i {
                // Print immediates in a form the parser reads back.
                Instruction::Movi { rd, imm } => write!(f, "movi {rd}, {imm:#x}"),
                Instruction::And { rd, imm } => write!(f, "and {rd}, {imm:#x}"),
                Instruction::Jmp { addr } => write!(f, "jmp {addr:#x}"),
                Instruction::Call { addr } => write!(f, "call {addr:#x}"),
                Instruction::Load { rd, rs, imm } => write!(f, "load {rd}, [{rs}{imm:+}]"),
                Instruction::Store { rd, rs, imm } => write!(f, "store [{rs}{imm:+}], {rd}"),
                Instruction::Ret => write!(f, ".bytes c3"),
                Instruction::Jmpr { rs } => write!(f, ".bytes 40 {:02x}", rs.byte()),
                Instruction::Callr { rs } => write!(f, ".bytes 41 {:02x}", rs.byte()),
                Instruction::Jcc { cc, off } => {
                    write!(f, ".bytes 22 {:02x} {:02x}", cc as u8, off as u8)
                }
                other => write!(f, "{other}"),
            },
            IrInsn::MoviSym { rd, label } => write!(f, "movi {rd}, {label}"),
            IrInsn::JmpSym(l) => write!(f, "jmp {l}"),
            IrInsn::CallSym(l) => write!(f, "call {l}"),
            IrInsn::Jcc { cc, label } => write!(f, "{} {label}", cc.mnemonic()),
            IrInsn::Jmpr(r) => write!(f, "jmpr {r}"),
            IrInsn::Callr { rs, far: false } => write!(f, "callr {rs}"),
            IrInsn::Callr { rs, far: true } => write!(f, "callr.far {rs}"),
            IrInsn::Ret => write!(f, "ret"),
            IrInsn::Bytes(b) => {
                write!(f, ".bytes")?;
                for x in b {
                    write!(f, " {x:02x}")?;
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for ProgramIR {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for func in &self.functions {
            writeln!(f, ".func {}", func.name)?;
            for st in &func.body {
                match st {
                    Stmt::Label { name, taken: true } => writeln!(f, "*{name}:")?,
                    Stmt::Label { name, taken: false } => writeln!(f, "{name}:")?,
                    Stmt::Insn(i) => writeln!(f, "    {i}")?,
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SRC: &str = "
.func main
    movi r3, 10      ; counter
loop:
    call helper
    movi r2, helper
    callr r2
    callr.far *r2
    addi r3, -1
    load r1, [r4+3]
    store [r4-2], r1
    movi r0, 0
    cmp r3, r0
    jnz loop
    halt
.func helper
*entry2:
    .bytes 90 90
    ret
";

    #[test]
    fn parse_and_print_round_trip() {
        let p = ProgramIR::parse(SRC).unwrap();
        assert_eq!(p.functions.len(), 2);
        assert_eq!(p.functions[0].body.len(), 13);
        let text = p.to_string();
        assert_eq!(ProgramIR::parse(&text).unwrap(), p);
    }

    #[test]
    fn parse_errors_carry_line() {
        let e = ProgramIR::parse(".func f\n  movi r9, 1\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(ProgramIR::parse("nop\n").is_err());
        assert!(ProgramIR::parse(".func f\n  frob r1\n").is_err());
        assert!(ProgramIR::parse(".func f\n  addi r1, 300\n").is_err());
    }
}
