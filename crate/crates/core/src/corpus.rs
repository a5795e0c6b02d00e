//! Deterministic generator of benchmark programs.
//!
//! Each program is a three-level call tree: `main` loops over calls to
//! mid-level functions, which loop over calls to leaf functions. Every loop
//! has a fixed trip count, so every program terminates. Functions are split
//! into several objects to exercise linking.
//!
//! Register convention: r0 and r1 are scratch, r2 holds indirect targets,
//! r3, r4 and r7 are the loop counters of main, mid-level functions and
//! leaves, r5 saves the link register in mid-level functions and r6 is the
//! link register. The epilogue of `main` clears every register that may hold
//! a code address, so final states do not depend on code layout.

use std::fmt::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembler::{ParseError, ProgramIR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_programs: usize,
    /// Inclusive range of functions per program, `main` included.
    pub functions: (usize, usize),
    /// Inclusive range of straight-line instructions per basic block.
    pub body_len: (usize, usize),
    pub indirect_call_density: f64,
    pub taken_label_density: f64,
    /// Insert random NOP runs before indirect calls and sometimes give them
    /// their own bundle, so that variants differ only in code layout.
    pub randomize_layout: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 1,
            n_programs: 200,
            functions: (4, 9),
            body_len: (3, 9),
            indirect_call_density: 0.3,
            taken_label_density: 0.2,
            randomize_layout: false,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    Spec(String),
    #[error("generated program does not parse: {0}")]
    Parse(#[from] ParseError),
}

impl CorpusSpec {
    pub fn check(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::Spec(m.to_string()));
        if self.functions.0 < 2 || self.functions.0 > self.functions.1 {
            return bad("function range must be nonempty and start at 2 or more");
        }
        if self.body_len.0 > self.body_len.1 {
            return bad("body length range is empty");
        }
        for d in [self.indirect_call_density, self.taken_label_density] {
            if !(0.0..=1.0).contains(&d) {
                return bad("densities must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

/// One program split into objects; `main` is in the first object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusProgram {
    pub name: String,
    pub objects: Vec<String>,
}

impl CorpusProgram {
    pub fn parse(&self) -> Result<Vec<ProgramIR>, ParseError> {
        self.objects.iter().map(|t| ProgramIR::parse(t)).collect()
    }
}

const IMM16: [u16; 8] = [0x9090, 0x90F4, 0xF490, 0x0090, 0x1390, 0x9013, 0x90C3, 0x0001];
const IMM8: [i8; 6] = [-112, -12, 1, 2, -1, 16];
/// Longest NOP run placed before an indirect call in layout-randomized programs.
const NOP_RUN_MAX: usize = 96;

struct Gen<'a> {
    spec: &'a CorpusSpec,
    rng: ChaCha8Rng,
    /// Drives layout-only choices so that variants share their structure.
    layout_rng: Option<ChaCha8Rng>,
    labels: usize,
}

impl Gen<'_> {
    fn label(&mut self, stem: &str) -> String {
        self.labels += 1;
        format!("{stem}{}", self.labels)
    }

    fn scratch(&mut self) -> u8 {
        self.rng.gen_range(0..2)
    }

    fn imm16(&mut self) -> u16 {
        if self.rng.gen_bool(0.6) {
            *IMM16.choose(&mut self.rng).unwrap()
        } else {
            self.rng.gen()
        }
    }

    fn imm8(&mut self) -> i8 {
        if self.rng.gen_bool(0.6) {
            *IMM8.choose(&mut self.rng).unwrap()
        } else {
            self.rng.gen()
        }
    }

    /// Straight-line code that only writes scratch registers and data memory.
    fn block(&mut self, out: &mut String) {
        let n = self.rng.gen_range(self.spec.body_len.0..=self.spec.body_len.1);
        for _ in 0..n {
            let (a, b) = (self.scratch(), self.scratch());
            let src = *[0u8, 1, 3, 4, 7].choose(&mut self.rng).unwrap();
            let line = match self.rng.gen_range(0..10) {
                0 | 1 => format!("movi r{a}, {:#x}", self.imm16()),
                2 | 3 => format!("addi r{a}, {}", self.imm8()),
                4 => format!("add r{a}, r{src}"),
                5 => format!("mov r{a}, r{src}"),
                6 => format!("cmp r{a}, r{src}"),
                7 => format!("load r{a}, [r{b}{:+}]", self.imm8()),
                8 => format!("store [r{b}{:+}], r{a}", self.imm8()),
                _ => format!("and r{a}, {:#x}", self.imm16()),
            };
            writeln!(out, "{line}").unwrap();
        }
    }

    fn call(&mut self, out: &mut String, callee: &str) {
        if self.rng.gen_bool(self.spec.indirect_call_density) {
            let far = match self.layout_rng.as_mut() {
                Some(l) => {
                    for _ in 0..l.gen_range(0..NOP_RUN_MAX) {
                        out.push_str("nop\n");
                    }
                    l.gen_bool(0.5)
                }
                None => false,
            };
            let op = if far { "callr.far" } else { "callr" };
            writeln!(out, "movi r2, {callee}\n{op} r2").unwrap();
        } else {
            writeln!(out, "call {callee}").unwrap();
        }
    }

    /// Counted loop on `reg`; the back edge and exit use absolute jumps so
    /// loop bodies are not limited by the conditional branch range.
    fn counted_loop(&mut self, out: &mut String, reg: u8, trips: u16, body: impl FnOnce(&mut Self, &mut String)) {
        let (head, enter, done) = (self.label("head"), self.label("body"), self.label("done"));
        writeln!(out, "movi r{reg}, {trips}\n{head}:\nmovi r0, 0\ncmp r{reg}, r0\njnz {enter}\njmp {done}\n{enter}:").unwrap();
        body(self, out);
        writeln!(out, "addi r{reg}, -1\njmp {head}\n{done}:").unwrap();
    }

    /// Indirect jump to an address-taken label over a dead block.
    fn taken_label(&mut self, out: &mut String) {
        if self.rng.gen_bool(self.spec.taken_label_density) {
            let l = self.label("t");
            writeln!(out, "movi r2, {l}\njmpr r2").unwrap();
            self.block(out);
            writeln!(out, "*{l}:").unwrap();
        }
    }

    fn leaf(&mut self, name: &str) -> String {
        let mut out = format!(".func {name}\n");
        self.block(&mut out);
        let trips = self.rng.gen_range(1..=4);
        self.counted_loop(&mut out, 7, trips, |g, out| g.block(out));
        self.taken_label(&mut out);
        out.push_str("ret\n");
        out
    }

    fn mid(&mut self, name: &str, leaves: &[String]) -> String {
        let mut out = format!(".func {name}\nmov r5, r6\n");
        self.block(&mut out);
        let trips = self.rng.gen_range(2..=5);
        let k = self.rng.gen_range(1..=2.min(leaves.len()));
        let callees: Vec<String> = leaves.choose_multiple(&mut self.rng, k).cloned().collect();
        self.counted_loop(&mut out, 4, trips, |g, out| {
            for c in &callees {
                g.block(out);
                g.call(out, c);
            }
        });
        self.taken_label(&mut out);
        out.push_str("mov r6, r5\nret\n");
        out
    }

    fn main_fn(&mut self, mids: &[String]) -> String {
        let mut out = String::from(".func main\n");
        self.block(&mut out);
        let trips = self.rng.gen_range(2..=6);
        let k = self.rng.gen_range(1..=2.min(mids.len()));
        let callees: Vec<String> = mids.choose_multiple(&mut self.rng, k).cloned().collect();
        self.counted_loop(&mut out, 3, trips, |g, out| {
            for c in &callees {
                g.block(out);
                g.call(out, c);
            }
        });
        self.taken_label(&mut out);
        out.push_str("movi r2, 0\nmovi r5, 0\nmovi r6, 0\nhalt\n");
        out
    }

    fn program(&mut self, name: &str) -> CorpusProgram {
        let nf = self.rng.gen_range(self.spec.functions.0..=self.spec.functions.1);
        let n_mid = ((nf - 1) / 2).max(1);
        let n_leaf = (nf - 1 - n_mid).max(1);
        let mids: Vec<String> = (0..n_mid).map(|i| format!("m{i}")).collect();
        let leaves: Vec<String> = (0..n_leaf).map(|i| format!("f{i}")).collect();
        let mut funcs = vec![self.main_fn(&mids)];
        for m in &mids {
            let f = self.mid(m, &leaves);
            funcs.push(f);
        }
        for l in &leaves {
            let f = self.leaf(l);
            funcs.push(f);
        }
        // Split into objects of one to three functions.
        let mut objects = Vec::new();
        let mut rest = funcs.as_slice();
        while !rest.is_empty() {
            let take = self.rng.gen_range(1..=3).min(rest.len());
            objects.push(rest[..take].concat());
            rest = &rest[take..];
        }
        CorpusProgram { name: name.to_string(), objects }
    }
}

fn program_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn generate(spec: &CorpusSpec) -> Result<Vec<CorpusProgram>, CorpusError> {
    spec.check()?;
    (0..spec.n_programs)
        .map(|i| generate_one(spec, i, None))
        .collect()
}

/// Program `index` of the corpus described by `spec`. With `layout_variant`
/// set and layout randomization enabled, only NOP runs and indirect-call
/// placement depend on the variant.
pub fn generate_one(
    spec: &CorpusSpec,
    index: usize,
    layout_variant: Option<u64>,
) -> Result<CorpusProgram, CorpusError> {
    spec.check()?;
    let layout_rng = spec.randomize_layout.then(|| {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_1a70);
        r.set_stream(((index as u64) << 32) | layout_variant.unwrap_or(0));
        r
    });
    let mut g = Gen { spec, rng: program_rng(spec.seed, index), layout_rng, labels: 0 };
    let p = g.program(&format!("p{index:03}"));
    p.parse()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembler::{assemble, PadPolicy};
    use crate::isa::IsaConfig;

    #[test]
    fn deterministic() {
        let spec = CorpusSpec { n_programs: 5, ..Default::default() };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = CorpusSpec { seed: 2, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn layout_variants_share_structure() {
        let spec = CorpusSpec { randomize_layout: true, indirect_call_density: 1.0, ..Default::default() };
        let a = generate_one(&spec, 3, Some(0)).unwrap();
        let b = generate_one(&spec, 3, Some(1)).unwrap();
        assert_ne!(a, b);
        let strip = |p: &CorpusProgram| -> Vec<String> {
            p.objects
                .iter()
                .flat_map(|o| o.lines().filter(|l| *l != "nop").map(|l| l.replace(".far", "")))
                .collect()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn no_indirect_calls_at_zero_density() {
        let spec = CorpusSpec { indirect_call_density: 0.0, n_programs: 10, ..Default::default() };
        for p in generate(&spec).unwrap() {
            assert!(p.objects.iter().all(|o| !o.contains("callr")));
        }
    }

    #[test]
    fn assembles_with_crossing_candidates() {
        let isa = IsaConfig::new(32, 8192, 4096).unwrap();
        let spec = CorpusSpec { n_programs: 20, ..Default::default() };
        let mut pads = 0;
        let mut bundles = 0;
        for p in generate(&spec).unwrap() {
            assert_eq!(p.objects[0].lines().next(), Some(".func main"));
            for ir in p.parse().unwrap() {
                let o = assemble(&ir, PadPolicy::cbi_seed(), &isa).unwrap();
                bundles += o.code.len() / 32;
                pads += o.pad_info.iter().filter(|r| r.kind == crate::image::PadKind::CrossBundle).count();
            }
        }
        assert!(pads * 10 >= bundles, "{pads} crossing pads in {bundles} bundles");
    }

    #[test]
    fn rejects_bad_spec() {
        let spec = CorpusSpec { indirect_call_density: 1.5, ..Default::default() };
        assert!(generate(&spec).is_err());
        let spec = CorpusSpec { functions: (5, 4), ..Default::default() };
        assert!(generate(&spec).is_err());
    }
}
