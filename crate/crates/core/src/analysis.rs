//! Experiments over the toolchain: random-bundle legality, the
//! cycles = x·insns + y·misses regression, and corpus benchmarks.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembler::{assemble, AsmError, PadPolicy, ProgramIR};
use crate::image::{Executable, ObjectImage};
use crate::isa::{decode, DecodeError, InsnClass, Instruction, IsaConfig};
use crate::optimizer::{link, link_checked, link_objects, LinkError, LinkReport, ScreeningSet};
use crate::simulator::{compare_builds, run, BtbConfig, Divergence, SimResult};
use crate::validator::{validate_singlepass, RuleSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LegalityResult {
    pub samples: u64,
    pub legal_permissive: u64,
    pub legal_restricted: u64,
    pub seed: u64,
    pub all_offsets: bool,
}

/// Judges one bundle-sized byte sequence on its own. The stream from
/// `start` must consist of legal instructions; an instruction may run past
/// the end of the sequence, in which case only its in-bundle bytes are
/// checked. Direct-branch targets inside the sequence must be starts of the
/// same stream.
fn stream_is_legal(bytes: &[u8], start: usize, isa: &IsaConfig, rules: RuleSet) -> bool {
    let n = bytes.len();
    // Bytes beyond the sequence are unknown; zero is acceptable in every
    // operand position, so padding with zeros checks only in-bundle bytes.
    let mut buf = bytes.to_vec();
    buf.extend_from_slice(&[0; 8]);
    let mut starts = vec![false; n];
    let mut targets = Vec::new();
    let mask = isa.mask_const();
    let mut pos = start;
    while pos < n {
        starts[pos] = true;
        let insn = match decode(&buf, pos) {
            Ok(i) => i,
            Err(DecodeError::Truncated) => unreachable!("padded"),
            Err(_) => return false,
        };
        let len = insn.len();
        if let Instruction::And { rd, imm } = insn {
            if imm == mask && pos + len < n {
                if let Ok(next) = decode(&buf, pos + len) {
                    let paired = match next {
                        Instruction::Jmpr { rs } | Instruction::Callr { rs } => rs == rd,
                        Instruction::Store { rs, .. } => rules == RuleSet::Restricted && rs == rd,
                        _ => false,
                    };
                    if paired {
                        pos += len + next.len();
                        continue;
                    }
                }
            }
        }
        match insn.class() {
            InsnClass::Forbidden | InsnClass::IndirectBranch | InsnClass::IndirectCall => return false,
            InsnClass::NonControlFlow => {
                if rules == RuleSet::Restricted && matches!(insn, Instruction::Store { .. }) {
                    return false;
                }
            }
            InsnClass::DirectBranch | InsnClass::DirectCall => {
                let t = match insn {
                    Instruction::Jmp { addr } | Instruction::Call { addr } => addr as i64,
                    Instruction::Jcc { off, .. } => (pos + len) as i64 + off as i64,
                    _ => unreachable!(),
                };
                if pos + len <= n {
                    if t < 0 || t >= isa.code_region_size as i64 {
                        return false;
                    }
                    targets.push(t as usize);
                }
            }
            _ => {}
        }
        pos += len;
    }
    targets.into_iter().all(|t| t >= n || starts[t])
}

pub fn bundle_is_legal(bytes: &[u8], isa: &IsaConfig, rules: RuleSet, all_offsets: bool) -> bool {
    if all_offsets {
        (0..bytes.len()).all(|s| stream_is_legal(bytes, s, isa, rules))
    } else {
        stream_is_legal(bytes, 0, isa, rules)
    }
}

/// Counts how many of `n` uniformly random bundles are legal under each
/// rule set. Samples are drawn from independent per-chunk streams, so the
/// result does not depend on thread count.
pub fn legality_experiment(n: u64, isa: &IsaConfig, seed: u64, all_offsets: bool) -> LegalityResult {
    const CHUNK: u64 = 1 << 14;
    let chunks = n.div_ceil(CHUNK);
    let (p, r) = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c);
            let mut buf = vec![0u8; isa.bundle_size];
            let (mut p, mut r) = (0u64, 0u64);
            for _ in c * CHUNK..n.min((c + 1) * CHUNK) {
                rng.fill_bytes(&mut buf);
                if bundle_is_legal(&buf, isa, RuleSet::Permissive, all_offsets) {
                    p += 1;
                    r += bundle_is_legal(&buf, isa, RuleSet::Restricted, all_offsets) as u64;
                }
            }
            (p, r)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    LegalityResult { samples: n, legal_permissive: p, legal_restricted: r, seed, all_offsets }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub x: f64,
    pub y: f64,
    /// 1 − SS_res/SS_tot with SS_tot about the mean; negative when the
    /// origin-constrained model fits worse than the mean.
    pub r_squared: f64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FitError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("design matrix is rank deficient")]
    RankDeficient,
}

/// Least squares for `cycles = x·insns + y·misses` without intercept,
/// solved by a Householder QR of the two-column design matrix.
pub fn fit_linear(samples: &[(f64, f64, f64)]) -> Result<FitResult, FitError> {
    let m = samples.len();
    if m < 2 {
        return Err(FitError::TooFewSamples(m));
    }
    let mut a: [Vec<f64>; 2] = [
        samples.iter().map(|s| s.0).collect(),
        samples.iter().map(|s| s.1).collect(),
    ];
    let mut b: Vec<f64> = samples.iter().map(|s| s.2).collect();
    let scale = a[0].iter().chain(&a[1]).fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut r = [[0.0; 2]; 2];
    for k in 0..2 {
        let norm = a[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 * scale.max(f64::MIN_POSITIVE) * (m as f64).sqrt() {
            return Err(FitError::RankDeficient);
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let reflect = |col: &mut [f64]| {
            let d: f64 = v.iter().zip(col.iter()).map(|(p, q)| p * q).sum();
            let f = 2.0 * d / vv;
            col.iter_mut().zip(&v).for_each(|(c, p)| *c -= f * p);
        };
        for col in a.iter_mut().skip(k) {
            reflect(&mut col[k..]);
        }
        reflect(&mut b[k..]);
        r[k][k] = a[k][k];
        if k == 0 {
            r[0][1] = a[1][0];
        }
    }
    let y = b[1] / r[1][1];
    let x = (b[0] - r[0][1] * y) / r[0][0];
    Ok(FitResult { x, y, r_squared: r_squared(samples, x, y) })
}

fn r_squared(samples: &[(f64, f64, f64)], x: f64, y: f64) -> f64 {
    let mean = samples.iter().map(|s| s.2).sum::<f64>() / samples.len() as f64;
    let ss_tot: f64 = samples.iter().map(|s| (s.2 - mean).powi(2)).sum();
    let ss_res: f64 = samples.iter().map(|s| (s.2 - x * s.0 - y * s.1).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}

/// Single-regressor fit `cycles = x·insns` through the origin.
pub fn fit_insns_only(samples: &[(f64, f64)]) -> Result<f64, FitError> {
    if samples.len() < 2 {
        return Err(FitError::TooFewSamples(samples.len()));
    }
    let sxx: f64 = samples.iter().map(|s| s.0 * s.0).sum();
    if sxx == 0.0 {
        return Err(FitError::RankDeficient);
    }
    Ok(samples.iter().map(|s| s.0 * s.1).sum::<f64>() / sxx)
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{program}: assembly failed: {source}")]
    Asm { program: String, source: AsmError },
    #[error("{program}: {stage} link failed: {source}")]
    Link { program: String, stage: &'static str, source: LinkError },
    #[error("{program}: vanilla build fails single-pass validation")]
    Vanilla { program: String },
    #[error("{program}: {source}")]
    Diverged { program: String, source: Divergence },
}

/// One program built three ways: vanilla padding, greedy pad removal, and
/// no cross-bundle padding at all (unsafe).
#[derive(Debug, Clone)]
pub struct Builds {
    pub vanilla: Executable,
    pub vanilla_len: usize,
    pub cbi: Executable,
    pub cbi_len: usize,
    pub cbi_report: LinkReport,
    pub unsafe_: Executable,
    pub unsafe_len: usize,
}

fn assemble_all(
    name: &str,
    objs: &[ProgramIR],
    policy: PadPolicy,
    isa: &IsaConfig,
) -> Result<Vec<ObjectImage>, BenchError> {
    objs.iter()
        .map(|ir| assemble(ir, policy, isa))
        .collect::<Result<_, _>>()
        .map_err(|source| BenchError::Asm { program: name.to_string(), source })
}

pub fn build_program(
    name: &str,
    objs: &[ProgramIR],
    isa: &IsaConfig,
    rules: RuleSet,
) -> Result<Builds, BenchError> {
    let link_err = |stage| move |source| BenchError::Link { program: name.to_string(), stage, source };
    let v = assemble_all(name, objs, PadPolicy::vanilla(), isa)?;
    let (vanilla, vmap) = link_checked(&v, "main", isa, rules).map_err(link_err("vanilla"))?;
    if !validate_singlepass(&vanilla.code, isa, rules).verdict {
        return Err(BenchError::Vanilla { program: name.to_string() });
    }
    let seeds = assemble_all(name, objs, PadPolicy::cbi_seed(), isa)?;
    let (cbi, cbi_report) =
        link(&seeds, "main", isa, rules, &ScreeningSet::new()).map_err(link_err("cbi"))?;
    let u = assemble_all(name, objs, PadPolicy::unsafe_no_type3(), isa)?;
    let (unsafe_, umap) = link_objects(&u, "main", isa).map_err(link_err("unsafe"))?;
    Ok(Builds {
        vanilla,
        vanilla_len: vmap.linked_len,
        cbi_len: cbi_report.map.linked_len,
        cbi,
        cbi_report,
        unsafe_,
        unsafe_len: umap.linked_len,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub program: String,
    pub size_vanilla: usize,
    pub size_cbi: usize,
    pub size_unsafe: usize,
    pub insns_vanilla: u64,
    pub insns_cbi: u64,
    pub insns_unsafe: u64,
    pub nops_vanilla: u64,
    pub nops_cbi: u64,
    pub misses_vanilla: u64,
    pub misses_cbi: u64,
    pub pads_before: usize,
    pub pads_after: usize,
    pub type3_sites: usize,
    pub screen_retries: usize,
    /// Percentage reduction of executed instructions, vanilla to CBI.
    pub insn_reduction_pct: f64,
    /// (vanilla − cbi) / (vanilla − unsafe); empty when unsafe saves nothing.
    pub savings_ratio: Option<f64>,
}

pub fn bench_program(
    name: &str,
    objs: &[ProgramIR],
    isa: &IsaConfig,
    fuel: u64,
) -> Result<(BenchRow, Builds, SimResult), BenchError> {
    let b = build_program(name, objs, isa, RuleSet::Permissive)?;
    let btb = BtbConfig::default();
    let cmp = compare_builds(&b.vanilla, &b.cbi, fuel, btb)
        .map_err(|source| BenchError::Diverged { program: name.to_string(), source })?;
    let u = run(&b.unsafe_, fuel, btb, None);
    let (v, c) = (&cmp.vanilla, &cmp.cbi);
    let stats = &b.cbi_report.stats;
    let row = BenchRow {
        program: name.to_string(),
        size_vanilla: b.vanilla_len,
        size_cbi: b.cbi_len,
        size_unsafe: b.unsafe_len,
        insns_vanilla: v.insns_executed,
        insns_cbi: c.insns_executed,
        insns_unsafe: u.insns_executed,
        nops_vanilla: v.nop_insns,
        nops_cbi: c.nop_insns,
        misses_vanilla: v.btb_misses,
        misses_cbi: c.btb_misses,
        pads_before: stats.iter().map(|s| s.pads_before).sum(),
        pads_after: stats.iter().map(|s| s.pads_after).sum(),
        type3_sites: stats.iter().map(|s| s.type3_sites).sum(),
        screen_retries: b.cbi_report.retries,
        insn_reduction_pct: 100.0 * (v.insns_executed as f64 - c.insns_executed as f64)
            / v.insns_executed as f64,
        savings_ratio: (v.insns_executed != u.insns_executed).then(|| {
            (v.insns_executed as f64 - c.insns_executed as f64)
                / (v.insns_executed as f64 - u.insns_executed as f64)
        }),
    };
    Ok((row, b, u))
}

/// Benchmarks every program; rows come back in input order.
pub fn bench_corpus(
    corpus: &[(String, Vec<ProgramIR>)],
    isa: &IsaConfig,
    fuel: u64,
) -> Result<Vec<BenchRow>, BenchError> {
    corpus
        .par_iter()
        .map(|(name, objs)| bench_program(name, objs, isa, fuel).map(|r| r.0))
        .collect()
}
