//! Command-line front end. Exit status: 0 on success, 1 when validation
//! rejects an image or a run hits a policy violation, 2 on usage or I/O
//! errors. Machine-readable output goes to stdout, diagnostics to stderr.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{bench_corpus, fit_linear, legality_experiment};
use crate::assembler::{assemble, PadMode, PadPolicy, ProgramIR};
use crate::corpus::{generate, generate_one, CorpusSpec};
use crate::image::{
    parse_executable, parse_object, serialize_executable, serialize_object, ObjectImage,
};
use crate::isa::IsaConfig;
use crate::optimizer::{
    link, link_checked, link_objects, pad_removal, LinkError, ScreeningSet,
};
use crate::simulator::{run, BtbConfig, DEFAULT_FUEL};
use crate::validator::{validate, Mode, RuleSet};

pub const SCHEMA: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "mc", version, about = "MiniCISC sandboxing toolchain")]
pub struct Cli {
    #[command(flatten)]
    isa: IsaArgs,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone, Copy)]
struct IsaArgs {
    /// Bundle size in bytes.
    #[arg(long, global = true, default_value_t = 32)]
    bundle: usize,
    /// Code region size in bytes.
    #[arg(long, global = true, default_value_t = 65536)]
    code_region: usize,
    /// Data region size in bytes.
    #[arg(long, global = true, default_value_t = 65536)]
    data_region: usize,
}

impl IsaArgs {
    fn config(&self) -> Result<IsaConfig> {
        Ok(IsaConfig::new(self.bundle, self.code_region, self.data_region)?)
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Rules {
    Permissive,
    Restricted,
}

impl From<Rules> for RuleSet {
    fn from(r: Rules) -> Self {
        match r {
            Rules::Permissive => RuleSet::Permissive,
            Rules::Restricted => RuleSet::Restricted,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Policy {
    Vanilla,
    Cbi,
    Unsafe,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ValMode {
    Single,
    Multi,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Report {
    Text,
    Json,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Assemble IR text into an object.
    Asm {
        /// Input IR file, or `-` for stdin.
        #[arg(default_value = "-")]
        input: String,
        #[arg(short, long, default_value = "-")]
        output: String,
        /// `cbi` emits the unoptimized seed for `opt`/`link`.
        #[arg(long, value_enum, default_value_t = Policy::Cbi)]
        policy: Policy,
        /// Do not replace large pads with jumps.
        #[arg(long)]
        no_nop_skip: bool,
    },
    /// Greedy cross-bundle pad removal on one object.
    Opt {
        #[arg(default_value = "-")]
        input: String,
        #[arg(short, long, default_value = "-")]
        output: String,
        #[arg(long, value_enum, default_value_t = Rules::Permissive)]
        rules: Rules,
        /// Extra screening bytes in hex, besides c3 (e.g. `01,1f`).
        #[arg(long, value_delimiter = ',')]
        screen: Vec<String>,
        /// Write optimization statistics as JSON to this file.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Link objects into an executable.
    Link {
        /// Object files; `-` reads one object from stdin.
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(short, long, default_value = "-")]
        output: String,
        #[arg(long, default_value = "main")]
        entry: String,
        #[arg(long, value_enum, default_value_t = Rules::Permissive)]
        rules: Rules,
        /// Concatenate and resolve only: no pad removal, no validation.
        #[arg(long = "unsafe")]
        unsafe_: bool,
        /// Validate but do not remove padding.
        #[arg(long)]
        no_opt: bool,
        /// Write link statistics as JSON to this file.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Validate an executable.
    Val {
        #[arg(default_value = "-")]
        input: String,
        #[arg(long, value_enum, default_value_t = ValMode::Multi)]
        mode: ValMode,
        #[arg(long, value_enum, default_value_t = Rules::Permissive)]
        rules: Rules,
        #[arg(long, value_enum, default_value_t = Report::Json)]
        report: Report,
    },
    /// Run an executable in the simulator.
    Run {
        #[arg(default_value = "-")]
        input: String,
        /// Start address instead of the entry point.
        #[arg(long)]
        start: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_FUEL)]
        fuel: u64,
        #[arg(long, default_value_t = 9)]
        btb_bits: u32,
        #[arg(long)]
        json: bool,
    },
    /// Generate a benchmark corpus as IR files.
    Gen {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Write layout variants of one program instead of a corpus.
        #[arg(long)]
        variants_of: Option<usize>,
    },
    /// Build and run a corpus three ways and write a CSV report.
    Bench {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "-")]
        out: String,
        #[arg(long, default_value_t = 10_000_000)]
        fuel: u64,
    },
    /// Random-bundle legality experiment.
    Rand {
        #[arg(long, default_value_t = 1_000_000)]
        n: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Require every offset of the bundle to start a legal stream.
        #[arg(long)]
        all_offsets: bool,
    },
    /// Fit cycles = x*insns + y*misses from a CSV with columns
    /// insns,misses,cycles.
    Fit {
        #[arg(long = "in")]
        input: String,
    },
}

fn read_input(path: &str, stdin: &mut dyn Read) -> Result<String> {
    if path == "-" {
        let mut s = String::new();
        stdin.read_to_string(&mut s).context("reading stdin")?;
        Ok(s)
    } else {
        fs::read_to_string(path).with_context(|| format!("reading {path}"))
    }
}

fn write_output(path: &str, text: &str, stdout: &mut dyn Write) -> Result<()> {
    if path == "-" {
        writeln!(stdout, "{text}").context("writing stdout")
    } else {
        fs::write(path, format!("{text}\n")).with_context(|| format!("writing {path}"))
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut value = serde_json::to_value(v).expect("serializable");
    if let serde_json::Value::Object(m) = &mut value {
        m.insert("schema".into(), SCHEMA.into());
    }
    serde_json::to_string_pretty(&value).expect("serializable")
}

fn read_objects(inputs: &[String], isa: &IsaConfig, stdin: &mut dyn Read) -> Result<Vec<ObjectImage>> {
    inputs
        .iter()
        .map(|p| {
            let text = read_input(p, stdin)?;
            parse_object(&text, isa).with_context(|| format!("parsing object {p}"))
        })
        .collect()
}

/// Groups `NAME.K.ir` files in `dir` by program name, objects ordered by K.
fn read_corpus(dir: &Path) -> Result<Vec<(String, Vec<ProgramIR>)>> {
    let mut programs: BTreeMap<String, BTreeMap<usize, ProgramIR>> = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(stem) = name.strip_suffix(".ir") else { continue };
        let (prog, k) = stem.rsplit_once('.').unwrap_or((stem, "0"));
        let k: usize = k.parse().with_context(|| format!("bad object index in {name}"))?;
        let text = fs::read_to_string(&path)?;
        let ir = ProgramIR::parse(&text).with_context(|| format!("parsing {name}"))?;
        programs.entry(prog.to_string()).or_default().insert(k, ir);
    }
    if programs.is_empty() {
        bail!("no .ir files in {}", dir.display());
    }
    Ok(programs.into_iter().map(|(n, objs)| (n, objs.into_values().collect())).collect())
}

#[derive(Serialize)]
struct LinkStats<'a> {
    retries: usize,
    screen: Vec<u8>,
    objects: &'a [crate::optimizer::OptimizeStats],
}

fn dispatch(cli: Cli, stdin: &mut dyn Read, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let isa = cli.isa.config()?;
    match cli.cmd {
        Cmd::Asm { input, output, policy, no_nop_skip } => {
            let ir = ProgramIR::parse(&read_input(&input, stdin)?)?;
            let mode = match policy {
                Policy::Vanilla => PadMode::Vanilla,
                Policy::Cbi => PadMode::CbiSeed,
                Policy::Unsafe => PadMode::UnsafeNoType3,
            };
            let nop_skip = !no_nop_skip && mode != PadMode::CbiSeed;
            let obj = assemble(&ir, PadPolicy { mode, nop_skip }, &isa)?;
            write_output(&output, &serialize_object(&obj), stdout)?;
        }
        Cmd::Opt { input, output, rules, screen, stats } => {
            let obj = parse_object(&read_input(&input, stdin)?, &isa)?;
            let mut set = ScreeningSet::new();
            for b in &screen {
                set.insert(u8::from_str_radix(b.trim_start_matches("0x"), 16)
                    .with_context(|| format!("bad screening byte {b}"))?);
            }
            let (out, st) = pad_removal(&obj, &isa, rules.into(), &set)?;
            if let Some(p) = stats {
                fs::write(&p, to_json(&st))?;
            }
            write_output(&output, &serialize_object(&out), stdout)?;
        }
        Cmd::Link { inputs, output, entry, rules, unsafe_, no_opt, stats } => {
            let objs = read_objects(&inputs, &isa, stdin)?;
            let rules: RuleSet = rules.into();
            let result = if unsafe_ {
                link_objects(&objs, &entry, &isa).map(|(e, _)| (e, None))
            } else if no_opt {
                link_checked(&objs, &entry, &isa, rules).map(|(e, _)| (e, None))
            } else {
                link(&objs, &entry, &isa, rules, &ScreeningSet::new()).map(|(e, r)| (e, Some(r)))
            };
            let (exe, report) = match result {
                Ok(r) => r,
                Err(e @ (LinkError::Rejected(_) | LinkError::NoConvergence { .. })) => {
                    writeln!(stderr, "mc link: {e}")?;
                    return Ok(1);
                }
                Err(e) => return Err(e.into()),
            };
            if let (Some(p), Some(r)) = (stats, report) {
                let ls = LinkStats { retries: r.retries, screen: r.screen.iter().collect(), objects: &r.stats };
                fs::write(&p, to_json(&ls))?;
            }
            write_output(&output, &serialize_executable(&exe), stdout)?;
        }
        Cmd::Val { input, mode, rules, report } => {
            let exe = parse_executable(&read_input(&input, stdin)?)?;
            let mode = match mode {
                ValMode::Single => Mode::Single,
                ValMode::Multi => Mode::Multi,
            };
            let r = validate(&exe.code, &exe.isa, rules.into(), mode);
            match report {
                Report::Json => writeln!(stdout, "{}", r.to_json())?,
                Report::Text => match &r.first_failure {
                    None => writeln!(stdout, "valid")?,
                    Some(f) => writeln!(stdout, "invalid at {:#06x}: {:?}", f.address, f.reason)?,
                },
            }
            return Ok(if r.verdict { 0 } else { 1 });
        }
        Cmd::Run { input, start, fuel, btb_bits, json } => {
            let exe = parse_executable(&read_input(&input, stdin)?)?;
            if !(1..=16).contains(&btb_bits) {
                bail!("--btb-bits must be in 1..=16");
            }
            let r = run(&exe, fuel, BtbConfig { index_bits: btb_bits }, start);
            if json {
                writeln!(stdout, "{}", to_json(&r))?;
            } else {
                writeln!(
                    stdout,
                    "insns {} nops {} indirect {} misses {} halted {} digest {:016x}",
                    r.insns_executed, r.nop_insns, r.indirect_branches, r.btb_misses, r.halted, r.final_digest
                )?;
                for v in &r.violations {
                    writeln!(stdout, "violation at {:#06x}: {:?}", v.pc, v.kind)?;
                }
            }
            return Ok(if r.violations.is_empty() { 0 } else { 1 });
        }
        Cmd::Gen { seed, n, out, variants_of } => {
            fs::create_dir_all(&out)?;
            let programs = match variants_of {
                None => generate(&CorpusSpec { seed, n_programs: n, ..Default::default() })?,
                Some(i) => {
                    let spec = layout_study_spec(seed);
                    (0..n as u64)
                        .map(|v| {
                            generate_one(&spec, i, Some(v)).map(|mut p| {
                                p.name = format!("{}v{v:03}", p.name);
                                p
                            })
                        })
                        .collect::<Result<_, _>>()?
                }
            };
            for p in &programs {
                for (k, text) in p.objects.iter().enumerate() {
                    fs::write(out.join(format!("{}.{k}.ir", p.name)), text)?;
                }
            }
            writeln!(stderr, "wrote {} programs to {}", programs.len(), out.display())?;
        }
        Cmd::Bench { corpus, out, fuel } => {
            let programs = read_corpus(&corpus)?;
            let rows = bench_corpus(&programs, &isa, fuel)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &rows {
                w.serialize(r)?;
            }
            let text = String::from_utf8(w.into_inner()?)?;
            write_output(&out, text.trim_end(), stdout)?;
        }
        Cmd::Rand { n, seed, all_offsets } => {
            if n == 0 {
                bail!("--n must be at least 1");
            }
            let r = legality_experiment(n, &isa, seed, all_offsets);
            writeln!(stdout, "{}", to_json(&r))?;
        }
        Cmd::Fit { input } => {
            let text = read_input(&input, stdin)?;
            let mut rdr = csv::Reader::from_reader(text.as_bytes());
            let mut samples = Vec::new();
            for rec in rdr.deserialize() {
                let (i, m, c): (f64, f64, f64) = rec?;
                samples.push((i, m, c));
            }
            writeln!(stdout, "{}", to_json(&fit_linear(&samples)?))?;
        }
    }
    Ok(0)
}

/// Corpus settings for layout-variant studies: larger programs where every
/// call is indirect.
pub fn layout_study_spec(seed: u64) -> CorpusSpec {
    CorpusSpec {
        seed,
        functions: (10, 14),
        indirect_call_density: 1.0,
        randomize_layout: true,
        ..Default::default()
    }
}

/// Runs the CLI with explicit streams and returns the exit status.
pub fn main_with<I, T>(args: I, stdin: &mut dyn Read, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli, stdin, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "mc: {e:#}");
            2
        }
    }
}
