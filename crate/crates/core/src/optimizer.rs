//! Greedy removal of cross-bundle padding, relocation screening and linking.
//!
//! Pad removal shrinks each cross-bundle pad to the smallest size for which
//! the rebuilt object still validates, moving the removed bytes into the next
//! padding site so that the rest of the object keeps its alignment. Because
//! relocation fields are unknown until link time, every trial is validated
//! once per screening byte with that byte written into every relocation field.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{fill_region, is_local_symbol, Executable, ObjectImage};
use crate::isa::{IsaConfig, MAX_INSN_LEN, OP_RET};
use crate::layout::{emit_nop_skip, Layout, LayoutError, Site};
use crate::validator::{validate_multipass, validate_object, Failure, RuleSet};

/// Byte values written into relocation fields while screening trials.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreeningSet {
    bytes: BTreeSet<u8>,
}

impl Default for ScreeningSet {
    fn default() -> Self {
        ScreeningSet { bytes: BTreeSet::from([OP_RET]) }
    }
}

impl ScreeningSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// A set holding 0xC3 plus `extra`.
    pub fn with(extra: impl IntoIterator<Item = u8>) -> Self {
        let mut s = Self::new();
        s.bytes.extend(extra);
        s
    }

    /// Returns true if the byte was not already present.
    pub fn insert(&mut self, b: u8) -> bool {
        self.bytes.insert(b)
    }

    pub fn contains(&self, b: u8) -> bool {
        self.bytes.contains(&b)
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_saturated(&self) -> bool {
        self.bytes.len() == 256
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        self.bytes.iter().copied()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizeStats {
    pub pads_before: usize,
    pub pads_after: usize,
    pub type3_sites: usize,
    /// Number of validator invocations.
    pub rebuild_count: usize,
    /// Accepted states that failed re-validation; only counted when
    /// [`OptimizeOptions::check_invariant`] is set.
    pub invariant_breaches: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OptimizeOptions {
    /// Re-apply nop-skip jumps to surviving large pads.
    pub nop_skip: bool,
    /// Re-validate the accepted layout after every pad.
    pub check_invariant: bool,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions { nop_skip: true, check_invariant: cfg!(debug_assertions) }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OptError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

struct Trial<'a> {
    layout: &'a Layout,
    isa: &'a IsaConfig,
    rules: RuleSet,
    screen: &'a ScreeningSet,
    nop_skip: bool,
    rebuilds: usize,
}

impl Trial<'_> {
    fn emit(&self, sizes: &[usize]) -> Result<ObjectImage, LayoutError> {
        let obj = self.layout.build(sizes, self.isa)?;
        Ok(if self.nop_skip { emit_nop_skip(&obj, self.isa) } else { obj })
    }

    fn accepts(&mut self, sizes: &[usize]) -> bool {
        let Ok(obj) = self.emit(sizes) else {
            return false;
        };
        self.rebuilds += 1;
        object_passes_screen(&obj, self.isa, self.rules, self.screen)
    }
}

/// Validates `obj` once per screening byte, with that byte written into
/// every relocation field.
pub fn object_passes_screen(
    obj: &ObjectImage,
    isa: &IsaConfig,
    rules: RuleSet,
    screen: &ScreeningSet,
) -> bool {
    let mut fields: Vec<usize> = obj.relocations.iter().map(|r| r.offset).collect();
    fields.sort_unstable();
    let mut code = obj.code.clone();
    screen.iter().all(|b| {
        for i in obj.relocation_bytes() {
            code[i] = b;
        }
        validate_object(&code, &fields, isa, rules).verdict
    })
}

pub fn pad_removal(
    obj: &ObjectImage,
    isa: &IsaConfig,
    rules: RuleSet,
    screen: &ScreeningSet,
) -> Result<(ObjectImage, OptimizeStats), OptError> {
    pad_removal_with(obj, isa, rules, screen, OptimizeOptions::default())
}

pub fn pad_removal_with(
    obj: &ObjectImage,
    isa: &IsaConfig,
    rules: RuleSet,
    screen: &ScreeningSet,
    opts: OptimizeOptions,
) -> Result<(ObjectImage, OptimizeStats), OptError> {
    let layout = Layout::from_object(obj, isa)?;
    let b = isa.bundle_size;
    let mut sizes = layout.slot_sizes();
    let sites = layout.sites();
    let mut stats = OptimizeStats {
        pads_before: obj.total_padding(),
        type3_sites: sizes.len(),
        ..Default::default()
    };
    let mut trial = Trial { layout: &layout, isa, rules, screen, nop_skip: opts.nop_skip, rebuilds: 0 };

    for (k, site) in sites.iter().enumerate() {
        let Site::Slot(i) = *site else { continue };
        let saved = sizes[i];
        let succ = match sites.get(k + 1) {
            Some(&Site::Slot(j)) => Some(j),
            _ => None,
        };
        for s in 0..saved {
            let mut next = sizes.clone();
            next[i] = s;
            if let Some(j) = succ {
                next[j] = (sizes[j] + saved - s) % b;
            }
            if trial.accepts(&next) {
                sizes = next;
                break;
            }
        }
        if opts.check_invariant {
            let before = trial.rebuilds;
            if !trial.accepts(&sizes) {
                stats.invariant_breaches += 1;
            }
            trial.rebuilds = before;
        }
    }

    let out = trial.emit(&sizes)?;
    stats.rebuild_count = trial.rebuilds;
    stats.pads_after = out.total_padding();
    if sizes.is_empty() && !opts.nop_skip {
        debug_assert_eq!(&out, obj);
    }
    Ok((out, stats))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinkError {
    #[error("no objects to link")]
    NoObjects,
    #[error("symbol `{0}` is defined by more than one object")]
    Duplicate(String),
    #[error("unresolved symbol `{symbol}` in object {object}")]
    Unresolved { object: usize, symbol: String },
    #[error("entry symbol `{0}` is not defined")]
    NoEntry(String),
    #[error("entry `{0}` is not bundle aligned")]
    UnalignedEntry(String),
    #[error("linked code of {size} bytes exceeds the code region of {region} bytes")]
    TooLarge { size: usize, region: usize },
    #[error("linked image rejected at {:#x}: {:?}", .0.address, .0.reason)]
    Rejected(Failure),
    #[error("screening did not converge (set of {size} bytes), last failure at {:#x}", .failure.address)]
    NoConvergence { failure: Failure, size: usize },
    #[error(transparent)]
    Optimize(#[from] OptError),
}

/// Where each relocation field of the input objects landed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LinkMap {
    pub bases: Vec<usize>,
    /// Absolute offsets of relocation fields.
    pub reloc_fields: Vec<usize>,
    /// Linked length before region fill.
    pub linked_len: usize,
}

/// Concatenates objects in order and resolves relocations. No validation.
pub fn link_objects(
    objs: &[ObjectImage],
    entry: &str,
    isa: &IsaConfig,
) -> Result<(Executable, LinkMap), LinkError> {
    if objs.is_empty() {
        return Err(LinkError::NoObjects);
    }
    let mut map = LinkMap::default();
    let mut globals: HashMap<&str, usize> = HashMap::new();
    let mut base = 0;
    for o in objs {
        map.bases.push(base);
        for (name, &off) in &o.symbols {
            if !is_local_symbol(name) && globals.insert(name, base + off).is_some() {
                return Err(LinkError::Duplicate(name.clone()));
            }
        }
        base += o.code.len();
    }
    if base > isa.code_region_size {
        return Err(LinkError::TooLarge { size: base, region: isa.code_region_size });
    }
    let mut code = Vec::with_capacity(isa.code_region_size);
    for (k, o) in objs.iter().enumerate() {
        code.extend_from_slice(&o.code);
        for r in &o.relocations {
            let addr = if is_local_symbol(&r.symbol) {
                o.symbols.get(&r.symbol).map(|&a| a + map.bases[k])
            } else {
                globals.get(r.symbol.as_str()).copied()
            }
            .ok_or_else(|| LinkError::Unresolved { object: k, symbol: r.symbol.clone() })?;
            let at = map.bases[k] + r.offset;
            code[at..at + 2].copy_from_slice(&(addr as u16).to_le_bytes());
            map.reloc_fields.push(at);
        }
    }
    map.linked_len = code.len();
    let entry_addr = *globals.get(entry).ok_or_else(|| LinkError::NoEntry(entry.to_string()))?;
    if !isa.is_bundle_aligned(entry_addr) {
        return Err(LinkError::UnalignedEntry(entry.to_string()));
    }
    fill_region(&mut code, isa);
    Ok((Executable { code, entry: entry_addr, isa: *isa }, map))
}

/// Links and validates objects as they are.
pub fn link_checked(
    objs: &[ObjectImage],
    entry: &str,
    isa: &IsaConfig,
    rules: RuleSet,
) -> Result<(Executable, LinkMap), LinkError> {
    let (exe, map) = link_objects(objs, entry, isa)?;
    match validate_multipass(&exe.code, isa, rules).first_failure {
        None => Ok((exe, map)),
        Some(f) => Err(LinkError::Rejected(f)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkReport {
    pub screen: ScreeningSet,
    pub retries: usize,
    pub stats: Vec<OptimizeStats>,
    pub objects: Vec<ObjectImage>,
    pub map: LinkMap,
}

/// Relocation bytes close enough to a failing address to have been decoded
/// by the failing instruction or masked pair.
fn bytes_near_failure(code: &[u8], map: &LinkMap, at: usize) -> Vec<u8> {
    let lo = at.saturating_sub(MAX_INSN_LEN - 1);
    let hi = at + 2 * MAX_INSN_LEN;
    map.reloc_fields
        .iter()
        .flat_map(|&f| [f, f + 1])
        .filter(|&i| (lo..hi).contains(&i))
        .map(|i| code[i])
        .collect()
}

/// Optimizes every object, links them and validates the result. When the
/// linked image is rejected, the relocation bytes near the failure are added
/// to the screening set and the whole process restarts from `seeds`.
pub fn link(
    seeds: &[ObjectImage],
    entry: &str,
    isa: &IsaConfig,
    rules: RuleSet,
    screen: &ScreeningSet,
) -> Result<(Executable, LinkReport), LinkError> {
    link_with(seeds, entry, isa, rules, screen, OptimizeOptions::default())
}

pub fn link_with(
    seeds: &[ObjectImage],
    entry: &str,
    isa: &IsaConfig,
    rules: RuleSet,
    screen: &ScreeningSet,
    opts: OptimizeOptions,
) -> Result<(Executable, LinkReport), LinkError> {
    let mut screen = screen.clone();
    let mut retries = 0;
    loop {
        let results = seeds
            .par_iter()
            .map(|o| pad_removal_with(o, isa, rules, &screen, opts))
            .collect::<Result<Vec<_>, _>>()?;
        let (objects, stats): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let (exe, map) = link_objects(&objects, entry, isa)?;
        let Some(failure) = validate_multipass(&exe.code, isa, rules).first_failure else {
            let report = LinkReport { screen, retries, stats, objects, map };
            return Ok((exe, report));
        };
        let mut grew = false;
        for b in bytes_near_failure(&exe.code, &map, failure.address) {
            grew |= screen.insert(b);
        }
        if !grew {
            return Err(LinkError::NoConvergence { failure, size: screen.len() });
        }
        retries += 1;
    }
}
