//! Signature construction from a (vulnerable, patched) function pair.
//!
//! Source-level patch sites are projected onto both binaries through their
//! line tables. Only instructions that map to changed source lines take part,
//! so blocks that differ between the two builds merely as a side effect of the
//! patch (register reallocation, shifted offsets) never enter a signature.
//!
//! * add sites: the added blocks are grouped into connected batches, the
//!   unchanged blocks leading into each batch are located, and their
//!   counterparts in the vulnerable build become parents-children structures
//!   (counterpart plus all of its successors);
//! * delete sites: the deleted instructions, grouped by block;
//! * change sites: the changed blocks with their CFG neighbourhood.
//!
//! Add and change signatures also carry a patch signature holding the
//! instructions that exist only in the patched build.

mod types;
mod union_find;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use log::debug;
use serde::Serialize;
use thiserror::Error;

use crate::align::lcs_len;
use crate::binmodel::{
    contains_line, map_lines_to_instructions, same_source_file, BinaryFunction, BlockId,
    Instruction, NormInsn, SourceLine,
};
use crate::diffcore::{diff_sources, LineCorrespondence, PatchSite, SiteKind};

pub use types::{BlockList, ParentsChildren, Signature, SignatureKind, Structure};
pub use union_find::DisjointSets;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SigGenError {
    #[error("no instruction maps to the patched source lines")]
    NoMappedInstructions,
    #[error("add batch {0:?} has no unchanged predecessor")]
    NoLeadingBlock(Vec<BlockId>),
    #[error("no counterpart in the vulnerable build for block {0}")]
    NoCounterpart(BlockId),
    #[error("counterpart block {0} has no successors to use as children")]
    NoChildren(BlockId),
    #[error("site of kind {0:?} passed to the wrong builder")]
    WrongSiteKind(SiteKind),
    #[error("no structure could be built: {}", .0.join("; "))]
    SignatureEmpty(Vec<String>),
    #[error("patch sites found but no signature produced: {}", .0.join("; "))]
    NoSignatures(Vec<String>),
}

/// Everything the builders need about one function pair.
#[derive(Debug, Clone)]
pub struct PairContext<'a> {
    pub vulnerable: &'a BinaryFunction,
    pub patched: &'a BinaryFunction,
    /// Label of the diffed source file as it appears in the line tables
    /// (path-suffix matching applies).
    pub source_file: String,
    /// New-version line → old-version line for unchanged lines.
    pub correspondence: LineCorrespondence,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AddedBlocks {
    /// Blocks whose every line-mapped instruction maps to an added line.
    pub added: BTreeSet<BlockId>,
    /// Blocks mixing added and unchanged instructions.
    pub modified: BTreeSet<BlockId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AddBatch {
    pub block_ids: BTreeSet<BlockId>,
}

/// A builder's signature plus the per-structure problems it skipped over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Built {
    pub signature: Signature,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Generated {
    pub signatures: Vec<Signature>,
    pub diagnostics: Vec<String>,
}

fn site_lines(sites: &[PatchSite], new_side: bool, file: &str) -> BTreeSet<SourceLine> {
    sites
        .iter()
        .flat_map(|s| if new_side { &s.new_lines } else { &s.old_lines })
        .map(|l| SourceLine::new(file, l.line))
        .collect()
}

fn require_kind(sites: &[PatchSite], kind: SiteKind) -> Result<(), SigGenError> {
    match sites.iter().find(|s| s.kind != kind) {
        Some(s) => Err(SigGenError::WrongSiteKind(s.kind)),
        None => Ok(()),
    }
}

fn norm(insns: &[Instruction]) -> Vec<NormInsn> {
    insns.iter().map(Instruction::normalized).collect()
}

fn norm_refs(insns: &[&Instruction]) -> Vec<NormInsn> {
    insns.iter().map(|i| i.normalized()).collect()
}

fn block_insns(f: &BinaryFunction, id: &BlockId) -> Vec<NormInsn> {
    f.block(id).map(|b| norm(&b.instructions)).unwrap_or_default()
}

/// Instructions that exist only in the patched build, grouped by patched
/// block; blocks left empty after filtering are dropped.
fn patch_blocks(
    vulnerable: &BinaryFunction,
    candidates: impl IntoIterator<Item = Vec<NormInsn>>,
) -> Option<BlockList> {
    let known: HashSet<NormInsn> = vulnerable
        .blocks()
        .iter()
        .flat_map(|b| b.instructions.iter().map(Instruction::normalized))
        .collect();
    let blocks: Vec<Vec<NormInsn>> = candidates
        .into_iter()
        .map(|b| b.into_iter().filter(|i| !known.contains(i)).collect::<Vec<_>>())
        .filter(|b| !b.is_empty())
        .collect();
    (!blocks.is_empty()).then_some(BlockList { blocks })
}

pub fn find_added_blocks(
    patched: &BinaryFunction,
    add_sites: &[PatchSite],
    source_file: &str,
) -> Result<AddedBlocks, SigGenError> {
    require_kind(add_sites, SiteKind::Add)?;
    let added_lines = site_lines(add_sites, true, source_file);
    let mut out = AddedBlocks::default();
    let mut any = false;
    for b in patched.blocks() {
        let (mut touching, mut pure, mut mapped) = (0usize, 0usize, 0usize);
        for insn in &b.instructions {
            let lines = patched.lines_at(insn.address);
            if lines.is_empty() {
                continue;
            }
            mapped += 1;
            let hits = lines.iter().filter(|l| contains_line(&added_lines, l)).count();
            if hits > 0 {
                touching += 1;
            }
            if hits == lines.len() {
                pure += 1;
            }
        }
        if touching == 0 {
            continue;
        }
        any = true;
        if pure == mapped {
            out.added.insert(b.id.clone());
        } else {
            out.modified.insert(b.id.clone());
        }
    }
    if !any {
        return Err(SigGenError::NoMappedInstructions);
    }
    Ok(out)
}

/// Connected components of the CFG restricted to `added`, edges undirected.
pub fn find_add_batches(patched: &BinaryFunction, added: &BTreeSet<BlockId>) -> Vec<AddBatch> {
    let ids: Vec<&BlockId> = added.iter().filter(|id| patched.contains_block(id)).collect();
    let pos: HashMap<&BlockId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut sets = DisjointSets::new(ids.len());
    for (i, id) in ids.iter().enumerate() {
        for s in patched.successors(id) {
            if let Some(&j) = pos.get(s) {
                sets.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<BlockId>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        groups.entry(sets.find(i)).or_default().insert((*id).clone());
    }
    let mut batches: Vec<AddBatch> = groups
        .into_values()
        .map(|block_ids| AddBatch { block_ids })
        .collect();
    batches.sort_by(|a, b| a.block_ids.first().cmp(&b.block_ids.first()));
    batches
}

/// Blocks outside the batch with an edge into it, in id order.
pub fn find_leading_blocks(
    patched: &BinaryFunction,
    batch: &AddBatch,
) -> Result<Vec<BlockId>, SigGenError> {
    let leading: BTreeSet<BlockId> = batch
        .block_ids
        .iter()
        .flat_map(|id| patched.predecessors(id))
        .filter(|p| !batch.block_ids.contains(*p))
        .cloned()
        .collect();
    if leading.is_empty() {
        return Err(SigGenError::NoLeadingBlock(
            batch.block_ids.iter().cloned().collect(),
        ));
    }
    Ok(leading.into_iter().collect())
}

fn canonical_lines(
    f: &BinaryFunction,
    id: &BlockId,
    file: &str,
    translate: Option<&LineCorrespondence>,
) -> BTreeSet<SourceLine> {
    f.block_lines(id)
        .into_iter()
        .filter_map(|l| {
            if !same_source_file(&l.file, file) {
                return Some(l);
            }
            let line = match translate {
                Some(c) => c.to_old(l.line)?,
                None => l.line,
            };
            Some(SourceLine::new(file, line))
        })
        .collect()
}

/// Vulnerable-build block corresponding to an unchanged patched-build block.
///
/// Candidates are ranked by Jaccard overlap of their source-line sets (patched
/// lines translated to old numbering); a leading block without mapped lines
/// falls back to normalized-instruction LCS. Ties go to the lowest block id.
pub fn find_counterpart_block(
    ctx: &PairContext<'_>,
    leading_id: &BlockId,
) -> Result<BlockId, SigGenError> {
    let file = ctx.source_file.as_str();
    let lead_lines = canonical_lines(ctx.patched, leading_id, file, Some(&ctx.correspondence));
    let mut best: Option<(&BlockId, usize, usize)> = None; // (id, numerator, denominator)
    if !lead_lines.is_empty() {
        for id in ctx.vulnerable.block_ids() {
            let lines = canonical_lines(ctx.vulnerable, id, file, None);
            let inter = lead_lines.intersection(&lines).count();
            let union = lead_lines.union(&lines).count();
            let better = match best {
                None => true,
                Some((_, n, d)) => inter * d > n * union,
            };
            if better {
                best = Some((id, inter, union));
            }
        }
    } else {
        let lead = block_insns(ctx.patched, leading_id);
        for id in ctx.vulnerable.block_ids() {
            let score = lcs_len(&lead, &block_insns(ctx.vulnerable, id));
            if best.is_none_or(|(_, n, _)| score > n) {
                best = Some((id, score, 1));
            }
        }
    }
    match best {
        Some((id, n, _)) if n > 0 => Ok(id.clone()),
        _ => Err(SigGenError::NoCounterpart(leading_id.clone())),
    }
}

fn context_structure(
    vulnerable: &BinaryFunction,
    parent: &BlockId,
) -> Result<ParentsChildren, SigGenError> {
    let children: Vec<Vec<NormInsn>> = vulnerable
        .successors(parent)
        .into_iter()
        .map(|c| block_insns(vulnerable, c))
        .collect();
    if children.is_empty() {
        return Err(SigGenError::NoChildren(parent.clone()));
    }
    Ok(ParentsChildren {
        parent: block_insns(vulnerable, parent),
        children,
    })
}

pub fn build_add_signature(
    ctx: &PairContext<'_>,
    add_sites: &[PatchSite],
    cve_id: &str,
) -> Result<Built, SigGenError> {
    let found = find_added_blocks(ctx.patched, add_sites, &ctx.source_file)?;
    let batches = find_add_batches(ctx.patched, &found.added);
    let mut diagnostics = Vec::new();
    let mut leading: BTreeSet<BlockId> = BTreeSet::new();
    for batch in &batches {
        match find_leading_blocks(ctx.patched, batch) {
            Ok(ids) => leading.extend(ids),
            Err(e) => diagnostics.push(e.to_string()),
        }
    }
    // Insertions that landed inside existing blocks: the block itself is the
    // insertion context.
    leading.extend(found.modified.iter().cloned());

    let mut structures: BTreeMap<BlockId, ParentsChildren> = BTreeMap::new();
    for lead in &leading {
        let built = find_counterpart_block(ctx, lead).and_then(|cp| {
            debug!("leading block {lead} -> counterpart {cp}");
            context_structure(ctx.vulnerable, &cp).map(|s| (cp, s))
        });
        match built {
            Ok((cp, s)) => {
                structures.entry(cp).or_insert(s);
            }
            Err(e) => diagnostics.push(e.to_string()),
        }
    }
    if structures.is_empty() {
        return Err(SigGenError::SignatureEmpty(diagnostics));
    }

    let added_lines = site_lines(add_sites, true, &ctx.source_file);
    let mut candidates: BTreeMap<BlockId, Vec<NormInsn>> = BTreeMap::new();
    for id in &found.added {
        candidates.insert(id.clone(), block_insns(ctx.patched, id));
    }
    for id in &found.modified {
        let b = ctx.patched.block(id).expect("modified block exists");
        let insns: Vec<NormInsn> = b
            .instructions
            .iter()
            .filter(|i| {
                ctx.patched
                    .lines_at(i.address)
                    .iter()
                    .any(|l| contains_line(&added_lines, l))
            })
            .map(Instruction::normalized)
            .collect();
        candidates.insert(id.clone(), insns);
    }
    let patch = patch_blocks(ctx.vulnerable, candidates.into_values());

    let signature = Signature::new(
        cve_id,
        &ctx.vulnerable.name,
        SignatureKind::Add,
        structures
            .into_values()
            .map(Structure::ParentsChildren)
            .collect(),
        patch,
    );
    Ok(Built {
        signature,
        diagnostics,
    })
}

pub fn build_delete_signature(
    vulnerable: &BinaryFunction,
    delete_sites: &[PatchSite],
    source_file: &str,
    cve_id: &str,
) -> Result<Signature, SigGenError> {
    require_kind(delete_sites, SiteKind::Delete)?;
    let lines = site_lines(delete_sites, false, source_file);
    let mapped = map_lines_to_instructions(vulnerable, &lines);
    if mapped.is_empty() {
        return Err(SigGenError::NoMappedInstructions);
    }
    let blocks = mapped.values().map(|v| norm_refs(v)).collect();
    Ok(Signature::new(
        cve_id,
        &vulnerable.name,
        SignatureKind::Delete,
        vec![Structure::BlockList(BlockList { blocks })],
        None,
    ))
}

pub fn build_change_signature(
    ctx: &PairContext<'_>,
    change_sites: &[PatchSite],
    cve_id: &str,
) -> Result<Signature, SigGenError> {
    require_kind(change_sites, SiteKind::Change)?;
    let vuln = ctx.vulnerable;
    let old_lines = site_lines(change_sites, false, &ctx.source_file);
    let changed = map_lines_to_instructions(vuln, &old_lines);
    if changed.is_empty() {
        return Err(SigGenError::NoMappedInstructions);
    }

    let pc = |parent: &BlockId, children: &[&BlockId]| {
        Structure::ParentsChildren(ParentsChildren {
            parent: block_insns(vuln, parent),
            children: children.iter().map(|c| block_insns(vuln, c)).collect(),
        })
    };
    let (kind, structures) = if changed.len() == 1 {
        let (x, insns) = changed.iter().next().expect("one changed block");
        let preds: Vec<&BlockId> = vuln.predecessors(x).into_iter().filter(|p| *p != x).collect();
        let succs: Vec<&BlockId> = vuln.successors(x).into_iter().filter(|s| *s != x).collect();
        let structures = if !preds.is_empty() {
            preds.iter().map(|p| pc(p, &[x])).collect()
        } else if !succs.is_empty() {
            vec![pc(x, &succs)]
        } else {
            vec![Structure::BlockList(BlockList {
                blocks: vec![norm_refs(insns)],
            })]
        };
        (SignatureKind::ChangeOneBlock, structures)
    } else {
        let mut structures = Vec::new();
        let mut isolated = Vec::new();
        for (a, insns) in &changed {
            for b in vuln.successors(a) {
                if b != a && changed.contains_key(b) {
                    structures.push(pc(a, &[b]));
                }
            }
            let has_changed_neighbour = vuln
                .successors(a)
                .into_iter()
                .chain(vuln.predecessors(a))
                .any(|n| n != a && changed.contains_key(n));
            if !has_changed_neighbour {
                isolated.push(norm_refs(insns));
            }
        }
        if !isolated.is_empty() {
            structures.push(Structure::BlockList(BlockList { blocks: isolated }));
        }
        (SignatureKind::ChangeManyBlock, structures)
    };

    let new_lines = site_lines(change_sites, true, &ctx.source_file);
    let patched_mapped = map_lines_to_instructions(ctx.patched, &new_lines);
    let patch = patch_blocks(vuln, patched_mapped.values().map(|v| norm_refs(v)));

    Ok(Signature::new(cve_id, &vuln.name, kind, structures, patch))
}

/// Run all three builders over pre-classified sites.
/// Output order is add, delete, change.
pub fn generate_from_sites(
    ctx: &PairContext<'_>,
    sites: &[PatchSite],
    cve_id: &str,
) -> Result<Generated, SigGenError> {
    let mut out = Generated::default();
    if sites.is_empty() {
        out.diagnostics.push("no patch sites".into());
        return Ok(out);
    }
    let of_kind = |k: SiteKind| -> Vec<PatchSite> {
        sites.iter().filter(|s| s.kind == k).cloned().collect()
    };
    let (adds, dels, chgs) = (
        of_kind(SiteKind::Add),
        of_kind(SiteKind::Delete),
        of_kind(SiteKind::Change),
    );
    if !adds.is_empty() {
        match build_add_signature(ctx, &adds, cve_id) {
            Ok(b) => {
                out.signatures.push(b.signature);
                out.diagnostics
                    .extend(b.diagnostics.into_iter().map(|d| format!("add: {d}")));
            }
            Err(e) => out.diagnostics.push(format!("add: {e}")),
        }
    }
    if !dels.is_empty() {
        match build_delete_signature(ctx.vulnerable, &dels, &ctx.source_file, cve_id) {
            Ok(s) => out.signatures.push(s),
            Err(e) => out.diagnostics.push(format!("delete: {e}")),
        }
    }
    if !chgs.is_empty() {
        match build_change_signature(ctx, &chgs, cve_id) {
            Ok(s) => out.signatures.push(s),
            Err(e) => out.diagnostics.push(format!("change: {e}")),
        }
    }
    if out.signatures.is_empty() {
        return Err(SigGenError::NoSignatures(out.diagnostics));
    }
    Ok(out)
}

/// Diff the two source versions and build every signature kind they call for.
pub fn generate_signatures(
    vulnerable: &BinaryFunction,
    patched: &BinaryFunction,
    old_src: &str,
    new_src: &str,
    source_file: &str,
    cve_id: &str,
) -> Result<Generated, SigGenError> {
    let (script, sites) = diff_sources(old_src, new_src);
    let ctx = PairContext {
        vulnerable,
        patched,
        source_file: source_file.to_owned(),
        correspondence: LineCorrespondence::from_script(&script),
    };
    generate_from_sites(&ctx, &sites, cve_id)
}
