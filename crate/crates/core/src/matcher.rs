//! Signature matching and the vulnerability-existence score.
//!
//! Instructions are compared in normalized form by longest common
//! subsequence. A block-list structure scores the best query block for each
//! of its blocks independently; a parents-children structure scores the best
//! query parent together with an injective assignment of its children to
//! that parent's CFG successors.
//!
//! `sim = Σ matched / Σ total` over a signature's structures, forced to 0
//! when the patch signature is found in the query.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{keyed, lcs_alignment, lcs_len};
use crate::binmodel::{hex_addr, BasicBlock, BinaryFunction, BlockId, NormInsn};
use crate::sigdb::{DbError, SignatureDatabase};
use crate::siggen::{BlockList, ParentsChildren, Signature, SignatureKind, Structure};

pub const DEFAULT_PATCH_THRESHOLD: f64 = 0.8;
pub const MATCH_SCHEMA: &str = "vulmatch-match/1";

/// Children beyond this count are assigned greedily instead of exactly.
pub const EXACT_ASSIGNMENT_LIMIT: usize = 6;

/// One matched signature instruction and the query instruction it aligned to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedInsn {
    /// Block within the structure (parent first, then children).
    pub block: usize,
    /// Instruction within that block.
    pub index: usize,
    pub query_block: BlockId,
    #[serde(with = "hex_addr")]
    pub address: u64,
    pub query_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureMatch {
    pub matched: usize,
    pub total: usize,
    /// Query block chosen for each signature block; `None` when the block
    /// contributes nothing. Empty when detail was not requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<Option<BlockId>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alignment: Vec<AlignedInsn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBlockMatch {
    pub matched: usize,
    pub total: usize,
    pub query_block: Option<BlockId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMatch {
    pub detected: bool,
    pub threshold: f64,
    pub blocks: Vec<PatchBlockMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionMatchResult {
    pub cve_id: String,
    pub function_name: String,
    pub kind: SignatureKind,
    pub ordinal: u32,
    pub query_function: String,
    pub query_binary: String,
    pub patched: bool,
    pub sim: f64,
    pub matched: usize,
    pub total: usize,
    pub structure_matches: Vec<StructureMatch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_match: Option<PatchMatch>,
}

/// Instruction ids shared between signatures and queries. Query instructions
/// absent from every signature map to [`Vocab::UNKNOWN`], which no signature
/// token equals.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    ids: HashMap<NormInsn, u32>,
}

impl Vocab {
    pub const UNKNOWN: u32 = u32::MAX;

    fn intern(&mut self, i: &NormInsn) -> u32 {
        let next = self.ids.len() as u32;
        *self.ids.entry(i.clone()).or_insert(next)
    }

    fn lookup(&self, i: &NormInsn) -> u32 {
        self.ids.get(i).copied().unwrap_or(Self::UNKNOWN)
    }

    fn intern_all(&mut self, v: &[NormInsn]) -> Vec<u32> {
        v.iter().map(|i| self.intern(i)).collect()
    }
}

#[derive(Debug, Clone)]
enum Tokens {
    Pc { parent: Vec<u32>, children: Vec<Vec<u32>> },
    Bl(Vec<Vec<u32>>),
}

#[derive(Debug, Clone)]
struct PreparedSignature {
    structures: Vec<Tokens>,
    patch: Option<Vec<Vec<u32>>>,
}

/// A query function with its blocks in natural id order and tokenized.
#[derive(Debug, Clone)]
pub struct PreparedFunction<'f> {
    pub func: &'f BinaryFunction,
    blocks: Vec<&'f BasicBlock>,
    toks: Vec<Vec<u32>>,
    succ: Vec<Vec<usize>>,
}

impl<'f> PreparedFunction<'f> {
    fn new(func: &'f BinaryFunction, vocab: &Vocab) -> Self {
        let blocks: Vec<&BasicBlock> = func
            .block_ids()
            .into_iter()
            .map(|id| func.block(id).expect("listed block exists"))
            .collect();
        let pos: HashMap<&BlockId, usize> =
            blocks.iter().enumerate().map(|(i, b)| (&b.id, i)).collect();
        let toks = blocks
            .iter()
            .map(|b| b.normalized().iter().map(|i| vocab.lookup(i)).collect())
            .collect();
        let succ = blocks
            .iter()
            .map(|b| func.successors(&b.id).into_iter().map(|s| pos[s]).collect())
            .collect();
        PreparedFunction {
            func,
            blocks,
            toks,
            succ,
        }
    }
}

/// Matched count and the lexicographically earliest optimal alignment of a
/// signature block against a query block.
pub fn block_similarity(sig_block: &[NormInsn], query_block: &[NormInsn]) -> (usize, Vec<(usize, usize)>) {
    let al = lcs_alignment(&keyed(sig_block), &keyed(query_block));
    (al.len(), al)
}

/// Best query block for a signature block: highest LCS, lowest index on ties.
fn best_block(sig: &[u32], q: &PreparedFunction<'_>) -> (usize, Option<usize>) {
    let mut best = (0, None);
    for (i, t) in q.toks.iter().enumerate() {
        let m = lcs_len(sig, t);
        if m > best.0 {
            best = (m, Some(i));
            if m == sig.len() {
                break;
            }
        }
    }
    best
}

/// Maximum-weight injective assignment of children (rows) to successors
/// (columns); only positive-weight pairs are assigned.
pub fn assign_children(w: &[Vec<usize>]) -> (usize, Vec<Option<usize>>) {
    let nc = w.len();
    let ns = w.first().map_or(0, Vec::len);
    if nc == 0 || ns == 0 {
        return (0, vec![None; nc]);
    }
    if nc > EXACT_ASSIGNMENT_LIMIT {
        return assign_greedy(w);
    }
    // dp[j][mask]: best total using the first j successors for the children in mask
    let full = 1usize << nc;
    let mut dp = vec![vec![None::<usize>; full]; ns + 1];
    dp[0][0] = Some(0);
    for j in 0..ns {
        for mask in 0..full {
            let Some(v) = dp[j][mask] else { continue };
            if dp[j + 1][mask].is_none_or(|x| v > x) {
                dp[j + 1][mask] = Some(v);
            }
            for (c, row) in w.iter().enumerate() {
                if mask & (1 << c) == 0 && row[j] > 0 {
                    let m2 = mask | (1 << c);
                    let v2 = v + row[j];
                    if dp[j + 1][m2].is_none_or(|x| v2 > x) {
                        dp[j + 1][m2] = Some(v2);
                    }
                }
            }
        }
    }
    let (mut mask, best) = dp[ns]
        .iter()
        .enumerate()
        .filter_map(|(m, v)| v.map(|v| (m, v)))
        .fold((0, 0), |acc, (m, v)| if v > acc.1 { (m, v) } else { acc });
    let mut out = vec![None; nc];
    let mut v = best;
    for j in (0..ns).rev() {
        if dp[j][mask] == Some(v) {
            continue;
        }
        let c = (0..nc)
            .find(|&c| {
                mask & (1 << c) != 0
                    && w[c][j] > 0
                    && v >= w[c][j]
                    && dp[j][mask ^ (1 << c)] == Some(v - w[c][j])
            })
            .expect("dp transition exists");
        out[c] = Some(j);
        v -= w[c][j];
        mask ^= 1 << c;
    }
    (best, out)
}

fn assign_greedy(w: &[Vec<usize>]) -> (usize, Vec<Option<usize>>) {
    let mut pairs: Vec<(usize, usize, usize)> = w
        .iter()
        .enumerate()
        .flat_map(|(c, row)| row.iter().enumerate().map(move |(s, &x)| (x, c, s)))
        .filter(|p| p.0 > 0)
        .collect();
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; w.len()];
    let mut used = vec![false; w.first().map_or(0, Vec::len)];
    let mut total = 0;
    for (x, c, s) in pairs {
        if out[c].is_none() && !used[s] {
            out[c] = Some(s);
            used[s] = true;
            total += x;
        }
    }
    (total, out)
}

/// Best (parent, child assignment) in the query: returns matched count and
/// the chosen query block per signature block.
fn best_parents_children(
    parent: &[u32],
    children: &[Vec<u32>],
    q: &PreparedFunction<'_>,
) -> (usize, Vec<Option<usize>>) {
    let mut best: (usize, Vec<Option<usize>>) = (0, vec![None; children.len() + 1]);
    for (p, ptoks) in q.toks.iter().enumerate() {
        let pm = lcs_len(parent, ptoks);
        let succ = &q.succ[p];
        let w: Vec<Vec<usize>> = children
            .iter()
            .map(|c| succ.iter().map(|&s| lcs_len(c, &q.toks[s])).collect())
            .collect();
        let (cm, asg) = assign_children(&w);
        let score = pm + cm;
        if score > best.0 {
            let mut targets = Vec::with_capacity(children.len() + 1);
            targets.push((pm > 0).then_some(p));
            targets.extend(asg.into_iter().map(|a| a.map(|k| succ[k])));
            best = (score, targets);
        }
    }
    best
}

fn detail(
    blocks: &[&[u32]],
    targets: &[Option<usize>],
    q: &PreparedFunction<'_>,
) -> (Vec<Option<BlockId>>, Vec<AlignedInsn>) {
    let mut alignment = Vec::new();
    for (bi, (sig, t)) in blocks.iter().zip(targets).enumerate() {
        let Some(t) = *t else { continue };
        let qb = q.blocks[t];
        for (si, qi) in lcs_alignment(sig, &q.toks[t]) {
            let insn = &qb.instructions[qi];
            alignment.push(AlignedInsn {
                block: bi,
                index: si,
                query_block: qb.id.clone(),
                address: insn.address,
                query_text: insn.raw_text.clone(),
            });
        }
    }
    let ids = targets
        .iter()
        .map(|t| t.map(|i| q.blocks[i].id.clone()))
        .collect();
    (ids, alignment)
}

fn match_tokens(s: &Tokens, q: &PreparedFunction<'_>, with_detail: bool) -> StructureMatch {
    let (blocks, matched, targets): (Vec<&[u32]>, usize, Vec<Option<usize>>) = match s {
        Tokens::Bl(bl) => {
            let mut matched = 0;
            let mut targets = Vec::with_capacity(bl.len());
            for b in bl {
                let (m, t) = best_block(b, q);
                matched += m;
                targets.push(t);
            }
            (bl.iter().map(Vec::as_slice).collect(), matched, targets)
        }
        Tokens::Pc { parent, children } => {
            let (m, t) = best_parents_children(parent, children, q);
            let blocks = std::iter::once(parent.as_slice())
                .chain(children.iter().map(Vec::as_slice))
                .collect();
            (blocks, m, t)
        }
    };
    let total = blocks.iter().map(|b| b.len()).sum();
    let (targets, alignment) = if with_detail {
        detail(&blocks, &targets, q)
    } else {
        (Vec::new(), Vec::new())
    };
    StructureMatch {
        matched,
        total,
        targets,
        alignment,
    }
}

/// Signatures prepared for repeated scoring against many query functions.
#[derive(Debug, Clone)]
pub struct Matcher<'s> {
    signatures: Vec<&'s Signature>,
    prepared: Vec<PreparedSignature>,
    vocab: Vocab,
    pub patch_threshold: f64,
}

impl<'s> Matcher<'s> {
    pub fn new(signatures: impl IntoIterator<Item = &'s Signature>, patch_threshold: f64) -> Self {
        let mut vocab = Vocab::default();
        let signatures: Vec<&Signature> = signatures.into_iter().collect();
        let prepared = signatures
            .iter()
            .map(|s| PreparedSignature {
                structures: s
                    .structures
                    .iter()
                    .map(|st| match st {
                        Structure::ParentsChildren(pc) => Tokens::Pc {
                            parent: vocab.intern_all(&pc.parent),
                            children: pc.children.iter().map(|c| vocab.intern_all(c)).collect(),
                        },
                        Structure::BlockList(bl) => {
                            Tokens::Bl(bl.blocks.iter().map(|b| vocab.intern_all(b)).collect())
                        }
                    })
                    .collect(),
                patch: match (s.kind, &s.patch_signature) {
                    (SignatureKind::Delete, _) | (_, None) => None,
                    (_, Some(p)) => Some(p.blocks.iter().map(|b| vocab.intern_all(b)).collect()),
                },
            })
            .collect();
        Matcher {
            signatures,
            prepared,
            vocab,
            patch_threshold,
        }
    }

    pub fn signatures(&self) -> &[&'s Signature] {
        &self.signatures
    }

    pub fn prepare<'f>(&self, f: &'f BinaryFunction) -> PreparedFunction<'f> {
        PreparedFunction::new(f, &self.vocab)
    }

    fn patch_match(&self, k: usize, q: &PreparedFunction<'_>) -> Option<PatchMatch> {
        let blocks = self.prepared[k].patch.as_ref()?;
        let mut detected = !blocks.is_empty();
        let mut out = Vec::with_capacity(blocks.len());
        for b in blocks {
            let (m, t) = best_block(b, q);
            if (m as f64) / (b.len() as f64) < self.patch_threshold {
                detected = false;
            }
            out.push(PatchBlockMatch {
                matched: m,
                total: b.len(),
                query_block: t.map(|i| q.blocks[i].id.clone()),
            });
        }
        Some(PatchMatch {
            detected,
            threshold: self.patch_threshold,
            blocks: out,
        })
    }

    /// Score signature `k` against a prepared query. Alignments are filled in
    /// only when `with_detail` is set.
    pub fn score(&self, k: usize, q: &PreparedFunction<'_>, with_detail: bool) -> FunctionMatchResult {
        let sig = self.signatures[k];
        let structure_matches: Vec<StructureMatch> = self.prepared[k]
            .structures
            .iter()
            .map(|s| match_tokens(s, q, with_detail))
            .collect();
        let matched: usize = structure_matches.iter().map(|s| s.matched).sum();
        let total: usize = structure_matches.iter().map(|s| s.total).sum();
        let patch_match = self.patch_match(k, q);
        let patched = patch_match.as_ref().is_some_and(|p| p.detected);
        let sim = if patched || total == 0 {
            0.0
        } else {
            matched as f64 / total as f64
        };
        FunctionMatchResult {
            cve_id: sig.cve_id.clone(),
            function_name: sig.function_name.clone(),
            kind: sig.kind,
            ordinal: sig.ordinal,
            query_function: q.func.name.clone(),
            query_binary: q.func.binary_id.clone(),
            patched,
            sim,
            matched,
            total,
            structure_matches,
            patch_match,
        }
    }
}

pub fn match_block_list(structure: &BlockList, query: &BinaryFunction) -> StructureMatch {
    let mut vocab = Vocab::default();
    let t = Tokens::Bl(structure.blocks.iter().map(|b| vocab.intern_all(b)).collect());
    match_tokens(&t, &PreparedFunction::new(query, &vocab), true)
}

pub fn match_parents_children(structure: &ParentsChildren, query: &BinaryFunction) -> StructureMatch {
    let mut vocab = Vocab::default();
    let t = Tokens::Pc {
        parent: vocab.intern_all(&structure.parent),
        children: structure.children.iter().map(|c| vocab.intern_all(c)).collect(),
    };
    match_tokens(&t, &PreparedFunction::new(query, &vocab), true)
}

pub fn detect_patch(signature: &Signature, query: &BinaryFunction, patch_threshold: f64) -> bool {
    let m = Matcher::new([signature], patch_threshold);
    let q = m.prepare(query);
    m.patch_match(0, &q).is_some_and(|p| p.detected)
}

pub fn score_signature(signature: &Signature, query: &BinaryFunction, patch_threshold: f64) -> FunctionMatchResult {
    let m = Matcher::new([signature], patch_threshold);
    let q = m.prepare(query);
    m.score(0, &q, true)
}

/// Weighted mean of per-signature scores, weights being instruction totals;
/// zero as soon as one signature detects the patch.
pub fn aggregate(results: &[FunctionMatchResult]) -> f64 {
    if results.iter().any(|r| r.patched) {
        return 0.0;
    }
    // With w = total and sim = matched / total the weighted mean is the
    // pooled ratio, which keeps the arithmetic exact.
    let matched: usize = results.iter().map(|r| r.matched).sum();
    let total: usize = results.iter().map(|r| r.total).sum();
    if total == 0 {
        0.0
    } else {
        matched as f64 / total as f64
    }
}

pub fn score_cve(signatures: &[&Signature], query: &BinaryFunction, patch_threshold: f64) -> f64 {
    let m = Matcher::new(signatures.iter().copied(), patch_threshold);
    let q = m.prepare(query);
    let results: Vec<FunctionMatchResult> =
        (0..signatures.len()).map(|k| m.score(k, &q, false)).collect();
    aggregate(&results)
}

#[derive(Debug, Clone)]
pub struct MatchOptions {
    pub patch_threshold: f64,
    pub cve: Option<String>,
    pub parallel: bool,
    /// Entries per ranking that keep their per-signature results.
    pub detail_top: usize,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            patch_threshold: DEFAULT_PATCH_THRESHOLD,
            cve: None,
            parallel: true,
            detail_top: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub function: String,
    pub binary_id: String,
    pub score: f64,
    pub patched: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub results: Vec<FunctionMatchResult>,
}

/// Query functions ordered by score for one (CVE, vulnerable function) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CveRanking {
    pub cve_id: String,
    pub function_name: String,
    pub entries: Vec<RankEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub schema: String,
    pub patch_threshold: f64,
    /// The signatures that were matched, so the report can be rendered
    /// without the database.
    pub signatures: Vec<Signature>,
    pub rankings: Vec<CveRanking>,
}

impl MatchReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let r: MatchReport = serde_path_to_error::deserialize(de)
            .map_err(|e| format!("at {}: {}", e.path(), e.inner()))?;
        if r.schema != MATCH_SCHEMA {
            return Err(format!("unsupported match report schema {:?}", r.schema));
        }
        Ok(r)
    }

    pub fn signature_for(&self, r: &FunctionMatchResult) -> Option<&Signature> {
        self.signatures.iter().find(|s| {
            s.cve_id == r.cve_id && s.function_name == r.function_name && s.kind == r.kind && s.ordinal == r.ordinal
        })
    }
}

fn rank_order(a: &RankEntry, b: &RankEntry) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.function.cmp(&b.function))
        .then_with(|| a.binary_id.cmp(&b.binary_id))
}

/// Score every query function against every (CVE, function) signature group
/// in the database. Output is independent of `parallel`.
pub fn rank_functions(
    db: &SignatureDatabase,
    queries: &[BinaryFunction],
    opts: &MatchOptions,
) -> Result<MatchReport, DbError> {
    let sigs = db.query(opts.cve.as_deref())?;
    let matcher = Matcher::new(sigs.iter().copied(), opts.patch_threshold);

    let mut groups: Vec<((&str, &str), Vec<usize>)> = Vec::new();
    for (k, s) in sigs.iter().enumerate() {
        let key = (s.cve_id.as_str(), s.function_name.as_str());
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => g.1.push(k),
            None => groups.push((key, vec![k])),
        }
    }

    let score_one = |f: &BinaryFunction| -> Vec<FunctionMatchResult> {
        let q = matcher.prepare(f);
        (0..sigs.len()).map(|k| matcher.score(k, &q, false)).collect()
    };
    let grid: Vec<Vec<FunctionMatchResult>> = if opts.parallel {
        queries.par_iter().map(score_one).collect()
    } else {
        queries.iter().map(score_one).collect()
    };

    let mut rankings = Vec::with_capacity(groups.len());
    for ((cve, func), members) in &groups {
        let mut order: Vec<(usize, RankEntry)> = queries
            .iter()
            .enumerate()
            .map(|(qi, f)| {
                let rs: Vec<FunctionMatchResult> =
                    members.iter().map(|&k| grid[qi][k].clone()).collect();
                let entry = RankEntry {
                    function: f.name.clone(),
                    binary_id: f.binary_id.clone(),
                    score: aggregate(&rs),
                    patched: rs.iter().any(|r| r.patched),
                    results: Vec::new(),
                };
                (qi, entry)
            })
            .collect();
        order.sort_by(|a, b| rank_order(&a.1, &b.1).then(a.0.cmp(&b.0)));
        for (qi, e) in order.iter_mut().take(opts.detail_top) {
            let q = matcher.prepare(&queries[*qi]);
            e.results = members.iter().map(|&k| matcher.score(k, &q, true)).collect();
        }
        rankings.push(CveRanking {
            cve_id: (*cve).to_owned(),
            function_name: (*func).to_owned(),
            entries: order.into_iter().map(|(_, e)| e).collect(),
        });
    }
    Ok(MatchReport {
        schema: MATCH_SCHEMA.into(),
        patch_threshold: opts.patch_threshold,
        signatures: sigs.into_iter().cloned().collect(),
        rankings,
    })
}
