//! Corpus metrics (top-1 and mismatch scores) and the side-by-side match
//! report.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::binmodel::{load_function_dir, BinaryFunction, ModelError};
use crate::matcher::{aggregate, FunctionMatchResult, Matcher};
use crate::sigdb::SignatureDatabase;
use crate::siggen::{Signature, Structure};

/// Ground-truth scores below this are too low to be called mismatched.
pub const LOW_SCORE_CUTOFF: f64 = 0.6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no signatures for {cve} / {function}")]
    MissingSignatures { cve: String, function: String },
    #[error("case {case}: {reason}")]
    InvalidCase { case: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cases file {path}: {reason}")]
    CasesFile { path: String, reason: String },
}

#[derive(Debug, Clone)]
pub struct CorpusBinary {
    pub label: String,
    pub functions: Vec<BinaryFunction>,
}

#[derive(Debug, Clone)]
pub struct EvalCase {
    pub id: String,
    pub cve_id: String,
    pub ground_truth_function: String,
    pub corpus: Vec<CorpusBinary>,
    pub expected_vulnerable_binary: String,
}

impl EvalCase {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |reason: String| EvalError::InvalidCase {
            case: self.id.clone(),
            reason,
        };
        let bin = self
            .corpus
            .iter()
            .find(|b| b.label == self.expected_vulnerable_binary)
            .ok_or_else(|| bad(format!("binary {} not in corpus", self.expected_vulnerable_binary)))?;
        if !bin.functions.iter().any(|f| f.name == self.ground_truth_function) {
            return Err(bad(format!(
                "{} not found in {}",
                self.ground_truth_function, self.expected_vulnerable_binary
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredFunction {
    pub binary: String,
    pub function: String,
    pub score: f64,
}

/// Every corpus function's score for one case, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case_id: String,
    pub cve_id: String,
    pub s_gv: f64,
    /// Everything except the ground truth, including its patched twin.
    pub others: Vec<ScoredFunction>,
}

impl CaseScores {
    /// The ground truth beats every other function strictly; ties fail.
    pub fn is_top1(&self) -> bool {
        self.others.iter().all(|o| o.score < self.s_gv)
    }

    pub fn is_mismatch(&self, alpha: f64) -> bool {
        self.s_gv >= LOW_SCORE_CUTOFF && self.others.iter().any(|o| o.score > self.s_gv - alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub cve_id: String,
    pub s_gv: f64,
    pub top1: bool,
    pub mismatch: bool,
    pub ranked: Vec<ScoredFunction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub top1: f64,
    pub mismatch: f64,
    pub alpha: f64,
    pub patch_threshold: f64,
    pub per_case: Vec<CaseMetrics>,
}

fn fraction(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

pub fn top1_from_scores(cases: &[CaseScores]) -> f64 {
    fraction(cases.iter().filter(|c| c.is_top1()).count(), cases.len())
}

pub fn mismatch_from_scores(cases: &[CaseScores], alpha: f64) -> f64 {
    fraction(cases.iter().filter(|c| c.is_mismatch(alpha)).count(), cases.len())
}

/// Score every corpus function of a case against the ground truth's
/// signature group.
pub fn score_case(case: &EvalCase, db: &SignatureDatabase, patch_threshold: f64) -> Result<CaseScores, EvalError> {
    case.validate()?;
    let missing = || EvalError::MissingSignatures {
        cve: case.cve_id.clone(),
        function: case.ground_truth_function.clone(),
    };
    let sigs: Vec<&Signature> = db
        .query(Some(&case.cve_id))
        .map_err(|_| missing())?
        .into_iter()
        .filter(|s| s.function_name == case.ground_truth_function)
        .collect();
    if sigs.is_empty() {
        return Err(missing());
    }
    let m = Matcher::new(sigs.iter().copied(), patch_threshold);
    let mut s_gv = None;
    let mut others = Vec::new();
    for bin in &case.corpus {
        for f in &bin.functions {
            let q = m.prepare(f);
            let rs: Vec<FunctionMatchResult> = (0..sigs.len()).map(|k| m.score(k, &q, false)).collect();
            let score = aggregate(&rs);
            if s_gv.is_none() && bin.label == case.expected_vulnerable_binary && f.name == case.ground_truth_function {
                s_gv = Some(score);
            } else {
                others.push(ScoredFunction {
                    binary: bin.label.clone(),
                    function: f.name.clone(),
                    score,
                });
            }
        }
    }
    others.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.binary.cmp(&b.binary))
            .then_with(|| a.function.cmp(&b.function))
    });
    Ok(CaseScores {
        case_id: case.id.clone(),
        cve_id: case.cve_id.clone(),
        s_gv: s_gv.expect("validated case has its ground truth"),
        others,
    })
}

pub fn score_cases(cases: &[EvalCase], db: &SignatureDatabase, patch_threshold: f64) -> Result<Vec<CaseScores>, EvalError> {
    cases.iter().map(|c| score_case(c, db, patch_threshold)).collect()
}

pub fn top1_score(cases: &[EvalCase], db: &SignatureDatabase, patch_threshold: f64) -> Result<f64, EvalError> {
    Ok(top1_from_scores(&score_cases(cases, db, patch_threshold)?))
}

pub fn mismatch_score(
    cases: &[EvalCase],
    db: &SignatureDatabase,
    alpha: f64,
    patch_threshold: f64,
) -> Result<f64, EvalError> {
    Ok(mismatch_from_scores(&score_cases(cases, db, patch_threshold)?, alpha))
}

pub fn evaluate(
    cases: &[EvalCase],
    db: &SignatureDatabase,
    alpha: f64,
    patch_threshold: f64,
) -> Result<EvalMetrics, EvalError> {
    let scores = score_cases(cases, db, patch_threshold)?;
    let per_case = scores
        .iter()
        .map(|c| {
            let gt = cases
                .iter()
                .find(|x| x.id == c.case_id)
                .expect("scores come from cases");
            let mut ranked = vec![ScoredFunction {
                binary: gt.expected_vulnerable_binary.clone(),
                function: gt.ground_truth_function.clone(),
                score: c.s_gv,
            }];
            ranked.extend(c.others.iter().cloned());
            ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
            CaseMetrics {
                case_id: c.case_id.clone(),
                cve_id: c.cve_id.clone(),
                s_gv: c.s_gv,
                top1: c.is_top1(),
                mismatch: c.is_mismatch(alpha),
                ranked,
            }
        })
        .collect();
    Ok(EvalMetrics {
        top1: top1_from_scores(&scores),
        mismatch: mismatch_from_scores(&scores, alpha),
        alpha,
        patch_threshold,
        per_case,
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CasesDocument {
    cases: Vec<CaseDocument>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseDocument {
    id: String,
    cve_id: String,
    ground_truth_function: String,
    expected_vulnerable_binary: String,
    corpus: Vec<BinaryDocument>,
}

/// A corpus binary: a directory of function documents, explicit files, or both.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BinaryDocument {
    label: String,
    #[serde(default)]
    dir: Option<PathBuf>,
    #[serde(default)]
    functions: Vec<PathBuf>,
}

/// Load `cases.json`; paths inside it are relative to its directory.
pub fn load_cases(path: &Path) -> Result<Vec<EvalCase>, EvalError> {
    let err = |reason: String| EvalError::CasesFile {
        path: path.display().to_string(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let doc: CasesDocument =
        serde_path_to_error::deserialize(de).map_err(|e| err(format!("at {}: {}", e.path(), e.inner())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut ids = HashSet::new();
    let mut out = Vec::with_capacity(doc.cases.len());
    for c in doc.cases {
        if !ids.insert(c.id.clone()) {
            return Err(err(format!("duplicate case id {}", c.id)));
        }
        let mut corpus = Vec::with_capacity(c.corpus.len());
        for b in c.corpus {
            let mut functions = Vec::new();
            if let Some(d) = &b.dir {
                functions.extend(load_function_dir(&base.join(d))?);
            }
            for f in &b.functions {
                functions.push(BinaryFunction::load_path(&base.join(f))?);
            }
            corpus.push(CorpusBinary {
                label: b.label,
                functions,
            });
        }
        let case = EvalCase {
            id: c.id,
            cve_id: c.cve_id,
            ground_truth_function: c.ground_truth_function,
            corpus,
            expected_vulnerable_binary: c.expected_vulnerable_binary,
        };
        case.validate()?;
        out.push(case);
    }
    Ok(out)
}

/// Rendered report: plain text plus the JSON sidecar carrying the alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    pub json: serde_json::Value,
}

pub const UNMATCHED_MARK: &str = "(unmatched)";
pub const PATCHED_HEADER: &str = "PATCHED (patch signature matched)";

const LEFT_WIDTH: usize = 44;

/// Two-column report of a scored signature: signature instructions on the
/// left, the aligned query instructions on the right. `result` must carry
/// alignments, i.e. come from a detailed scoring run.
pub fn render_report(result: &FunctionMatchResult, signature: &Signature) -> Report {
    let mut t = String::new();
    let _ = writeln!(
        t,
        "{} {} [{} #{}]",
        signature.cve_id, signature.function_name, signature.kind, signature.ordinal
    );
    let _ = writeln!(t, "query: {} ({})", result.query_function, result.query_binary);
    if result.patched {
        let _ = writeln!(t, "{PATCHED_HEADER}");
    }

    let mut structures_json = Vec::new();
    for (si, (s, m)) in signature
        .structures
        .iter()
        .zip(&result.structure_matches)
        .enumerate()
    {
        let _ = writeln!(t);
        let _ = writeln!(t, "structure {} ({})", si + 1, s.type_name());
        let _ = writeln!(t, "  {:<LEFT_WIDTH$} | query", "signature");
        let mut rows = Vec::new();
        for (bi, block) in s.block_slices().into_iter().enumerate() {
            let label = match s {
                Structure::ParentsChildren(_) if bi == 0 => "parent".to_owned(),
                Structure::ParentsChildren(_) => format!("child {bi}"),
                Structure::BlockList(_) => format!("block {}", bi + 1),
            };
            let target = m.targets.get(bi).cloned().flatten();
            match &target {
                Some(id) => {
                    let _ = writeln!(t, "  {label} -> query block {id}");
                }
                None => {
                    let _ = writeln!(t, "  {label}");
                }
            }
            for (ii, insn) in block.iter().enumerate() {
                let hit = m.alignment.iter().find(|a| a.block == bi && a.index == ii);
                let left = insn.to_string();
                match hit {
                    Some(a) => {
                        let _ = writeln!(t, "    {left:<w$} | {:#x}  {}", a.address, a.query_text, w = LEFT_WIDTH - 2);
                    }
                    None => {
                        let _ = writeln!(t, "    {left:<w$} | {UNMATCHED_MARK}", w = LEFT_WIDTH - 2);
                    }
                }
                rows.push(json!({
                    "block": bi,
                    "index": ii,
                    "signature": left,
                    "matched": hit.is_some(),
                    "query_block": hit.map(|a| a.query_block.as_str()),
                    "address": hit.map(|a| format!("{:#x}", a.address)),
                    "query_text": hit.map(|a| a.query_text.as_str()),
                }));
            }
        }
        let _ = writeln!(t, "  matched {}/{}", m.matched, m.total);
        structures_json.push(json!({
            "type": s.type_name(),
            "matched": m.matched,
            "total": m.total,
            "rows": rows,
        }));
    }

    let mut patch_json = serde_json::Value::Null;
    if let (Some(pm), Some(ps)) = (&result.patch_match, &signature.patch_signature) {
        let _ = writeln!(t);
        let _ = writeln!(
            t,
            "patch signature ({}, threshold {:.2})",
            if pm.detected { "found" } else { "not found" },
            pm.threshold
        );
        for (bi, (b, pb)) in ps.blocks.iter().zip(&pm.blocks).enumerate() {
            let at = pb
                .query_block
                .as_ref()
                .map_or_else(|| "no query block".to_owned(), |id| format!("query block {id}"));
            let _ = writeln!(t, "  block {}: {}/{} in {at}", bi + 1, pb.matched, pb.total);
            if pm.detected {
                for insn in b {
                    let _ = writeln!(t, "    {insn}");
                }
            }
        }
        patch_json = serde_json::to_value(pm).expect("patch match serializes");
    }

    let _ = writeln!(t);
    let _ = writeln!(t, "{}/{}, sim={:.3}", result.matched, result.total, result.sim);

    let json = json!({
        "cve_id": signature.cve_id,
        "function_name": signature.function_name,
        "kind": signature.kind,
        "ordinal": signature.ordinal,
        "query_function": result.query_function,
        "query_binary": result.query_binary,
        "patched": result.patched,
        "sim": result.sim,
        "matched": result.matched,
        "total": result.total,
        "structures": structures_json,
        "patch": patch_json,
    });
    Report { text: t, json }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binmodel::FunctionBuilder;
    use crate::matcher::{score_signature, DEFAULT_PATCH_THRESHOLD};
    use crate::siggen::{generate_signatures, SignatureKind};
    use crate::synth::motivating_scenario;

    fn grid(s_gv: f64, others: &[f64]) -> CaseScores {
        CaseScores {
            case_id: "c".into(),
            cve_id: "C".into(),
            s_gv,
            others: others
                .iter()
                .map(|&score| ScoredFunction {
                    binary: "b".into(),
                    function: "f".into(),
                    score,
                })
                .collect(),
        }
    }

    #[test]
    fn mismatch_rules() {
        assert!(grid(0.9, &[0.85]).is_mismatch(0.1));
        assert!(!grid(0.5, &[0.49]).is_mismatch(0.1));
        assert!(!grid(0.5, &[0.49]).is_mismatch(0.4));
        assert!(!grid(1.0, &[0.6, 0.3]).is_mismatch(0.1));
        assert!(grid(0.6, &[0.9]).is_mismatch(0.1));
    }

    #[test]
    fn ties_are_not_top1() {
        assert!(grid(1.0, &[0.9]).is_top1());
        assert!(!grid(1.0, &[1.0]).is_top1());
        assert!(grid(0.3, &[]).is_top1());
        assert_eq!(top1_from_scores(&[grid(1.0, &[0.5]), grid(0.5, &[0.7])]), 0.5);
    }

    fn db_and_functions() -> (SignatureDatabase, BinaryFunction, BinaryFunction) {
        let sc = motivating_scenario();
        let g = generate_signatures(&sc.vulnerable, &sc.patched, &sc.old_src, &sc.new_src, &sc.source_file, "CVE-2019-5482")
            .unwrap();
        let mut db = SignatureDatabase::new();
        db.upsert_record(crate::sigdb::CveRecord::single("CVE-2019-5482", "curl", "lib/tftp.c", "tftp_connect", "7.65.3"));
        db.add_signatures(g.signatures).unwrap();
        (db, sc.vulnerable, sc.patched)
    }

    #[test]
    fn self_corpus_and_clone() {
        let (db, v, p) = db_and_functions();
        let case = EvalCase {
            id: "one".into(),
            cve_id: "CVE-2019-5482".into(),
            ground_truth_function: "tftp_connect".into(),
            corpus: vec![
                CorpusBinary { label: "B_v".into(), functions: vec![v.clone()] },
                CorpusBinary { label: "B_p".into(), functions: vec![p] },
            ],
            expected_vulnerable_binary: "B_v".into(),
        };
        assert_eq!(top1_score(std::slice::from_ref(&case), &db, 0.8).unwrap(), 1.0);

        let mut dup = case.clone();
        dup.corpus[1].functions.push(v.renamed("tftp_connect_copy", "B_p"));
        assert_eq!(top1_score(&[dup], &db, 0.8).unwrap(), 0.0);

        let mut bad = case;
        bad.cve_id = "CVE-0".into();
        assert!(matches!(top1_score(&[bad], &db, 0.8), Err(EvalError::MissingSignatures { .. })));
    }

    #[test]
    fn report_marks_unmatched_rows() {
        let (db, v, _) = db_and_functions();
        let s = &db.signatures[0];
        let r = score_signature(s, &v, DEFAULT_PATCH_THRESHOLD);
        let rep = render_report(&r, s);
        let n = s.total_instructions;
        assert!(rep.text.ends_with(&format!("{n}/{n}, sim=1.000\n")), "{}", rep.text);
        assert!(!rep.text.contains(UNMATCHED_MARK));

        let q = FunctionBuilder::new("other", "x", "x.c")
            .block("1", &[], &[("push rbp", 1), ("ret", 1)])
            .build()
            .unwrap();
        let r = score_signature(s, &q, DEFAULT_PATCH_THRESHOLD);
        let rep = render_report(&r, s);
        let rows = rep.text.lines().filter(|l| l.ends_with(UNMATCHED_MARK)).count();
        assert_eq!(rows, r.total - r.matched);
        let json_rows: usize = rep.json["structures"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| s["rows"].as_array().unwrap().len())
            .sum();
        assert_eq!(json_rows, s.total_instructions);
    }

    #[test]
    fn patched_header() {
        let (db, _, p) = db_and_functions();
        let s = &db.signatures[0];
        assert_eq!(s.kind, SignatureKind::Add);
        let r = score_signature(s, &p, DEFAULT_PATCH_THRESHOLD);
        let rep = render_report(&r, s);
        assert!(rep.text.contains(PATCHED_HEADER));
        assert!(rep.text.contains("patch signature (found"));
        assert!(rep.text.ends_with("sim=0.000\n"));
    }
}
