//! Line-level source diffing and patch-site classification.
//!
//! [`diff_lines`] produces a minimal edit script (Myers); [`classify_sites`]
//! folds each maximal run of non-equal operations into one [`PatchSite`] of
//! kind add, delete or change. A precomputed unified diff can be ingested
//! instead through [`parse_unified_diff`].

mod myers;
mod unified;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use myers::{diff_lines, diff_slices};
pub use unified::{parse_unified_diff, UnifiedDiff};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DiffError {
    #[error("edit script covers {script_old} old / {script_new} new lines, inputs have {old} / {new}")]
    ScriptMismatch {
        script_old: usize,
        script_new: usize,
        old: usize,
        new: usize,
    },
    #[error("malformed unified diff at line {line}: {reason}")]
    Unified { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EditOp {
    Equal(usize),
    Delete(usize),
    Insert(usize),
}

impl EditOp {
    pub fn len(self) -> usize {
        match self {
            EditOp::Equal(n) | EditOp::Delete(n) | EditOp::Insert(n) => n,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

/// Run-length encoded edit script. Canonical form: no empty runs, no two
/// adjacent runs of the same kind, and a `Delete` run always precedes an
/// adjacent `Insert` run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EditScript {
    pub ops: Vec<EditOp>,
}

impl EditScript {
    /// Canonicalize an arbitrary op sequence: between two `Equal` runs all
    /// deletions are gathered ahead of all insertions.
    pub fn from_ops(ops: impl IntoIterator<Item = EditOp>) -> Self {
        let mut out = Vec::new();
        let (mut del, mut ins) = (0usize, 0usize);
        let flush = |out: &mut Vec<EditOp>, del: &mut usize, ins: &mut usize| {
            if *del > 0 {
                out.push(EditOp::Delete(*del));
            }
            if *ins > 0 {
                out.push(EditOp::Insert(*ins));
            }
            *del = 0;
            *ins = 0;
        };
        for op in ops {
            match op {
                EditOp::Delete(n) => del += n,
                EditOp::Insert(n) => ins += n,
                EditOp::Equal(0) => {}
                EditOp::Equal(n) => {
                    flush(&mut out, &mut del, &mut ins);
                    match out.last_mut() {
                        Some(EditOp::Equal(m)) => *m += n,
                        _ => out.push(EditOp::Equal(n)),
                    }
                }
            }
        }
        flush(&mut out, &mut del, &mut ins);
        EditScript { ops: out }
    }

    pub fn old_len(&self) -> usize {
        self.ops
            .iter()
            .map(|op| match op {
                EditOp::Equal(n) | EditOp::Delete(n) => *n,
                EditOp::Insert(_) => 0,
            })
            .sum()
    }

    pub fn new_len(&self) -> usize {
        self.ops
            .iter()
            .map(|op| match op {
                EditOp::Equal(n) | EditOp::Insert(n) => *n,
                EditOp::Delete(_) => 0,
            })
            .sum()
    }

    /// Number of deleted plus inserted lines.
    pub fn cost(&self) -> usize {
        self.ops
            .iter()
            .map(|op| match op {
                EditOp::Equal(_) => 0,
                EditOp::Delete(n) | EditOp::Insert(n) => *n,
            })
            .sum()
    }

    /// Replay the script: equal runs copy from `old`, inserts copy from `new`.
    pub fn apply<T: Clone>(&self, old: &[T], new: &[T]) -> Vec<T> {
        let (mut i, mut j) = (0, 0);
        let mut out = Vec::with_capacity(new.len());
        for op in &self.ops {
            match *op {
                EditOp::Equal(n) => {
                    out.extend_from_slice(&old[i..i + n]);
                    i += n;
                    j += n;
                }
                EditOp::Delete(n) => i += n,
                EditOp::Insert(n) => {
                    out.extend_from_slice(&new[j..j + n]);
                    j += n;
                }
            }
        }
        out
    }

    fn check(&self, old: usize, new: usize) -> Result<(), DiffError> {
        let (so, sn) = (self.old_len(), self.new_len());
        if so != old || sn != new {
            return Err(DiffError::ScriptMismatch {
                script_old: so,
                script_new: sn,
                old,
                new,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteKind {
    Add,
    Delete,
    Change,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NumberedLine {
    pub line: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSite {
    pub kind: SiteKind,
    #[serde(rename = "old")]
    pub old_lines: Vec<NumberedLine>,
    #[serde(rename = "new")]
    pub new_lines: Vec<NumberedLine>,
}

impl PatchSite {
    fn from_lines(old_lines: Vec<NumberedLine>, new_lines: Vec<NumberedLine>) -> Option<Self> {
        let kind = match (old_lines.is_empty(), new_lines.is_empty()) {
            (true, true) => return None,
            (true, false) => SiteKind::Add,
            (false, true) => SiteKind::Delete,
            (false, false) => SiteKind::Change,
        };
        Some(PatchSite {
            kind,
            old_lines,
            new_lines,
        })
    }
}

/// JSON envelope for `--emit-sites`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SitesDocument {
    pub sites: Vec<PatchSite>,
}

/// Split text into lines on `\n` without trimming anything else; a trailing
/// newline does not produce an empty final line.
pub fn split_lines(text: &str) -> Vec<&str> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    if lines.last() == Some(&"") {
        lines.pop();
    }
    lines
}

/// Fold each maximal run of non-equal operations into one site.
pub fn classify_sites<T: AsRef<str>>(
    script: &EditScript,
    old: &[T],
    new: &[T],
) -> Result<Vec<PatchSite>, DiffError> {
    script.check(old.len(), new.len())?;
    let numbered = |lines: &[T], from: usize, n: usize| -> Vec<NumberedLine> {
        (from..from + n)
            .map(|i| NumberedLine {
                line: (i + 1) as u32,
                text: lines[i].as_ref().to_owned(),
            })
            .collect()
    };
    let mut sites = Vec::new();
    let (mut i, mut j) = (0usize, 0usize);
    let (mut pend_old, mut pend_new) = (Vec::new(), Vec::new());
    for op in &script.ops {
        match *op {
            EditOp::Equal(n) => {
                sites.extend(PatchSite::from_lines(
                    std::mem::take(&mut pend_old),
                    std::mem::take(&mut pend_new),
                ));
                i += n;
                j += n;
            }
            EditOp::Delete(n) => {
                pend_old.extend(numbered(old, i, n));
                i += n;
            }
            EditOp::Insert(n) => {
                pend_new.extend(numbered(new, j, n));
                j += n;
            }
        }
    }
    sites.extend(PatchSite::from_lines(pend_old, pend_new));
    Ok(sites)
}

/// Diff two source texts and classify the result in one step.
pub fn diff_sources(old_text: &str, new_text: &str) -> (EditScript, Vec<PatchSite>) {
    let old = split_lines(old_text);
    let new = split_lines(new_text);
    let script = diff_lines(&old, &new);
    let sites = classify_sites(&script, &old, &new).expect("script produced from these inputs");
    (script, sites)
}

/// Maps unchanged lines of the new version back to their old line numbers.
///
/// Stored as piecewise-linear segments: from `new_start` onward, line `n`
/// maps to `old_start + (n - new_start)` until the next segment begins.
/// Lines inside a patch site have no counterpart.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LineCorrespondence {
    segments: BTreeMap<u32, Option<u32>>,
}

impl LineCorrespondence {
    pub fn identity() -> Self {
        LineCorrespondence {
            segments: [(1, Some(1))].into(),
        }
    }

    pub fn from_script(script: &EditScript) -> Self {
        let mut c = LineCorrespondence::default();
        let (mut i, mut j) = (1u32, 1u32);
        for op in &script.ops {
            match *op {
                EditOp::Equal(n) => {
                    c.segments.insert(j, Some(i));
                    i += n as u32;
                    j += n as u32;
                }
                EditOp::Delete(n) => i += n as u32,
                EditOp::Insert(n) => {
                    c.segments.insert(j, None);
                    j += n as u32;
                }
            }
        }
        c.segments.insert(j, Some(i));
        c
    }

    pub(crate) fn mark(&mut self, new_start: u32, old_start: Option<u32>) {
        self.segments.insert(new_start, old_start);
    }

    /// Old line number for new line `n`, if the line is unchanged.
    pub fn to_old(&self, n: u32) -> Option<u32> {
        let (&start, &old) = self.segments.range(..=n).next_back()?;
        old.map(|o| o + (n - start))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use EditOp::*;

    #[test]
    fn empty_inputs() {
        let s = diff_lines::<&str>(&[], &[]);
        assert!(s.ops.is_empty());
        assert!(s.apply::<&str>(&[], &[]).is_empty());
    }

    #[test]
    fn single_change() {
        let (old, new) = (["a", "b", "c"], ["a", "x", "c"]);
        let s = diff_lines(&old, &new);
        assert_eq!(s.ops, vec![Equal(1), Delete(1), Insert(1), Equal(1)]);
        let sites = classify_sites(&s, &old, &new).unwrap();
        assert_eq!(
            sites,
            vec![PatchSite {
                kind: SiteKind::Change,
                old_lines: vec![NumberedLine { line: 2, text: "b".into() }],
                new_lines: vec![NumberedLine { line: 2, text: "x".into() }],
            }]
        );
    }

    #[test]
    fn pure_insertion_and_deletion() {
        let s = diff_lines(&["a", "c"], &["a", "b", "c"]);
        assert_eq!(s.ops, vec![Equal(1), Insert(1), Equal(1)]);
        let sites = classify_sites(&s, &["a", "c"], &["a", "b", "c"]).unwrap();
        assert_eq!(sites.len(), 1);
        assert_eq!(sites[0].kind, SiteKind::Add);
        assert_eq!(sites[0].new_lines[0], NumberedLine { line: 2, text: "b".into() });

        let s = diff_lines(&["a", "b"], &["a"]);
        let sites = classify_sites(&s, &["a", "b"], &["a"]).unwrap();
        assert_eq!(sites[0].kind, SiteKind::Delete);
        assert_eq!(sites[0].old_lines[0].line, 2);
    }

    #[test]
    fn asymmetric_change_is_one_site() {
        let old = ["a", "b", "c", "z"];
        let new = ["a", "1", "2", "3", "4", "5", "z"];
        let sites = classify_sites(&diff_lines(&old, &new), &old, &new).unwrap();
        assert_eq!(sites.len(), 1);
        assert_eq!(sites[0].kind, SiteKind::Change);
        assert_eq!((sites[0].old_lines.len(), sites[0].new_lines.len()), (2, 5));
    }

    #[test]
    fn near_adjacent_hunks_stay_separate() {
        let old = ["a", "b", "c", "d", "e"];
        let new = ["a", "B", "c", "D", "e"];
        let sites = classify_sites(&diff_lines(&old, &new), &old, &new).unwrap();
        assert_eq!(sites.len(), 2);
    }

    #[test]
    fn whitespace_is_significant() {
        let s = diff_lines(&["x = 1;"], &["x  = 1;"]);
        assert_eq!(s.cost(), 2);
    }

    #[test]
    fn mismatched_script_rejected() {
        let s = EditScript { ops: vec![Equal(3)] };
        assert!(matches!(
            classify_sites(&s, &["a"], &["a"]),
            Err(DiffError::ScriptMismatch { .. })
        ));
    }

    #[test]
    fn canonical_form_orders_delete_first() {
        let s = EditScript::from_ops([Insert(1), Delete(2), Equal(0), Insert(1), Equal(1)]);
        assert_eq!(s.ops, vec![Delete(2), Insert(2), Equal(1)]);
    }

    #[test]
    fn correspondence_follows_equal_runs() {
        let old = ["a", "b", "c", "d"];
        let new = ["a", "x", "y", "c", "d", "e"];
        let c = LineCorrespondence::from_script(&diff_lines(&old, &new));
        assert_eq!(c.to_old(1), Some(1));
        assert_eq!(c.to_old(2), None);
        assert_eq!(c.to_old(3), None);
        assert_eq!(c.to_old(4), Some(3));
        assert_eq!(c.to_old(5), Some(4));
        assert_eq!(c.to_old(6), None);
        assert_eq!(LineCorrespondence::identity().to_old(77), Some(77));
    }

    #[test]
    fn sites_json_shape() {
        let s = diff_lines(&["a", "c"], &["a", "b", "c"]);
        let doc = SitesDocument {
            sites: classify_sites(&s, &["a", "c"], &["a", "b", "c"]).unwrap(),
        };
        assert_eq!(
            serde_json::to_string(&doc).unwrap(),
            r#"{"sites":[{"kind":"add","old":[],"new":[{"line":2,"text":"b"}]}]}"#
        );
    }

    #[test]
    fn split_lines_keeps_carriage_returns() {
        assert_eq!(split_lines("a\r\nb\n"), vec!["a\r", "b"]);
        assert_eq!(split_lines(""), Vec::<&str>::new());
        assert_eq!(split_lines("a\n\n"), vec!["a", ""]);
    }
}
