use super::{DiffError, LineCorrespondence, NumberedLine, PatchSite};

/// Sites and line correspondence recovered from a unified diff.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnifiedDiff {
    pub sites: Vec<PatchSite>,
    pub correspondence: LineCorrespondence,
}

struct HunkHeader {
    old_start: u32,
    old_count: u32,
    new_start: u32,
    new_count: u32,
}

fn parse_range(s: &str) -> Option<(u32, u32)> {
    match s.split_once(',') {
        Some((a, b)) => Some((a.parse().ok()?, b.parse().ok()?)),
        None => Some((s.parse().ok()?, 1)),
    }
}

fn parse_header(line: &str) -> Option<HunkHeader> {
    let rest = line.strip_prefix("@@ ")?;
    let end = rest.find(" @@")?;
    let mut parts = rest[..end].split_whitespace();
    let (old_start, old_count) = parse_range(parts.next()?.strip_prefix('-')?)?;
    let (new_start, new_count) = parse_range(parts.next()?.strip_prefix('+')?)?;
    Some(HunkHeader {
        old_start,
        old_count,
        new_start,
        new_count,
    })
}

/// Parse a single-file unified diff (as produced by `diff -u` or `git diff`).
///
/// Within a hunk, every maximal run of `-`/`+` lines becomes one site.
/// File headers and `\ No newline at end of file` markers are skipped.
pub fn parse_unified_diff(text: &str) -> Result<UnifiedDiff, DiffError> {
    let mut sites = Vec::new();
    let mut corr = LineCorrespondence::identity();
    let lines: Vec<&str> = super::split_lines(text);
    let mut idx = 0;
    let err = |line: usize, reason: &str| DiffError::Unified {
        line: line + 1,
        reason: reason.to_owned(),
    };

    while idx < lines.len() {
        let line = lines[idx];
        if !line.starts_with("@@") {
            idx += 1;
            continue;
        }
        let h = parse_header(line).ok_or_else(|| err(idx, "bad hunk header"))?;
        idx += 1;
        // A zero count means the start names the line *before* the hunk.
        let mut i = if h.old_count == 0 { h.old_start + 1 } else { h.old_start };
        let mut j = if h.new_count == 0 { h.new_start + 1 } else { h.new_start };
        let (mut seen_old, mut seen_new) = (0u32, 0u32);
        let (mut pend_old, mut pend_new) = (Vec::new(), Vec::new());
        let flush = |sites: &mut Vec<PatchSite>, o: &mut Vec<NumberedLine>, n: &mut Vec<NumberedLine>| {
            sites.extend(PatchSite::from_lines(std::mem::take(o), std::mem::take(n)));
        };
        while idx < lines.len() && (seen_old < h.old_count || seen_new < h.new_count) {
            let l = lines[idx];
            match l.as_bytes().first() {
                Some(b'\\') => {}
                Some(b'-') => {
                    pend_old.push(NumberedLine { line: i, text: l[1..].to_owned() });
                    i += 1;
                    seen_old += 1;
                }
                Some(b'+') => {
                    corr.mark(j, None);
                    pend_new.push(NumberedLine { line: j, text: l[1..].to_owned() });
                    j += 1;
                    seen_new += 1;
                }
                Some(b' ') | None => {
                    flush(&mut sites, &mut pend_old, &mut pend_new);
                    corr.mark(j, Some(i));
                    i += 1;
                    j += 1;
                    seen_old += 1;
                    seen_new += 1;
                }
                _ => return Err(err(idx, "unexpected line inside hunk")),
            }
            idx += 1;
        }
        while idx < lines.len() && lines[idx].starts_with('\\') {
            idx += 1;
        }
        if seen_old != h.old_count || seen_new != h.new_count {
            return Err(err(idx.saturating_sub(1), "hunk shorter than its header"));
        }
        flush(&mut sites, &mut pend_old, &mut pend_new);
        corr.mark(j, Some(i));
    }
    Ok(UnifiedDiff {
        sites,
        correspondence: corr,
    })
}
