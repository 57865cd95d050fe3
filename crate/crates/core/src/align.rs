//! Longest-common-subsequence alignment of instruction sequences.

use crate::binmodel::NormInsn;

/// An instruction paired with its precomputed hash, so that the quadratic
/// loops compare one word before falling back to full token equality.
#[derive(Debug, Clone, Copy)]
pub struct Keyed<'a> {
    key: u64,
    insn: &'a NormInsn,
}

impl<'a> Keyed<'a> {
    pub fn new(insn: &'a NormInsn) -> Self {
        Keyed {
            key: insn.key(),
            insn,
        }
    }

    pub fn insn(&self) -> &'a NormInsn {
        self.insn
    }
}

impl PartialEq for Keyed<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key && self.insn == other.insn
    }
}

pub fn keyed(insns: &[NormInsn]) -> Vec<Keyed<'_>> {
    insns.iter().map(Keyed::new).collect()
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0u32; b.len() + 1];
    let mut cur = vec![0u32; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()] as usize
}

/// Longest common subsequence together with the lexicographically earliest
/// optimal alignment, as `(index in a, index in b)` pairs.
pub fn lcs_alignment<T: PartialEq>(a: &[T], b: &[T]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Vec::new();
    }
    // suffix table: l[i][j] = LCS(a[i..], b[j..])
    let w = m + 1;
    let mut l = vec![0u32; (n + 1) * w];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            l[i * w + j] = if a[i] == b[j] {
                l[(i + 1) * w + j + 1] + 1
            } else {
                l[(i + 1) * w + j].max(l[i * w + j + 1])
            };
        }
    }
    let mut need = l[0];
    let mut out = Vec::with_capacity(need as usize);
    let (mut ci, mut cj) = (0, 0);
    while need > 0 {
        let mut picked = None;
        'search: for i in ci..n {
            if l[i * w + cj] < need {
                break;
            }
            for j in cj..m {
                if l[i * w + j] < need {
                    break;
                }
                if a[i] == b[j] && l[(i + 1) * w + j + 1] + 1 == need {
                    picked = Some((i, j));
                    break 'search;
                }
            }
        }
        let (i, j) = picked.expect("a feasible pair exists while need > 0");
        out.push((i, j));
        ci = i + 1;
        cj = j + 1;
        need -= 1;
    }
    out
}
