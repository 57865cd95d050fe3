use std::collections::HashMap;
use std::hash::Hash;

use super::{EditOp, EditScript};

// Greedy forward Myers search. `v[k]` holds the furthest x reached on
// diagonal k = x - y; the live band of `v` is snapshotted per edit distance d
// so the path can be recovered by walking the snapshots backwards.

/// Minimal line-level edit script between `old` and `new`.
///
/// Within every maximal run of non-equal operations the deletions are emitted
/// before the insertions, so the script is canonical for a given pair.
pub fn diff_lines<T: AsRef<str>>(old: &[T], new: &[T]) -> EditScript {
    let mut interner = HashMap::new();
    let a = intern(&mut interner, old);
    let b = intern(&mut interner, new);
    diff_slices(&a, &b)
}

fn intern<'a, T: AsRef<str>>(map: &mut HashMap<&'a str, u32>, lines: &'a [T]) -> Vec<u32> {
    lines
        .iter()
        .map(|s| {
            let next = map.len() as u32;
            *map.entry(s.as_ref()).or_insert(next)
        })
        .collect()
}

/// [`diff_lines`] over any comparable sequence.
pub fn diff_slices<T: Eq + Hash>(a: &[T], b: &[T]) -> EditScript {
    // Trim the common prefix and suffix; Myers only runs on the middle.
    let prefix = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let suffix = a[prefix..]
        .iter()
        .rev()
        .zip(b[prefix..].iter().rev())
        .take_while(|(x, y)| x == y)
        .count();
    let a_mid = &a[prefix..a.len() - suffix];
    let b_mid = &b[prefix..b.len() - suffix];

    let mut raw = Vec::new();
    push(&mut raw, EditOp::Equal(prefix));
    for op in myers_middle(a_mid, b_mid) {
        push(&mut raw, op);
    }
    push(&mut raw, EditOp::Equal(suffix));
    EditScript::from_ops(raw)
}

fn push(ops: &mut Vec<EditOp>, op: EditOp) {
    if op.is_empty() {
        return;
    }
    match (ops.last_mut(), op) {
        (Some(EditOp::Equal(n)), EditOp::Equal(m))
        | (Some(EditOp::Delete(n)), EditOp::Delete(m))
        | (Some(EditOp::Insert(n)), EditOp::Insert(m)) => *n += m,
        _ => ops.push(op),
    }
}

fn myers_middle<T: Eq>(a: &[T], b: &[T]) -> Vec<EditOp> {
    let n = a.len() as isize;
    let m = b.len() as isize;
    if n == 0 && m == 0 {
        return Vec::new();
    }
    if n == 0 {
        return vec![EditOp::Insert(m as usize)];
    }
    if m == 0 {
        return vec![EditOp::Delete(n as usize)];
    }
    let max = n + m;
    let offset = max + 1;
    let mut v = vec![0isize; (2 * max + 3) as usize];
    let mut trace: Vec<Vec<isize>> = Vec::new();
    let mut found = None;
    'outer: for d in 0..=max {
        trace.push(v[(offset - d - 1) as usize..=(offset + d + 1) as usize].to_vec());
        let mut k = -d;
        while k <= d {
            let idx = (k + offset) as usize;
            let mut x = if k == -d || (k != d && v[idx - 1] < v[idx + 1]) {
                v[idx + 1]
            } else {
                v[idx - 1] + 1
            };
            let mut y = x - k;
            while x < n && y < m && a[x as usize] == b[y as usize] {
                x += 1;
                y += 1;
            }
            v[idx] = x;
            if x >= n && y >= m {
                found = Some(d);
                break 'outer;
            }
            k += 2;
        }
    }
    let d_final = found.expect("Myers search always terminates by d = n + m");

    // Backtrack into a reversed list of single-step moves.
    let mut moves = Vec::new();
    let (mut x, mut y) = (n, m);
    for d in (1..=d_final).rev() {
        // trace[d] covers diagonals -d-1 ..= d+1
        let v = &trace[d as usize];
        let at = |k: isize| v[(k + d + 1) as usize];
        let k = x - y;
        let down = k == -d || (k != d && at(k - 1) < at(k + 1));
        let prev_k = if down { k + 1 } else { k - 1 };
        let prev_x = at(prev_k);
        let prev_y = prev_x - prev_k;
        let mid_x = if down { prev_x } else { prev_x + 1 };
        while x > mid_x {
            moves.push(EditOp::Equal(1));
            x -= 1;
        }
        moves.push(if down { EditOp::Insert(1) } else { EditOp::Delete(1) });
        x = prev_x;
        y = prev_y;
    }
    while x > 0 && y > 0 {
        moves.push(EditOp::Equal(1));
        x -= 1;
        y -= 1;
    }
    debug_assert!(x == 0 && y == 0);
    moves.reverse();
    let mut out = Vec::new();
    for op in moves {
        push(&mut out, op);
    }
    out
}
