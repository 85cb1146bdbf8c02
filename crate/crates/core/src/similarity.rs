//! String and box overlap measures used by the redundancy penalties.

use crate::trace::BoundingBox;

/// Ratcliff/Obershelp gestalt similarity over Unicode scalar values.
///
/// Repeatedly takes the longest common block (earliest in `a`, then earliest
/// in `b` on ties) and recurses into the unmatched regions on either side.
/// The result is `2 * matched / (|a| + |b|)`, with two empty strings scoring
/// `1.0`. No junk heuristics are applied, so the result is not symmetric in
/// general.
pub fn gestalt_ratio(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let total = a.len() + b.len();
    if total == 0 {
        return 1.0;
    }
    2.0 * matched_chars(&a, &b) as f64 / total as f64
}

/// Total length of the matching blocks between `a` and `b`.
pub fn matched_chars<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    let mut matched = 0;
    let mut stack = vec![(0, a.len(), 0, b.len())];
    while let Some((alo, ahi, blo, bhi)) = stack.pop() {
        if alo >= ahi || blo >= bhi {
            continue;
        }
        let (i, j, k) = longest_match(a, b, (alo, ahi, blo, bhi), &mut prev, &mut cur);
        if k == 0 {
            continue;
        }
        matched += k;
        stack.push((alo, i, blo, j));
        stack.push((i + k, ahi, j + k, bhi));
    }
    matched
}

/// Longest common contiguous block inside `a[alo..ahi]` x `b[blo..bhi]`.
/// Returns `(start_a, start_b, len)`.
fn longest_match<T: PartialEq>(
    a: &[T],
    b: &[T],
    (alo, ahi, blo, bhi): (usize, usize, usize, usize),
    prev: &mut Vec<usize>,
    cur: &mut Vec<usize>,
) -> (usize, usize, usize) {
    // prev[j + 1] holds the length of the common suffix ending at (i - 1, j).
    prev[blo..=bhi].fill(0);
    cur[blo] = 0;
    let (mut best_i, mut best_j, mut best) = (alo, blo, 0);
    for i in alo..ahi {
        for j in blo..bhi {
            let k = if a[i] == b[j] { prev[j] + 1 } else { 0 };
            cur[j + 1] = k;
            if k > best {
                best = k;
                best_i = i + 1 - k;
                best_j = j + 1 - k;
            }
        }
        std::mem::swap(prev, cur);
        cur[blo] = 0;
    }
    (best_i, best_j, best)
}

/// Intersection over union of two normalized boxes; `0.0` when the union
/// has no area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
