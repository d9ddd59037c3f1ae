//! Minimum-cost 8-connected stem axis path.
//!
//! Node cost is 1 inside the tree mask and 2 outside; an edge costs the
//! mean of its endpoint costs times the step length. Costs are kept as
//! exact integers (ortho, diag) meaning (ortho + diag·√2)/2.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use super::mask::BinaryMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PathCost {
    pub ortho_halves: i64,
    pub diag_halves: i64,
}

impl PathCost {
    pub fn value(&self) -> f64 {
        (self.ortho_halves as f64 + self.diag_halves as f64 * std::f64::consts::SQRT_2) / 2.0
    }
}

impl Ord for PathCost {
    fn cmp(&self, other: &Self) -> Ordering {
        // Sign of a + b·√2 with a, b integers.
        let a = self.ortho_halves - other.ortho_halves;
        let b = self.diag_halves - other.diag_halves;
        let sign = |x: i64| x.cmp(&0);
        match (sign(a), sign(b)) {
            (Ordering::Equal, s) | (s, Ordering::Equal) => s,
            (sa, sb) if sa == sb => sa,
            // Opposite signs: compare a² with 2b².
            (sa, _) => {
                let lhs = (a as i128) * (a as i128);
                let rhs = 2 * (b as i128) * (b as i128);
                match lhs.cmp(&rhs) {
                    Ordering::Greater => sa,
                    Ordering::Less => sa.reverse(),
                    Ordering::Equal => Ordering::Equal,
                }
            }
        }
    }
}

impl PartialOrd for PathCost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Neighbour scan order: N, NE, E, SE, S, SW, W, NW as (d_col, d_row).
const SCAN: [(isize, isize); 8] = [
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
];

#[derive(Debug, Clone, PartialEq)]
pub struct StemPath {
    /// (col, row) from start to end.
    pub pixels: Vec<(usize, usize)>,
    pub cost: PathCost,
}

pub fn node_cost(mask: &BinaryMask, col: usize, row: usize) -> i64 {
    if mask.get(col, row) {
        1
    } else {
        2
    }
}

/// Dijkstra from `start` to `end`; equal-cost ties resolve by pixel index
/// and the fixed neighbour scan order.
pub fn stem_axis_path(
    mask: &BinaryMask,
    start: (usize, usize),
    end: (usize, usize),
) -> Result<StemPath> {
    let (w, h) = (mask.width, mask.height);
    for (name, (c, r)) in [("start", start), ("end", end)] {
        if c >= w || r >= h {
            return Err(Error::InvalidArgument(format!(
                "path {name} ({c}, {r}) outside {w}x{h} canvas"
            )));
        }
    }
    let idx = |c: usize, r: usize| r * w + c;
    let mut best: Vec<Option<PathCost>> = vec![None; w * h];
    let mut prev = vec![usize::MAX; w * h];
    let mut done = vec![false; w * h];
    let mut heap = BinaryHeap::new();
    let s = idx(start.0, start.1);
    let goal = idx(end.0, end.1);
    best[s] = Some(PathCost::default());
    heap.push(Reverse((PathCost::default(), s)));
    while let Some(Reverse((cost, i))) = heap.pop() {
        if done[i] {
            continue;
        }
        done[i] = true;
        if i == goal {
            break;
        }
        let (c, r) = (i % w, i / w);
        let ci = node_cost(mask, c, r);
        for (dc, dr) in SCAN {
            let (nc, nr) = (c as isize + dc, r as isize + dr);
            if nc < 0 || nr < 0 || nc as usize >= w || nr as usize >= h {
                continue;
            }
            let j = idx(nc as usize, nr as usize);
            if done[j] {
                continue;
            }
            let step = ci + node_cost(mask, nc as usize, nr as usize);
            let mut next = cost;
            if dc != 0 && dr != 0 {
                next.diag_halves += step;
            } else {
                next.ortho_halves += step;
            }
            if best[j].is_none_or(|b| next < b) {
                best[j] = Some(next);
                prev[j] = i;
                heap.push(Reverse((next, j)));
            }
        }
    }
    let cost = best[goal].ok_or_else(|| Error::InvalidArgument("path end unreachable".into()))?;
    let mut pixels = vec![end];
    let mut at = goal;
    while at != s {
        at = prev[at];
        pixels.push((at % w, at / w));
    }
    pixels.reverse();
    Ok(StemPath { pixels, cost })
}

/// Cost of an explicit pixel path under the same edge rule.
pub fn path_cost(mask: &BinaryMask, pixels: &[(usize, usize)]) -> PathCost {
    let mut cost = PathCost::default();
    for pair in pixels.windows(2) {
        let ((c0, r0), (c1, r1)) = (pair[0], pair[1]);
        let step = node_cost(mask, c0, r0) + node_cost(mask, c1, r1);
        if c0 != c1 && r0 != r1 {
            cost.diag_halves += step;
        } else {
            cost.ortho_halves += step;
        }
    }
    cost
}
