//! Stem / crown split, crown thirds and the crown edge buffer.

use std::path::Path;

use super::annotate::CrownAnnotation;
use super::mask::{squared_distance, BinaryMask};
use crate::error::{Error, Result};
use crate::raster::{read_pgm, write_pgm8};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_STEM: u8 = 1;
pub const LABEL_CROWN_BASE: u8 = 2;
pub const LABEL_CROWN_MIDDLE: u8 = 3;
pub const LABEL_CROWN_TOP: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    Tree,
    Stem,
    Crown,
    CrownBase,
    CrownMiddle,
    CrownTop,
    CrownEdge,
}

impl Segment {
    pub const ALL: [Segment; 7] = [
        Segment::Tree,
        Segment::Stem,
        Segment::Crown,
        Segment::CrownBase,
        Segment::CrownMiddle,
        Segment::CrownTop,
        Segment::CrownEdge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Segment::Tree => "tree",
            Segment::Stem => "stem",
            Segment::Crown => "crown",
            Segment::CrownBase => "crown_base",
            Segment::CrownMiddle => "crown_middle",
            Segment::CrownTop => "crown_top",
            Segment::CrownEdge => "crown_edge",
        }
    }
}

/// Per-pixel labels (see the `LABEL_*` codes) plus the crown edge flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
    pub edge: Vec<bool>,
}

impl SegmentMask {
    pub fn contains(&self, segment: Segment, i: usize) -> bool {
        let l = self.labels[i];
        match segment {
            Segment::Tree => l != LABEL_BACKGROUND,
            Segment::Stem => l == LABEL_STEM,
            Segment::Crown => l >= LABEL_CROWN_BASE,
            Segment::CrownBase => l == LABEL_CROWN_BASE,
            Segment::CrownMiddle => l == LABEL_CROWN_MIDDLE,
            Segment::CrownTop => l == LABEL_CROWN_TOP,
            Segment::CrownEdge => self.edge[i],
        }
    }

    pub fn mask(&self, segment: Segment) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: (0..self.labels.len())
                .map(|i| self.contains(segment, i))
                .collect(),
        }
    }

    pub fn count(&self, segment: Segment) -> usize {
        (0..self.labels.len())
            .filter(|&i| self.contains(segment, i))
            .count()
    }
}

/// Row counts of the (top, middle, base) thirds of a crown spanning
/// `rows` rows; the remainder goes to the top third first.
pub fn thirds(rows: usize) -> [usize; 3] {
    let (q, r) = (rows / 3, rows % 3);
    [q + usize::from(r >= 1), q + usize::from(r >= 2), q]
}

/// Splits the tree mask. Stem: tree pixels within stem_width/2 of the path
/// pixels lying between the crown base row and the lowest crown pixel row,
/// and every tree pixel below the lowest crown pixel. Crown: the rest.
pub fn segment_tree(
    tree: &BinaryMask,
    ann: &CrownAnnotation,
    path: &[(usize, usize)],
    edge_px: usize,
) -> Result<SegmentMask> {
    let (w, h) = (tree.width, tree.height);
    ann.validate(w, h)?;
    let lcp_row = ann.lowest_crown_pixel.1;
    let mut stem = BinaryMask::new(w, h);
    let radius = ann.stem_width as f64 / 2.0;
    let reach = radius.floor() as isize;
    for &(pc, pr) in path
        .iter()
        .filter(|&&(_, r)| r >= ann.crown_base_row && r <= lcp_row)
    {
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                if ((dc * dc + dr * dr) as f64) > radius * radius {
                    continue;
                }
                let (c, r) = (pc as isize + dc, pr as isize + dr);
                if tree.at(c, r) {
                    stem.set(c as usize, r as usize, true);
                }
            }
        }
    }
    for r in lcp_row + 1..h {
        for c in 0..w {
            if tree.get(c, r) {
                stem.set(c, r, true);
            }
        }
    }

    let mut labels = vec![LABEL_BACKGROUND; w * h];
    let mut crown_rows: Option<(usize, usize)> = None;
    for i in 0..w * h {
        if stem.bits[i] {
            labels[i] = LABEL_STEM;
        } else if tree.bits[i] {
            labels[i] = LABEL_CROWN_BASE;
            let r = i / w;
            crown_rows = Some(crown_rows.map_or((r, r), |(a, b)| (a.min(r), b.max(r))));
        }
    }
    let (top, bottom) = crown_rows.ok_or(Error::DegenerateCrown)?;
    let [n_top, n_mid, _] = thirds(bottom - top + 1);
    for (i, l) in labels.iter_mut().enumerate() {
        if *l == LABEL_CROWN_BASE {
            let r = i / w;
            *l = if r < top + n_top {
                LABEL_CROWN_TOP
            } else if r < top + n_top + n_mid {
                LABEL_CROWN_MIDDLE
            } else {
                LABEL_CROWN_BASE
            };
        }
    }

    let background = BinaryMask {
        width: w,
        height: h,
        bits: tree.bits.iter().map(|&b| !b).collect(),
    };
    let limit = (edge_px * edge_px) as i64;
    let dist = squared_distance(&background);
    let edge = (0..w * h)
        .map(|i| labels[i] >= LABEL_CROWN_BASE && dist[i].is_some_and(|d| d <= limit))
        .collect();
    Ok(SegmentMask {
        width: w,
        height: h,
        labels,
        edge,
    })
}

/// Checks stem ∪ crown = tree, stem ∩ crown = ∅, the thirds partition the
/// crown and the edge flag lies inside the crown.
pub fn check_partition(tree: &BinaryMask, seg: &SegmentMask) -> Result<()> {
    let fail = |m: String| {
        Err(Error::Precondition(format!(
            "partition identity violated: {m}"
        )))
    };
    if (tree.width, tree.height) != (seg.width, seg.height) {
        return fail("size mismatch".into());
    }
    for i in 0..tree.bits.len() {
        let stem = seg.contains(Segment::Stem, i);
        let crown = seg.contains(Segment::Crown, i);
        if (stem || crown) != tree.bits[i] {
            return fail(format!("pixel {i}: stem ∪ crown differs from tree"));
        }
        if stem && crown {
            return fail(format!("pixel {i} is stem and crown"));
        }
        let parts = [Segment::CrownBase, Segment::CrownMiddle, Segment::CrownTop]
            .iter()
            .filter(|&&s| seg.contains(s, i))
            .count();
        if parts != usize::from(crown) {
            return fail(format!("pixel {i} in {parts} crown thirds"));
        }
        if seg.edge[i] && !crown {
            return fail(format!("edge pixel {i} outside crown"));
        }
    }
    Ok(())
}

/// Label PGM plus a parallel edge-flag PGM (0 / 255).
pub fn save_segments(labels_path: &Path, edge_path: &Path, seg: &SegmentMask) -> Result<()> {
    write_pgm8(labels_path, seg.width, seg.height, &seg.labels)?;
    let edge: Vec<u8> = seg.edge.iter().map(|&e| if e { 255 } else { 0 }).collect();
    write_pgm8(edge_path, seg.width, seg.height, &edge)
}

pub fn load_segments(labels_path: &Path, edge_path: &Path) -> Result<SegmentMask> {
    let l = read_pgm(labels_path)?;
    let e = read_pgm(edge_path)?;
    if (l.width, l.height) != (e.width, e.height) {
        return Err(Error::Shape("segment and edge masks differ in size".into()));
    }
    if let Some(bad) = l.samples.iter().find(|&&s| s > u16::from(LABEL_CROWN_TOP)) {
        return Err(Error::Parse {
            path: labels_path.to_path_buf(),
            line: 0,
            message: format!("unknown segment label {bad}"),
        });
    }
    Ok(SegmentMask {
        width: l.width,
        height: l.height,
        labels: l.samples.iter().map(|&s| s as u8).collect(),
        edge: e.samples.iter().map(|&s| s > 0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::annotate::AnnotationSource;

    #[test]
    fn thirds_rule() {
        assert_eq!(thirds(90), [30, 30, 30]);
        assert_eq!(thirds(91), [31, 30, 30]);
        assert_eq!(thirds(92), [31, 31, 30]);
        assert_eq!(thirds(2), [1, 1, 0]);
        for n in 0..200 {
            let t = thirds(n);
            assert_eq!(t.iter().sum::<usize>(), n);
            assert!(t.iter().max().unwrap() - t.iter().min().unwrap() <= 1);
        }
    }

    fn ann(cbr: usize, lcp: (usize, usize), sw: usize) -> CrownAnnotation {
        CrownAnnotation {
            crown_base_row: cbr,
            lowest_crown_pixel: lcp,
            stem_width: sw,
            source: AnnotationSource::Manual,
        }
    }

    #[test]
    fn cylinder_tree_is_mostly_stem() {
        let tree = BinaryMask::from_fn(21, 100, |c, _| (6..=14).contains(&c));
        let path: Vec<_> = (0..100).map(|r| (10, r)).collect();
        let seg = segment_tree(&tree, &ann(0, (10, 0), 5), &path, 13).unwrap();
        check_partition(&tree, &seg).unwrap();
        assert!(seg.count(Segment::Stem) as f64 >= 0.95 * tree.count() as f64);
        assert!(matches!(
            segment_tree(&tree, &ann(0, (10, 0), 9), &path, 13),
            Err(Error::DegenerateCrown)
        ));
    }

    #[test]
    fn crown_of_91_rows_splits_31_30_30() {
        // Crown rows 0..=90, stem rows 91..=119.
        let tree = BinaryMask::from_fn(40, 120, |c, r| {
            if r <= 90 {
                (5..35).contains(&c)
            } else {
                (18..=21).contains(&c)
            }
        });
        let path: Vec<_> = (0..120).map(|r| (20, r)).collect();
        let seg = segment_tree(&tree, &ann(90, (5, 90), 1), &path, 0).unwrap();
        check_partition(&tree, &seg).unwrap();
        let rows_with = |s: Segment| {
            (0..120)
                .filter(|&r| (0..40).any(|c| seg.contains(s, r * 40 + c)))
                .count()
        };
        assert_eq!(rows_with(Segment::CrownTop), 31);
        assert_eq!(rows_with(Segment::CrownMiddle), 30);
        assert_eq!(rows_with(Segment::CrownBase), 30);
        assert_eq!(seg.count(Segment::CrownEdge), 0);
    }

    #[test]
    fn edge_buffer_marks_crown_pixels_near_background() {
        let tree = BinaryMask::from_fn(30, 40, |c, r| {
            (r < 20 && (2..28).contains(&c)) || (13..=16).contains(&c)
        });
        let path: Vec<_> = (0..40).map(|r| (14, r)).collect();
        let seg = segment_tree(&tree, &ann(19, (14, 19), 4), &path, 3).unwrap();
        check_partition(&tree, &seg).unwrap();
        assert!(seg.contains(Segment::CrownEdge, 10 * 30 + 2));
        assert!(seg.contains(Segment::CrownEdge, 10 * 30 + 4));
        assert!(!seg.contains(Segment::CrownEdge, 10 * 30 + 5));
        // Top canvas row is not background.
        assert!(!seg.contains(Segment::CrownEdge, 30 + 10));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seg = SegmentMask {
            width: 3,
            height: 2,
            labels: vec![0, 1, 2, 3, 4, 0],
            edge: vec![false, false, true, false, true, false],
        };
        let (a, b) = (dir.path().join("s.pgm"), dir.path().join("e.pgm"));
        save_segments(&a, &b, &seg).unwrap();
        assert_eq!(load_segments(&a, &b).unwrap(), seg);
    }
}
