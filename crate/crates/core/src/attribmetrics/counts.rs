//! Salient pixel counts per tree segment and the derived ratios.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{Segment, SegmentMask};
use crate::raster::GrayImage;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SalientCounts {
    /// All salient pixels in the map.
    pub nstot: u64,
    /// Inside the tree mask.
    pub nst: u64,
    pub nss: u64,
    pub nsc: u64,
    pub nscb: u64,
    pub nscm: u64,
    pub nsct: u64,
    pub nsce: u64,
}

impl SalientCounts {
    /// Checks Nss + Nsc = Nst, Nscb + Nscm + Nsct = Nsc, Nsce ≤ Nsc and
    /// Nst ≤ Nstot.
    pub fn check(&self) -> Result<()> {
        let ok = self.nss + self.nsc == self.nst
            && self.nscb + self.nscm + self.nsct == self.nsc
            && self.nsce <= self.nsc
            && self.nst <= self.nstot;
        if ok {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "salient count identities violated: {self:?}"
            )))
        }
    }

    pub fn get(&self, segment: Segment) -> u64 {
        match segment {
            Segment::Tree => self.nst,
            Segment::Stem => self.nss,
            Segment::Crown => self.nsc,
            Segment::CrownBase => self.nscb,
            Segment::CrownMiddle => self.nscm,
            Segment::CrownTop => self.nsct,
            Segment::CrownEdge => self.nsce,
        }
    }
}

/// Tallies pixels with value strictly above `threshold`.
pub fn count_salient(map: &GrayImage, seg: &SegmentMask, threshold: f64) -> Result<SalientCounts> {
    if (map.width, map.height) != (seg.width, seg.height) {
        return Err(Error::Shape(format!(
            "saliency map {}x{} vs segment mask {}x{}",
            map.width, map.height, seg.width, seg.height
        )));
    }
    let mut n = SalientCounts::default();
    for (i, &v) in map.values.iter().enumerate() {
        if v <= threshold {
            continue;
        }
        n.nstot += 1;
        for s in Segment::ALL {
            if seg.contains(s, i) {
                match s {
                    Segment::Tree => n.nst += 1,
                    Segment::Stem => n.nss += 1,
                    Segment::Crown => n.nsc += 1,
                    Segment::CrownBase => n.nscb += 1,
                    Segment::CrownMiddle => n.nscm += 1,
                    Segment::CrownTop => n.nsct += 1,
                    Segment::CrownEdge => n.nsce += 1,
                }
            }
        }
    }
    n.check()?;
    Ok(n)
}

/// Ratios; `None` where the denominator is zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SalientRatios {
    pub rnst: Option<f64>,
    pub rnss: Option<f64>,
    pub rnsc: Option<f64>,
    pub rnscb: Option<f64>,
    pub rnscm: Option<f64>,
    pub rnsct: Option<f64>,
    pub nnsce: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl SalientRatios {
    /// rNst over all salient pixels, stem and crown over Nst, the thirds and
    /// the edge buffer over Nsc.
    pub fn from_counts(n: &SalientCounts) -> Self {
        Self {
            rnst: ratio(n.nst, n.nstot),
            rnss: ratio(n.nss, n.nst),
            rnsc: ratio(n.nsc, n.nst),
            rnscb: ratio(n.nscb, n.nsc),
            rnscm: ratio(n.nscm, n.nsc),
            rnsct: ratio(n.nsct, n.nsc),
            nnsce: ratio(n.nsce, n.nsc),
        }
    }

    pub fn get(&self, segment: Segment) -> Option<f64> {
        match segment {
            Segment::Tree => self.rnst,
            Segment::Stem => self.rnss,
            Segment::Crown => self.rnsc,
            Segment::CrownBase => self.rnscb,
            Segment::CrownMiddle => self.rnscm,
            Segment::CrownTop => self.rnsct,
            Segment::CrownEdge => self.nnsce,
        }
    }
}

pub fn ratios(counts: &SalientCounts) -> SalientRatios {
    SalientRatios::from_counts(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::segment::{LABEL_BACKGROUND, LABEL_CROWN_TOP, LABEL_STEM};
    use proptest::prelude::*;

    fn seg(labels: Vec<u8>, edge: Vec<bool>, w: usize) -> SegmentMask {
        SegmentMask {
            width: w,
            height: labels.len() / w,
            labels,
            edge,
        }
    }

    #[test]
    fn threshold_one_counts_nothing() {
        let map = GrayImage::from_fn(2, 2, |_, _| 1.0);
        let s = seg(vec![1, 2, 3, 4], vec![false, true, false, false], 2);
        assert_eq!(
            count_salient(&map, &s, 1.0).unwrap(),
            SalientCounts::default()
        );
    }

    #[test]
    fn one_stem_pixel() {
        let map = GrayImage::from_fn(3, 1, |c, _| if c == 1 { 0.9 } else { 0.1 });
        let s = seg(
            vec![LABEL_BACKGROUND, LABEL_STEM, LABEL_CROWN_TOP],
            vec![false; 3],
            3,
        );
        let n = count_salient(&map, &s, 0.5).unwrap();
        assert_eq!((n.nstot, n.nst, n.nss, n.nsc), (1, 1, 1, 0));
        let r = ratios(&n);
        assert_eq!((r.rnss, r.rnsc, r.rnscb), (Some(1.0), Some(0.0), None));
    }

    #[test]
    fn threshold_is_strict() {
        let map = GrayImage::from_fn(1, 1, |_, _| 0.5);
        let s = seg(vec![LABEL_STEM], vec![false], 1);
        assert_eq!(count_salient(&map, &s, 0.5).unwrap().nstot, 0);
    }

    #[test]
    fn arithmetic_ratios() {
        let n = SalientCounts {
            nstot: 120,
            nst: 100,
            nss: 30,
            nsc: 70,
            nscb: 35,
            nscm: 21,
            nsct: 14,
            nsce: 7,
        };
        n.check().unwrap();
        let r = ratios(&n);
        assert_eq!(r.rnss, Some(0.3));
        assert_eq!(r.rnsc, Some(0.7));
        assert_eq!(r.rnscb, Some(0.5));
        assert_eq!(r.nnsce, Some(0.1));
        let none = ratios(&SalientCounts::default());
        assert_eq!((none.rnst, none.rnss, none.rnsc), (None, None, None));
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let map = GrayImage::new(2, 2);
        assert!(matches!(
            count_salient(&map, &seg(vec![0; 6], vec![false; 6], 3), 0.5),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn counts_match_a_naive_recount(
            cells in proptest::collection::vec((0.0f64..=1.0, 0u8..=4, any::<bool>()), 1..200),
            t in 0.0f64..1.0,
        ) {
            let labels: Vec<u8> = cells.iter().map(|c| c.1).collect();
            let edge: Vec<bool> = cells.iter().map(|c| c.2 && c.1 >= 2).collect();
            let map = GrayImage { width: cells.len(), height: 1, values: cells.iter().map(|c| c.0).collect() };
            let n = count_salient(&map, &seg(labels.clone(), edge.clone(), cells.len()), t).unwrap();
            let mut want = [0u64; 8];
            for i in 0..cells.len() {
                if map.values[i] > t {
                    want[0] += 1;
                    let l = labels[i];
                    want[1] += u64::from(l != 0);
                    want[2] += u64::from(l == 1);
                    want[3] += u64::from(l >= 2);
                    want[4] += u64::from(l == 2);
                    want[5] += u64::from(l == 3);
                    want[6] += u64::from(l == 4);
                    want[7] += u64::from(edge[i]);
                }
            }
            prop_assert_eq!([n.nstot, n.nst, n.nss, n.nsc, n.nscb, n.nscm, n.nsct, n.nsce], want);
            let r = ratios(&n);
            if let (Some(a), Some(b)) = (r.rnss, r.rnsc) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
            if let (Some(a), Some(b), Some(c)) = (r.rnscb, r.rnscm, r.rnsct) {
                prop_assert!((a + b + c - 1.0).abs() < 1e-12);
            }
        }
    }
}
