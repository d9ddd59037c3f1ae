//! Binary masks: thresholding, connected components, border following,
//! hole filling and Euclidean dilation.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::raster::GrayImage;

/// Binarisation threshold on max-normalised blurred values.
pub const BINARY_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for r in 0..height {
            for c in 0..width {
                m.bits[r * width + c] = f(c, r);
            }
        }
        m
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    /// Bounds-checked read; anything outside the canvas is background.
    pub fn at(&self, col: isize, row: isize) -> bool {
        col >= 0
            && row >= 0
            && (col as usize) < self.width
            && (row as usize) < self.height
            && self.get(col as usize, row as usize)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// First and last row holding a foreground pixel.
    pub fn row_span(&self) -> Option<(usize, usize)> {
        let rows: Vec<usize> = (0..self.height)
            .filter(|&r| {
                self.bits[r * self.width..(r + 1) * self.width]
                    .iter()
                    .any(|&b| b)
            })
            .collect();
        Some((*rows.first()?, *rows.last()?))
    }

    /// Horizontal foreground runs of a row as (start col, length).
    pub fn runs(&self, row: usize) -> Vec<(usize, usize)> {
        let line = &self.bits[row * self.width..(row + 1) * self.width];
        let mut out = Vec::new();
        let mut c = 0;
        while c < self.width {
            if line[c] {
                let start = c;
                while c < self.width && line[c] {
                    c += 1;
                }
                out.push((start, c - start));
            } else {
                c += 1;
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }
}

/// Foreground iff the max-normalised value exceeds the threshold. An
/// all-zero image gives an empty mask.
pub fn binarize(img: &GrayImage) -> BinaryMask {
    let max = img.max();
    let mut m = BinaryMask::new(img.width, img.height);
    if max > 0.0 {
        for (b, v) in m.bits.iter_mut().zip(&img.values) {
            *b = v / max > BINARY_THRESHOLD;
        }
    }
    m
}

const N8: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// 8-connected components in raster order of their first pixel; each is a
/// list of pixel indices.
pub fn components(mask: &BinaryMask) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (c, r) = ((i % w) as isize, (i / w) as isize);
            for (dc, dr) in N8 {
                let (nc, nr) = (c + dc, r + dr);
                if mask.at(nc, nr) {
                    let j = nr as usize * w + nc as usize;
                    if !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Drops 8-connected components with fewer than `min_px` pixels.
pub fn remove_small_components(mask: &BinaryMask, min_px: usize) -> BinaryMask {
    let mut out = BinaryMask::new(mask.width, mask.height);
    for comp in components(mask) {
        if comp.len() >= min_px {
            for i in comp {
                out.bits[i] = true;
            }
        }
    }
    out
}

/// Pixel coordinates (col, row) of a closed border.
pub type Contour = Vec<(usize, usize)>;

// Clockwise neighbour ring starting east, in (d_col, d_row) with rows
// growing downward.
const RING: [(isize, isize); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

fn ring_index(dc: isize, dr: isize) -> usize {
    RING.iter()
        .position(|&d| d == (dc, dr))
        .expect("unit neighbour offset")
}

/// Outer borders of all 8-connected components by Suzuki–Abe border
/// following. Holes are not traced.
pub fn trace_contours(mask: &BinaryMask) -> Vec<Contour> {
    let w = mask.width;
    components(mask)
        .into_iter()
        .map(|comp| {
            // Raster-first pixel: its west neighbour is background.
            let first = *comp.iter().min().expect("component is non-empty");
            follow_border(mask, ((first % w) as isize, (first / w) as isize))
        })
        .collect()
}

fn follow_border(mask: &BinaryMask, start: (isize, isize)) -> Contour {
    let (c0, r0) = start;
    // 3.1: clockwise from the west neighbour for the first foreground pixel.
    let west = ring_index(-1, 0);
    let found = (0..8).map(|k| (west + k) % 8).find(|&k| {
        let (dc, dr) = RING[k];
        mask.at(c0 + dc, r0 + dr)
    });
    let Some(k1) = found else {
        return vec![(c0 as usize, r0 as usize)];
    };
    let p1 = (c0 + RING[k1].0, r0 + RING[k1].1);
    let mut p2 = p1;
    let mut p3 = start;
    let mut out = Vec::new();
    loop {
        // 3.3: counter-clockwise around p3, starting just after p2.
        let from = ring_index(p2.0 - p3.0, p2.1 - p3.1);
        let mut p4 = p3;
        for k in 1..=8 {
            let idx = (from + 8 - k) % 8;
            let (dc, dr) = RING[idx];
            if mask.at(p3.0 + dc, p3.1 + dr) {
                p4 = (p3.0 + dc, p3.1 + dr);
                break;
            }
        }
        out.push((p3.0 as usize, p3.1 as usize));
        if p4 == start && p3 == p1 {
            break;
        }
        p2 = p3;
        p3 = p4;
    }
    out
}

/// Union of the regions enclosed by the contours (borders included).
pub fn fill_contours(contours: &[Contour], width: usize, height: usize) -> BinaryMask {
    let mut wall = BinaryMask::new(width, height);
    for c in contours {
        for &(col, row) in c {
            wall.set(col, row, true);
        }
    }
    // 4-connected flood from outside the canvas cannot cross an
    // 8-connected border; whatever it misses lies inside some contour.
    let (pw, ph) = (width + 2, height + 2);
    let mut outside = vec![false; pw * ph];
    let mut queue = VecDeque::from([0usize]);
    outside[0] = true;
    while let Some(i) = queue.pop_front() {
        let (c, r) = (i % pw, i / pw);
        let mut visit = |nc: usize, nr: usize| {
            let j = nr * pw + nc;
            let is_wall =
                nc >= 1 && nr >= 1 && nc <= width && nr <= height && wall.get(nc - 1, nr - 1);
            if !outside[j] && !is_wall {
                outside[j] = true;
                queue.push_back(j);
            }
        };
        if c > 0 {
            visit(c - 1, r);
        }
        if c + 1 < pw {
            visit(c + 1, r);
        }
        if r > 0 {
            visit(c, r - 1);
        }
        if r + 1 < ph {
            visit(c, r + 1);
        }
    }
    BinaryMask::from_fn(width, height, |c, r| !outside[(r + 1) * pw + c + 1])
}

const FAR: i64 = i64::MAX / 4;

/// Exact squared Euclidean distance to the nearest feature pixel
/// (Felzenszwalb–Huttenlocher lower envelope). `None` where no feature
/// exists.
pub fn squared_distance(features: &BinaryMask) -> Vec<Option<i64>> {
    let (w, h) = (features.width, features.height);
    let mut grid: Vec<i64> = features
        .bits
        .iter()
        .map(|&b| if b { 0 } else { FAR })
        .collect();
    let mut line = Vec::new();
    for c in 0..w {
        line.clear();
        line.extend((0..h).map(|r| grid[r * w + c]));
        let d = edt_1d(&line);
        for r in 0..h {
            grid[r * w + c] = d[r];
        }
    }
    for r in 0..h {
        let d = edt_1d(&grid[r * w..(r + 1) * w]);
        grid[r * w..(r + 1) * w].copy_from_slice(&d);
    }
    grid.into_iter()
        .map(|v| if v >= FAR { None } else { Some(v) })
        .collect()
}

fn edt_1d(f: &[i64]) -> Vec<i64> {
    let n = f.len();
    let mut out = vec![FAR; n];
    let sites: Vec<usize> = (0..n).filter(|&q| f[q] < FAR).collect();
    if sites.is_empty() {
        return out;
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let meet = |p: usize, q: usize| -> f64 {
        ((f[q] + (q * q) as i64) - (f[p] + (p * p) as i64)) as f64 / (2.0 * (q as f64 - p as f64))
    };
    for &q in &sites {
        while let Some(&p) = v.last() {
            let s = meet(p, q);
            if s <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if v.is_empty() {
            z.push(f64::NEG_INFINITY);
        } else {
            z.push(meet(*v.last().expect("non-empty"), q));
        }
        v.push(q);
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as i64 - p as i64;
        *o = d * d + f[p];
    }
    out
}

/// All pixels within Euclidean distance `radius` of the mask.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let r2 = (radius * radius) as i64;
    let d = squared_distance(mask);
    BinaryMask {
        width: mask.width,
        height: mask.height,
        bits: d.into_iter().map(|v| v.is_some_and(|v| v <= r2)).collect(),
    }
}

/// Filled contours dilated by `buffer_px`.
pub fn build_tree_mask(
    contours: &[Contour],
    width: usize,
    height: usize,
    buffer_px: usize,
) -> Result<BinaryMask> {
    if contours.is_empty() {
        return Err(Error::EmptyTree);
    }
    Ok(dilate(&fill_contours(contours, width, height), buffer_px))
}
