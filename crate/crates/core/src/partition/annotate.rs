//! Crown base and stem width: read from a sidecar or estimated.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mask::BinaryMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationSource {
    Manual,
    Auto,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrownAnnotation {
    pub crown_base_row: usize,
    /// (col, row)
    pub lowest_crown_pixel: (usize, usize),
    pub stem_width: usize,
    pub source: AnnotationSource,
}

/// On-disk form; signed so out-of-range values surface as validation
/// errors rather than parse failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub crown_base_row: i64,
    pub lowest_crown_pixel: [i64; 2],
    pub stem_width_px: i64,
}

pub fn annotation_path(image: &Path) -> PathBuf {
    let mut s = image.as_os_str().to_owned();
    s.push(".ann.json");
    PathBuf::from(s)
}

impl CrownAnnotation {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidAnnotation(m));
        if self.crown_base_row >= height {
            return bad(format!(
                "crown_base_row {} outside {height} rows",
                self.crown_base_row
            ));
        }
        let (c, r) = self.lowest_crown_pixel;
        if c >= width || r >= height {
            return bad(format!(
                "lowest_crown_pixel ({c}, {r}) outside {width}x{height}"
            ));
        }
        if r < self.crown_base_row {
            return bad(format!(
                "lowest crown row {r} above crown base row {}",
                self.crown_base_row
            ));
        }
        if self.stem_width == 0 {
            return bad("stem width must be at least 1".into());
        }
        Ok(())
    }

    pub fn from_file(file: &AnnotationFile, width: usize, height: usize) -> Result<Self> {
        let non_neg = |v: i64, name: &str| {
            usize::try_from(v)
                .map_err(|_| Error::InvalidAnnotation(format!("{name} = {v} is negative")))
        };
        let ann = CrownAnnotation {
            crown_base_row: non_neg(file.crown_base_row, "crown_base_row")?,
            lowest_crown_pixel: (
                non_neg(file.lowest_crown_pixel[0], "lowest_crown_pixel col")?,
                non_neg(file.lowest_crown_pixel[1], "lowest_crown_pixel row")?,
            ),
            stem_width: non_neg(file.stem_width_px, "stem_width_px")?,
            source: AnnotationSource::Manual,
        };
        ann.validate(width, height)?;
        Ok(ann)
    }

    pub fn to_file(&self) -> AnnotationFile {
        AnnotationFile {
            crown_base_row: self.crown_base_row as i64,
            lowest_crown_pixel: [
                self.lowest_crown_pixel.0 as i64,
                self.lowest_crown_pixel.1 as i64,
            ],
            stem_width_px: self.stem_width as i64,
        }
    }
}

pub fn read_annotation(path: &Path, width: usize, height: usize) -> Result<CrownAnnotation> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    CrownAnnotation::from_file(&file, width, height)
}

pub fn write_annotation(path: &Path, ann: &CrownAnnotation) -> Result<()> {
    let json = serde_json::to_string_pretty(&ann.to_file())
        .map_err(|e| Error::InvalidAnnotation(e.to_string()))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Median of the horizontal run lengths over the bottom tenth of the
/// foreground rows (lower median for even counts).
pub fn stem_width_estimate(mask: &BinaryMask) -> Option<usize> {
    let (top, bottom) = mask.row_span()?;
    let rows = bottom - top + 1;
    let band = rows.div_ceil(10).max(1);
    let mut lengths: Vec<usize> = (bottom + 1 - band..=bottom)
        .flat_map(|r| mask.runs(r).into_iter().map(|(_, len)| len))
        .collect();
    lengths.sort_unstable();
    Some(lengths[(lengths.len() - 1) / 2])
}

/// Stem centre column per row, tracked upward from the widest bottom run.
/// Rows whose nearby run is wider than two stem widths keep the centre of
/// the row below.
fn track_stem(mask: &BinaryMask, stem_width: usize) -> Vec<f64> {
    let (_, bottom) = mask.row_span().expect("non-empty mask");
    let mut centre = vec![0.0; mask.height];
    let runs = mask.runs(bottom);
    let (start, len) = *runs
        .iter()
        .max_by_key(|(s, l)| (*l, usize::MAX - s))
        .expect("bottom row has a run");
    let mut prev = start as f64 + (len as f64 - 1.0) / 2.0;
    let reach = stem_width as f64;
    for r in (0..=bottom).rev() {
        let nearest = mask
            .runs(r)
            .into_iter()
            .map(|(s, l)| (s, l, s as f64 + (l as f64 - 1.0) / 2.0))
            .filter(|&(s, l, _)| s as f64 <= prev + reach && (s + l - 1) as f64 >= prev - reach)
            .min_by(|a, b| (a.2 - prev).abs().total_cmp(&(b.2 - prev).abs()));
        if let Some((_, l, mid)) = nearest {
            if l <= 2 * stem_width {
                prev = mid;
            }
        }
        centre[r] = prev;
    }
    for c in centre.iter_mut().skip(bottom + 1) {
        *c = prev;
    }
    centre
}

/// Estimates the annotation from the filled mask before buffering.
/// `buffer_px` is added on both sides so the stem width refers to the
/// buffered tree mask, as a manual marking would.
pub fn auto_annotation(core: &BinaryMask, buffer_px: usize) -> Result<CrownAnnotation> {
    let (top, bottom) = core.row_span().ok_or(Error::EmptyTree)?;
    let sw = stem_width_estimate(core).ok_or(Error::EmptyTree)?;
    let centre = track_stem(core, sw);

    let extent = |r: usize| {
        let runs = core.runs(r);
        match (runs.first(), runs.last()) {
            (Some(&(s, _)), Some(&(ls, ll))) => ls + ll - s,
            _ => 0,
        }
    };
    let crown_base_row = (top..=bottom)
        .rev()
        .find(|&r| extent(r) > 3 * sw)
        .unwrap_or(top);

    // Lowest pixel more than one stem width from the tracked centre, the one
    // nearest the stem within its row.
    let mut lowest = None;
    for r in (crown_base_row..=bottom).rev() {
        let c0 = centre[r];
        let hit = (0..core.width)
            .filter(|&c| core.get(c, r) && (c as f64 - c0).abs() > sw as f64)
            .min_by(|&a, &b| {
                (a as f64 - c0)
                    .abs()
                    .total_cmp(&(b as f64 - c0).abs())
                    .then(a.cmp(&b))
            });
        if let Some(c) = hit {
            lowest = Some((c, r));
            break;
        }
    }
    let lowest_crown_pixel = lowest.unwrap_or_else(|| {
        let c = centre[crown_base_row]
            .round()
            .clamp(0.0, (core.width - 1) as f64) as usize;
        (c, crown_base_row)
    });
    let ann = CrownAnnotation {
        crown_base_row,
        lowest_crown_pixel,
        stem_width: sw + 2 * buffer_px,
        source: AnnotationSource::Auto,
    };
    ann.validate(core.width, core.height)?;
    Ok(ann)
}

/// The sidecar next to `image` if it exists, otherwise the estimate.
pub fn resolve_annotation(
    core: &BinaryMask,
    buffer_px: usize,
    image: Option<&Path>,
) -> Result<CrownAnnotation> {
    if let Some(img) = image {
        let side = annotation_path(img);
        if side.exists() {
            return read_annotation(&side, core.width, core.height);
        }
    }
    auto_annotation(core, buffer_px)
}
