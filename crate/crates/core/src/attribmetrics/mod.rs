//! Salient pixel attribution to tree segments, classification metrics and
//! the statistics used to compare species.

pub mod confusion;
pub mod counts;
pub mod frequency;
pub mod otsu;
pub mod stats;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use confusion::{write_confusion_csv, ClassMetrics, ConfusionMatrix, Metrics};
pub use counts::{count_salient, ratios, SalientCounts, SalientRatios};
pub use frequency::{contrastive_frequency, write_frequency_csv, ContrastiveRecord, FrequencyRow};
pub use otsu::otsu_threshold;
pub use stats::{dunn_test, holm_adjust, mean_sd, shapiro_wilk, CellStats, DunnPair, ShapiroWilk};

use crate::cloudio::Species;
use crate::error::{Error, Result};
use crate::partition::Segment;

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

fn create_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

/// Writes raw string records with an optional header row.
pub(crate) fn write_csv<R, F>(
    path: &Path,
    header: Option<&[&str]>,
    rows: impl Iterator<Item = R>,
) -> Result<()>
where
    R: IntoIterator<Item = F>,
    F: AsRef<[u8]>,
{
    let mut w = create_writer(path)?;
    if let Some(h) = header {
        w.write_record(h).map_err(|e| csv_error(path, e))?;
    }
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes serde records; the header comes from the field names.
pub(crate) fn write_serialized<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = create_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads serde records written by the stage CSV writers.
pub fn read_serialized<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Segments reported per map, in output order.
pub const RATIO_SEGMENTS: [Segment; 7] = Segment::ALL;

/// One defined ratio of one saliency map.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioRecord {
    pub species: Species,
    /// Fold model, 1-based.
    pub model: usize,
    pub segment: Segment,
    pub ratio: f64,
}

#[derive(Serialize, Deserialize)]
struct RatioRow {
    species: Species,
    model: usize,
    segment: String,
    ratio: f64,
}

fn parse_segment(name: &str) -> Option<Segment> {
    Segment::ALL.into_iter().find(|s| s.name() == name)
}

/// Defined ratios of one map; undefined ones are left out.
pub fn ratio_records(species: Species, model: usize, r: &SalientRatios) -> Vec<RatioRecord> {
    RATIO_SEGMENTS
        .iter()
        .filter_map(|&segment| {
            r.get(segment).map(|ratio| RatioRecord {
                species,
                model,
                segment,
                ratio,
            })
        })
        .collect()
}

/// `species,model,segment,ratio`.
pub fn write_ratio_csv(path: &Path, records: &[RatioRecord]) -> Result<()> {
    let rows: Vec<RatioRow> = records
        .iter()
        .map(|r| RatioRow {
            species: r.species,
            model: r.model,
            segment: r.segment.name().to_string(),
            ratio: r.ratio,
        })
        .collect();
    write_serialized(path, &rows)
}

pub fn read_ratio_csv(path: &Path) -> Result<Vec<RatioRecord>> {
    read_serialized::<RatioRow>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let segment = parse_segment(&r.segment).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: format!("unknown segment `{}`", r.segment),
            })?;
            Ok(RatioRecord {
                species: r.species,
                model: r.model,
                segment,
                ratio: r.ratio,
            })
        })
        .collect()
}

/// Mean and SD of one cell. `species` / `model` of `None` mean pooled over
/// that key.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioSummary {
    pub species: Option<Species>,
    pub model: Option<usize>,
    pub segment: Segment,
    pub stats: CellStats,
}

/// Cells per (species, model, segment), pooled per (species, segment) and
/// pooled per segment, sorted by species (pooled last), model (pooled
/// last) and segment. Empty cells are absent.
pub fn aggregate_ratio_stats(records: &[RatioRecord]) -> Vec<RatioSummary> {
    type Key = (Option<Species>, Option<usize>, Segment);
    let mut cells: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    for r in records {
        for key in [
            (Some(r.species), Some(r.model), r.segment),
            (Some(r.species), None, r.segment),
            (None, None, r.segment),
        ] {
            cells.entry(key).or_default().push(r.ratio);
        }
    }
    // `None` sorts first in Option's order; move pooled rows last.
    let order = |k: &Key| (k.0.is_none(), k.0, k.1.is_none(), k.1, k.2);
    let mut out: Vec<(Key, Vec<f64>)> = cells.into_iter().collect();
    out.sort_by_key(|(k, _)| order(k));
    out.into_iter()
        .filter_map(|((species, model, segment), v)| {
            mean_sd(&v).map(|stats| RatioSummary {
                species,
                model,
                segment,
                stats,
            })
        })
        .collect()
}

/// Pooled mean over all models for one species and segment.
pub fn pooled_mean(summary: &[RatioSummary], species: Species, segment: Segment) -> Option<f64> {
    summary
        .iter()
        .find(|s| s.species == Some(species) && s.model.is_none() && s.segment == segment)
        .map(|s| s.stats.mean)
}

#[derive(Serialize)]
struct SummaryRow {
    species: String,
    model: String,
    segment: &'static str,
    n: usize,
    mean: f64,
    sd: Option<f64>,
}

/// `species,model,segment,n,mean,sd`; pooled keys are written as `all`.
pub fn write_summary_csv(path: &Path, summary: &[RatioSummary]) -> Result<()> {
    let rows: Vec<SummaryRow> = summary
        .iter()
        .map(|s| SummaryRow {
            species: s.species.map_or("all".into(), |sp| sp.name().to_string()),
            model: s.model.map_or("all".into(), |m| m.to_string()),
            segment: s.segment.name(),
            n: s.stats.n,
            mean: s.stats.mean,
            sd: s.stats.sd,
        })
        .collect();
    write_serialized(path, &rows)
}

/// One pairwise comparison after Holm adjustment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestReport {
    pub pair: String,
    pub z: f64,
    pub p_raw: f64,
    pub p_holm: f64,
    #[serde(rename = "significant@0.05")]
    pub significant: bool,
}

pub const ALPHA: f64 = 0.05;

/// Dunn's test over named groups with Holm-adjusted p-values; significant
/// when the adjusted p is below `ALPHA`.
pub fn dunn_holm(groups: &[(String, Vec<f64>)]) -> Result<Vec<TestReport>> {
    let values: Vec<Vec<f64>> = groups.iter().map(|g| g.1.clone()).collect();
    let pairs = dunn_test(&values)?;
    let adjusted = holm_adjust(&pairs.iter().map(|p| p.p).collect::<Vec<_>>());
    Ok(pairs
        .iter()
        .zip(adjusted)
        .map(|(p, p_holm)| TestReport {
            pair: format!("{}-{}", groups[p.i].0, groups[p.j].0),
            z: p.z,
            p_raw: p.p,
            p_holm,
            significant: p_holm < ALPHA,
        })
        .collect())
}

/// `pair,z,p_raw,p_holm,significant@0.05`.
pub fn write_test_csv(path: &Path, reports: &[TestReport]) -> Result<()> {
    write_serialized(path, reports)
}

/// Shapiro–Wilk result of one (species, segment) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalityRow {
    pub species: Species,
    pub segment: &'static str,
    pub n: usize,
    pub w: Option<f64>,
    pub p: Option<f64>,
}

/// Shapiro–Wilk per (species, segment) over all models; W and p are empty
/// when the cell is too small or constant.
pub fn normality_table(records: &[RatioRecord]) -> Vec<NormalityRow> {
    let mut cells: BTreeMap<(Species, Segment), Vec<f64>> = BTreeMap::new();
    for r in records {
        cells
            .entry((r.species, r.segment))
            .or_default()
            .push(r.ratio);
    }
    cells
        .into_iter()
        .map(|((species, segment), v)| {
            let sw = shapiro_wilk(&v).ok();
            NormalityRow {
                species,
                segment: segment.name(),
                n: v.len(),
                w: sw.map(|s| s.w),
                p: sw.map(|s| s.p),
            }
        })
        .collect()
}

/// Groups of one segment's ratios by species, in species order; species
/// without values are skipped.
pub fn species_groups(records: &[RatioRecord], segment: Segment) -> Vec<(String, Vec<f64>)> {
    Species::ALL
        .iter()
        .filter_map(|&sp| {
            let v: Vec<f64> = records
                .iter()
                .filter(|r| r.species == sp && r.segment == segment)
                .map(|r| r.ratio)
                .collect();
            (!v.is_empty()).then(|| (sp.name().to_string(), v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(species: Species, model: usize, segment: Segment, ratio: f64) -> RatioRecord {
        RatioRecord {
            species,
            model,
            segment,
            ratio,
        }
    }

    #[test]
    fn undefined_ratios_are_not_recorded() {
        let n = SalientCounts {
            nstot: 4,
            nst: 2,
            nss: 2,
            ..Default::default()
        };
        let r = ratio_records(Species::Oak, 3, &ratios(&n));
        let segs: Vec<Segment> = r.iter().map(|r| r.segment).collect();
        assert_eq!(segs, vec![Segment::Tree, Segment::Stem, Segment::Crown]);
    }

    #[test]
    fn aggregation_cells_and_order() {
        let recs = vec![
            rec(Species::Ash, 1, Segment::Crown, 0.6),
            rec(Species::Ash, 2, Segment::Crown, 0.8),
            rec(Species::Birch, 1, Segment::Crown, 0.5),
        ];
        let s = aggregate_ratio_stats(&recs);
        let keys: Vec<_> = s.iter().map(|s| (s.species, s.model)).collect();
        assert_eq!(
            keys,
            vec![
                (Some(Species::Birch), Some(1)),
                (Some(Species::Birch), None),
                (Some(Species::Ash), Some(1)),
                (Some(Species::Ash), Some(2)),
                (Some(Species::Ash), None),
                (None, None),
            ]
        );
        let ash = &s[4].stats;
        assert!((ash.mean - 0.7).abs() < 1e-12);
        assert!((ash.sd.unwrap() - 0.1414).abs() < 5e-5);
        assert_eq!(s[0].stats.sd, None);
        assert_eq!(pooled_mean(&s, Species::Birch, Segment::Crown), Some(0.5));
    }

    #[test]
    fn complementary_means_sum_to_one() {
        let mut recs = Vec::new();
        for (i, crown) in [0.798, 0.5, 0.91, 0.33].iter().enumerate() {
            recs.push(rec(Species::Birch, 1 + i % 2, Segment::Crown, *crown));
            recs.push(rec(Species::Birch, 1 + i % 2, Segment::Stem, 1.0 - crown));
        }
        let s = aggregate_ratio_stats(&recs);
        for model in [Some(1), Some(2), None] {
            let get = |seg| {
                s.iter()
                    .find(|c| {
                        c.species == Some(Species::Birch) && c.model == model && c.segment == seg
                    })
                    .unwrap()
            };
            let (c, st) = (get(Segment::Crown), get(Segment::Stem));
            assert!((c.stats.mean + st.stats.mean - 1.0).abs() < 1e-12);
            assert!((c.stats.sd.unwrap() - st.stats.sd.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn ratio_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let recs = vec![
            rec(Species::DouglasFir, 5, Segment::CrownEdge, 0.25),
            rec(Species::Ash, 1, Segment::Stem, 0.644),
        ];
        write_ratio_csv(&p, &recs).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "species,model,segment,ratio\nDouglasFir,5,crown_edge,0.25\nAsh,1,stem,0.644\n"
        );
        assert_eq!(read_ratio_csv(&p).unwrap(), recs);
    }

    #[test]
    fn test_report_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let groups = vec![
            ("Ash".to_string(), vec![1.0, 2.0, 3.0]),
            ("Oak".to_string(), vec![4.0, 5.0, 6.0]),
            ("Pine".to_string(), vec![7.0, 8.0, 9.0]),
        ];
        let rep = dunn_holm(&groups).unwrap();
        assert_eq!(rep.len(), 3);
        assert_eq!(rep[1].pair, "Ash-Pine");
        assert!(rep[1].significant);
        write_test_csv(&p, &rep).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("pair,z,p_raw,p_holm,significant@0.05\nAsh-Oak,"));
    }

    #[test]
    fn normality_cells() {
        let recs: Vec<RatioRecord> = [0.1, 0.2, 0.9, 0.4]
            .iter()
            .map(|&v| rec(Species::Pine, 1, Segment::Stem, v))
            .chain([rec(Species::Oak, 1, Segment::Stem, 0.5)])
            .collect();
        let t = normality_table(&recs);
        assert_eq!(t.len(), 2);
        assert_eq!((t[0].species, t[0].n, t[0].w), (Species::Oak, 1, None));
        assert!(t[1].w.is_some());
        let g = species_groups(&recs, Segment::Stem);
        assert_eq!(
            g.iter().map(|g| g.0.as_str()).collect::<Vec<_>>(),
            vec!["Oak", "Pine"]
        );
    }
}
