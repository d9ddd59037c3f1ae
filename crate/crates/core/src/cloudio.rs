//! Loading, validating and jittering single-tree point clouds.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::ProjectionPlane;

/// Maximum jitter displacement in metres.
pub const JITTER_RADIUS: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(&self, v: [f64; 3]) -> f64 {
        self.x * v[0] + self.y * v[1] + self.z * v[2]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Species {
    Birch,
    Beech,
    Ash,
    Oak,
    Pine,
    Spruce,
    DouglasFir,
}

impl Species {
    pub const COUNT: usize = 7;
    pub const ALL: [Species; 7] = [
        Species::Birch,
        Species::Beech,
        Species::Ash,
        Species::Oak,
        Species::Pine,
        Species::Spruce,
        Species::DouglasFir,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Species::Birch => "Birch",
            Species::Beech => "Beech",
            Species::Ash => "Ash",
            Species::Oak => "Oak",
            Species::Pine => "Pine",
            Species::Spruce => "Spruce",
            Species::DouglasFir => "DouglasFir",
        }
    }

    pub fn is_broadleaf(self) -> bool {
        matches!(
            self,
            Species::Birch | Species::Beech | Species::Ash | Species::Oak
        )
    }
}

impl fmt::Display for Species {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Species {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Species::ALL
            .into_iter()
            .find(|sp| sp.name().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::UnknownSpecies(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub species: Species,
    pub source_id: String,
}

impl PointCloud {
    pub fn new(
        points: Vec<Point3>,
        species: Species,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let source_id = source_id.into();
        if points.is_empty() {
            return Err(Error::EmptyCloud(source_id));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "point {i} of {source_id} has a non-finite coordinate"
            )));
        }
        Ok(Self {
            points,
            species,
            source_id,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn z_range(&self) -> (f64, f64) {
        self.points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.z), hi.max(p.z))
            })
    }

    pub fn height(&self) -> f64 {
        let (lo, hi) = self.z_range();
        hi - lo
    }

    /// Shifts the cloud so that its minimum z is 0.
    pub fn normalize_base(&mut self) {
        let (lo, _) = self.z_range();
        for p in self.points.iter_mut() {
            p.z -= lo;
        }
    }
}

/// Loads an ASCII XYZ or ASCII PLY file. Coordinates are shifted so the
/// minimum elevation is 0; point order is preserved.
pub fn load_cloud(path: &Path, species: Species, source_id: &str) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let points = if text.trim_start().starts_with("ply") {
        parse_ply(&text, path)?
    } else {
        parse_xyz(&text, path)?
    };
    if points.is_empty() {
        return Err(Error::EmptyCloud(path.display().to_string()));
    }
    let mut cloud = PointCloud::new(points, species, source_id)?;
    cloud.normalize_base();
    Ok(cloud)
}

fn parse_coords(fields: &[&str], path: &Path, line: usize) -> Result<Point3> {
    let parse = |s: &str| {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("`{s}` is not a finite number"),
            })
    };
    Ok(Point3::new(
        parse(fields[0])?,
        parse(fields[1])?,
        parse(fields[2])?,
    ))
}

fn parse_xyz(text: &str, path: &Path) -> Result<Vec<Point3>> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("//") {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected at least 3 columns, found {}", fields.len()),
            });
        }
        points.push(parse_coords(&fields, path, i + 1)?);
    }
    Ok(points)
}

fn parse_ply(text: &str, path: &Path) -> Result<Vec<Point3>> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    // Elements declared before the vertex element, as (count, property count).
    let mut skip_before = 0usize;
    let mut seen_vertex = false;
    let mut header_end = None;
    for (i, raw) in lines.by_ref() {
        let line = raw.trim();
        let mut words = line.split_whitespace();
        match words.next() {
            Some("ply") | Some("comment") | Some("obj_info") | None => {}
            Some("format") => {
                if words.next() != Some("ascii") {
                    return Err(err(i + 1, "only ASCII PLY is supported".into()));
                }
            }
            Some("element") => {
                let name = words.next().unwrap_or_default();
                let count: usize = words
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| err(i + 1, "malformed element line".into()))?;
                in_vertex = name == "vertex";
                if in_vertex {
                    vertex_count = Some(count);
                    seen_vertex = true;
                } else if !seen_vertex {
                    skip_before += count;
                }
            }
            Some("property") => {
                if in_vertex {
                    let name = line.split_whitespace().last().unwrap_or_default();
                    props.push(name.to_string());
                }
            }
            Some("end_header") => {
                header_end = Some(i);
                break;
            }
            Some(other) => return Err(err(i + 1, format!("unexpected header keyword `{other}`"))),
        }
    }
    if header_end.is_none() {
        return Err(err(0, "missing end_header".into()));
    }
    let count = vertex_count.ok_or_else(|| err(0, "no vertex element".into()))?;
    let index_of = |axis: &str| {
        props
            .iter()
            .position(|p| p == axis)
            .ok_or_else(|| err(0, format!("vertex element lacks property `{axis}`")))
    };
    let (ix, iy, iz) = (index_of("x")?, index_of("y")?, index_of("z")?);
    let mut points = Vec::with_capacity(count);
    let mut skipped = 0;
    for (i, raw) in lines {
        if points.len() == count {
            break;
        }
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if skipped < skip_before {
            skipped += 1;
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < props.len() {
            return Err(err(
                i + 1,
                format!("expected {} values, found {}", props.len(), fields.len()),
            ));
        }
        points.push(parse_coords(
            &[fields[ix], fields[iy], fields[iz]],
            path,
            i + 1,
        )?);
    }
    if points.len() != count {
        return Err(err(
            0,
            format!("header declares {count} vertices, found {}", points.len()),
        ));
    }
    Ok(points)
}

/// Writes the cloud as ASCII XYZ with round-trip precision.
pub fn save_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in &cloud.points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Displaces every point by a vector with isotropic direction and length
/// uniform in [0, 5 mm].
pub fn jitter(cloud: &PointCloud, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let cos_theta: f64 = rng.random_range(-1.0..=1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r: f64 = rng.random_range(0.0..=JITTER_RADIUS);
            let sin_theta = (1.0 - cos_theta * cos_theta).max(0.0).sqrt();
            Point3::new(
                p.x + r * sin_theta * phi.cos(),
                p.y + r * sin_theta * phi.sin(),
                p.z + r * cos_theta,
            )
        })
        .collect();
    PointCloud {
        points,
        species: cloud.species,
        source_id: cloud.source_id.clone(),
    }
}

/// Horizontal spread along the plane's in-plane axis and vertical height.
pub fn extent(cloud: &PointCloud, plane: &ProjectionPlane) -> Result<(f64, f64)> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &cloud.points {
        let u = p.dot(plane.basis_u);
        lo = lo.min(u);
        hi = hi.max(u);
    }
    let width = hi - lo;
    let height = cloud.height();
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::DegenerateExtent { width, height });
    }
    Ok((width, height))
}

/// One row of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub species: Species,
    pub source_id: String,
    #[serde(default)]
    pub split: Option<Split>,
    /// 1-based fold index for training rows.
    #[serde(default)]
    pub fold: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl ManifestEntry {
    /// Loads the referenced cloud; relative paths resolve against `root`.
    pub fn load(&self, root: &Path) -> Result<PointCloud> {
        let path = if self.path.is_absolute() {
            self.path.clone()
        } else {
            root.join(&self.path)
        };
        load_cloud(&path, self.species, &self.source_id)
    }
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: PathBuf,
    species: String,
    source_id: String,
    #[serde(default)]
    split: Option<String>,
    #[serde(default)]
    fold: Option<String>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let split = match row.split.as_deref().map(str::trim) {
            None | Some("") => None,
            Some("train") => Some(Split::Train),
            Some("test") => Some(Split::Test),
            Some(other) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("unknown split `{other}`"),
                })
            }
        };
        let fold = match row.fold.as_deref().map(str::trim) {
            None | Some("") | Some("0") => None,
            Some(f) => Some(f.parse::<u8>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("bad fold `{f}`"),
            })?),
        };
        out.push(ManifestEntry {
            path: row.path,
            species: row.species.parse()?,
            source_id: row.source_id,
            split,
            fold,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["path", "species", "source_id", "split", "fold"])
        .map_err(|e| csv_error(path, e))?;
    for e in entries {
        let split = match e.split {
            Some(Split::Train) => "train",
            Some(Split::Test) => "test",
            None => "",
        };
        let fold = e.fold.map(|f| f.to_string()).unwrap_or_else(|| "0".into());
        w.write_record([
            e.path.to_string_lossy().as_ref(),
            e.species.name(),
            &e.source_id,
            split,
            &fold,
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.position().map(|p| p.line() as usize).unwrap_or(0),
        message: e.to_string(),
    }
}
