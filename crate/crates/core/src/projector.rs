//! Orthographic side-view projections of a tree cloud onto vertical planes
//! rotated about the z axis, rasterised at a density-adjusted pixel size.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloudio::{extent, Point3, PointCloud};
use crate::error::{Error, Result};
use crate::raster::{write_pgm8, GrayImage};

pub const VIEW_ANGLES: [f64; 4] = [0.0, 45.0, 90.0, 135.0];
pub const DEFAULT_CANVAS: usize = 640;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPlane {
    pub alpha: f64,
    pub basis_u: [f64; 3],
    pub basis_v: [f64; 3],
}

/// cos/sin of an angle in degrees, exact at multiples of 90°.
fn cos_sin_deg(alpha: f64) -> (f64, f64) {
    let quarter = alpha / 90.0;
    if quarter == quarter.round() {
        match (quarter.round() as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = alpha.to_radians();
        (r.cos(), r.sin())
    }
}

pub fn plane_basis(alpha: f64) -> ProjectionPlane {
    let (c, s) = cos_sin_deg(alpha);
    ProjectionPlane {
        alpha,
        basis_u: [c, s, 0.0],
        basis_v: [0.0, 0.0, 1.0],
    }
}

/// In-plane (x, y) coordinates of a point.
pub fn project_point(p: &Point3, plane: &ProjectionPlane) -> (f64, f64) {
    (p.dot(plane.basis_u), p.dot(plane.basis_v))
}

/// Edge length of a pixel such that `n` points would tile the w×h extent.
pub fn pixel_size(w: f64, h: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptyCloud(
            "pixel size requested for zero points".into(),
        ));
    }
    if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
        return Err(Error::DegenerateExtent {
            width: w,
            height: h,
        });
    }
    Ok((w * h / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterSpec {
    pub pixel_size: f64,
    pub canvas: usize,
    pub width_m: f64,
    pub height_m: f64,
    pub points: usize,
}

impl RasterSpec {
    pub fn for_cloud(cloud: &PointCloud, plane: &ProjectionPlane, canvas: usize) -> Result<Self> {
        if canvas < 32 {
            return Err(Error::InvalidArgument(format!(
                "canvas {canvas} below 32 px"
            )));
        }
        let (w, h) = extent(cloud, plane)?;
        Ok(Self {
            pixel_size: pixel_size(w, h, cloud.len())?,
            canvas,
            width_m: w,
            height_m: h,
            points: cloud.len(),
        })
    }
}

/// Per-cell point counts, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct CountRaster {
    pub side: usize,
    pub counts: Vec<u32>,
}

impl CountRaster {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }
}

/// Counts points per cell. The in-plane x axis is centred on the canvas and
/// the lowest point of the cloud sits on the bottom row; points falling
/// outside the canvas are dropped.
pub fn rasterize(cloud: &PointCloud, plane: &ProjectionPlane, spec: &RasterSpec) -> CountRaster {
    let side = spec.canvas;
    let mut counts = vec![0u32; side * side];
    let projected: Vec<(f64, f64)> = cloud
        .points
        .iter()
        .map(|p| project_point(p, plane))
        .collect();
    let (mut xmin, mut xmax, mut ymin) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY);
    for &(x, y) in &projected {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
    }
    let centre = 0.5 * (xmin + xmax);
    let half = side as f64 / 2.0;
    for (x, y) in projected {
        let col = ((x - centre) / spec.pixel_size + half).floor();
        let up = ((y - ymin) / spec.pixel_size).floor();
        if col < 0.0 || up < 0.0 || col >= side as f64 || up >= side as f64 {
            continue;
        }
        let row = side - 1 - up as usize;
        counts[row * side + col as usize] += 1;
    }
    CountRaster { side, counts }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionImage {
    pub side: usize,
    /// ln(1 + count), row-major, row 0 at the top.
    pub values: Vec<f64>,
    pub plane: ProjectionPlane,
    pub spec: RasterSpec,
}

impl ProjectionImage {
    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// 8-bit grey levels: round(255·v / max), all zeros for an empty image.
    pub fn to_bytes(&self) -> Vec<u8> {
        let max = self.max_value();
        if max <= 0.0 {
            return vec![0; self.values.len()];
        }
        self.values
            .iter()
            .map(|v| (255.0 * v / max).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.side,
            height: self.side,
            values: self
                .to_bytes()
                .into_iter()
                .map(|b| f64::from(b) / 255.0)
                .collect(),
        }
    }
}

pub fn log_scale(
    raster: &CountRaster,
    plane: ProjectionPlane,
    spec: RasterSpec,
) -> ProjectionImage {
    ProjectionImage {
        side: raster.side,
        values: raster
            .counts
            .iter()
            .map(|&c| f64::from(c).ln_1p())
            .collect(),
        plane,
        spec,
    }
}

pub fn render_view(cloud: &PointCloud, alpha: f64, canvas: usize) -> Result<ProjectionImage> {
    let plane = plane_basis(alpha);
    let spec = RasterSpec::for_cloud(cloud, &plane, canvas)?;
    Ok(log_scale(&rasterize(cloud, &plane, &spec), plane, spec))
}

/// The four side views at 0°, 45°, 90° and 135°.
pub fn render_views(cloud: &PointCloud, canvas: usize) -> Result<Vec<ProjectionImage>> {
    VIEW_ANGLES
        .iter()
        .map(|&a| render_view(cloud, a, canvas))
        .collect()
}

pub fn view_file_name(tree_id: &str, alpha: f64) -> String {
    format!("{tree_id}_a{}.pgm", alpha.round() as i64)
}

pub fn write_image(img: &ProjectionImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_pgm8(path, img.side, img.side, &img.to_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloudio::Species;
    use proptest::prelude::*;

    fn cloud(points: Vec<Point3>) -> PointCloud {
        PointCloud::new(points, Species::Spruce, "t").unwrap()
    }

    #[test]
    fn basis_examples() {
        let p0 = plane_basis(0.0);
        assert_eq!(p0.basis_u, [1.0, 0.0, 0.0]);
        assert_eq!(p0.basis_v, [0.0, 0.0, 1.0]);
        assert_eq!(plane_basis(90.0).basis_u, [0.0, 1.0, 0.0]);
        let u45 = plane_basis(45.0).basis_u;
        assert!((u45[0] - 0.70711).abs() < 1e-5 && (u45[1] - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn project_point_examples() {
        let p = Point3::new(2., 3., 5.);
        assert_eq!(project_point(&p, &plane_basis(0.0)), (2.0, 5.0));
        assert_eq!(project_point(&p, &plane_basis(90.0)), (3.0, 5.0));
        let (x, y) = project_point(&Point3::new(1., 1., 0.), &plane_basis(45.0));
        assert!((x - 1.41421).abs() < 1e-5);
        assert_eq!(y, 0.0);
    }

    #[test]
    fn pixel_size_examples() {
        assert_eq!(pixel_size(1.0, 1.0, 1).unwrap(), 1.0);
        assert!((pixel_size(10.0, 20.0, 200_000).unwrap() - 0.031623).abs() < 1e-6);
        assert!(matches!(pixel_size(1.0, 1.0, 0), Err(Error::EmptyCloud(_))));
        assert!(pixel_size(0.0, 1.0, 5).is_err());
    }

    fn spec(pixel_size: f64, canvas: usize, n: usize) -> RasterSpec {
        RasterSpec {
            pixel_size,
            canvas,
            width_m: 1.0,
            height_m: 1.0,
            points: n,
        }
    }

    #[test]
    fn single_point_fills_one_cell() {
        let c = cloud(vec![Point3::new(0.3, 0.1, 0.0)]);
        let r = rasterize(&c, &plane_basis(0.0), &spec(0.1, 32, 1));
        assert_eq!(r.total(), 1);
        assert_eq!(r.counts.iter().filter(|&&v| v == 1).count(), 1);
        // Lowest point sits on the bottom row.
        let idx = r.counts.iter().position(|&v| v == 1).unwrap();
        assert_eq!(idx / 32, 31);
    }

    #[test]
    fn coincident_points_share_a_cell() {
        let c = cloud(vec![
            Point3::new(0., 0., 0.),
            Point3::new(0.01, 0., 0.01),
            Point3::new(1., 0., 1.),
        ]);
        let r = rasterize(&c, &plane_basis(0.0), &spec(0.1, 32, 3));
        assert_eq!(r.counts.iter().copied().max(), Some(2));
    }

    #[test]
    fn log_scale_examples() {
        let r = CountRaster {
            side: 1,
            counts: vec![0],
        };
        let plane = plane_basis(0.0);
        let s = spec(1.0, 32, 1);
        assert_eq!(log_scale(&r, plane, s).values, vec![0.0]);
        let r = CountRaster {
            side: 1,
            counts: vec![1, 9],
        };
        let v = log_scale(&r, plane, s).values;
        assert!((v[0] - 0.69315).abs() < 1e-5 && (v[1] - 2.30259).abs() < 1e-5);
    }

    #[test]
    fn byte_mapping_examples() {
        let plane = plane_basis(0.0);
        let img = ProjectionImage {
            side: 1,
            values: vec![0.0, 2f64.ln(), 10f64.ln()],
            plane,
            spec: spec(1.0, 32, 1),
        };
        assert_eq!(img.to_bytes(), vec![0, 77, 255]);
        let zero = ProjectionImage {
            values: vec![0.0; 4],
            ..img
        };
        assert_eq!(zero.to_bytes(), vec![0; 4]);
    }

    #[test]
    fn render_views_gives_four_angles() {
        let pts = (0..500)
            .map(|i| {
                let t = i as f64 / 500.0;
                Point3::new(
                    (t * 40.0).cos() * (1.0 - t),
                    (t * 40.0).sin() * (1.0 - t),
                    t * 10.0,
                )
            })
            .collect();
        let views = render_views(&cloud(pts), 64).unwrap();
        let angles: Vec<f64> = views.iter().map(|v| v.plane.alpha).collect();
        assert_eq!(angles, VIEW_ANGLES.to_vec());
        assert!(views.iter().all(|v| v.values.len() == 64 * 64));
    }

    #[test]
    fn quarter_turn_maps_views_exactly() {
        let pts: Vec<Point3> = (0..1000)
            .map(|i| {
                let t = i as f64;
                Point3::new(
                    (t * 0.37).sin() * 2.0,
                    (t * 0.11).cos() * 1.5,
                    (t * 0.013) % 9.0,
                )
            })
            .collect();
        let original = cloud(pts.clone());
        // Turning the cloud by -90° about z brings the 90° view onto the 0° axis.
        let turned = cloud(pts.iter().map(|p| Point3::new(p.y, -p.x, p.z)).collect());
        let plane90 = plane_basis(90.0);
        let s = RasterSpec::for_cloud(&original, &plane90, 128).unwrap();
        let a = rasterize(&original, &plane90, &s);
        let b = rasterize(&turned, &plane_basis(0.0), &s);
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn basis_is_orthonormal(alpha in -720.0..720.0f64) {
            let p = plane_basis(alpha);
            let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            prop_assert!((dot(p.basis_u, p.basis_u) - 1.0).abs() < 1e-12);
            prop_assert!((dot(p.basis_v, p.basis_v) - 1.0).abs() < 1e-12);
            prop_assert!(dot(p.basis_u, p.basis_v).abs() < 1e-12);
        }

        #[test]
        fn byte_mapping_is_scale_invariant(values in prop::collection::vec(0.0..20.0f64, 1..50), e in -8i32..8) {
            // Power-of-two factors scale exactly, so bytes must match exactly.
            let k = 2f64.powi(e);
            let plane = plane_basis(0.0);
            let a = ProjectionImage { side: 1, values: values.clone(), plane, spec: spec(1.0, 32, 1) };
            let b = ProjectionImage { values: values.iter().map(|v| v * k).collect(), ..a.clone() };
            prop_assert_eq!(a.to_bytes(), b.to_bytes());
        }

        #[test]
        fn byte_mapping_scales_within_one_level(values in prop::collection::vec(0.0..20.0f64, 1..50), k in 0.01..100.0f64) {
            let plane = plane_basis(0.0);
            let a = ProjectionImage { side: 1, values: values.clone(), plane, spec: spec(1.0, 32, 1) };
            let b = ProjectionImage { values: values.iter().map(|v| v * k).collect(), ..a.clone() };
            for (x, y) in a.to_bytes().iter().zip(b.to_bytes()) {
                prop_assert!((*x as i32 - y as i32).abs() <= 1);
            }
        }

        #[test]
        fn log_scale_monotone(a in 0u32..10_000, b in 0u32..10_000) {
            prop_assume!(a > b);
            prop_assert!(f64::from(a).ln_1p() > f64::from(b).ln_1p());
        }
    }
}
