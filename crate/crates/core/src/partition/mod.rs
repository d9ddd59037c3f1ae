//! Tree / stem / crown segmentation of side-view projections.
//!
//! blur → binarise → drop small components → trace outer contours → fill →
//! annotate → buffer → stem axis path → segment.

pub mod annotate;
pub mod blur;
pub mod mask;
pub mod path;
pub mod segment;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use annotate::{auto_annotation, resolve_annotation, AnnotationSource, CrownAnnotation};
pub use blur::{gaussian_blur, BlurSpec};
pub use mask::{binarize, build_tree_mask, remove_small_components, trace_contours, BinaryMask};
pub use path::{stem_axis_path, StemPath};
pub use segment::{check_partition, segment_tree, Segment, SegmentMask};

use crate::error::Result;
use crate::raster::GrayImage;

/// Canvas side at which the pixel constants are defined.
pub const REFERENCE_CANVAS: usize = 640;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    pub blur_kernel: usize,
    /// Tree-mask buffer at the reference canvas.
    pub buffer_px: usize,
    /// Crown edge distance at the reference canvas.
    pub edge_px: usize,
    /// Smallest kept component at the reference canvas.
    pub min_component_px: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            blur_kernel: 15,
            buffer_px: 32,
            edge_px: 52,
            min_component_px: 64,
        }
    }
}

/// Pixel constants for one canvas size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelConstants {
    pub blur: BlurSpec,
    pub buffer_px: usize,
    pub edge_px: usize,
    pub min_component_px: usize,
}

impl PartitionConfig {
    /// Scales the pixel constants linearly by canvas / 640; the blur kernel
    /// goes to the nearest odd size, at least 3.
    pub fn for_canvas(&self, canvas: usize) -> Result<PixelConstants> {
        let scale = |v: usize| ((v * canvas) as f64 / REFERENCE_CANVAS as f64).round() as usize;
        Ok(PixelConstants {
            blur: BlurSpec::new(odd_kernel(
                self.blur_kernel as f64 * canvas as f64 / REFERENCE_CANVAS as f64,
            ))?,
            buffer_px: scale(self.buffer_px),
            edge_px: scale(self.edge_px),
            min_component_px: scale(self.min_component_px).max(1),
        })
    }
}

/// Nearest odd integer to `k`, at least 3; ties go to the smaller.
fn odd_kernel(k: f64) -> usize {
    let lower = ((k - 1.0) / 2.0).floor().max(0.0) as usize * 2 + 1;
    let pick = if k - lower as f64 <= (lower + 2) as f64 - k {
        lower
    } else {
        lower + 2
    };
    pick.max(3)
}

/// Every intermediate of one segmentation.
#[derive(Debug, Clone)]
pub struct Partition {
    /// Filled contours before buffering.
    pub core: BinaryMask,
    pub tree: BinaryMask,
    pub annotation: CrownAnnotation,
    pub path: StemPath,
    pub segments: SegmentMask,
}

/// Topmost tree pixel: in the first foreground row, the one nearest that
/// row's mean foreground column (lower column on ties).
pub fn top_pixel(mask: &BinaryMask) -> Option<(usize, usize)> {
    let (top, _) = mask.row_span()?;
    let cols: Vec<usize> = (0..mask.width).filter(|&c| mask.get(c, top)).collect();
    let mean = cols.iter().sum::<usize>() as f64 / cols.len() as f64;
    let c = *cols.iter().min_by(|&&a, &&b| {
        (a as f64 - mean)
            .abs()
            .total_cmp(&(b as f64 - mean).abs())
            .then(a.cmp(&b))
    })?;
    Some((c, top))
}

/// Segments a projection. `image_path` locates an optional annotation
/// sidecar.
pub fn partition_image(
    img: &GrayImage,
    px: &PixelConstants,
    image_path: Option<&Path>,
) -> Result<Partition> {
    let blurred = gaussian_blur(img, px.blur)?;
    let binary = remove_small_components(&binarize(&blurred), px.min_component_px);
    let contours = trace_contours(&binary);
    let core = build_tree_mask(&contours, img.width, img.height, 0)?;
    let tree = mask::dilate(&core, px.buffer_px);
    let annotation = resolve_annotation(&core, px.buffer_px, image_path)?;
    let start = top_pixel(&tree).ok_or(crate::error::Error::EmptyTree)?;
    let path = stem_axis_path(&tree, start, annotation.lowest_crown_pixel)?;
    let segments = segment_tree(&tree, &annotation, &path.pixels, px.edge_px)?;
    Ok(Partition {
        core,
        tree,
        annotation,
        path,
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloudio::Species;
    use crate::error::Error;
    use crate::projector::render_view;
    use crate::synthforest::{generate_tree, BendSpec, SpeciesArchetype};

    #[test]
    fn constants_scale_with_canvas() {
        let c = PartitionConfig::default();
        let p = c.for_canvas(640).unwrap();
        assert_eq!(
            (p.buffer_px, p.edge_px, p.min_component_px, p.blur.kernel),
            (32, 52, 64, 15)
        );
        let p = c.for_canvas(160).unwrap();
        assert_eq!(
            (p.buffer_px, p.edge_px, p.min_component_px, p.blur.kernel),
            (8, 13, 16, 3)
        );
        assert_eq!(c.for_canvas(320).unwrap().blur.kernel, 7);
        assert_eq!(c.for_canvas(64).unwrap().blur.kernel, 3);
    }

    #[test]
    fn empty_image_is_an_empty_tree() {
        let px = PartitionConfig::default().for_canvas(64).unwrap();
        assert!(matches!(
            partition_image(&GrayImage::new(64, 64), &px, None),
            Err(Error::EmptyTree)
        ));
    }

    fn cone_on_cylinder() -> SpeciesArchetype {
        SpeciesArchetype {
            branch_elevation: [0.0, 10.0],
            stem_dead_branches: false,
            ..SpeciesArchetype::for_species(Species::DouglasFir)
        }
    }

    #[test]
    fn auto_crown_base_tracks_ground_truth_on_cones() {
        let canvas = 640;
        let px = PartitionConfig::default().for_canvas(canvas).unwrap();
        for seed in 0..4 {
            let t = generate_tree(
                &cone_on_cylinder(),
                80_000,
                &BendSpec::default(),
                seed,
                "cone",
            )
            .unwrap();
            for alpha in [0.0, 90.0] {
                let view = render_view(&t.cloud, alpha, canvas).unwrap();
                let part = partition_image(&view.to_gray(), &px, None).unwrap();
                check_partition(&part.tree, &part.segments).unwrap();
                let s = view.spec.pixel_size;
                let truth_row = (canvas - 1) as f64 - t.truth.crown_base_height / s;
                let tol = 0.05 * t.truth.height / s;
                let got = part.annotation.crown_base_row as f64;
                assert!(
                    (got - truth_row).abs() <= tol,
                    "seed {seed} alpha {alpha}: row {got} vs {truth_row:.1} ± {tol:.1}"
                );
            }
        }
    }

    #[test]
    fn every_species_segments_at_the_desk_canvas() {
        let px = PartitionConfig::default().for_canvas(160).unwrap();
        for s in Species::ALL {
            let mut arch = SpeciesArchetype::for_species(s);
            if s == Species::Ash {
                arch.stem_bend_probability = 1.0;
            }
            let t = generate_tree(&arch, 5000, &BendSpec::default(), 5, "x").unwrap();
            for alpha in [0.0, 45.0, 90.0, 135.0] {
                let view = render_view(&t.cloud, alpha, 160).unwrap();
                let part = partition_image(&view.to_gray(), &px, None)
                    .unwrap_or_else(|e| panic!("{s} {alpha}: {e}"));
                check_partition(&part.tree, &part.segments).unwrap();
                assert!(part.segments.count(Segment::Stem) > 0, "{s} {alpha}");
                assert!(
                    part.segments.count(Segment::Crown) > part.segments.count(Segment::Stem) / 4,
                    "{s} {alpha}"
                );
            }
        }
    }
}
