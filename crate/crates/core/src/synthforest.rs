//! Procedural single-tree point clouds for seven species archetypes.
//!
//! A tree is a branching skeleton of tapered cylinders (stem, up to four
//! branch orders, optional dead stubs below the crown) plus a foliage shell
//! inside a species-specific crown envelope. Points are sampled on segment
//! surfaces with Gaussian radial noise.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloudio::{save_xyz, write_manifest, ManifestEntry, Point3, PointCloud, Species, Split};
use crate::error::{Error, Result};
use crate::micronet::train::FOLDS;

/// Coordinates are rounded to this grid so XYZ text stays short and exact.
const COORD_QUANTUM: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrownShape {
    Cone,
    Ellipsoid,
    OpenBroom,
}

impl CrownShape {
    /// Envelope radius relative to the widest point, `t` running from the
    /// crown base (0) to the apex (1).
    pub fn profile(self, t: f64) -> f64 {
        match self {
            CrownShape::Cone => (1.0 - t.clamp(0.0, 1.0)).powf(0.9),
            CrownShape::Ellipsoid => {
                let u = 2.0 * t - 1.0;
                (1.0 - u * u).max(0.0).sqrt()
            }
            CrownShape::OpenBroom => (PI * t.clamp(0.0, 1.0).powf(1.5)).sin().max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesArchetype {
    pub species: Species,
    pub crown_shape: CrownShape,
    /// Crown length over tree height.
    pub crown_ratio: [f64; 2],
    /// Deepest branch order, 1..=4.
    pub branch_order: u8,
    pub stem_dead_branches: bool,
    pub stem_bend_probability: f64,
    /// Tree height in metres.
    pub height: [f64; 2],
    /// Widest crown radius over tree height.
    pub crown_radius: [f64; 2],
    /// First-order branch elevation in degrees above horizontal.
    pub branch_elevation: [f64; 2],
    pub first_order_branches: [usize; 2],
    /// First-order branch base radius relative to the stem base radius.
    pub branch_thickness: f64,
    /// Stem continues to the apex (conifers) or dissolves into the crown.
    pub excurrent: bool,
    /// Share of points in the foliage shell.
    pub shell_fraction: f64,
    /// Share of points in foliage clusters around branch tips.
    pub tip_fraction: f64,
}

fn range_ok(r: [f64; 2]) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] < r[1]
}

impl SpeciesArchetype {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| {
            Err(Error::InvalidArgument(format!(
                "{} archetype: {m}",
                self.species
            )))
        };
        for (name, r) in [
            ("crown_ratio", self.crown_ratio),
            ("height", self.height),
            ("crown_radius", self.crown_radius),
            ("branch_elevation", self.branch_elevation),
        ] {
            if !range_ok(r) {
                return bad(format!("{name} range {r:?} is degenerate"));
            }
        }
        if self.crown_ratio[0] <= 0.0 || self.crown_ratio[1] >= 1.0 {
            return bad("crown_ratio must lie in (0, 1)".into());
        }
        if self.height[0] <= 0.0 || self.crown_radius[0] <= 0.0 {
            return bad("height and crown_radius must be positive".into());
        }
        if !(1..=4).contains(&self.branch_order) {
            return bad(format!("branch_order {} outside 1..=4", self.branch_order));
        }
        if self.first_order_branches[0] == 0
            || self.first_order_branches[0] > self.first_order_branches[1]
        {
            return bad(format!(
                "first_order_branches {:?}",
                self.first_order_branches
            ));
        }
        for (name, p) in [
            ("stem_bend_probability", self.stem_bend_probability),
            ("shell_fraction", self.shell_fraction),
            ("tip_fraction", self.tip_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if self.shell_fraction + self.tip_fraction >= 0.9 {
            return bad("foliage leaves too few points for the skeleton".into());
        }
        Ok(())
    }

    /// Default archetype of a species.
    pub fn for_species(species: Species) -> Self {
        let base = SpeciesArchetype {
            species,
            crown_shape: CrownShape::Ellipsoid,
            crown_ratio: [0.6, 0.75],
            branch_order: 3,
            stem_dead_branches: false,
            stem_bend_probability: 0.0,
            height: [18.0, 26.0],
            crown_radius: [0.25, 0.32],
            branch_elevation: [25.0, 60.0],
            first_order_branches: [8, 12],
            branch_thickness: 0.35,
            excurrent: false,
            shell_fraction: 0.35,
            tip_fraction: 0.1,
        };
        match species {
            Species::Birch => SpeciesArchetype {
                crown_shape: CrownShape::OpenBroom,
                crown_ratio: [0.5, 0.65],
                branch_order: 4,
                height: [14.0, 20.0],
                crown_radius: [0.18, 0.24],
                branch_elevation: [55.0, 75.0],
                first_order_branches: [10, 14],
                branch_thickness: 0.25,
                shell_fraction: 0.12,
                tip_fraction: 0.08,
                ..base
            },
            Species::Beech => SpeciesArchetype {
                shell_fraction: 0.45,
                ..base
            },
            Species::Ash => SpeciesArchetype {
                crown_ratio: [0.5, 0.65],
                crown_radius: [0.21, 0.27],
                branch_elevation: [35.0, 65.0],
                shell_fraction: 0.4,
                ..base
            },
            Species::Oak => SpeciesArchetype {
                crown_ratio: [0.55, 0.7],
                height: [16.0, 24.0],
                crown_radius: [0.38, 0.45],
                branch_elevation: [10.0, 35.0],
                first_order_branches: [6, 9],
                branch_thickness: 0.5,
                shell_fraction: 0.35,
                ..base
            },
            Species::Pine => SpeciesArchetype {
                crown_ratio: [0.3, 0.4],
                branch_order: 2,
                stem_dead_branches: true,
                height: [20.0, 28.0],
                crown_radius: [0.15, 0.2],
                branch_elevation: [20.0, 50.0],
                first_order_branches: [7, 10],
                branch_thickness: 0.3,
                excurrent: true,
                shell_fraction: 0.15,
                tip_fraction: 0.25,
                ..base
            },
            Species::Spruce => SpeciesArchetype {
                crown_shape: CrownShape::Cone,
                crown_ratio: [0.75, 0.9],
                branch_order: 2,
                height: [20.0, 30.0],
                crown_radius: [0.14, 0.18],
                branch_elevation: [-25.0, 0.0],
                first_order_branches: [28, 36],
                branch_thickness: 0.15,
                excurrent: true,
                shell_fraction: 0.35,
                tip_fraction: 0.05,
                ..base
            },
            Species::DouglasFir => SpeciesArchetype {
                crown_shape: CrownShape::Cone,
                crown_ratio: [0.55, 0.7],
                branch_order: 2,
                stem_dead_branches: true,
                height: [24.0, 34.0],
                crown_radius: [0.16, 0.2],
                branch_elevation: [-5.0, 15.0],
                first_order_branches: [22, 30],
                branch_thickness: 0.18,
                excurrent: true,
                shell_fraction: 0.3,
                tip_fraction: 0.05,
                ..base
            },
        }
    }
}

/// Where and how strongly a bent stem is tilted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BendSpec {
    pub height_fraction: f64,
    pub angle_deg: f64,
}

impl Default for BendSpec {
    fn default() -> Self {
        Self {
            height_fraction: 0.3,
            angle_deg: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub trees_per_species: usize,
    pub seed: u64,
    pub points_per_tree: [usize; 2],
    pub artifact_species: Option<Species>,
    pub bend: BendSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            trees_per_species: 60,
            seed: 0,
            points_per_tree: [4000, 6000],
            artifact_species: Some(Species::Ash),
            bend: BendSpec::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trees_per_species == 0 {
            return Err(Error::InvalidArgument(
                "trees_per_species must be at least 1".into(),
            ));
        }
        let [lo, hi] = self.points_per_tree;
        if lo < 100 || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "points_per_tree range [{lo}, {hi}]"
            )));
        }
        let b = self.bend;
        if !(b.height_fraction > 0.0 && b.height_fraction < 1.0) || !b.angle_deg.is_finite() {
            return Err(Error::InvalidArgument(format!("bend {b:?}")));
        }
        Ok(())
    }
}

/// Structural part a generated point was sampled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointPart {
    Stem,
    Branch,
    DeadBranch,
    Foliage,
}

/// Generator ground truth, in metres above the lowest point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeTruth {
    pub source_id: String,
    pub species: Species,
    pub height: f64,
    pub crown_base_height: f64,
    pub crown_radius: f64,
    pub bent: bool,
}

impl TreeTruth {
    pub fn crown_ratio(&self) -> f64 {
        (self.height - self.crown_base_height) / self.height
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedTree {
    pub cloud: PointCloud,
    pub parts: Vec<PointPart>,
    pub truth: TreeTruth,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: [f64; 3],
    b: [f64; 3],
    r0: f64,
    r1: f64,
    part: PointPart,
}

impl Segment {
    fn length(&self) -> f64 {
        norm(sub(self.b, self.a))
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add_scaled(a: [f64; 3], d: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + s * d[0], a[1] + s * d[1], a[2] + s * d[2]]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn direction(azimuth: f64, elevation: f64) -> [f64; 3] {
    [
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    ]
}

/// Two unit vectors orthogonal to `d` and to each other.
fn frame(d: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if d[2].abs() < 0.9 {
        [0.0, 0.0, 1.0]
    } else {
        [1.0, 0.0, 0.0]
    };
    let e1 = unit(cross(d, helper));
    (e1, cross(d, e1))
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    rng.random_range(r[0]..r[1])
}

/// Crown envelope of one tree.
struct Envelope {
    shape: CrownShape,
    base: f64,
    top: f64,
    radius: f64,
}

impl Envelope {
    fn radius_at(&self, z: f64) -> f64 {
        if z > self.top {
            return 0.0;
        }
        let t = (z - self.base) / (self.top - self.base);
        if t < 0.0 && self.shape != CrownShape::Cone {
            return 0.0;
        }
        self.radius * self.shape.profile(t)
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        p[0].hypot(p[1]) <= self.radius_at(p[2])
    }

    /// Distance from `origin` along `dir` to the envelope surface, marching
    /// from inside. Returns at least `min_len`.
    fn reach(&self, origin: [f64; 3], dir: [f64; 3], min_len: f64) -> f64 {
        let step = (self.top - self.base) / 200.0;
        let mut s = 0.0;
        while s < 4.0 * self.radius + (self.top - self.base) {
            let next = s + step;
            if !self.contains(add_scaled(origin, dir, next)) {
                break;
            }
            s = next;
        }
        s.max(min_len)
    }
}

struct Skeleton {
    segments: Vec<Segment>,
    tips: Vec<[f64; 3]>,
}

fn grow_branch(
    skel: &mut Skeleton,
    env: &Envelope,
    arch: &SpeciesArchetype,
    origin: [f64; 3],
    azimuth: f64,
    elevation: f64,
    length: f64,
    radius: f64,
    order: u8,
    rng: &mut ChaCha8Rng,
) {
    let dir = direction(azimuth, elevation);
    let end = add_scaled(origin, dir, length);
    skel.segments.push(Segment {
        a: origin,
        b: end,
        r0: radius,
        r1: (radius * 0.3).max(0.01),
        part: PointPart::Branch,
    });
    if order >= arch.branch_order {
        skel.tips.push(end);
        return;
    }
    let children = if arch.species == Species::Birch {
        rng.random_range(3..6)
    } else {
        rng.random_range(2..4)
    };
    for _ in 0..children {
        let at = rng.random_range(0.3..0.9);
        let start = add_scaled(origin, dir, at * length);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let az = azimuth + side * rng.random_range(20f64..60.0).to_radians();
        let el =
            (elevation + rng.random_range(-25f64..25.0).to_radians()).clamp(-PI / 3.0, PI / 2.2);
        let cdir = direction(az, el);
        let cap = 0.6 * (1.0 - at) * length + 0.3 * length;
        let len = env.reach(start, cdir, 0.15).min(cap).max(0.15);
        let r = (radius * (1.0 - 0.7 * at) * 0.5).max(0.008);
        grow_branch(skel, env, arch, start, az, el, len, r, order + 1, rng);
    }
    skel.tips.push(end);
}

fn stem_radius(height: f64) -> f64 {
    height / 70.0
}

fn build_skeleton(
    arch: &SpeciesArchetype,
    height: f64,
    crown_base: f64,
    crown_radius: f64,
    rng: &mut ChaCha8Rng,
) -> Skeleton {
    let env = Envelope {
        shape: arch.crown_shape,
        base: crown_base,
        top: height,
        radius: crown_radius,
    };
    let r_base = stem_radius(height);
    let crown_len = height - crown_base;
    let stem_top = if arch.excurrent {
        height
    } else {
        crown_base + 0.55 * crown_len
    };
    let r_top = if arch.excurrent { 0.02 } else { 0.45 * r_base };
    let mut skel = Skeleton {
        segments: Vec::new(),
        tips: Vec::new(),
    };
    let pieces = 8;
    for k in 0..pieces {
        let z0 = stem_top * k as f64 / pieces as f64;
        let z1 = stem_top * (k + 1) as f64 / pieces as f64;
        let taper = |z: f64| r_base + (r_top - r_base) * z / stem_top;
        skel.segments.push(Segment {
            a: [0.0, 0.0, z0],
            b: [0.0, 0.0, z1],
            r0: taper(z0),
            r1: taper(z1),
            part: PointPart::Stem,
        });
    }

    let n1 = rng.random_range(arch.first_order_branches[0]..=arch.first_order_branches[1]);
    let hi = if arch.excurrent {
        height - 0.04 * height
    } else {
        stem_top
    };
    let lo = crown_base + 0.02 * crown_len;
    for i in 0..n1 {
        let frac = (i as f64 + rng.random_range(0.0..1.0)) / n1 as f64;
        let z = lo + frac * (hi - lo);
        let azimuth = rng.random_range(0.0..TAU);
        let mut elevation = uniform(rng, arch.branch_elevation).to_radians();
        if !arch.excurrent && frac > 0.7 {
            elevation = elevation.max(50f64.to_radians());
        }
        let origin = [0.0, 0.0, z];
        let dir = direction(azimuth, elevation);
        let length = env.reach(origin, dir, 0.3);
        let r_stem = r_base + (r_top - r_base) * (z / stem_top).min(1.0);
        let radius = (arch.branch_thickness * r_stem).max(0.01);
        grow_branch(
            &mut skel, &env, arch, origin, azimuth, elevation, length, radius, 1, rng,
        );
    }

    if arch.stem_dead_branches {
        let mut z = 0.15 * height;
        while z < crown_base - 0.2 {
            let azimuth = rng.random_range(0.0..TAU);
            let elevation = rng.random_range(-15f64..10.0).to_radians();
            let length = rng.random_range(0.4..1.2);
            let origin = [0.0, 0.0, z];
            skel.segments.push(Segment {
                a: origin,
                b: add_scaled(origin, direction(azimuth, elevation), length),
                r0: 0.03,
                r1: 0.01,
                part: PointPart::DeadBranch,
            });
            z += rng.random_range(0.3..0.7);
        }
    }
    skel
}

fn sample_segment(seg: &Segment, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> [f64; 3] {
    let d = sub(seg.b, seg.a);
    let len = norm(d);
    let dir = unit(d);
    let (e1, e2) = frame(dir);
    let t: f64 = rng.random_range(0.0..1.0);
    let r = seg.r0 + (seg.r1 - seg.r0) * t;
    let phi = rng.random_range(0.0..TAU);
    let rr = r * (1.0 + 0.15 * noise.sample(rng));
    let c = add_scaled(seg.a, dir, t * len);
    let p = add_scaled(c, e1, rr * phi.cos());
    add_scaled(p, e2, rr * phi.sin())
}

fn sample_shell(env: &Envelope, rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let t: f64 = rng.random_range(0.0..1.0);
        let prof = env.shape.profile(t);
        if rng.random_range(0.0..1.0) > prof {
            continue;
        }
        let rho = env.radius * prof * rng.random_range(0.0f64..1.0).powf(0.25);
        let phi = rng.random_range(0.0..TAU);
        let z = env.base + t * (env.top - env.base);
        return [rho * phi.cos(), rho * phi.sin(), z];
    }
}

fn quantize(v: f64) -> f64 {
    (v / COORD_QUANTUM).round() * COORD_QUANTUM
}

/// Generates one tree with exactly `points` points.
pub fn generate_tree(
    arch: &SpeciesArchetype,
    points: usize,
    bend: &BendSpec,
    seed: u64,
    source_id: &str,
) -> Result<GeneratedTree> {
    arch.validate()?;
    if points == 0 {
        return Err(Error::InvalidArgument(
            "a tree needs at least one point".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let height = uniform(&mut rng, arch.height);
    let crown_ratio = uniform(&mut rng, arch.crown_ratio);
    let crown_base = height * (1.0 - crown_ratio);
    let crown_radius = height * uniform(&mut rng, arch.crown_radius);
    let skel = build_skeleton(arch, height, crown_base, crown_radius, &mut rng);
    let env = Envelope {
        shape: arch.crown_shape,
        base: crown_base,
        top: height,
        radius: crown_radius,
    };

    let n_shell = (arch.shell_fraction * points as f64).round() as usize;
    let n_tip = if skel.tips.is_empty() {
        0
    } else {
        (arch.tip_fraction * points as f64).round() as usize
    };
    let n_wood = points - n_shell - n_tip;

    // Wood points follow visible mass: length times (radius + 3 cm).
    let weights: Vec<f64> = skel
        .segments
        .iter()
        .map(|s| s.length() * (0.5 * (s.r0 + s.r1) + 0.03))
        .collect();
    let total: f64 = weights.iter().sum();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut pts = Vec::with_capacity(points);
    let mut parts = Vec::with_capacity(points);
    let mut acc = 0.0;
    let mut emitted = 0usize;
    for (seg, w) in skel.segments.iter().zip(&weights) {
        acc += w;
        let upto = ((acc / total) * n_wood as f64).round() as usize;
        for _ in emitted..upto.min(n_wood) {
            pts.push(sample_segment(seg, &mut rng, &noise));
            parts.push(seg.part);
        }
        emitted = upto.min(n_wood).max(emitted);
    }
    while emitted < n_wood {
        let seg = &skel.segments[0];
        pts.push(sample_segment(seg, &mut rng, &noise));
        parts.push(seg.part);
        emitted += 1;
    }
    for _ in 0..n_shell {
        pts.push(sample_shell(&env, &mut rng));
        parts.push(PointPart::Foliage);
    }
    let blob = 0.04 * crown_radius + 0.1;
    for _ in 0..n_tip {
        let tip = skel.tips[rng.random_range(0..skel.tips.len())];
        let p = [
            tip[0] + blob * noise.sample(&mut rng),
            tip[1] + blob * noise.sample(&mut rng),
            tip[2] + blob * noise.sample(&mut rng),
        ];
        pts.push(p);
        parts.push(PointPart::Foliage);
    }

    let mut points3: Vec<Point3> = pts.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect();
    let mut truth_base = crown_base;
    let bent = arch.stem_bend_probability > 0.0 && rng.random_bool(arch.stem_bend_probability);
    let bend_seed = rng.next_u64();
    let mut cloud = PointCloud::new(std::mem::take(&mut points3), arch.species, source_id)?;
    if bent {
        let z_b = bend.height_fraction * cloud.height() + cloud.z_range().0;
        cloud = plant_bend_artifact(&cloud, bend.height_fraction, bend.angle_deg, bend_seed)?;
        if crown_base > z_b {
            truth_base = z_b + (crown_base - z_b) * bend.angle_deg.to_radians().cos();
        }
    }
    let z0 = cloud.z_range().0;
    for p in cloud.points.iter_mut() {
        p.x = quantize(p.x);
        p.y = quantize(p.y);
        p.z = quantize(p.z - z0);
    }
    let truth = TreeTruth {
        source_id: source_id.to_string(),
        species: arch.species,
        height: cloud.height(),
        crown_base_height: truth_base - z0,
        crown_radius,
        bent,
    };
    Ok(GeneratedTree {
        cloud,
        parts,
        truth,
    })
}

/// Tilts everything above `bend_height_fraction` of the tree height by
/// `bend_angle` degrees about a horizontal axis through the stem at that
/// height. The axis azimuth is drawn from `seed`.
pub fn plant_bend_artifact(
    cloud: &PointCloud,
    bend_height_fraction: f64,
    bend_angle: f64,
    seed: u64,
) -> Result<PointCloud> {
    if !(bend_height_fraction > 0.0 && bend_height_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "bend height fraction {bend_height_fraction} outside (0, 1)"
        )));
    }
    let (zmin, zmax) = cloud.z_range();
    let z_b = zmin + bend_height_fraction * (zmax - zmin);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let az: f64 = rng.random_range(0.0..TAU);
    if bend_angle == 0.0 {
        return Ok(cloud.clone());
    }

    // Pivot on the stem: centroid of a thin slice at the bend height.
    let band = 0.02 * (zmax - zmin);
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for p in &cloud.points {
        if (p.z - z_b).abs() <= band {
            sx += p.x;
            sy += p.y;
            n += 1;
        }
    }
    let (px, py) = if n > 0 {
        (sx / n as f64, sy / n as f64)
    } else {
        (0.0, 0.0)
    };

    // Rodrigues rotation about the horizontal unit axis k = (cos az, sin az, 0).
    let (kx, ky) = (az.cos(), az.sin());
    let (s, c) = bend_angle.to_radians().sin_cos();
    let points = cloud
        .points
        .iter()
        .map(|p| {
            if p.z <= z_b {
                return *p;
            }
            let v = [p.x - px, p.y - py, p.z - z_b];
            let kv = kx * v[0] + ky * v[1];
            let kxv = [ky * v[2], -kx * v[2], kx * v[1] - ky * v[0]];
            let r = [
                v[0] * c + kxv[0] * s + kx * kv * (1.0 - c),
                v[1] * c + kxv[1] * s + ky * kv * (1.0 - c),
                v[2] * c + kxv[2] * s,
            ];
            Point3::new(r[0] + px, r[1] + py, r[2] + z_b)
        })
        .collect();
    PointCloud::new(points, cloud.species, cloud.source_id.clone())
}

/// Per-tree seed derived from the dataset seed and the tree's position.
pub fn tree_seed(seed: u64, species: Species, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((species.index() as u64) << 32) | index as u64);
    rng.next_u64()
}

pub fn source_id(species: Species, index: usize) -> String {
    format!("{}_{index:03}", species.name().to_ascii_lowercase())
}

/// Splits `n` trees 90/10 and assigns folds 1..=5 round-robin over the
/// shuffled training trees. Returns (split, fold) per tree index.
pub fn assign_splits(n: usize, rng: &mut ChaCha8Rng) -> Vec<(Split, Option<u8>)> {
    use rand::seq::SliceRandom;
    let n_test = if n < 2 {
        0
    } else {
        ((0.1 * n as f64).round() as usize).max(1)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out = vec![(Split::Train, None); n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_test {
            (Split::Test, None)
        } else {
            (
                Split::Train,
                Some(((rank - n_test) % FOLDS as usize) as u8 + 1),
            )
        };
    }
    out
}

/// Everything `generate_dataset` wrote.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Vec<ManifestEntry>,
    pub truth: Vec<TreeTruth>,
    pub manifest_path: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TRUTH_FILE: &str = "truth.csv";

/// Generates every tree, writes `clouds/<id>.xyz`, `manifest.csv` and
/// `truth.csv` under `out_dir`.
pub fn generate_dataset(config: &GenConfig, out_dir: &Path) -> Result<Dataset> {
    config.validate()?;
    let cloud_dir = out_dir.join("clouds");
    fs::create_dir_all(&cloud_dir).map_err(|e| Error::io(&cloud_dir, e))?;

    let mut jobs = Vec::new();
    for species in Species::ALL {
        let mut arch = SpeciesArchetype::for_species(species);
        arch.stem_bend_probability = if config.artifact_species == Some(species) {
            1.0
        } else {
            0.0
        };
        let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed);
        split_rng.set_stream((1u64 << 40) | species.index() as u64);
        let splits = assign_splits(config.trees_per_species, &mut split_rng);
        for (i, (split, fold)) in splits.into_iter().enumerate() {
            jobs.push((arch.clone(), i, split, fold));
        }
    }

    let results: Vec<Result<(ManifestEntry, TreeTruth)>> = jobs
        .par_iter()
        .map(|(arch, i, split, fold)| {
            let seed = tree_seed(config.seed, arch.species, *i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let [lo, hi] = config.points_per_tree;
            let n = rng.random_range(lo..=hi);
            let id = source_id(arch.species, *i);
            let tree = generate_tree(arch, n, &config.bend, seed, &id)?;
            let rel = PathBuf::from("clouds").join(format!("{id}.xyz"));
            save_xyz(&tree.cloud, &out_dir.join(&rel))?;
            Ok((
                ManifestEntry {
                    path: rel,
                    species: arch.species,
                    source_id: id,
                    split: Some(*split),
                    fold: *fold,
                },
                tree.truth,
            ))
        })
        .collect();
    let mut manifest = Vec::with_capacity(results.len());
    let mut truth = Vec::with_capacity(results.len());
    for r in results {
        let (m, t) = r?;
        manifest.push(m);
        truth.push(t);
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest_path, &manifest)?;
    write_truth(&out_dir.join(TRUTH_FILE), &truth)?;
    Ok(Dataset {
        manifest,
        truth,
        manifest_path,
    })
}

pub fn write_truth(path: &Path, truth: &[TreeTruth]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "source_id,species,height,crown_base_height,crown_radius,bent"
    )
    .map_err(io)?;
    for t in truth {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            t.source_id, t.species, t.height, t.crown_base_height, t.crown_radius, t.bent
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_truth(path: &Path) -> Result<Vec<TreeTruth>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| crate::cloudio::csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| crate::cloudio::csv_error(path, e)))
        .collect()
}

/// Structural features used by the separability baseline: height, crown
/// ratio and crown width (widest horizontal extent).
pub fn structural_features(tree: &GeneratedTree) -> [f64; 3] {
    let pts = &tree.cloud.points;
    let span = |f: fn(&Point3) -> f64| {
        let (lo, hi) = pts
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                (a.min(v), b.max(v))
            });
        hi - lo
    };
    let width = span(|p| p.x).max(span(|p| p.y));
    [tree.truth.height, tree.truth.crown_ratio(), width]
}

/// Nearest-centroid accuracy on standardised features. Even indices train,
/// odd indices test.
pub fn nearest_centroid_accuracy(samples: &[([f64; 3], usize)], classes: usize) -> f64 {
    let train: Vec<_> = samples.iter().step_by(2).collect();
    let test: Vec<_> = samples.iter().skip(1).step_by(2).collect();
    let mut mean = [0.0; 3];
    let mut sd = [0.0; 3];
    for d in 0..3 {
        mean[d] = train.iter().map(|(f, _)| f[d]).sum::<f64>() / train.len() as f64;
        sd[d] = (train
            .iter()
            .map(|(f, _)| (f[d] - mean[d]).powi(2))
            .sum::<f64>()
            / train.len() as f64)
            .sqrt()
            .max(1e-12);
    }
    let z = |f: &[f64; 3]| [0, 1, 2].map(|d| (f[d] - mean[d]) / sd[d]);
    let mut centroids = vec![[0.0; 3]; classes];
    let mut counts = vec![0usize; classes];
    for (f, c) in &train {
        let zf = z(f);
        for d in 0..3 {
            centroids[*c][d] += zf[d];
        }
        counts[*c] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= (*n).max(1) as f64;
        }
    }
    let correct = test
        .iter()
        .filter(|(f, c)| {
            let zf = z(f);
            let best = (0..classes)
                .filter(|&k| counts[k] > 0)
                .min_by(|&a, &b| {
                    let da: f64 = (0..3).map(|d| (zf[d] - centroids[a][d]).powi(2)).sum();
                    let db: f64 = (0..3).map(|d| (zf[d] - centroids[b][d]).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap_or(0);
            best == *c
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloudio::read_manifest;
    use proptest::prelude::*;

    fn tree(species: Species, seed: u64) -> GeneratedTree {
        generate_tree(
            &SpeciesArchetype::for_species(species),
            5000,
            &BendSpec::default(),
            seed,
            "t",
        )
        .unwrap()
    }

    #[test]
    fn default_archetypes_are_valid() {
        for s in Species::ALL {
            SpeciesArchetype::for_species(s).validate().unwrap();
        }
    }

    #[test]
    fn invalid_archetypes_are_rejected() {
        let mut a = SpeciesArchetype::for_species(Species::Oak);
        a.height = [20.0, 10.0];
        assert!(a.validate().is_err());
        let mut a = SpeciesArchetype::for_species(Species::Oak);
        a.stem_bend_probability = 1.5;
        assert!(a.validate().is_err());
        let mut a = SpeciesArchetype::for_species(Species::Oak);
        a.branch_order = 5;
        assert!(a.validate().is_err());
    }

    #[test]
    fn same_seed_gives_bit_identical_clouds() {
        for s in Species::ALL {
            let a = tree(s, 11);
            let b = tree(s, 11);
            assert_eq!(a.cloud, b.cloud);
            assert_ne!(a.cloud, tree(s, 12).cloud);
        }
    }

    #[test]
    fn point_count_is_exact_and_height_in_range() {
        for s in Species::ALL {
            let arch = SpeciesArchetype::for_species(s);
            for seed in 0..3 {
                let t = tree(s, seed);
                assert_eq!(t.cloud.len(), 5000);
                assert_eq!(t.parts.len(), 5000);
                assert_eq!(t.cloud.z_range().0, 0.0);
                // Bark noise and foliage may poke a little past the apex.
                assert!(
                    t.truth.height > arch.height[0] - 0.5 && t.truth.height < arch.height[1] + 1.0,
                    "{s}: {}",
                    t.truth.height
                );
            }
        }
    }

    #[test]
    fn cone_crown_points_sit_above_crown_base() {
        for s in [Species::Spruce, Species::DouglasFir] {
            for seed in 0..5 {
                let t = tree(s, seed);
                let crown: Vec<_> = t
                    .cloud
                    .points
                    .iter()
                    .zip(&t.parts)
                    .filter(|(_, p)| matches!(p, PointPart::Branch | PointPart::Foliage))
                    .collect();
                let above = crown
                    .iter()
                    .filter(|(q, _)| q.z > t.truth.crown_base_height)
                    .count();
                assert!(
                    above as f64 >= 0.8 * crown.len() as f64,
                    "{s} seed {seed}: {above}/{}",
                    crown.len()
                );
            }
        }
    }

    #[test]
    fn dead_branches_only_where_configured() {
        for s in Species::ALL {
            let t = tree(s, 3);
            let dead = t.parts.iter().any(|p| *p == PointPart::DeadBranch);
            assert_eq!(
                dead,
                SpeciesArchetype::for_species(s).stem_dead_branches,
                "{s}"
            );
        }
    }

    #[test]
    fn zero_bend_is_identity() {
        let t = tree(Species::Beech, 1);
        assert_eq!(plant_bend_artifact(&t.cloud, 0.3, 0.0, 5).unwrap(), t.cloud);
    }

    #[test]
    fn bend_keeps_lower_part_and_lowers_the_top() {
        let t = tree(Species::Beech, 2);
        let bent = plant_bend_artifact(&t.cloud, 0.3, 15.0, 7).unwrap();
        assert_eq!(bent.len(), t.cloud.len());
        let z_b = 0.3 * t.cloud.height();
        for (a, b) in t.cloud.points.iter().zip(&bent.points) {
            if a.z <= z_b {
                assert_eq!(a, b);
            }
        }
        assert!(bent.height() < t.cloud.height());
    }

    #[test]
    fn bend_rotation_preserves_distances_to_pivot_line() {
        let t = tree(Species::Ash, 4);
        let bent = plant_bend_artifact(&t.cloud, 0.3, 25.0, 1).unwrap();
        let z_b = 0.3 * t.cloud.height();
        let above: Vec<usize> = (0..t.cloud.len())
            .filter(|&i| t.cloud.points[i].z > z_b)
            .collect();
        let (i, j) = (above[0], above[above.len() / 2]);
        let d = |p: &Point3, q: &Point3| {
            ((p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2)).sqrt()
        };
        let before = d(&t.cloud.points[i], &t.cloud.points[j]);
        let after = d(&bent.points[i], &bent.points[j]);
        assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn bend_fraction_must_be_interior() {
        let t = tree(Species::Ash, 0);
        assert!(plant_bend_artifact(&t.cloud, 0.0, 10.0, 0).is_err());
        assert!(plant_bend_artifact(&t.cloud, 1.0, 10.0, 0).is_err());
    }

    #[test]
    fn sixty_trees_split_into_54_and_6() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = assign_splits(60, &mut rng);
        let test = s.iter().filter(|(sp, _)| *sp == Split::Test).count();
        assert_eq!(test, 6);
        let mut per_fold = [0usize; 6];
        for (sp, f) in &s {
            match sp {
                Split::Test => assert!(f.is_none()),
                Split::Train => per_fold[f.unwrap() as usize] += 1,
            }
        }
        assert_eq!(&per_fold[1..], &[11, 11, 11, 11, 10]);
    }

    #[test]
    fn separability_baseline_beats_sixty_percent() {
        let mut samples = Vec::new();
        for s in Species::ALL {
            for i in 0..20 {
                let t = tree(s, tree_seed(42, s, i));
                samples.push((structural_features(&t), s.index()));
            }
        }
        let acc = nearest_centroid_accuracy(&samples, Species::COUNT);
        assert!(acc > 0.6, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn dataset_is_deterministic_and_marks_artifact_species() {
        let cfg = GenConfig {
            trees_per_species: 10,
            seed: 9,
            points_per_tree: [500, 800],
            ..GenConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let da = generate_dataset(&cfg, a.path()).unwrap();
        generate_dataset(&cfg, b.path()).unwrap();
        assert_eq!(
            fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
        for e in &da.manifest {
            assert_eq!(
                fs::read(a.path().join(&e.path)).unwrap(),
                fs::read(b.path().join(&e.path)).unwrap()
            );
            let cloud = e.load(a.path()).unwrap();
            assert!((500..=800).contains(&cloud.len()));
        }
        for t in &da.truth {
            assert_eq!(t.bent, t.species == Species::Ash, "{}", t.source_id);
        }
        let back = read_manifest(&da.manifest_path).unwrap();
        assert_eq!(back, da.manifest);
        assert_eq!(read_truth(&a.path().join(TRUTH_FILE)).unwrap(), da.truth);
        for s in Species::ALL {
            let folds: std::collections::BTreeSet<u8> = da
                .manifest
                .iter()
                .filter(|e| e.species == s)
                .filter_map(|e| e.fold)
                .collect();
            assert_eq!(folds.into_iter().collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
        }
    }

    #[test]
    fn no_artifact_species_means_no_bends() {
        let cfg = GenConfig {
            trees_per_species: 2,
            points_per_tree: [300, 300],
            artifact_species: None,
            ..GenConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_dataset(&cfg, dir.path())
            .unwrap()
            .truth
            .iter()
            .all(|t| !t.bent));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn points_within_requested_count(n in 200usize..2000, seed in any::<u64>(), s in 0usize..7) {
            let sp = Species::from_index(s).unwrap();
            let t = generate_tree(&SpeciesArchetype::for_species(sp), n, &BendSpec::default(), seed, "p").unwrap();
            prop_assert_eq!(t.cloud.len(), n);
            prop_assert!(t.truth.crown_base_height > 0.0 && t.truth.crown_base_height < t.truth.height);
        }
    }
}
