//! Work done by each pipeline stage. Every stage reads its inputs from
//! upstream stage directories and writes only into its own directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::Stage;
use crate::attribmetrics::{
    self, aggregate_ratio_stats, contrastive_frequency, count_salient, dunn_holm, normality_table,
    otsu_threshold, pooled_mean, ratio_records, ratios, species_groups, write_confusion_csv,
    write_frequency_csv, write_ratio_csv, write_summary_csv, write_test_csv, ConfusionMatrix,
    ContrastiveRecord, RatioRecord, SalientCounts,
};
use crate::camxai::{
    activation_of, cam_from_activation, load_saliency, saliency_map, save_saliency,
    select_contrastive, CamRequest,
};
use crate::cloudio::{jitter, read_manifest, Species, Split};
use crate::error::{Error, Result};
use crate::micronet::model::DOWNSAMPLE;
use crate::micronet::train::{argmax, predict_logits, tree_prediction, write_training_log, FOLDS};
use crate::micronet::{checkpoint, train_kfold, LabeledImage, Model};
use crate::partition::segment::{load_segments, save_segments};
use crate::partition::{check_partition, partition_image, AnnotationSource, Segment, SegmentMask};
use crate::projector::{render_views, view_file_name, write_image, VIEW_ANGLES};
use crate::raster::{read_pgm, write_png_rgb, GrayImage};
use crate::synthforest::{generate_dataset, tree_seed, MANIFEST_FILE};

/// Upstream stage directories.
pub struct Inputs<'a> {
    pub dirs: &'a BTreeMap<Stage, PathBuf>,
}

impl Inputs<'_> {
    fn dir(&self, stage: Stage) -> &Path {
        self.dirs
            .get(&stage)
            .expect("upstream stage resolved before use")
    }
}

pub const VIEWS_FILE: &str = "views.csv";
pub const VIEW_PREDICTIONS_FILE: &str = "view_predictions.csv";
pub const TREE_PREDICTIONS_FILE: &str = "tree_predictions.csv";
pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const SELECTION_FILE: &str = "selection.csv";
pub const MAP_RECORDS_FILE: &str = "maps.csv";
pub const PARTITION_FILE: &str = "partition.csv";
pub const PARTITION_FAILURES_FILE: &str = "partition_failures.csv";
pub const COUNTS_FILE: &str = "counts.csv";
pub const RATIOS_FILE: &str = "ratios.csv";
pub const RATIO_SUMMARY_FILE: &str = "ratio_summary.csv";
pub const NORMALITY_FILE: &str = "normality.csv";
pub const FREQUENCY_FILE: &str = "contrastive_frequency.csv";
pub const SHORTCUT_FILE: &str = "shortcut.json";
pub const SUMMARY_FILE: &str = "summary.json";

use attribmetrics::{read_serialized, write_serialized};

fn stage_err(stage: Stage) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: stage.name().to_string(),
            cause: Box::new(other),
        },
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn copy(from: &Path, to: &Path) -> Result<()> {
    if let Some(dir) = to.parent() {
        mkdir(dir)?;
    }
    fs::copy(from, to)
        .map_err(|e| Error::io(from, e))
        .map(|_| ())
}

// ---------------------------------------------------------------- synth

pub fn synth(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let d = generate_dataset(&cfg.gen_config()?, out)?;
    info!("generated {} trees", d.manifest.len());
    Ok(())
}

// -------------------------------------------------------------- project

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRow {
    /// File name inside `views/`.
    pub image: String,
    pub source_id: String,
    pub species: Species,
    pub split: Split,
    /// 0 for test trees.
    pub fold: u8,
    pub alpha: f64,
    /// Manifest row of the tree.
    pub tree: usize,
}

pub fn project(cfg: &PipelineConfig, inputs: &Inputs, out: &Path) -> Result<()> {
    let synth_dir = inputs.dir(Stage::Synth);
    let manifest = read_manifest(&synth_dir.join(MANIFEST_FILE))?;
    let view_dir = out.join("views");
    mkdir(&view_dir)?;
    let rows: Vec<Result<Vec<ViewRow>>> = manifest
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let cloud = entry.load(synth_dir)?;
            let cloud = jitter(&cloud, tree_seed(cfg.seeds.jitter, entry.species, i));
            let split = entry
                .split
                .ok_or_else(|| Error::Precondition(format!("{} has no split", entry.source_id)))?;
            let views = render_views(&cloud, cfg.canvas)?;
            views
                .iter()
                .zip(VIEW_ANGLES)
                .map(|(img, alpha)| {
                    let name = view_file_name(&entry.source_id, alpha);
                    write_image(img, &view_dir.join(&name))?;
                    Ok(ViewRow {
                        image: name,
                        source_id: entry.source_id.clone(),
                        species: entry.species,
                        split,
                        fold: entry.fold.unwrap_or(0),
                        alpha,
                        tree: i,
                    })
                })
                .collect()
        })
        .collect();
    let mut all = Vec::new();
    for r in rows {
        all.extend(r?);
    }
    info!("rendered {} views", all.len());
    write_serialized(&out.join(VIEWS_FILE), &all)
}

fn read_views(project_dir: &Path) -> Result<Vec<ViewRow>> {
    read_serialized(&project_dir.join(VIEWS_FILE))
}

fn load_pixels(project_dir: &Path, image: &str) -> Result<GrayImage> {
    read_pgm(&project_dir.join("views").join(image)).map(|p| p.to_gray())
}

fn labeled(project_dir: &Path, rows: &[&ViewRow]) -> Result<Vec<LabeledImage>> {
    rows.par_iter()
        .map(|r| {
            Ok(LabeledImage {
                pixels: load_pixels(project_dir, &r.image)?.values,
                label: r.species.index(),
                tree: r.tree,
                fold: (r.fold > 0).then_some(r.fold),
            })
        })
        .collect()
}

// ---------------------------------------------------------------- train

pub fn checkpoint_name(fold: u8) -> String {
    format!("model_fold{fold}.ckpt")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldRow {
    pub fold: u8,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

pub fn train(cfg: &PipelineConfig, inputs: &Inputs, out: &Path) -> Result<()> {
    let project_dir = inputs.dir(Stage::Project);
    let views = read_views(project_dir)?;
    let rows: Vec<&ViewRow> = views.iter().filter(|v| v.split == Split::Train).collect();
    let images = labeled(project_dir, &rows)?;
    info!("training {FOLDS} folds on {} images", images.len());
    let results = train_kfold(&images, &cfg.model_config(), &cfg.train_config())?;
    let mut log = Vec::new();
    let mut folds = Vec::new();
    for r in &results {
        checkpoint::save(
            &out.join(checkpoint_name(r.fold)),
            &r.model,
            r.fold,
            r.best_epoch,
            r.best_val_acc,
        )?;
        info!(
            "fold {}: best epoch {} val acc {:.4}",
            r.fold, r.best_epoch, r.best_val_acc
        );
        log.extend(r.log.iter().cloned());
        folds.push(FoldRow {
            fold: r.fold,
            best_epoch: r.best_epoch,
            best_val_acc: r.best_val_acc,
        });
    }
    write_training_log(&out.join("training_log.csv"), &log)?;
    write_serialized(&out.join("folds.csv"), &folds)
}

fn load_models(train_dir: &Path) -> Result<Vec<Model>> {
    (1..=FOLDS)
        .map(|k| checkpoint::load(&train_dir.join(checkpoint_name(k))).map(|(m, _)| m))
        .collect()
}

// ----------------------------------------------------------------- eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPrediction {
    pub image: String,
    pub source_id: String,
    pub species: Species,
    pub model: u8,
    pub predicted: Species,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreePrediction {
    pub source_id: String,
    pub species: Species,
    pub model: u8,
    pub predicted: Species,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub model: String,
    pub tree_accuracy: f64,
    pub view_accuracy: f64,
    pub macro_f1: Option<f64>,
}

fn species_of(i: usize) -> Result<Species> {
    Species::from_index(i).ok_or_else(|| Error::InvalidArgument(format!("class index {i}")))
}

fn names() -> Vec<&'static str> {
    Species::ALL.iter().map(|s| s.name()).collect()
}

pub fn eval(_cfg: &PipelineConfig, inputs: &Inputs, out: &Path) -> Result<()> {
    let project_dir = inputs.dir(Stage::Project);
    let views = read_views(project_dir)?;
    let rows: Vec<&ViewRow> = views.iter().filter(|v| v.split == Split::Test).collect();
    let images = labeled(project_dir, &rows)?;
    // Views of one tree are contiguous in manifest order.
    let mut trees: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        match trees.last_mut() {
            Some((t, v)) if *t == r.tree => v.push(i),
            _ => trees.push((r.tree, vec![i])),
        }
    }
    if let Some((t, v)) = trees.iter().find(|(_, v)| v.len() != VIEW_ANGLES.len()) {
        return Err(Error::Precondition(format!(
            "test tree {t} has {} views",
            v.len()
        )));
    }

    let mut models = load_models(inputs.dir(Stage::Train))?;
    let all: Vec<usize> = (0..images.len()).collect();
    let mut view_preds = Vec::new();
    let mut tree_preds = Vec::new();
    let mut acc_rows = Vec::new();
    let mut pooled = ConfusionMatrix::new(Species::COUNT);
    for (k, model) in models.iter_mut().enumerate() {
        let fold = k as u8 + 1;
        let logits = predict_logits(model, &images, &all)?;
        let mut view_correct = 0;
        for (r, l) in rows.iter().zip(&logits) {
            let predicted = species_of(argmax(l))?;
            view_correct += usize::from(predicted == r.species);
            view_preds.push(ViewPrediction {
                image: r.image.clone(),
                source_id: r.source_id.clone(),
                species: r.species,
                model: fold,
                predicted,
            });
        }
        let mut cm = ConfusionMatrix::new(Species::COUNT);
        for (_, idx) in &trees {
            let tree_logits: Vec<Vec<f64>> = idx.iter().map(|&i| logits[i].clone()).collect();
            let predicted = tree_prediction(&tree_logits)?;
            let r = rows[idx[0]];
            cm.add(r.species.index(), predicted)?;
            tree_preds.push(TreePrediction {
                source_id: r.source_id.clone(),
                species: r.species,
                model: fold,
                predicted: species_of(predicted)?,
            });
        }
        let m = cm.metrics();
        acc_rows.push(AccuracyRow {
            model: fold.to_string(),
            tree_accuracy: m.accuracy.unwrap_or(0.0),
            view_accuracy: view_correct as f64 / rows.len().max(1) as f64,
            macro_f1: m.macro_f1,
        });
        info!(
            "model {fold}: tree accuracy {:.4}",
            m.accuracy.unwrap_or(0.0)
        );
        write_confusion_csv(
            &out.join(format!("confusion_model{fold}.csv")),
            &out.join(format!("metrics_model{fold}.csv")),
            &cm,
            &names(),
        )?;
        pooled.merge(&cm)?;
    }
    let n = acc_rows.len() as f64;
    let f1s: Vec<f64> = acc_rows.iter().filter_map(|r| r.macro_f1).collect();
    acc_rows.push(AccuracyRow {
        model: "mean".into(),
        tree_accuracy: acc_rows.iter().map(|r| r.tree_accuracy).sum::<f64>() / n,
        view_accuracy: acc_rows.iter().map(|r| r.view_accuracy).sum::<f64>() / n,
        macro_f1: (!f1s.is_empty()).then(|| f1s.iter().sum::<f64>() / f1s.len() as f64),
    });
    write_confusion_csv(
        &out.join("confusion_all.csv"),
        &out.join("metrics_all.csv"),
        &pooled,
        &names(),
    )?;
    write_serialized(&out.join(VIEW_PREDICTIONS_FILE), &view_preds)?;
    write_serialized(&out.join(TREE_PREDICTIONS_FILE), &tree_preds)?;
    write_serialized(&out.join(ACCURACY_FILE), &acc_rows)
}

// -------------------------------------------------------------- explain

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub species: Species,
    pub source_id: String,
    pub image: String,
    /// Views of this tree correctly classified by every model.
    pub eligible_views: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    /// File name inside `maps/`.
    pub map: String,
    pub image: String,
    pub source_id: String,
    pub species: Species,
    pub model: u8,
    pub gamma: f64,
    pub contrastive_1: Option<Species>,
    pub contrastive_2: Option<Species>,
    pub contrastive_3: Option<Species>,
}

impl MapRecord {
    pub fn contrastive(&self) -> Vec<Species> {
        [self.contrastive_1, self.contrastive_2, self.contrastive_3]
            .into_iter()
            .flatten()
            .collect()
    }
}

/// Per species: test trees with at least one view every model classifies
/// correctly, a random subset of at most `limit` of them, and one random
/// eligible view of each.
pub fn select_views(preds: &[ViewPrediction], limit: usize, seed: u64) -> Vec<SelectionRow> {
    // image -> (species, source_id, all models correct)
    let mut per_image: BTreeMap<&str, (Species, &str, bool)> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for p in preds {
        let e = per_image.entry(&p.image).or_insert_with(|| {
            order.push(&p.image);
            (p.species, &p.source_id, true)
        });
        e.2 &= p.predicted == p.species;
    }
    let mut out = Vec::new();
    for species in Species::ALL {
        let mut trees: Vec<(&str, Vec<&str>)> = Vec::new();
        for &img in &order {
            let (s, id, ok) = per_image[img];
            if s != species {
                continue;
            }
            match trees.iter_mut().find(|(t, _)| *t == id) {
                Some((_, v)) => {
                    if ok {
                        v.push(img)
                    }
                }
                None => trees.push((id, if ok { vec![img] } else { vec![] })),
            }
        }
        trees.retain(|(_, v)| !v.is_empty());
        if trees.is_empty() {
            warn!("{species}: no test tree has a view every model classifies correctly");
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(species.index() as u64 + 1);
        trees.shuffle(&mut rng);
        trees.truncate(limit);
        for (id, v) in trees {
            let image = v[rng.random_range(0..v.len())];
            out.push(SelectionRow {
                species,
                source_id: id.to_string(),
                image: image.to_string(),
                eligible_views: v.len(),
            });
        }
    }
    out
}

pub fn map_file_name(image: &str, model: u8) -> String {
    let stem = image.strip_suffix(".pgm").unwrap_or(image);
    format!("{stem}_m{model}.pgm")
}

pub fn explain(cfg: &PipelineConfig, inputs: &Inputs, out: &Path) -> Result<()> {
    let project_dir = inputs.dir(Stage::Project);
    let preds: Vec<ViewPrediction> =
        read_serialized(&inputs.dir(Stage::Eval).join(VIEW_PREDICTIONS_FILE))?;
    let selection = select_views(&preds, cfg.explain.trees_per_species, cfg.seeds.explain);
    write_serialized(&out.join(SELECTION_FILE), &selection)?;
    let map_dir = out.join("maps");
    mkdir(&map_dir)?;
    let models = load_models(inputs.dir(Stage::Train))?;
    let records: Vec<Result<Vec<MapRecord>>> = selection
        .par_iter()
        .map(|sel| {
            let pixels = load_pixels(project_dir, &sel.image)?;
            let target = sel.species.index();
            let mut recs = Vec::new();
            for (k, model) in models.iter().enumerate() {
                let mut model = model.clone();
                let fold = k as u8 + 1;
                let (activation, logits) = activation_of(&mut model, &pixels.values)?;
                let mut contrastive = select_contrastive(&logits, target)?;
                contrastive.truncate(cfg.cam.contrastive);
                let req = CamRequest {
                    target,
                    contrastive: contrastive.clone(),
                    gamma: cfg.cam.gamma,
                };
                let low = cam_from_activation(&mut model.head, &activation, &req)?;
                let map = saliency_map(&low, DOWNSAMPLE, req)?;
                let name = map_file_name(&sel.image, fold);
                save_saliency(&map_dir.join(&name), &map)?;
                let c: Vec<Option<Species>> = (0..3)
                    .map(|i| contrastive.get(i).and_then(|&c| Species::from_index(c)))
                    .collect();
                recs.push(MapRecord {
                    map: name,
                    image: sel.image.clone(),
                    source_id: sel.source_id.clone(),
                    species: sel.species,
                    model: fold,
                    gamma: cfg.cam.gamma,
                    contrastive_1: c[0],
                    contrastive_2: c[1],
                    contrastive_3: c[2],
                });
            }
            Ok(recs)
        })
        .collect();
    let mut all = Vec::new();
    for r in records {
        all.extend(r?);
    }
    info!("{} saliency maps for {} views", all.len(), selection.len());
    write_serialized(&out.join(MAP_RECORDS_FILE), &all)
}

// ------------------------------------------------------------ partition

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionRow {
    pub image: String,
    pub annotation: AnnotationSource,
    pub crown_base_row: usize,
    pub lowest_crown_col: usize,
    pub lowest_crown_row: usize,
    pub stem_width: usize,
    pub tree_px: usize,
    pub stem_px: usize,
    pub crown_px: usize,
    pub crown_base_px: usize,
    pub crown_middle_px: usize,
    pub crown_top_px: usize,
    pub crown_edge_px: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFailure {
    pub image: String,
    pub error: String,
}

pub fn segment_paths(dir: &Path, image: &str) -> (PathBuf, PathBuf) {
    let stem = image.strip_suffix(".pgm").unwrap_or(image);
    let seg = dir.join("segments");
    (
        seg.join(format!("{stem}_labels.pgm")),
        seg.join(format!("{stem}_edge.pgm")),
    )
}

pub fn partition(cfg: &PipelineConfig, inputs: &Inputs, out: &Path) -> Result<()> {
    let project_dir = inputs.dir(Stage::Project);
    let selection: Vec<SelectionRow> =
        read_serialized(&inputs.dir(Stage::Explain).join(SELECTION_FILE))?;
    let px = cfg.partition_config().for_canvas(cfg.canvas)?;
    mkdir(&out.join("segments"))?;
    let results: Vec<Result<std::result::Result<PartitionRow, PartitionFailure>>> = selection
        .par_iter()
        .map(|sel| {
            let img = load_pixels(project_dir, &sel.image)?;
            let ann_key = cfg
                .partition
                .annotations
                .as_ref()
                .map(|d| d.join(&sel.image));
            let part = match partition_image(&img, &px, ann_key.as_deref()) {
                Ok(p) => p,
                Err(e @ (Error::EmptyTree | Error::DegenerateCrown)) => {
                    return Ok(Err(PartitionFailure {
                        image: sel.image.clone(),
                        error: e.to_string(),
                    }))
                }
                Err(e) => return Err(e),
            };
            check_partition(&part.tree, &part.segments)?;
            let (labels, edge) = segment_paths(out, &sel.image);
            save_segments(&labels, &edge, &part.segments)?;
            let s = &part.segments;
            let a = &part.annotation;
            Ok(Ok(PartitionRow {
                image: sel.image.clone(),
                annotation: a.source,
                crown_base_row: a.crown_base_row,
                lowest_crown_col: a.lowest_crown_pixel.0,
                lowest_crown_row: a.lowest_crown_pixel.1,
                stem_width: a.stem_width,
                tree_px: s.count(Segment::Tree),
                stem_px: s.count(Segment::Stem),
                crown_px: s.count(Segment::Crown),
                crown_base_px: s.count(Segment::CrownBase),
                crown_middle_px: s.count(Segment::CrownMiddle),
                crown_top_px: s.count(Segment::CrownTop),
                crown_edge_px: s.count(Segment::CrownEdge),
            }))
        })
        .collect();
    let (mut ok, mut failed) = (Vec::new(), Vec::new());
    for r in results {
        match r? {
            Ok(row) => ok.push(row),
            Err(f) => {
                warn!("partition of {} failed: {}", f.image, f.error);
                failed.push(f);
            }
        }
    }
    info!("segmented {} views, {} failed", ok.len(), failed.len());
    write_serialized(&out.join(PARTITION_FILE), &ok)?;
    write_serialized(&out.join(PARTITION_FAILURES_FILE), &failed)
}

// ------------------------------------------------------------ attribute

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub map: String,
    pub species: Species,
    pub model: u8,
    pub threshold: f64,
    pub nstot: u64,
    pub nst: u64,
    pub nss: u64,
    pub nsc: u64,
    pub nscb: u64,
    pub nscm: u64,
    pub nsct: u64,
    pub nsce: u64,
}

impl CountRow {
    fn new(map: &MapRecord, threshold: f64, c: &SalientCounts) -> Self {
        Self {
            map: map.map.clone(),
            species: map.species,
            model: map.model,
            threshold,
            nstot: c.nstot,
            nst: c.nst,
            nss: c.nss,
            nsc: c.nsc,
            nscb: c.nscb,
            nscm: c.nscm,
            nsct: c.nsct,
            nsce: c.nsce,
        }
    }

    pub fn counts(&self) -> SalientCounts {
        SalientCounts {
            nstot: self.nstot,
            nst: self.nst,
            nss: self.nss,
            nsc: self.nsc,
            nscb: self.nscb,
            nscm: self.nscm,
            nsct: self.nsct,
            nsce: self.nsce,
        }
    }
}

/// Overlay with the tree outline (tree pixels with a background
/// 4-neighbour) drawn in red.
fn write_gallery_image(
    path: &Path,
    base: &GrayImage,
    map: &GrayImage,
    threshold: f64,
    seg: &SegmentMask,
) -> Result<()> {
    let mut rgb = crate::camxai::overlay(base, map, Some(threshold))?;
    let (w, h) = (seg.width, seg.height);
    let inside = |c: isize, r: isize| {
        c >= 0
            && r >= 0
            && (c as usize) < w
            && (r as usize) < h
            && seg.contains(Segment::Tree, r as usize * w + c as usize)
    };
    for r in 0..h as isize {
        for c in 0..w as isize {
            if inside(c, r)
                && [(0, -1), (1, 0), (0, 1), (-1, 0)]
                    .iter()
                    .any(|(dc, dr)| !inside(c + dc, r + dr))
            {
                let i = 3 * (r as usize * w + c as usize);
                rgb[i..i + 3].copy_from_slice(&[255, 0, 0]);
            }
        }
    }
    write_png_rgb(path, w, h, &rgb)
}

pub fn attribute(_cfg: &PipelineConfig, inputs: &Inputs, out: &Path) -> Result<()> {
    let project_dir = inputs.dir(Stage::Project);
    let explain_dir = inputs.dir(Stage::Explain);
    let part_dir = inputs.dir(Stage::Partition);
    let maps: Vec<MapRecord> = read_serialized(&explain_dir.join(MAP_RECORDS_FILE))?;
    let segmented: Vec<PartitionRow> = read_serialized(&part_dir.join(PARTITION_FILE))?;
    let segmented: BTreeMap<&str, &PartitionRow> =
        segmented.iter().map(|r| (r.image.as_str(), r)).collect();
    let gallery = out.join("overlays");
    mkdir(&gallery)?;
    let rows: Vec<Result<Option<(CountRow, Vec<RatioRecord>)>>> = maps
        .par_iter()
        .map(|m| {
            if !segmented.contains_key(m.image.as_str()) {
                return Ok(None);
            }
            let sal = load_saliency(&explain_dir.join("maps").join(&m.map))?;
            let (labels, edge) = segment_paths(part_dir, &m.image);
            let seg = load_segments(&labels, &edge)?;
            let t = otsu_threshold(&sal.image)?;
            let counts = count_salient(&sal.image, &seg, t)?;
            let base = load_pixels(project_dir, &m.image)?;
            let png = m.map.strip_suffix(".pgm").unwrap_or(&m.map).to_string() + ".png";
            write_gallery_image(&gallery.join(png), &base, &sal.image, t, &seg)?;
            let recs = ratio_records(m.species, usize::from(m.model), &ratios(&counts));
            Ok(Some((CountRow::new(m, t, &counts), recs)))
        })
        .collect();
    let (mut counts, mut records) = (Vec::new(), Vec::new());
    for r in rows {
        if let Some((c, rec)) = r? {
            counts.push(c);
            records.extend(rec);
        }
    }
    info!("attributed {} maps", counts.len());
    write_serialized(&out.join(COUNTS_FILE), &counts)?;
    write_ratio_csv(&out.join(RATIOS_FILE), &records)
}

// -------------------------------------------------------------- analyze

/// Pooled mean stem ratio of the artifact species against the other
/// broadleaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortcutCheck {
    pub artifact_species: Option<Species>,
    /// Pooled mean rNss per species with at least one defined value.
    pub pooled_stem_ratio: BTreeMap<Species, f64>,
    /// Artifact species exceeds every other broadleaf species with data.
    pub artifact_exceeds_broadleaves: Option<bool>,
}

pub fn analyze(cfg: &PipelineConfig, inputs: &Inputs, out: &Path) -> Result<()> {
    let attr = inputs.dir(Stage::Attribute);
    let records = attribmetrics::read_ratio_csv(&attr.join(RATIOS_FILE))?;
    let summary = aggregate_ratio_stats(&records);
    write_summary_csv(&out.join(RATIO_SUMMARY_FILE), &summary)?;
    write_serialized(&out.join(NORMALITY_FILE), &normality_table(&records))?;
    for segment in Segment::ALL {
        let groups = species_groups(&records, segment);
        if groups.len() < 2 {
            continue;
        }
        match dunn_holm(&groups) {
            Ok(rep) => write_test_csv(&out.join(format!("dunn_{}.csv", segment.name())), &rep)?,
            Err(Error::Degenerate(m)) => warn!("Dunn's test on {}: {m}", segment.name()),
            Err(e) => return Err(e),
        }
    }

    let maps: Vec<MapRecord> = read_serialized(&inputs.dir(Stage::Explain).join(MAP_RECORDS_FILE))?;
    let freq_input: Vec<ContrastiveRecord> = maps
        .iter()
        .map(|m| ContrastiveRecord {
            target: m.species,
            contrastive: m.contrastive(),
        })
        .collect();
    write_frequency_csv(
        &out.join(FREQUENCY_FILE),
        &contrastive_frequency(&freq_input),
    )?;

    let artifact = cfg.artifact_species()?;
    let pooled: BTreeMap<Species, f64> = Species::ALL
        .iter()
        .filter_map(|&s| pooled_mean(&summary, s, Segment::Stem).map(|m| (s, m)))
        .collect();
    let exceeds = artifact.and_then(|a| {
        let own = *pooled.get(&a)?;
        let others: Vec<f64> = Species::ALL
            .iter()
            .filter(|&&s| s != a && s.is_broadleaf())
            .filter_map(|s| pooled.get(s).copied())
            .collect();
        (!others.is_empty()).then(|| others.iter().all(|&o| own > o))
    });
    write_json(
        &out.join(SHORTCUT_FILE),
        &ShortcutCheck {
            artifact_species: artifact,
            pooled_stem_ratio: pooled,
            artifact_exceeds_broadleaves: exceeds,
        },
    )
}

// --------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub config_hash: String,
    pub seeds: super::config::Seeds,
    pub canvas: usize,
    pub stage_keys: BTreeMap<String, String>,
    pub mean_tree_accuracy: f64,
    pub explained_views: usize,
    pub saliency_maps: usize,
    pub segmented_views: usize,
    pub partition_failures: usize,
    pub attributed_maps: usize,
    pub shortcut: ShortcutCheck,
}

pub fn report(
    cfg: &PipelineConfig,
    inputs: &Inputs,
    keys: BTreeMap<String, String>,
    out: &Path,
) -> Result<()> {
    let eval = inputs.dir(Stage::Eval);
    let analyze = inputs.dir(Stage::Analyze);
    let attr = inputs.dir(Stage::Attribute);
    let explain = inputs.dir(Stage::Explain);
    let part = inputs.dir(Stage::Partition);

    let mut files: Vec<(PathBuf, String)> = vec![
        (eval.join("confusion_all.csv"), "confusion_all.csv".into()),
        (eval.join("metrics_all.csv"), "metrics_all.csv".into()),
        (eval.join(ACCURACY_FILE), ACCURACY_FILE.into()),
        (analyze.join(RATIO_SUMMARY_FILE), RATIO_SUMMARY_FILE.into()),
        (analyze.join(NORMALITY_FILE), NORMALITY_FILE.into()),
        (analyze.join(FREQUENCY_FILE), FREQUENCY_FILE.into()),
        (attr.join(RATIOS_FILE), RATIOS_FILE.into()),
        (
            inputs.dir(Stage::Train).join("training_log.csv"),
            "training_log.csv".into(),
        ),
    ];
    for k in 1..=FOLDS {
        for f in [
            format!("confusion_model{k}.csv"),
            format!("metrics_model{k}.csv"),
        ] {
            files.push((eval.join(&f), f));
        }
    }
    for segment in Segment::ALL {
        let f = format!("dunn_{}.csv", segment.name());
        if analyze.join(&f).exists() {
            files.push((analyze.join(&f), f));
        }
    }
    for (from, name) in &files {
        if !from.exists() {
            return Err(Error::Precondition(format!(
                "missing stage output {}",
                from.display()
            )));
        }
        copy(from, &out.join(name))?;
    }
    let mut gallery: Vec<PathBuf> = fs::read_dir(attr.join("overlays"))
        .map_err(|e| Error::io(attr.join("overlays"), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    gallery.sort();
    for p in &gallery {
        copy(
            p,
            &out.join("gallery").join(p.file_name().expect("file name")),
        )?;
    }

    let acc: Vec<AccuracyRow> = read_serialized(&eval.join(ACCURACY_FILE))?;
    let mean = acc
        .iter()
        .find(|r| r.model == "mean")
        .map(|r| r.tree_accuracy)
        .ok_or_else(|| Error::Precondition("accuracy table lacks the mean row".into()))?;
    let selection: Vec<SelectionRow> = read_serialized(&explain.join(SELECTION_FILE))?;
    let maps: Vec<MapRecord> = read_serialized(&explain.join(MAP_RECORDS_FILE))?;
    let segmented: Vec<PartitionRow> = read_serialized(&part.join(PARTITION_FILE))?;
    let failures: Vec<PartitionFailure> = read_serialized(&part.join(PARTITION_FAILURES_FILE))?;
    let counts: Vec<CountRow> = read_serialized(&attr.join(COUNTS_FILE))?;
    let shortcut: ShortcutCheck = read_json(&analyze.join(SHORTCUT_FILE))?;
    write_json(
        &out.join(SUMMARY_FILE),
        &ReportSummary {
            config_hash: cfg.hash(),
            seeds: cfg.seeds,
            canvas: cfg.canvas,
            stage_keys: keys,
            mean_tree_accuracy: mean,
            explained_views: selection.len(),
            saliency_maps: maps.len(),
            segmented_views: segmented.len(),
            partition_failures: failures.len(),
            attributed_maps: counts.len(),
            shortcut,
        },
    )?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)
        .map_err(|e| Error::io(out.join("config.toml"), e))
}

pub(crate) fn wrap(stage: Stage, r: Result<()>) -> Result<()> {
    r.map_err(stage_err(stage))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(
        image: &str,
        id: &str,
        species: Species,
        model: u8,
        predicted: Species,
    ) -> ViewPrediction {
        ViewPrediction {
            image: image.into(),
            source_id: id.into(),
            species,
            model,
            predicted,
        }
    }

    #[test]
    fn selection_needs_every_model_correct() {
        use Species::*;
        let mut preds = Vec::new();
        for m in 1..=5 {
            // Tree a: view 1 wrong for model 3, view 2 right everywhere.
            preds.push(pred("a1", "a", Oak, m, if m == 3 { Ash } else { Oak }));
            preds.push(pred("a2", "a", Oak, m, Oak));
            // Tree b: never right for model 1.
            preds.push(pred("b1", "b", Oak, m, if m == 1 { Pine } else { Oak }));
            preds.push(pred("c1", "c", Pine, m, Pine));
        }
        let sel = select_views(&preds, 20, 9);
        assert_eq!(sel.len(), 2);
        assert_eq!(
            (sel[0].species, sel[0].image.as_str(), sel[0].eligible_views),
            (Oak, "a2", 1)
        );
        assert_eq!((sel[1].species, sel[1].source_id.as_str()), (Pine, "c"));
        assert_eq!(select_views(&preds, 20, 9), sel);
    }

    #[test]
    fn selection_caps_without_resampling() {
        let mut preds = Vec::new();
        for t in 0..30 {
            for v in 0..4 {
                for m in 1..=5 {
                    preds.push(pred(
                        &format!("t{t}_{v}"),
                        &format!("t{t}"),
                        Species::Beech,
                        m,
                        Species::Beech,
                    ));
                }
            }
        }
        let sel = select_views(&preds, 20, 1);
        assert_eq!(sel.len(), 20);
        let mut ids: Vec<&str> = sel.iter().map(|s| s.source_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 20);
        assert_eq!(select_views(&preds[..9 * 20], 20, 1).len(), 9);
        assert_ne!(select_views(&preds, 20, 2), sel);
    }

    #[test]
    fn file_names() {
        assert_eq!(map_file_name("ash_003_a45.pgm", 2), "ash_003_a45_m2.pgm");
        let (l, e) = segment_paths(Path::new("/x"), "oak_001_a0.pgm");
        assert_eq!(l, Path::new("/x/segments/oak_001_a0_labels.pgm"));
        assert_eq!(e, Path::new("/x/segments/oak_001_a0_edge.pgm"));
    }
}
