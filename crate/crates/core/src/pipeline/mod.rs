//! Staged, cached end-to-end run.
//!
//! Every stage writes into `<out>/<stage>-<key>`, where the key hashes the
//! stage's parameters together with the keys of the stages it reads. A
//! stage whose directory exists is not re-run; work happens in a temporary
//! directory that is renamed into place on success.

pub mod config;
pub mod stages;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::Serialize;
use serde_json::json;

use config::hex_digest;
pub use config::{PipelineConfig, Seeds};
use stages::Inputs;

use crate::error::{Error, Result};

/// Bumped when a stage's output format changes.
const FORMAT_VERSION: u32 = 1;
/// Hex digits of the key kept in directory names.
pub const KEY_CHARS: usize = 16;
pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Project,
    Train,
    Eval,
    Explain,
    Partition,
    Attribute,
    Analyze,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Synth,
        Stage::Project,
        Stage::Train,
        Stage::Eval,
        Stage::Explain,
        Stage::Partition,
        Stage::Attribute,
        Stage::Analyze,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Project => "project",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Explain => "explain",
            Stage::Partition => "partition",
            Stage::Attribute => "attribute",
            Stage::Analyze => "analyze",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this one reads.
    pub fn upstream(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Synth => &[],
            Project => &[Synth],
            Train => &[Project],
            Eval => &[Project, Train],
            Explain => &[Project, Train, Eval],
            Partition => &[Project, Explain],
            Attribute => &[Project, Explain, Partition],
            Analyze => &[Explain, Attribute],
            Report => &[Train, Eval, Explain, Partition, Attribute, Analyze],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

/// What happened to one stage during a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub key: String,
    pub dir: PathBuf,
    pub cached: bool,
    pub seconds: f64,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub out: PathBuf,
    keys: BTreeMap<Stage, String>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let mut p = Self {
            config,
            out: out.into(),
            keys: BTreeMap::new(),
        };
        for stage in Stage::ALL {
            let key = p.compute_key(stage)?;
            p.keys.insert(stage, key);
        }
        Ok(p)
    }

    fn params(&self, stage: Stage) -> Result<serde_json::Value> {
        let c = &self.config;
        Ok(match stage {
            Stage::Synth => json!({ "synth": c.synth, "seed": c.seeds.synth }),
            Stage::Project => json!({ "canvas": c.canvas, "seed": c.seeds.jitter }),
            Stage::Train => json!({
                "model": c.model,
                "train": c.train,
                "init": c.seeds.init,
                "seed": c.seeds.train,
            }),
            Stage::Explain => {
                json!({ "cam": c.cam, "explain": c.explain, "seed": c.seeds.explain })
            }
            Stage::Partition => json!({
                "constants": c.partition_config(),
                "annotations": annotation_digest(c.partition.annotations.as_deref())?,
            }),
            Stage::Analyze => json!({ "artifact": c.artifact_species()? }),
            Stage::Report => json!({ "config": c.hash() }),
            Stage::Eval | Stage::Attribute => json!({}),
        })
    }

    fn compute_key(&self, stage: Stage) -> Result<String> {
        let upstream: BTreeMap<&str, &String> = stage
            .upstream()
            .iter()
            .map(|s| (s.name(), &self.keys[s]))
            .collect();
        let doc = json!({
            "stage": stage.name(),
            "version": FORMAT_VERSION,
            "params": self.params(stage)?,
            "upstream": upstream,
        });
        Ok(hex_digest(&serde_json::to_vec(&doc).expect("json")))
    }

    pub fn key(&self, stage: Stage) -> &str {
        &self.keys[&stage]
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out.join(format!(
            "{}-{}",
            stage.name(),
            &self.key(stage)[..KEY_CHARS]
        ))
    }

    pub fn is_cached(&self, stage: Stage) -> bool {
        self.stage_dir(stage).is_dir()
    }

    /// Runs `target` and every stage it depends on, in order.
    pub fn run_through(&self, target: Stage) -> Result<Vec<StageOutcome>> {
        let mut needed = vec![false; Stage::ALL.len()];
        mark(target, &mut needed);
        let mut outcomes = Vec::new();
        for stage in Stage::ALL.into_iter().filter(|s| needed[*s as usize]) {
            outcomes.push(self.run_stage(stage)?);
        }
        Ok(outcomes)
    }

    /// Runs every stage and records timings in `<out>/run.json`.
    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        let outcomes = self.run_through(Stage::Report)?;
        let path = self.out.join(RUN_FILE);
        let text = serde_json::to_string_pretty(&json!({
            "config_hash": self.config.hash(),
            "stages": outcomes,
        }))
        .expect("json");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(outcomes)
    }

    /// Runs one stage, assuming its upstream directories exist.
    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        let dir = self.stage_dir(stage);
        let key = self.key(stage).to_string();
        if dir.is_dir() {
            info!("{stage}: cached at {}", dir.display());
            return Ok(StageOutcome {
                stage,
                key,
                dir,
                cached: true,
                seconds: 0.0,
            });
        }
        let mut dirs = BTreeMap::new();
        for &up in stage.upstream() {
            let d = self.stage_dir(up);
            if !d.is_dir() {
                return Err(Error::Stage {
                    stage: stage.name().into(),
                    cause: Box::new(Error::Precondition(format!(
                        "upstream stage {up} has not run"
                    ))),
                });
            }
            dirs.insert(up, d);
        }
        let tmp = self
            .out
            .join(format!(".{}-{}.tmp", stage.name(), &key[..KEY_CHARS]));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        info!("{stage}: running");
        let start = Instant::now();
        let inputs = Inputs { dirs: &dirs };
        let cfg = &self.config;
        let result = match stage {
            Stage::Synth => stages::synth(cfg, &tmp),
            Stage::Project => stages::project(cfg, &inputs, &tmp),
            Stage::Train => stages::train(cfg, &inputs, &tmp),
            Stage::Eval => stages::eval(cfg, &inputs, &tmp),
            Stage::Explain => stages::explain(cfg, &inputs, &tmp),
            Stage::Partition => stages::partition(cfg, &inputs, &tmp),
            Stage::Attribute => stages::attribute(cfg, &inputs, &tmp),
            Stage::Analyze => stages::analyze(cfg, &inputs, &tmp),
            Stage::Report => {
                let keys = self
                    .keys
                    .iter()
                    .map(|(s, k)| (s.name().to_string(), k.clone()))
                    .collect();
                stages::report(cfg, &inputs, keys, &tmp)
            }
        };
        stages::wrap(stage, result)?;
        fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
        let seconds = start.elapsed().as_secs_f64();
        info!("{stage}: done in {seconds:.1} s");
        Ok(StageOutcome {
            stage,
            key,
            dir,
            cached: false,
            seconds,
        })
    }
}

fn mark(stage: Stage, needed: &mut [bool]) {
    if !needed[stage as usize] {
        needed[stage as usize] = true;
        for &up in stage.upstream() {
            mark(up, needed);
        }
    }
}

/// Digest of the annotation files (names and contents) in `dir`.
fn annotation_digest(dir: Option<&Path>) -> Result<Option<String>> {
    let Some(dir) = dir else { return Ok(None) };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut buf = Vec::new();
    for f in files {
        buf.extend_from_slice(f.file_name().expect("file").as_encoded_bytes());
        buf.push(0);
        buf.extend_from_slice(hex_digest(&fs::read(&f).map_err(|e| Error::io(&f, e))?).as_bytes());
    }
    Ok(Some(hex_digest(&buf)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(cfg: PipelineConfig) -> BTreeMap<Stage, String> {
        Pipeline::new(cfg, "/tmp/unused").unwrap().keys
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
            assert!(s.upstream().iter().all(|u| *u < s));
        }
        assert!("render".parse::<Stage>().is_err());
    }

    #[test]
    fn train_change_keeps_projections() {
        let base = keys(PipelineConfig::default());
        let mut cfg = PipelineConfig::default();
        cfg.train.epochs += 1;
        let changed = keys(cfg);
        for s in [Stage::Synth, Stage::Project] {
            assert_eq!(base[&s], changed[&s], "{s}");
        }
        for s in &Stage::ALL[2..] {
            assert_ne!(base[s], changed[s], "{s}");
        }
    }

    #[test]
    fn partition_change_keeps_training() {
        let base = keys(PipelineConfig::default());
        let mut cfg = PipelineConfig::default();
        cfg.partition.edge_px += 1;
        let changed = keys(cfg);
        for s in &Stage::ALL[..5] {
            assert_eq!(base[s], changed[s], "{s}");
        }
        for s in &Stage::ALL[5..] {
            assert_ne!(base[s], changed[s], "{s}");
        }
    }

    #[test]
    fn canvas_change_invalidates_all_but_synth() {
        let base = keys(PipelineConfig::default());
        let cfg = PipelineConfig {
            canvas: 320,
            ..PipelineConfig::default()
        };
        let changed = keys(cfg);
        assert_eq!(base[&Stage::Synth], changed[&Stage::Synth]);
        assert!(Stage::ALL[1..].iter().all(|s| base[s] != changed[s]));
    }

    #[test]
    fn annotations_enter_the_partition_key() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.partition.annotations = Some(dir.path().to_path_buf());
        let empty = keys(cfg.clone());
        fs::write(dir.path().join("a.pgm.ann.json"), "{}").unwrap();
        let one = keys(cfg.clone());
        assert_eq!(empty[&Stage::Explain], one[&Stage::Explain]);
        assert_ne!(empty[&Stage::Partition], one[&Stage::Partition]);
        fs::write(dir.path().join("a.pgm.ann.json"), "{ }").unwrap();
        assert_ne!(keys(cfg)[&Stage::Partition], one[&Stage::Partition]);
    }

    #[test]
    fn missing_upstream_is_a_stage_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(PipelineConfig::default(), dir.path()).unwrap();
        match p.run_stage(Stage::Eval) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "eval"),
            other => panic!("{other:?}"),
        }
    }
}
