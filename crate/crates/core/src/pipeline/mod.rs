//! End-to-end orchestration: ingest, curate, consolidate, render.
//!
//! Each stage reads the previous stage's directory under the output root and
//! writes its own (`ingest/<source>/`, `curate/`, `consolidate/`, `render/`).
//! A stage is assembled in a staging directory and renamed into place, so an
//! interrupted run never leaves a half-written stage behind. Stages can be run
//! alone as long as their input directory exists.

pub mod stats;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use stats::{corpus_stats, stats, KindStats, StatsReport};

use crate::consolidate::{consolidate, verify_manifest, MixSpec, ReferenceTable, VerifyReport, MANIFEST_FILE};
use crate::convo::{render, RenderOptions, TemplatePack, LATER_STAGE_BUDGET};
use crate::curate::{curate, CurateOptions, CurationLedger, Lexicon, DEFAULT_DEDUP_IOU};
use crate::ingest::{ingest, IngestLedger, IngestOptions, SourceDescriptor, LEDGER_FILE};
use crate::model::records::{
    self, assemble_images, image_rows, read_jsonl_opt, ImageRecord, RecordError, RegionRecord,
    CONVERSATIONS_FILE, IMAGES_FILE, REGIONS_FILE, SAMPLES_FILE,
};
use crate::model::{AnnotatedImage, TaskSample, DEFAULT_COORD_BINS};

/// Overrides `output_dir` from the config.
pub const OUT_ENV: &str = "FORGE_OUT";

const STAGING_PREFIX: &str = ".staging-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Curate,
    Consolidate,
    Render,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Ingest, Stage::Curate, Stage::Consolidate, Stage::Render];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Curate => "curate",
            Stage::Consolidate => "consolidate",
            Stage::Render => "render",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {message}")]
    Data { stage: Stage, message: String },
    #[error("{stage}: verification failed: {message}")]
    Verification { stage: Stage, message: String },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Data { .. } => 2,
            PipelineError::Verification { .. } => 3,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Config(_) => None,
            PipelineError::Data { stage, .. } | PipelineError::Verification { stage, .. } => Some(*stage),
        }
    }

    fn data(stage: Stage) -> impl Fn(String) -> PipelineError {
        move |message| PipelineError::Data { stage, message }
    }
}

fn default_dedup_iou() -> f64 {
    DEFAULT_DEDUP_IOU
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationConfig {
    #[serde(default = "default_dedup_iou")]
    pub dedup_iou: f64,
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    /// Replaces the template pack's responsive phrases when set.
    #[serde(default)]
    pub responsive_phrases: Option<Vec<String>>,
    #[serde(default = "yes")]
    pub task_level: bool,
    #[serde(default = "yes")]
    pub annotation_level: bool,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            dedup_iou: DEFAULT_DEDUP_IOU,
            lexicon: None,
            responsive_phrases: None,
            task_level: true,
            annotation_level: true,
        }
    }
}

fn default_bins() -> u32 {
    DEFAULT_COORD_BINS
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// The JSON config document. Relative paths resolve against the directory
/// holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Drives curation, consolidation and rendering. There is no default.
    pub seed: u64,
    #[serde(default)]
    pub jobs: Option<usize>,
    #[serde(default = "default_bins")]
    pub coord_bins: u32,
    pub sources: Vec<SourceDescriptor>,
    #[serde(default)]
    pub lenient: bool,
    #[serde(default)]
    pub curation: CurationConfig,
    pub mix: PathBuf,
    /// Reference table checked against the consolidation manifest.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    pub templates: PathBuf,
    #[serde(default)]
    pub budget: Option<u64>,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

/// A config with every referenced file loaded and validated.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub mix: MixSpec,
    pub reference: Option<ReferenceTable>,
    pub pack: TemplatePack,
    pub lexicon: Lexicon,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn must_exist(what: &str, p: &Path) -> Result<(), PipelineError> {
    if p.exists() {
        Ok(())
    } else {
        Err(PipelineError::Config(format!("{what} {} does not exist", p.display())))
    }
}

impl Pipeline {
    /// Reads and checks a config. Nothing is written.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let cfg_err = |e: String| PipelineError::Config(format!("{}: {e}", path.display()));
        let bytes = fs::read(path).map_err(|e| cfg_err(e.to_string()))?;
        let config: PipelineConfig = serde_json::from_slice(&bytes).map_err(|e| cfg_err(e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let out_override = std::env::var_os(OUT_ENV).map(PathBuf::from);
        Self::from_config(config, base, out_override)
    }

    pub fn from_config(mut config: PipelineConfig, base: &Path, out_override: Option<PathBuf>) -> Result<Self, PipelineError> {
        let cfg_err = PipelineError::Config;
        if config.jobs == Some(0) {
            return Err(cfg_err("jobs must be at least 1".into()));
        }
        if config.coord_bins < 2 {
            return Err(cfg_err(format!("coord_bins {} must be at least 2", config.coord_bins)));
        }
        if !(0.0..=1.0).contains(&config.curation.dedup_iou) {
            return Err(cfg_err(format!("dedup_iou {} outside [0, 1]", config.curation.dedup_iou)));
        }
        let mut names = BTreeSet::new();
        for s in &mut config.sources {
            if !names.insert(s.name) {
                return Err(cfg_err(format!("source {} listed twice", s.name.as_str())));
            }
            s.path = resolve(base, &s.path);
            must_exist("source", &s.path)?;
        }
        config.mix = resolve(base, &config.mix);
        config.templates = resolve(base, &config.templates);
        must_exist("mix", &config.mix)?;
        must_exist("template pack", &config.templates)?;
        config.reference = config.reference.as_deref().map(|p| resolve(base, p));
        if let Some(p) = &config.reference {
            must_exist("reference table", p)?;
        }
        config.curation.lexicon = config.curation.lexicon.as_deref().map(|p| resolve(base, p));
        if let Some(p) = &config.curation.lexicon {
            must_exist("lexicon", p)?;
        }
        config.output_dir = match out_override {
            Some(o) => o,
            None => resolve(base, &config.output_dir),
        };

        let mut mix = MixSpec::load(&config.mix).map_err(|e| cfg_err(e.to_string()))?;
        mix.seed = config.seed;
        let reference = match &config.reference {
            Some(p) => Some(records::read_json(p).map_err(|e| cfg_err(e.to_string()))?),
            None => None,
        };
        let mut pack = TemplatePack::load(&config.templates).map_err(|e| cfg_err(e.to_string()))?;
        if let Some(phrases) = &config.curation.responsive_phrases {
            pack.responsive_phrases = phrases.clone();
            pack.validate().map_err(|e| cfg_err(e.to_string()))?;
        }
        let lexicon = match &config.curation.lexicon {
            Some(p) => Lexicon::load(p).map_err(|e| cfg_err(e.to_string()))?,
            None => Lexicon::default(),
        };
        if let Some(b) = config.budget {
            crate::convo::check_budget(b).map_err(|e| cfg_err(e.to_string()))?;
        }
        Ok(Self {
            config,
            mix,
            reference,
            pack,
            lexicon,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.output_dir
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.config.output_dir.join(stage.as_str())
    }

    fn curate_options(&self) -> CurateOptions {
        let c = &self.config.curation;
        CurateOptions {
            task_level: c.task_level,
            annotation_level: c.annotation_level,
            dedup_iou: c.dedup_iou,
            seed: self.config.seed,
            lexicon: self.lexicon.clone(),
        }
    }

    fn render_options(&self) -> RenderOptions {
        RenderOptions {
            seed: self.config.seed,
            bins: self.config.coord_bins,
            budget: self.config.budget.unwrap_or(LATER_STAGE_BUDGET),
        }
    }
}

/// One stage outcome, logged as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEvent {
    pub stage: Stage,
    pub status: String,
    pub records_in: u64,
    pub records_out: u64,
    pub warnings: Vec<String>,
    /// Hash of the stage directory.
    pub output_hash: String,
    pub elapsed_ms: u64,
}

/// Builds `dir` through a sibling staging directory and swaps it in.
pub fn write_stage_dir<T>(
    dir: &Path,
    build: impl FnOnce(&Path) -> Result<T, PipelineError>,
    stage: Stage,
) -> Result<T, PipelineError> {
    let err = PipelineError::data(stage);
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(|e| err(format!("{}: {e}", parent.display())))?;
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let staging = parent.join(format!("{STAGING_PREFIX}{name}"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| err(format!("{}: {e}", staging.display())))?;
    }
    fs::create_dir_all(&staging).map_err(|e| err(format!("{}: {e}", staging.display())))?;
    let value = match build(&staging) {
        Ok(v) => v,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| err(format!("{}: {e}", dir.display())))?;
    }
    fs::rename(&staging, dir).map_err(|e| err(format!("{}: {e}", dir.display())))?;
    Ok(value)
}

fn rec_err(stage: Stage) -> impl Fn(RecordError) -> PipelineError {
    move |e| PipelineError::Data {
        stage,
        message: e.to_string(),
    }
}

/// Images and samples under a canonical directory. A directory without
/// `images.jsonl` or `samples.jsonl` is read as one canonical subdirectory
/// per source, in name order.
pub fn load_canonical(dir: &Path) -> Result<(Vec<AnnotatedImage>, Vec<TaskSample>), RecordError> {
    let mut dirs = Vec::new();
    if dir.join(IMAGES_FILE).exists() || dir.join(SAMPLES_FILE).exists() {
        dirs.push(dir.to_path_buf());
    } else {
        for e in fs::read_dir(dir).map_err(|e| RecordError::io(dir, e))? {
            let p = e.map_err(|e| RecordError::io(dir, e))?.path();
            let hidden = p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'));
            if p.is_dir() && !hidden {
                dirs.push(p);
            }
        }
        dirs.sort();
    }
    let mut im: Vec<ImageRecord> = Vec::new();
    let mut rg: Vec<RegionRecord> = Vec::new();
    let mut samples = Vec::new();
    for d in dirs {
        im.extend(read_jsonl_opt::<ImageRecord>(&d.join(IMAGES_FILE))?);
        rg.extend(read_jsonl_opt::<RegionRecord>(&d.join(REGIONS_FILE))?);
        samples.extend(read_jsonl_opt::<TaskSample>(&d.join(SAMPLES_FILE))?);
    }
    let (images, orphans) = assemble_images(im, rg);
    if let Some(o) = orphans.first() {
        return Err(RecordError::Malformed {
            path: dir.join(REGIONS_FILE),
            line: 0,
            message: format!("{} regions reference unknown images, first {}", orphans.len(), o.image_id),
        });
    }
    Ok((images, samples))
}

pub struct StageResult {
    pub records_in: u64,
    pub records_out: u64,
    pub warnings: Vec<String>,
}

pub fn ingest_stage(p: &Pipeline, out: &Path) -> Result<StageResult, PipelineError> {
    let stage = Stage::Ingest;
    let opts = IngestOptions { lenient: p.config.lenient };
    write_stage_dir(
        out,
        |tmp| {
            let mut res = StageResult { records_in: 0, records_out: 0, warnings: Vec::new() };
            for src in &p.config.sources {
                let o = ingest(src, opts).map_err(|e| PipelineError::data(stage)(format!("{}: {e}", src.name.as_str())))?;
                check_ingest_ledger(&o.ledger)?;
                o.write_to(&tmp.join(src.name.as_str())).map_err(rec_err(stage))?;
                res.records_in += o.ledger.read;
                res.records_out += (o.images.len() + o.samples.len()) as u64;
                res.warnings.extend(o.ledger.issues.iter().map(|i| format!("{}: {}", i.locator, i.reason)));
            }
            Ok(res)
        },
        stage,
    )
}

fn check_ingest_ledger(l: &IngestLedger) -> Result<(), PipelineError> {
    if l.balanced() {
        Ok(())
    } else {
        Err(PipelineError::Verification {
            stage: Stage::Ingest,
            message: format!("ledger read {} != emitted {} + dropped {}", l.read, l.emitted, l.dropped),
        })
    }
}

/// Curates `input` (an ingest directory) into `out`.
pub fn curate_dir(input: &Path, out: &Path, opts: &CurateOptions) -> Result<StageResult, PipelineError> {
    let stage = Stage::Curate;
    let (images, passthrough) = load_canonical(input).map_err(rec_err(stage))?;
    let records_in = (images.len() + passthrough.len()) as u64;
    let o = curate(images, passthrough, opts);
    check_curation_ledger(&o.ledger)?;
    write_stage_dir(
        out,
        |tmp| {
            let (im, rg) = image_rows(&o.images);
            let e = rec_err(stage);
            records::write_jsonl(&tmp.join(IMAGES_FILE), &im).map_err(&e)?;
            records::write_jsonl(&tmp.join(REGIONS_FILE), &rg).map_err(&e)?;
            records::write_jsonl(&tmp.join(SAMPLES_FILE), &o.samples).map_err(&e)?;
            records::write_json(&tmp.join(LEDGER_FILE), &o.ledger).map_err(&e)?;
            Ok(())
        },
        stage,
    )?;
    Ok(StageResult { records_in, records_out: o.samples.len() as u64, warnings: Vec::new() })
}

fn check_curation_ledger(l: &CurationLedger) -> Result<(), PipelineError> {
    if l.conserved() {
        Ok(())
    } else {
        Err(PipelineError::Verification {
            stage: Stage::Curate,
            message: "curation counters do not balance".into(),
        })
    }
}

/// Consolidates the samples in `input` into `out`. With a reference table
/// the verification report is written next to the manifest and a failing row
/// is a verification error.
pub fn consolidate_dir(
    input: &Path,
    out: &Path,
    mix: &MixSpec,
    reference: Option<&ReferenceTable>,
) -> Result<(StageResult, Option<VerifyReport>), PipelineError> {
    let stage = Stage::Consolidate;
    let path = if input.is_file() { input.to_path_buf() } else { input.join(SAMPLES_FILE) };
    let samples: Vec<TaskSample> = records::read_jsonl(&path).map_err(rec_err(stage))?;
    let records_in = samples.len() as u64;
    let (kept, manifest) = consolidate(mix, samples).map_err(|e| PipelineError::data(stage)(e.to_string()))?;
    let verify = reference.map(|t| verify_manifest(&manifest, t));
    write_stage_dir(
        out,
        |tmp| {
            let e = rec_err(stage);
            records::write_jsonl(&tmp.join(SAMPLES_FILE), &kept).map_err(&e)?;
            records::write_json(&tmp.join(MANIFEST_FILE), &manifest).map_err(&e)?;
            if let Some(v) = &verify {
                records::write_json(&tmp.join("verify.json"), v).map_err(&e)?;
            }
            Ok(())
        },
        stage,
    )?;
    if let Some(v) = verify.as_ref().filter(|v| !v.all_pass) {
        let failed: Vec<_> = v
            .rows
            .iter()
            .filter(|r| matches!(r.status, crate::consolidate::RowStatus::Fail { .. }))
            .map(|r| r.entry.as_str())
            .collect();
        return Err(PipelineError::Verification {
            stage,
            message: format!("{}: rows {} miss their targets", v.table, failed.join(", ")),
        });
    }
    Ok((
        StageResult { records_in, records_out: kept.len() as u64, warnings: manifest.warnings.clone() },
        verify,
    ))
}

/// Renders the samples in `input` into `out/conversations.jsonl`.
pub fn render_dir(input: &Path, out: &Path, pack: &TemplatePack, opts: &RenderOptions) -> Result<StageResult, PipelineError> {
    let stage = Stage::Render;
    let path = if input.is_file() { input.to_path_buf() } else { input.join(SAMPLES_FILE) };
    let samples: Vec<TaskSample> = records::read_jsonl(&path).map_err(rec_err(stage))?;
    let o = render(&samples, pack, opts).map_err(|e| PipelineError::data(stage)(e.to_string()))?;
    if !o.ledger.balanced() {
        return Err(PipelineError::Verification {
            stage,
            message: "render ledger does not balance".into(),
        });
    }
    write_stage_dir(
        out,
        |tmp| {
            let e = rec_err(stage);
            records::write_jsonl(&tmp.join(CONVERSATIONS_FILE), &o.records).map_err(&e)?;
            records::write_json(&tmp.join(LEDGER_FILE), &o.ledger).map_err(&e)?;
            Ok(())
        },
        stage,
    )?;
    Ok(StageResult {
        records_in: samples.len() as u64,
        records_out: o.records.len() as u64,
        warnings: o.failures,
    })
}

fn run_stage(p: &Pipeline, stage: Stage) -> Result<StageResult, PipelineError> {
    let dir = |s| p.stage_dir(s);
    let need = |s: Stage| -> Result<PathBuf, PipelineError> {
        let d = dir(s);
        if d.is_dir() {
            Ok(d)
        } else {
            Err(PipelineError::Data {
                stage,
                message: format!("input {} is missing; run the {s} stage first", d.display()),
            })
        }
    };
    match stage {
        Stage::Ingest => ingest_stage(p, &dir(Stage::Ingest)),
        Stage::Curate => curate_dir(&need(Stage::Ingest)?, &dir(Stage::Curate), &p.curate_options()),
        Stage::Consolidate => {
            consolidate_dir(&need(Stage::Curate)?, &dir(Stage::Consolidate), &p.mix, p.reference.as_ref()).map(|r| r.0)
        }
        Stage::Render => render_dir(&need(Stage::Consolidate)?, &dir(Stage::Render), &p.pack, &p.render_options()),
    }
}

/// Runs `stages` in pipeline order on a pool of `jobs` threads (config value,
/// else the machine default). `on_event` sees every completed stage. Output
/// bytes do not depend on the thread count.
pub fn run_pipeline(
    p: &Pipeline,
    stages: &[Stage],
    jobs: Option<usize>,
    mut on_event: impl FnMut(&StageEvent),
) -> Result<Vec<StageEvent>, PipelineError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs.or(p.config.jobs) {
        if j == 0 {
            return Err(PipelineError::Config("jobs must be at least 1".into()));
        }
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| PipelineError::Config(e.to_string()))?;
    let mut order: Vec<Stage> = if stages.is_empty() { Stage::ALL.to_vec() } else { stages.to_vec() };
    order.sort();
    order.dedup();
    let mut events = Vec::new();
    for stage in order {
        let t = Instant::now();
        let r = pool.install(|| run_stage(p, stage))?;
        let output_hash = records::tree_hash(&p.stage_dir(stage)).map_err(rec_err(stage))?;
        let ev = StageEvent {
            stage,
            status: "ok".into(),
            records_in: r.records_in,
            records_out: r.records_out,
            warnings: r.warnings,
            output_hash,
            elapsed_ms: t.elapsed().as_millis() as u64,
        };
        on_event(&ev);
        events.push(ev);
    }
    Ok(events)
}
