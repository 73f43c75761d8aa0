use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use forge_core::consolidate::{MixSpec, ReferenceTable};
use forge_core::convo::{RenderOptions, TemplatePack, LATER_STAGE_BUDGET};
use forge_core::curate::{CurateOptions, Lexicon, DEFAULT_DEDUP_IOU};
use forge_core::evalkit::io::{evaluate_files, EvalRequest, EvalTask};
use forge_core::evalkit::{CocoParams, RecOptions};
use forge_core::ingest::{ingest, IngestOptions, SourceDescriptor, SourceFormat};
use forge_core::model::records::{read_json, write_json};
use forge_core::model::{SourceName, DEFAULT_COORD_BINS};
use forge_core::pipeline::{self, Pipeline, PipelineError, Stage, StageEvent};
use forge_core::planner::{
    default_plans, shape_report, validate_plan, ModelScale, PlanDocument, PlanOptions, ShapeSpec,
};

/// Dataset curation, conversation rendering, evaluation and training-plan tool.
#[derive(Parser)]
#[command(name = "forge", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert one external source into canonical JSONL.
    Ingest(IngestArgs),
    /// Merge, classify and reorganize a canonical corpus.
    Curate(CurateArgs),
    /// Draw a split from curated samples according to a mix file.
    Consolidate(ConsolidateArgs),
    /// Serialize samples into conversations with textual coordinates.
    Render(RenderArgs),
    /// Score raw model output against ground truth.
    Eval(EvalArgs),
    /// Emit (or check) the three training-stage plans.
    Plan(PlanArgs),
    /// Token grid sizes for an encoder resolution and connector.
    Shapes(ShapesArgs),
    /// Per-task counts and box statistics of a sample directory.
    Stats(StatsArgs),
    /// Run ingest, curate, consolidate and render from a config file.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    source: SourceName,
    #[arg(long)]
    format: SourceFormat,
    #[arg(long)]
    path: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Drop and log bad records instead of failing.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args)]
struct CurateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DEDUP_IOU)]
    dedup_iou: f64,
    #[arg(long)]
    no_task_level: bool,
    #[arg(long)]
    no_annotation_level: bool,
}

#[derive(Args)]
struct ConsolidateArgs {
    #[arg(long)]
    mix: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed stored in the mix file.
    #[arg(long)]
    seed: Option<u64>,
    /// Reference table to check the manifest against.
    #[arg(long)]
    verify: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    templates: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = LATER_STAGE_BUDGET)]
    budget: u64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_COORD_BINS)]
    bins: u32,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    task: EvalTask,
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Count REC IoU exactly at 0.5 as correct.
    #[arg(long)]
    iou_geq: bool,
    #[arg(long, default_value_t = DEFAULT_COORD_BINS)]
    bins: u32,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, default_value = "7B")]
    scale: ModelScale,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    halve_stage1: bool,
    /// Validate an existing plan document instead of emitting one.
    #[arg(long, conflicts_with = "out")]
    check: Option<PathBuf>,
}

#[derive(Args)]
struct ShapesArgs {
    #[arg(long, default_value_t = 1022)]
    res: u32,
    #[arg(long, default_value_t = 14)]
    patch: u32,
    #[arg(long, default_value_t = 336)]
    pretrain_res: u32,
    #[arg(long, default_value_t = 3)]
    k: u32,
    #[arg(long, default_value_t = 2)]
    s: u32,
    #[arg(long, default_value_t = 1)]
    p: u32,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run only these stages (repeatable).
    #[arg(long)]
    stage: Vec<Stage>,
    #[arg(long)]
    jobs: Option<usize>,
}

/// A failure with its exit status: 1 config, 2 data, 3 verification.
struct Failure {
    code: u8,
    stage: Option<String>,
    err: anyhow::Error,
}

impl Failure {
    fn config(err: impl Into<anyhow::Error>) -> Self {
        Self { code: 1, stage: None, err: err.into() }
    }

    fn data(err: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, stage: None, err: err.into() }
    }

    fn verify(err: impl Into<anyhow::Error>) -> Self {
        Self { code: 3, stage: None, err: err.into() }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Self {
            code: e.exit_code() as u8,
            stage: e.stage().map(|s| s.to_string()),
            err: e.into(),
        }
    }
}

type Outcome = Result<(), Failure>;

/// One JSON line on stdout. A closed pipe is not an error.
fn emit(v: Value) {
    let _ = writeln!(std::io::stdout().lock(), "{v}");
}

fn stage_event(ev: &StageEvent) {
    emit(json!({"event": "stage", "detail": ev}));
    eprintln!(
        "{:<12} {:>8} in {:>8} out {:>4} warnings  {} ms",
        ev.stage,
        ev.records_in,
        ev.records_out,
        ev.warnings.len(),
        ev.elapsed_ms
    );
}

fn write_or_print(out: Option<&Path>, v: &Value) -> Outcome {
    match out {
        Some(p) => write_json(p, v).map_err(Failure::data),
        None => {
            emit(v.clone());
            Ok(())
        }
    }
}

fn must_exist(what: &str, p: &Path) -> Outcome {
    if p.exists() {
        Ok(())
    } else {
        Err(Failure::config(anyhow!("{what} {} does not exist", p.display())))
    }
}

fn cmd_ingest(a: IngestArgs) -> Outcome {
    must_exist("source", &a.path)?;
    let src = SourceDescriptor { name: a.source, format: a.format, path: a.path };
    let o = ingest(&src, IngestOptions { lenient: a.lenient }).map_err(Failure::data)?;
    o.write_to(&a.out).map_err(Failure::data)?;
    emit(json!({"event": "ingest", "source": src.name.as_str(), "ledger": o.ledger}));
    eprintln!(
        "ingest {}: {} images, {} samples, {} read, {} dropped",
        src.name.as_str(),
        o.images.len(),
        o.samples.len(),
        o.ledger.read,
        o.ledger.dropped
    );
    if o.ledger.balanced() {
        Ok(())
    } else {
        Err(Failure::verify(anyhow!("ingest ledger does not balance")))
    }
}

fn cmd_curate(a: CurateArgs) -> Outcome {
    must_exist("input", &a.input)?;
    let lexicon = match &a.lexicon {
        Some(p) => Lexicon::load(p).map_err(Failure::config)?,
        None => Lexicon::default(),
    };
    if !(0.0..=1.0).contains(&a.dedup_iou) {
        return Err(Failure::config(anyhow!("--dedup-iou {} outside [0, 1]", a.dedup_iou)));
    }
    let opts = CurateOptions {
        task_level: !a.no_task_level,
        annotation_level: !a.no_annotation_level,
        dedup_iou: a.dedup_iou,
        seed: a.seed,
        lexicon,
    };
    let r = pipeline::curate_dir(&a.input, &a.out, &opts)?;
    emit(json!({"event": "curate", "records_in": r.records_in, "records_out": r.records_out}));
    eprintln!("curate: {} records in, {} samples out", r.records_in, r.records_out);
    Ok(())
}

fn cmd_consolidate(a: ConsolidateArgs) -> Outcome {
    must_exist("input", &a.input)?;
    let mut mix = MixSpec::load(&a.mix).map_err(Failure::config)?;
    if let Some(s) = a.seed {
        mix.seed = s;
    }
    let table: Option<ReferenceTable> = match &a.verify {
        Some(p) => Some(read_json(p).map_err(Failure::config)?),
        None => None,
    };
    let (r, verify) = pipeline::consolidate_dir(&a.input, &a.out, &mix, table.as_ref())?;
    emit(json!({"event": "consolidate", "records_in": r.records_in, "records_out": r.records_out, "warnings": r.warnings, "verify": verify}));
    eprintln!("consolidate: {} in, {} selected, {} warnings", r.records_in, r.records_out, r.warnings.len());
    for w in &r.warnings {
        eprintln!("  warning: {w}");
    }
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Outcome {
    must_exist("input", &a.input)?;
    let pack = TemplatePack::load(&a.templates).map_err(Failure::config)?;
    forge_core::convo::check_budget(a.budget).map_err(Failure::config)?;
    let opts = RenderOptions { seed: a.seed, bins: a.bins, budget: a.budget };
    let r = pipeline::render_dir(&a.input, &a.out, &pack, &opts)?;
    emit(json!({"event": "render", "records_in": r.records_in, "records_out": r.records_out, "failures": r.warnings}));
    eprintln!("render: {} samples, {} conversations", r.records_in, r.records_out);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    must_exist("predictions", &a.preds)?;
    must_exist("ground truth", &a.gt)?;
    let req = EvalRequest {
        task: a.task,
        bins: a.bins,
        coco: CocoParams::default(),
        rec: RecOptions { iou_geq: a.iou_geq },
    };
    let report = evaluate_files(&req, &a.preds, &a.gt).map_err(Failure::data)?;
    let v = serde_json::to_value(&report).map_err(Failure::data)?;
    if let Some(d) = &report.detection {
        let f = |x: Option<f64>| x.map_or("-".to_string(), |x| format!("{x:.4}"));
        eprintln!("mAP {} AP50 {} AP75 {} APs {} APm {} APl {}", f(d.map), f(d.ap50), f(d.ap75), f(d.aps), f(d.apm), f(d.apl));
        for w in &d.warnings {
            eprintln!("  warning: {w}");
        }
    }
    if let Some(r) = &report.rec {
        eprintln!("REC accuracy {:.4} ({}/{}), {} unparsed", r.overall.accuracy, r.overall.correct, r.overall.total, r.unparsed);
    }
    if let Some(c) = &report.counting {
        eprintln!("counting MAE {:.4} over {} queries", c.mae, c.queries);
    }
    write_or_print(a.report.as_deref(), &v)?;
    if a.report.is_some() {
        emit(json!({"event": "eval", "task": a.task, "report": a.report}));
    }
    Ok(())
}

fn cmd_plan(a: PlanArgs) -> Outcome {
    let doc = match &a.check {
        Some(p) => read_json::<PlanDocument>(p).map_err(Failure::config)?,
        None => {
            let options = PlanOptions { halve_stage1: a.halve_stage1 };
            PlanDocument { scale: a.scale, options, stages: default_plans(a.scale, options).to_vec() }
        }
    };
    let violations: Vec<_> = doc.stages.iter().flat_map(validate_plan).collect();
    for v in &violations {
        eprintln!("violation: {} ({})", v.clause, v.detail);
    }
    if a.check.is_some() {
        emit(json!({"event": "plan-check", "violations": violations}));
    } else {
        let v = serde_json::to_value(&doc).map_err(Failure::data)?;
        write_or_print(a.out.as_deref(), &v)?;
        eprintln!("plan: {} stages for {}", doc.stages.len(), doc.scale);
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::verify(anyhow!("{} plan violations", violations.len())))
    }
}

fn cmd_shapes(a: ShapesArgs) -> Outcome {
    let spec = ShapeSpec {
        encoder_res: a.res,
        patch: a.patch,
        pretrain_res: a.pretrain_res,
        kernel: a.k,
        stride: a.s,
        padding: a.p,
    };
    let r = shape_report(spec).map_err(Failure::config)?;
    eprintln!(
        "pretrain {}x{} ({}), encoder {}x{} ({}), connector {}x{} ({}) tokens",
        r.pretrain_grid.side,
        r.pretrain_grid.side,
        r.pretrain_grid.tokens,
        r.encoder_grid.side,
        r.encoder_grid.side,
        r.encoder_grid.tokens,
        r.connector_grid.side,
        r.connector_grid.side,
        r.connector_grid.tokens
    );
    emit(serde_json::to_value(r).map_err(Failure::data)?);
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> Outcome {
    must_exist("input", &a.input)?;
    let r = pipeline::stats(&a.input).map_err(Failure::data)?;
    for (row, n) in &r.rows {
        if *n > 0 {
            eprintln!("{row:<26} {n:>10}");
        }
    }
    eprintln!("{} samples, {:.3} boxes/sample, {} labels", r.samples, r.mean_boxes_per_sample, r.label_vocabulary);
    write_or_print(a.out.as_deref(), &serde_json::to_value(&r).map_err(Failure::data)?)
}

fn cmd_pipeline(a: PipelineArgs) -> Outcome {
    let p = Pipeline::load(&a.config)?;
    let events = pipeline::run_pipeline(&p, &a.stage, a.jobs, stage_event)?;
    let hash = forge_core::model::records::tree_hash(p.out_dir())
        .with_context(|| format!("hashing {}", p.out_dir().display()))
        .map_err(Failure::data)?;
    emit(json!({"event": "pipeline", "stages": events.len(), "output_hash": hash}));
    eprintln!("pipeline: {} stages, output {hash}", events.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let r = match cli.cmd {
        Cmd::Ingest(a) => cmd_ingest(a),
        Cmd::Curate(a) => cmd_curate(a),
        Cmd::Consolidate(a) => cmd_consolidate(a),
        Cmd::Render(a) => cmd_render(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Plan(a) => cmd_plan(a),
        Cmd::Shapes(a) => cmd_shapes(a),
        Cmd::Stats(a) => cmd_stats(a),
        Cmd::Pipeline(a) => cmd_pipeline(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            emit(json!({"event": "error", "stage": f.stage, "code": f.code, "message": format!("{:#}", f.err)}));
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
