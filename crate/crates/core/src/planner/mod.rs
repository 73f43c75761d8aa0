//! The three training stages as declarative plans, with structural checks,
//! plus the resolution and token-count arithmetic of the vision side.

pub mod shapes;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use shapes::{
    conv_tokens, interpolate_embedding, interpolate_pos_grid, patch_grid, shape_report, InterpMode, PosEmbedding,
    PosGrid, ShapeError, ShapeReport, ShapeSpec,
};

use crate::model::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    AlignInit,
    PreAdapt,
    InstructTune,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::AlignInit => 1,
            Stage::PreAdapt => 2,
            Stage::InstructTune => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    /// The down-sampling projector between encoder and LLM.
    Projector,
    VisualEncoder,
    #[serde(rename = "LLM")]
    Llm,
    VisualTokenizerProjector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelScale {
    #[serde(rename = "7B")]
    B7,
    #[serde(rename = "9B")]
    B9,
    #[serde(rename = "13B")]
    B13,
    #[serde(rename = "27B")]
    B27,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown model scale {0:?} (expected 7B, 9B, 13B or 27B)")]
pub struct UnknownScale(pub String);

impl FromStr for ModelScale {
    type Err = UnknownScale;
    fn from_str(s: &str) -> Result<Self, UnknownScale> {
        match s.to_ascii_uppercase().as_str() {
            "7B" => Ok(ModelScale::B7),
            "9B" => Ok(ModelScale::B9),
            "13B" => Ok(ModelScale::B13),
            "27B" => Ok(ModelScale::B27),
            _ => Err(UnknownScale(s.to_string())),
        }
    }
}

impl fmt::Display for ModelScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelScale::B7 => "7B",
            ModelScale::B9 => "9B",
            ModelScale::B13 => "13B",
            ModelScale::B27 => "27B",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub trainable: BTreeSet<Component>,
    pub base_lr: f64,
    /// Encoder learning rate as a fraction of `base_lr`.
    pub encoder_lr_scale: f64,
    pub sharding_level: String,
    pub max_len: u64,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    pub epochs: u32,
    pub batch_size: u32,
    /// Components updated by samples of each kind.
    pub data_routes: BTreeMap<TaskKind, BTreeSet<Component>>,
}

impl StagePlan {
    pub fn encoder_lr(&self) -> f64 {
        self.base_lr * self.encoder_lr_scale
    }
}

pub const STAGE1_LR: f64 = 1e-3;
pub const LATER_STAGE_LR: f64 = 2e-5;
pub const ENCODER_LR_SCALE: f64 = 0.1;
pub const WARMUP_RATIO: f64 = 0.3;
pub const BATCH_SIZE: u32 = 256;
pub const EPOCHS: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanOptions {
    /// Also halve the stage-1 rate for the 27B model.
    pub halve_stage1: bool,
}

fn set<const N: usize>(c: [Component; N]) -> BTreeSet<Component> {
    c.into_iter().collect()
}

/// The three stage plans for a model scale.
pub fn default_plans(scale: ModelScale, opts: PlanOptions) -> [StagePlan; 3] {
    use Component::*;
    let halve = scale == ModelScale::B27;
    let stage1_lr = if halve && opts.halve_stage1 { STAGE1_LR / 2.0 } else { STAGE1_LR };
    let later_lr = if halve { LATER_STAGE_LR / 2.0 } else { LATER_STAGE_LR };
    let dense = set([Projector, VisualEncoder, Llm]);
    let text_only = set([Llm]);

    let plan = |stage, trainable, base_lr, encoder_lr_scale, sharding: &str, max_len, data_routes| StagePlan {
        stage,
        trainable,
        base_lr,
        encoder_lr_scale,
        sharding_level: sharding.to_string(),
        max_len,
        warmup_ratio: WARMUP_RATIO,
        schedule: Schedule::Cosine,
        epochs: EPOCHS,
        batch_size: BATCH_SIZE,
        data_routes,
    };

    let stage1_routes = BTreeMap::from([(TaskKind::Caption, set([Projector]))]);
    let mut stage2_routes: BTreeMap<_, _> = [TaskKind::Rec, TaskKind::Reg, TaskKind::Detection]
        .into_iter()
        .map(|k| (k, dense.clone()))
        .collect();
    stage2_routes.insert(TaskKind::LanguageOnly, text_only.clone());
    let stage3_routes = TaskKind::ALL
        .into_iter()
        .map(|k| {
            let dest = match k {
                TaskKind::LanguageOnly => text_only.clone(),
                TaskKind::Counting => set([Projector, VisualEncoder, Llm, VisualTokenizerProjector]),
                _ => dense.clone(),
            };
            (k, dest)
        })
        .collect();

    [
        plan(Stage::AlignInit, set([Projector]), stage1_lr, 1.0, "zero2", 2048, stage1_routes),
        plan(Stage::PreAdapt, dense.clone(), later_lr, 1.0, "zero3", 4096, stage2_routes),
        plan(
            Stage::InstructTune,
            set([Projector, VisualEncoder, Llm, VisualTokenizerProjector]),
            later_lr,
            ENCODER_LR_SCALE,
            "zero3",
            4096,
            stage3_routes,
        ),
    ]
}

/// Names of the clauses [`validate_plan`] checks.
pub mod clause {
    pub const ALIGN_INIT_PROJECTOR_ONLY: &str = "AlignInit trains exactly Projector";
    pub const PRE_ADAPT_ALL_BUT_TOKENIZER: &str =
        "PreAdapt trains everything except VisualTokenizer parts";
    pub const INSTRUCT_TUNE_COMPONENTS: &str =
        "InstructTune trains Projector, VisualEncoder, LLM and VisualTokenizerProjector";
    pub const TOKENIZER_COUNTING_ONLY: &str =
        "only Counting samples update VisualTokenizerProjector";
    pub const INSTRUCT_TUNE_COUNTING_ROUTE: &str =
        "InstructTune routes Counting samples to VisualTokenizerProjector";
    pub const ROUTES_TRAINABLE: &str = "data routes target trainable components";
    pub const WARMUP_RANGE: &str = "warmup_ratio in (0, 1)";
    pub const EPOCHS_POSITIVE: &str = "epochs >= 1";
    pub const LR_POSITIVE: &str = "base_lr > 0";
    pub const ENCODER_SCALE_RANGE: &str = "encoder_lr_scale in (0, 1]";
    pub const BATCH_POSITIVE: &str = "batch_size >= 1";
    pub const MAX_LEN_POSITIVE: &str = "max_len >= 1";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub clause: String,
    pub detail: String,
}

/// Checks every structural rule of a plan; an empty result means valid.
pub fn validate_plan(p: &StagePlan) -> Vec<Violation> {
    use Component::*;
    let mut out = Vec::new();
    let mut fail = |clause: &str, detail: String| {
        out.push(Violation {
            clause: clause.to_string(),
            detail,
        })
    };
    let expected = match p.stage {
        Stage::AlignInit => (clause::ALIGN_INIT_PROJECTOR_ONLY, vec![Projector]),
        Stage::PreAdapt => (clause::PRE_ADAPT_ALL_BUT_TOKENIZER, vec![Projector, VisualEncoder, Llm]),
        Stage::InstructTune => (
            clause::INSTRUCT_TUNE_COMPONENTS,
            vec![Projector, VisualEncoder, Llm, VisualTokenizerProjector],
        ),
    };
    let want: BTreeSet<Component> = expected.1.into_iter().collect();
    if p.trainable != want {
        fail(expected.0, format!("trainable is {:?}", p.trainable));
    }
    for (kind, dest) in &p.data_routes {
        if dest.contains(&VisualTokenizerProjector) && *kind != TaskKind::Counting {
            fail(clause::TOKENIZER_COUNTING_ONLY, format!("{kind} routes to VisualTokenizerProjector"));
        }
        let extra: Vec<_> = dest.difference(&p.trainable).collect();
        if !extra.is_empty() {
            fail(clause::ROUTES_TRAINABLE, format!("{kind} routes to frozen {extra:?}"));
        }
    }
    if p.stage == Stage::InstructTune
        && !p
            .data_routes
            .get(&TaskKind::Counting)
            .is_some_and(|d| d.contains(&VisualTokenizerProjector))
    {
        fail(clause::INSTRUCT_TUNE_COUNTING_ROUTE, "no Counting route to VisualTokenizerProjector".into());
    }
    if !(p.warmup_ratio > 0.0 && p.warmup_ratio < 1.0) {
        fail(clause::WARMUP_RANGE, format!("warmup_ratio is {}", p.warmup_ratio));
    }
    if p.epochs < 1 {
        fail(clause::EPOCHS_POSITIVE, format!("epochs is {}", p.epochs));
    }
    if !(p.base_lr > 0.0 && p.base_lr.is_finite()) {
        fail(clause::LR_POSITIVE, format!("base_lr is {}", p.base_lr));
    }
    if !(p.encoder_lr_scale > 0.0 && p.encoder_lr_scale <= 1.0) {
        fail(clause::ENCODER_SCALE_RANGE, format!("encoder_lr_scale is {}", p.encoder_lr_scale));
    }
    if p.batch_size < 1 {
        fail(clause::BATCH_POSITIVE, "batch_size is 0".into());
    }
    if p.max_len < 1 {
        fail(clause::MAX_LEN_POSITIVE, "max_len is 0".into());
    }
    out
}

/// Document written by `forge plan`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub scale: ModelScale,
    pub options: PlanOptions,
    pub stages: Vec<StagePlan>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_per_scale() {
        let p = default_plans(ModelScale::B13, PlanOptions::default());
        assert_eq!(p[0].base_lr, 1e-3);
        assert_eq!((p[0].max_len, p[0].sharding_level.as_str()), (2048, "zero2"));
        assert_eq!((p[1].max_len, p[1].sharding_level.as_str()), (4096, "zero3"));
        assert_eq!(p[2].base_lr, 2e-5);
        let p = default_plans(ModelScale::B27, PlanOptions::default());
        assert_eq!((p[0].base_lr, p[1].base_lr, p[2].base_lr), (1e-3, 1e-5, 1e-5));
        let p = default_plans(ModelScale::B27, PlanOptions { halve_stage1: true });
        assert_eq!(p[0].base_lr, 5e-4);
        let p = default_plans(ModelScale::B7, PlanOptions::default());
        assert!((p[2].encoder_lr() - 2e-6).abs() < 1e-20);
    }

    #[test]
    fn defaults_validate_for_every_scale() {
        for s in [ModelScale::B7, ModelScale::B9, ModelScale::B13, ModelScale::B27] {
            for plan in default_plans(s, PlanOptions::default()) {
                assert_eq!(validate_plan(&plan), vec![], "{s} {:?}", plan.stage);
            }
        }
    }

    #[test]
    fn named_violations() {
        let clauses = |p: &StagePlan| validate_plan(p).into_iter().map(|v| v.clause).collect::<Vec<_>>();
        let [mut s1, mut s2, mut s3] = default_plans(ModelScale::B7, PlanOptions::default());
        s1.trainable.insert(Component::Llm);
        assert_eq!(clauses(&s1), vec![clause::ALIGN_INIT_PROJECTOR_ONLY]);
        s2.trainable.insert(Component::VisualTokenizerProjector);
        assert_eq!(clauses(&s2), vec![clause::PRE_ADAPT_ALL_BUT_TOKENIZER]);
        s3.data_routes.get_mut(&TaskKind::Detection).unwrap().insert(Component::VisualTokenizerProjector);
        assert_eq!(clauses(&s3), vec![clause::TOKENIZER_COUNTING_ONLY]);
    }

    #[test]
    fn scale_parsing_and_serde() {
        assert_eq!("27b".parse::<ModelScale>().unwrap(), ModelScale::B27);
        assert!("70B".parse::<ModelScale>().is_err());
        let json = serde_json::to_value(&default_plans(ModelScale::B9, PlanOptions::default())[2]).unwrap();
        assert_eq!(json["trainable"][2], "LLM");
        assert_eq!(json["data_routes"]["Counting"].as_array().unwrap().len(), 4);
    }
}
