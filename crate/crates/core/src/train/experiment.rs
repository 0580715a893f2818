//! The four-arm two-stage transfer experiment.
//!
//! A1 is pretrained on the source domain and scored on source validation. On
//! target validation it is scored as is (direct transfer), next to SegFormer
//! and U-Net trained from random init on the target split, and a copy of A1
//! fine-tuned on the target split with all weights as initialization.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::optim::OptimConfig;
use super::trainer::{evaluate, predict_masks, train_loop, TrainHistory, TrainSettings, TrainSpec};
use crate::augment::Sample;
use crate::config::{RunConfig, StageConfig};
use crate::error::{Error, Result};
use crate::hydro::{analyze, HydroAnalysis};
use crate::metrics::{fmt_percent, ClassReport, MetricRow};
use crate::models::{build, ArchConfig, ModelParams};
use crate::raster::FloatRaster;
use crate::seeds;
use crate::synth::{build_synthetic_datasets, Scene};
use crate::tiling::DatasetSplit;

pub const LABEL: &str = "synthetic desk-scale";
pub const SOURCE_ROW: &str = "A1 (source)";
pub const DIRECT_TRANSFER: &str = "direct-transfer";
pub const SCRATCH_SEGFORMER: &str = "scratch-segformer";
pub const SCRATCH_UNET: &str = "scratch-unet";
pub const FINE_TUNED: &str = "fine-tuned";
pub const TARGET_ARMS: [&str; 4] = [DIRECT_TRANSFER, SCRATCH_SEGFORMER, SCRATCH_UNET, FINE_TUNED];

/// Water IoU (%) of the full-scale study on private imagery, per row.
pub const REFERENCE_WATER_IOU: [(&str, f64); 5] = [
    (SOURCE_ROW, 68.80),
    (DIRECT_TRANSFER, 25.50),
    (SCRATCH_SEGFORMER, 37.47),
    (SCRATCH_UNET, 48.82),
    (FINE_TUNED, 64.84),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub model: String,
    pub report: ClassReport,
}

impl ArmResult {
    pub fn water_iou(&self) -> Option<f64> {
        self.report.water.iou
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValue {
    pub arm: String,
    pub water_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub label: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub source: ArmResult,
    pub arms: Vec<ArmResult>,
    pub reference: Vec<ReferenceValue>,
    pub deviations: Vec<String>,
    pub config: Value,
}

fn pct(v: Option<f64>) -> String {
    fmt_percent(v)
}

fn class_cells(row: &MetricRow) -> String {
    format!("{} | {} | {} | {}", pct(row.iou), pct(row.f1), pct(row.precision), pct(row.recall))
}

impl ExperimentReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == name)
    }

    pub fn reference_for(&self, name: &str) -> Option<f64> {
        self.reference.iter().find(|r| r.arm == name).map(|r| r.water_iou)
    }

    /// Deterministic pretty JSON.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let names: Vec<&str> = self.arms.iter().map(|a| a.arm.as_str()).collect();
        if names != TARGET_ARMS {
            return Err(Error::InvalidArgument(format!("report arms {names:?} differ from {TARGET_ARMS:?}")));
        }
        Ok(())
    }

    /// One table for the source row and one for the four target arms; the arm
    /// name appears once per arm, on its background line.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Two-stage transfer experiment ({})\n", self.label);
        let _ = writeln!(s, "Seed {}. All values in percent.\n", self.seed);
        if !self.deviations.is_empty() {
            let _ = writeln!(s, "Notes:\n");
            for d in &self.deviations {
                let _ = writeln!(s, "- {d}");
            }
            s.push('\n');
        }
        let header = "| Model | Class | IoU | F1 | Precision | Recall | Reference water IoU |\n|---|---|---|---|---|---|---|";
        let _ = writeln!(s, "## Source validation\n\n{header}");
        self.rows(&mut s, &self.source);
        let _ = writeln!(s, "\n## Target validation\n\n{header}");
        for arm in &self.arms {
            self.rows(&mut s, arm);
        }
        s
    }

    fn rows(&self, s: &mut String, arm: &ArmResult) {
        let reference = self.reference_for(&arm.arm).map(|v| format!("{v:.2}")).unwrap_or_default();
        let _ = writeln!(s, "| {} | Background | {} | |", arm.arm, class_cells(&arm.report.background));
        let _ = writeln!(s, "| | Water | {} | {reference} |", class_cells(&arm.report.water));
    }
}

/// Everything a run produces besides the report.
#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    /// `(name, params)` for A1, the fine-tuned A2 and both scratch models.
    pub checkpoints: Vec<(String, ModelParams)>,
    pub histories: Vec<(String, TrainHistory)>,
}

impl ExperimentRun {
    pub fn params(&self, name: &str) -> Option<&ModelParams> {
        self.checkpoints.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }
}

pub const A1: &str = "a1_pretrained";
pub const A2: &str = "a2_finetuned";

/// Seeds of every random stream, derived from one master seed.
pub fn experiment_seeds(seed: u64) -> BTreeMap<String, u64> {
    ["data", "init-segformer", "init-unet", "pretrain", "finetune", "scratch-segformer", "scratch-unet"]
        .iter()
        .map(|k| (k.to_string(), seeds::derive(seed, &[seeds::tag(k)])))
        .collect()
}

fn samples(patches: &[crate::tiling::TilePatch]) -> Vec<Sample> {
    patches.iter().map(Sample::from_patch).collect()
}

fn deviations(cfg: &RunConfig) -> Vec<String> {
    let mut out = vec![
        format!("All imagery is procedural ({LABEL}); reference values come from full-scale private imagery and are not expected to match."),
        "Encoders start from seeded random init instead of ImageNet weights.".to_string(),
        format!(
            "Networks are toy scale: segformer-tiny {:?} embed dims, unet-tiny depth {}.",
            cfg.models.segformer.embed_dims, cfg.models.unet.depth
        ),
        format!("Tiles are {} px with stride {}.", cfg.synth.tile.window, cfg.synth.tile.stride),
    ];
    let d = OptimConfig::default();
    for (name, st) in [("pretrain", &cfg.pretrain), ("finetune", &cfg.finetune), ("scratch", &cfg.scratch)] {
        if st.optim != d || st.train.iters != TrainSettings::default().iters {
            out.push(format!(
                "{name} schedule overridden: {} iters, base_lr {:e}, warmup {}, batch {}.",
                st.train.iters, st.optim.base_lr, st.optim.warmup_iters, st.optim.batch_size
            ));
        }
    }
    out
}

struct Arm<'a> {
    name: &'static str,
    init: ModelParams,
    stage: &'a StageConfig,
    seed: u64,
}

fn train_arm(arm: &Arm, train: &[Sample], val: &[Sample], cfg: &RunConfig) -> Result<(ModelParams, TrainHistory)> {
    let spec = TrainSpec {
        loss: &cfg.loss,
        optim: &arm.stage.optim,
        augment: &cfg.augment,
        normalization: &cfg.normalization,
        settings: &arm.stage.train,
        seed: arm.seed,
    };
    log::info!("training {} ({} iters)", arm.name, arm.stage.train.iters);
    train_loop(arm.init.clone(), train, val, &spec)
}

fn score(params: &ModelParams, val: &[Sample], cfg: &RunConfig, stage: &StageConfig) -> Result<ClassReport> {
    let settings = TrainSettings { threads: cfg.threads, ..stage.train.clone() };
    evaluate(params, val, &cfg.normalization, &settings)
}

/// Trains and scores every arm on already-built splits. The three target-side
/// arms are independent and run concurrently when `cfg.threads > 1`; each is
/// deterministic on its own, so the result does not depend on thread count.
pub fn run_two_stage_experiment(
    source: &DatasetSplit,
    target: &DatasetSplit,
    cfg: &RunConfig,
    seed: u64,
) -> Result<ExperimentRun> {
    cfg.validate()?;
    if source.train.is_empty() || source.val.is_empty() || target.train.is_empty() || target.val.is_empty() {
        return Err(Error::Empty("both domains need nonempty train and validation splits".into()));
    }
    let s = experiment_seeds(seed);
    let (src_train, src_val) = (samples(&source.train), samples(&source.val));
    let (tgt_train, tgt_val) = (samples(&target.train), samples(&target.val));

    let seg_init = build(&cfg.models.segformer_arch(), s["init-segformer"])?;
    let unet_init = build(&cfg.models.unet_arch(), s["init-unet"])?;

    let pre = Arm { name: A1, init: seg_init.clone(), stage: &cfg.pretrain, seed: s["pretrain"] };
    let (a1, a1_hist) = train_arm(&pre, &src_train, &src_val, cfg)?;
    let source_report = score(&a1, &src_val, cfg, &cfg.pretrain)?;
    let direct = score(&a1, &tgt_val, cfg, &cfg.finetune)?;

    let arms = [
        Arm { name: "scratch_segformer", init: seg_init, stage: &cfg.scratch, seed: s["scratch-segformer"] },
        Arm { name: "scratch_unet", init: unet_init, stage: &cfg.scratch, seed: s["scratch-unet"] },
        Arm { name: A2, init: a1.clone(), stage: &cfg.finetune, seed: s["finetune"] },
    ];
    let trained: Vec<Result<(ModelParams, TrainHistory)>> = if cfg.threads > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = arms
                .iter()
                .map(|arm| scope.spawn(|| train_arm(arm, &tgt_train, &tgt_val, cfg)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("training worker panicked")).collect()
        })
    } else {
        arms.iter().map(|arm| train_arm(arm, &tgt_train, &tgt_val, cfg)).collect()
    };
    let mut checkpoints = vec![(A1.to_string(), a1.clone())];
    let mut histories = vec![(A1.to_string(), a1_hist)];
    let mut reports = BTreeMap::new();
    for (arm, result) in arms.iter().zip(trained) {
        let (params, hist) = result?;
        reports.insert(arm.name, score(&params, &tgt_val, cfg, arm.stage)?);
        checkpoints.push((arm.name.to_string(), params));
        histories.push((arm.name.to_string(), hist));
    }

    let model = |a: &ArchConfig| a.name().to_string();
    let seg = model(&cfg.models.segformer_arch());
    let arm = |name: &str, model: &str, report: ClassReport| ArmResult {
        arm: name.to_string(),
        model: model.to_string(),
        report,
    };
    let report = ExperimentReport {
        label: LABEL.to_string(),
        seed,
        seeds: s,
        source: arm(SOURCE_ROW, &seg, source_report),
        arms: vec![
            arm(DIRECT_TRANSFER, &seg, direct),
            arm(SCRATCH_SEGFORMER, &seg, reports.remove("scratch_segformer").expect("trained")),
            arm(SCRATCH_UNET, &model(&cfg.models.unet_arch()), reports.remove("scratch_unet").expect("trained")),
            arm(FINE_TUNED, &seg, reports.remove(A2).expect("trained")),
        ],
        reference: REFERENCE_WATER_IOU
            .iter()
            .map(|&(arm, water_iou)| ReferenceValue { arm: arm.to_string(), water_iou })
            .collect(),
        deviations: deviations(cfg),
        config: serde_json::to_value(cfg)?,
    };
    Ok(ExperimentRun { report, checkpoints, histories })
}

/// Channel analysis of one full target scene, for the ground truth and for a
/// model's prediction. A mask without water has no channel and yields `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneAnalysis {
    pub scene: String,
    pub ground_truth: Option<HydroAnalysis>,
    pub prediction: Option<HydroAnalysis>,
}

fn analyze_or_none(mask: &crate::raster::LabelMask, cfg: &RunConfig) -> Result<Option<HydroAnalysis>> {
    if mask.water_count() == 0 {
        return Ok(None);
    }
    analyze(mask, &cfg.hydro).map(Some)
}

pub fn predict_scene(params: &ModelParams, scene: &Scene, cfg: &RunConfig, threshold: f64) -> Result<crate::raster::LabelMask> {
    let img = FloatRaster::from_image_unit(&scene.image);
    let mut masks = predict_masks(params, &[&img], &cfg.normalization, threshold)?;
    Ok(masks.remove(0))
}

pub fn analyze_scene(params: &ModelParams, scene: &Scene, cfg: &RunConfig) -> Result<SceneAnalysis> {
    let pred = predict_scene(params, scene, cfg, cfg.finetune.train.threshold)?;
    Ok(SceneAnalysis {
        scene: scene.id.clone(),
        ground_truth: analyze_or_none(&scene.mask, cfg)?,
        prediction: analyze_or_none(&pred, cfg)?,
    })
}

/// A full run from one config and one seed: data, four arms, and the channel
/// analysis of the first target scene under the fine-tuned model.
#[derive(Clone, Debug)]
pub struct FullExperiment {
    pub run: ExperimentRun,
    pub analysis: SceneAnalysis,
    pub target_scene: Scene,
}

pub fn run_experiment(cfg: &RunConfig, seed: u64) -> Result<FullExperiment> {
    let s = experiment_seeds(seed);
    let data = build_synthetic_datasets(&cfg.synth, s["data"])?;
    let run = run_two_stage_experiment(&data.source, &data.target, cfg, seed)?;
    let scene = data.target_scenes.into_iter().next().ok_or_else(|| Error::Empty("no target scenes".into()))?;
    let analysis = analyze_scene(run.params(A2).expect("fine-tuned model"), &scene, cfg)?;
    Ok(FullExperiment { run, analysis, target_scene: scene })
}
