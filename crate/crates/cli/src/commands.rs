//! Subcommand bodies, error classification and artifact writing.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use hydroseg::augment::{augment, AugmentConfig, Sample};
use hydroseg::config::{RunConfig, Stage};
use hydroseg::hydro::{analyze, HydroAnalysis};
use hydroseg::metrics::{fmt_percent, ClassReport, MetricRow};
use hydroseg::models::{build, load_checkpoint, save_checkpoint, ArchConfig};
use hydroseg::raster::{load_image, load_mask, save_image, save_mask};
use hydroseg::seeds;
use hydroseg::synth::generate_scenes;
use hydroseg::tiling::{extract_patches, split_dataset, TilePatch};
use hydroseg::train::experiment::{experiment_seeds, predict_scene, run_experiment, ExperimentReport, A2};
use hydroseg::train::{evaluate, train_loop, TrainHistory, TrainSettings, TrainSpec};

use crate::svg::{Chart, Series};
use crate::{Cli, Command, DomainArg, ModelArg, SplitArg, StageArg};

pub const SNAPSHOT: &str = "config.resolved.json";
pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Config,
    Io,
    Runtime,
}

impl ErrorKind {
    pub fn code(self) -> u8 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Config => 3,
            ErrorKind::Io => 4,
            ErrorKind::Runtime => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Config => "config",
            ErrorKind::Io => "io",
            ErrorKind::Runtime => "runtime",
        }
    }
}

/// Flag combinations clap cannot rule out on its own.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn classify(e: &anyhow::Error) -> ErrorKind {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return ErrorKind::Usage;
        }
        if let Some(err) = cause.downcast_ref::<hydroseg::Error>() {
            return match err {
                hydroseg::Error::Config(_) => ErrorKind::Config,
                hydroseg::Error::NotFound(_) | hydroseg::Error::Io { .. } => ErrorKind::Io,
                _ => ErrorKind::Runtime,
            };
        }
        if cause.is::<std::io::Error>() {
            return ErrorKind::Io;
        }
    }
    ErrorKind::Runtime
}

/// Prints the machine-readable error line and maps the kind to an exit code.
pub fn fail(kind: ErrorKind, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": kind.name(), "code": kind.code(), "message": message }));
    ExitCode::from(kind.code())
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(usage("--threads must be positive"));
        }
        cfg.threads = t;
    }
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn snapshot(path: &Path, cfg: &RunConfig) -> Result<()> {
    write(path, cfg.snapshot() + "\n")
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    let out = || cli.out.clone().unwrap_or_else(|| cfg.paths.out.clone());
    match &cli.command {
        Command::Synth { domain, count } => synth(&cfg, &out(), *domain, *count),
        Command::Tile { input } => tile(&cfg, input, &out()),
        Command::Augment { patch, count } => augment_patch(&cfg, patch, *count, &out()),
        Command::Train { stage, data, init, model } => {
            let ckpt = cli.out.clone().unwrap_or_else(|| cfg.paths.out.join(format!("{}.hslb", stage_of(*stage).name())));
            train(&cfg, *stage, data, init.as_deref(), *model, &ckpt)
        }
        Command::Eval { checkpoint, data, split } => eval(&cfg, checkpoint, data, *split, &out()),
        Command::Analyze { mask } => analyze_mask(&cfg, mask, &out()),
        Command::Report { input } => {
            let dir = cli.out.clone().unwrap_or_else(|| report_dir(input));
            report(input, &dir)
        }
        Command::Experiment => experiment(&cfg, &out()),
    }
}

fn stage_of(s: StageArg) -> Stage {
    match s {
        StageArg::Pretrain => Stage::Pretrain,
        StageArg::Finetune => Stage::Finetune,
        StageArg::Scratch => Stage::Scratch,
    }
}

fn synth(cfg: &RunConfig, out: &Path, domain: DomainArg, count: Option<usize>) -> Result<()> {
    let master = experiment_seeds(cfg.seed)["data"];
    let domains = match domain {
        DomainArg::Source => vec![(&cfg.synth.source, cfg.synth.n_source)],
        DomainArg::Target => vec![(&cfg.synth.target, cfg.synth.n_target)],
        DomainArg::Both => vec![(&cfg.synth.source, cfg.synth.n_source), (&cfg.synth.target, cfg.synth.n_target)],
    };
    for (scene_cfg, default_count) in domains {
        let n = count.unwrap_or(default_count);
        let scenes = generate_scenes(scene_cfg, n, master)?;
        let dir = out.join(scene_cfg.domain.name());
        mkdir(&dir)?;
        let mut entries = Vec::with_capacity(n);
        for s in &scenes {
            save_image(&s.image, dir.join(format!("{}.png", s.id)))?;
            save_mask(&s.mask, dir.join(format!("{}_mask.png", s.id)))?;
            let frac = s.mask.water_count() as f64 / (s.mask.width() * s.mask.height()) as f64;
            entries.push(json!({ "id": s.id, "seed": s.seed, "water_fraction": frac }));
        }
        let manifest = json!({
            "seed": cfg.seed,
            "master_seed": master,
            "domain": scene_cfg.domain.name(),
            "config_hash": scene_cfg.hash(),
            "scenes": entries,
        });
        write(&dir.join("manifest.json"), pretty(&manifest))?;
        println!("{}: {n} scenes in {}", scene_cfg.domain.name(), dir.display());
    }
    snapshot(&out.join(SNAPSHOT), cfg)
}

/// `(stem, image path, mask path)` for every scene pair, sorted by stem.
fn scene_pairs(input: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let entries = fs::read_dir(input).map_err(|_| hydroseg::Error::NotFound(input.to_path_buf()))?;
    let mut stems: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .filter_map(|n| n.strip_suffix(".png").map(str::to_string))
        .filter(|n| !n.ends_with("_mask"))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(anyhow::Error::new(hydroseg::Error::NotFound(input.join("*.png"))));
    }
    Ok(stems
        .into_iter()
        .map(|s| {
            let img = input.join(format!("{s}.png"));
            let mask = input.join(format!("{s}_mask.png"));
            (s, img, mask)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestLine {
    name: String,
    source_id: String,
    origin: (usize, usize),
    split: String,
}

fn tile(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let mut patches = Vec::new();
    for (stem, img, mask) in scene_pairs(input)? {
        let image = load_image(&img)?;
        let mask = load_mask(&mask)?;
        patches.extend(extract_patches(&image, &mask, &cfg.synth.tile, &stem)?);
    }
    let split = split_dataset(patches, cfg.synth.split_ratio, seeds::derive(cfg.seed, &[seeds::tag("split")]))?;
    mkdir(out)?;
    let mut manifest = String::new();
    for (name, set) in [("train", &split.train), ("val", &split.val)] {
        for p in set {
            save_image(&p.image, out.join(format!("{}.png", p.name())))?;
            save_mask(&p.mask, out.join(format!("{}_mask.png", p.name())))?;
            let line = ManifestLine { name: p.name(), source_id: p.source_id.clone(), origin: p.origin, split: name.into() };
            manifest.push_str(&serde_json::to_string(&line)?);
            manifest.push('\n');
        }
    }
    write(&out.join(MANIFEST), manifest)?;
    println!("{} train / {} val patches in {}", split.train.len(), split.val.len(), out.display());
    snapshot(&out.join(SNAPSHOT), cfg)
}

/// Train and validation patches listed in a tile manifest.
fn load_patches(dir: &Path) -> Result<(Vec<TilePatch>, Vec<TilePatch>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|_| hydroseg::Error::NotFound(path.clone()))?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let entry: ManifestLine =
            serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        let image = load_image(dir.join(format!("{}.png", entry.name)))?;
        let mask = load_mask(dir.join(format!("{}_mask.png", entry.name)))?;
        let patch = TilePatch::new(image, mask, entry.origin, entry.source_id)?;
        match entry.split.as_str() {
            "train" => train.push(patch),
            "val" => val.push(patch),
            other => anyhow::bail!("{} line {}: unknown split {other:?}", path.display(), i + 1),
        }
    }
    Ok((train, val))
}

fn augment_patch(cfg: &RunConfig, patch: &Path, count: usize, out: &Path) -> Result<()> {
    let stem = patch
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| usage(format!("{} has no file name", patch.display())))?;
    let image = load_image(patch)?;
    let mask = load_mask(patch.with_file_name(format!("{stem}_mask.png")))?;
    let sample = Sample::from_patch(&TilePatch::new(image, mask, (0, 0), stem)?);
    let acfg = AugmentConfig { out_size: sample.width(), ..cfg.augment.clone() };
    mkdir(out)?;
    for k in 0..count {
        let mut rng = seeds::rng(cfg.seed, &[seeds::tag("augment"), acfg.seed, k as u64]);
        let s = augment(&sample, &mut rng, &acfg)?;
        save_image(&s.image.to_image_unit()?, out.join(format!("{stem}_aug{k}.png")))?;
        save_mask(&s.mask, out.join(format!("{stem}_aug{k}_mask.png")))?;
    }
    println!("{count} variants of {stem} in {}", out.display());
    snapshot(&out.join(SNAPSHOT), cfg)
}

fn samples(patches: &[TilePatch]) -> Vec<Sample> {
    patches.iter().map(Sample::from_patch).collect()
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn loss_chart(name: &str, h: &TrainHistory) -> String {
    let pick = |f: fn(&hydroseg::train::IterRecord) -> f64| h.iters.iter().map(|r| (r.iter as f64, f(r))).collect();
    let title = format!("Training loss: {name}");
    Chart {
        title: &title,
        x_label: "iteration",
        y_label: "loss",
        x_range: None,
        y_range: None,
        series: vec![
            Series { label: "total", points: pick(|r| r.loss_total), dashed: false },
            Series { label: "weighted BCE", points: pick(|r| r.loss_bce), dashed: true },
            Series { label: "dice", points: pick(|r| r.loss_dice), dashed: true },
        ],
    }
    .render()
}

fn train(
    cfg: &RunConfig,
    stage: StageArg,
    data: &Path,
    init: Option<&Path>,
    model: Option<ModelArg>,
    ckpt: &Path,
) -> Result<()> {
    let stage = stage_of(stage);
    let seeds = experiment_seeds(cfg.seed);
    let params = match init {
        Some(path) => {
            let p = load_checkpoint(path)?;
            let wanted = model.map(|m| matches!(m, ModelArg::Unet));
            if wanted.is_some_and(|unet| unet != matches!(p.arch, ArchConfig::Unet(_))) {
                return Err(usage(format!("--model disagrees with the architecture in {}", path.display())));
            }
            p
        }
        None if stage == Stage::Finetune => return Err(usage("fine-tuning needs --init <checkpoint>")),
        None => match model.unwrap_or(ModelArg::Segformer) {
            ModelArg::Segformer => build(&cfg.models.segformer_arch(), seeds["init-segformer"])?,
            ModelArg::Unet => build(&cfg.models.unet_arch(), seeds["init-unet"])?,
        },
    };
    let key = match (stage, &params.arch) {
        (Stage::Pretrain, _) => "pretrain",
        (Stage::Finetune, _) => "finetune",
        (Stage::Scratch, ArchConfig::Unet(_)) => "scratch-unet",
        (Stage::Scratch, ArchConfig::Segformer(_)) => "scratch-segformer",
    };
    let (train_set, val_set) = load_patches(data)?;
    let st = cfg.stage(stage);
    let settings = TrainSettings { threads: cfg.threads, ..st.train.clone() };
    let spec = TrainSpec {
        loss: &cfg.loss,
        optim: &st.optim,
        augment: &cfg.augment,
        normalization: &cfg.normalization,
        settings: &settings,
        seed: seeds[key],
    };
    let (params, history) = train_loop(params, &samples(&train_set), &samples(&val_set), &spec)?;
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    save_checkpoint(&params, ckpt)?;
    write(&sibling(ckpt, "_history.csv"), history.to_csv())?;
    write(&sibling(ckpt, "_loss.svg"), loss_chart(stage.name(), &history))?;
    snapshot(&sibling(ckpt, "_config.json"), cfg)?;
    let last = history.iters.last().map_or(f64::NAN, |r| r.loss_total);
    println!("{} on {} iterations, final loss {last:.5}, saved {}", params.arch.name(), history.iters.len(), ckpt.display());
    Ok(())
}

fn metric_json(r: &MetricRow) -> serde_json::Value {
    json!({ "iou": r.iou, "f1": r.f1, "precision": r.precision, "recall": r.recall })
}

fn class_table(report: &ClassReport) -> String {
    let mut s = String::from("class       IoU     F1      Precision  Recall\n");
    for (name, r) in [("background", &report.background), ("water", &report.water)] {
        s += &format!(
            "{name:<11} {:<7} {:<7} {:<10} {}\n",
            fmt_percent(r.iou),
            fmt_percent(r.f1),
            fmt_percent(r.precision),
            fmt_percent(r.recall)
        );
    }
    s
}

fn eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, split: SplitArg, out: &Path) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    let (train_set, val_set) = load_patches(data)?;
    let (name, set): (&str, Vec<TilePatch>) = match split {
        SplitArg::Train => ("train", train_set),
        SplitArg::Val => ("val", val_set),
        SplitArg::All => ("all", train_set.into_iter().chain(val_set).collect()),
    };
    let settings = TrainSettings { threads: cfg.threads, ..cfg.finetune.train.clone() };
    let report = evaluate(&params, &samples(&set), &cfg.normalization, &settings)?;
    let body = json!({ "background": metric_json(&report.background), "water": metric_json(&report.water) });
    write(&out.join("eval.json"), pretty(&body))?;
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    let mut csv = String::from("checkpoint,split");
    let mut row = format!("{},{name}", checkpoint.display());
    for (class, r) in [("background", &report.background), ("water", &report.water)] {
        for (metric, v) in [("iou", r.iou), ("f1", r.f1), ("precision", r.precision), ("recall", r.recall)] {
            csv += &format!(",{class}_{metric}");
            row += &format!(",{}", cell(v));
        }
    }
    write(&out.join("eval.csv"), format!("{csv}\n{row}\n"))?;
    print!("{}", class_table(&report));
    snapshot(&out.join(SNAPSHOT), cfg)
}

fn concentration_chart(title: &str, curves: &[(&str, &HydroAnalysis)]) -> String {
    let mut series = vec![Series { label: "uniform", points: vec![(0.0, 0.0), (1.0, 1.0)], dashed: true }];
    for (label, a) in curves {
        series.push(Series { label, points: a.curve.points.clone(), dashed: false });
    }
    Chart {
        title,
        x_label: "cumulative channel length fraction",
        y_label: "cumulative water area fraction",
        x_range: Some((0.0, 1.0)),
        y_range: Some((0.0, 1.0)),
        series,
    }
    .render()
}

fn stat_line(a: &HydroAnalysis) -> String {
    let stats: Vec<String> = a
        .stats
        .iter()
        .map(|s| format!("{:.0}% of area in {:.1}% of length", 100.0 * s.threshold, 100.0 * s.length_fraction))
        .collect();
    format!("length {:.1} px, {} bins; {}", a.total_length, a.bins.len(), stats.join(", "))
}

fn analyze_mask(cfg: &RunConfig, mask: &Path, out: &Path) -> Result<()> {
    let m = load_mask(mask)?;
    let a = analyze(&m, &cfg.hydro)?;
    write(&out.join("analysis.json"), pretty(&a))?;
    let name = mask.file_stem().and_then(|s| s.to_str()).unwrap_or("mask");
    write(&out.join("concentration.svg"), concentration_chart(&format!("Channel concentration: {name}"), &[(name, &a)]))?;
    println!("{}", stat_line(&a));
    snapshot(&out.join(SNAPSHOT), cfg)
}

fn report_dir(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.to_path_buf()
    } else {
        input.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    }
}

fn report(input: &Path, out: &Path) -> Result<()> {
    let path = if input.is_dir() { input.join("metrics.json") } else { input.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(|_| hydroseg::Error::NotFound(path.clone()))?;
    let report = ExperimentReport::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    let md = report.to_markdown();
    write(&out.join("report.md"), &md)?;
    if out.join("report.json") != path {
        write(&out.join("report.json"), report.to_json())?;
    }
    print!("{md}");
    Ok(())
}

fn experiment(cfg: &RunConfig, out: &Path) -> Result<()> {
    mkdir(out)?;
    snapshot(&out.join(SNAPSHOT), cfg)?;
    let full = run_experiment(cfg, cfg.seed)?;
    let run = &full.run;
    let ckpts = out.join("checkpoints");
    mkdir(&ckpts)?;
    for (name, params) in &run.checkpoints {
        save_checkpoint(params, ckpts.join(format!("{name}.hslb")))?;
    }
    for (name, history) in &run.histories {
        write(&out.join("history").join(format!("{name}.csv")), history.to_csv())?;
        write(&out.join("plots").join(format!("loss_{name}.svg")), loss_chart(name, history))?;
    }
    let scene = &full.target_scene;
    let pred = predict_scene(run.params(A2).expect("fine-tuned"), scene, cfg, cfg.finetune.train.threshold)?;
    let scenes = out.join("scenes");
    mkdir(&scenes)?;
    save_image(&scene.image, scenes.join(format!("{}.png", scene.id)))?;
    save_mask(&scene.mask, scenes.join(format!("{}_mask.png", scene.id)))?;
    save_mask(&pred, scenes.join(format!("{}_pred.png", scene.id)))?;
    write(&out.join("analysis.json"), pretty(&full.analysis))?;
    let mut curves = Vec::new();
    if let Some(a) = &full.analysis.ground_truth {
        curves.push(("ground truth", a));
    }
    if let Some(a) = &full.analysis.prediction {
        curves.push(("fine-tuned prediction", a));
    }
    write(
        &out.join("plots").join("concentration.svg"),
        concentration_chart(&format!("Channel concentration: {}", scene.id), &curves),
    )?;
    write(&out.join("metrics.json"), run.report.to_json())?;
    let md = run.report.to_markdown();
    write(&out.join("report.md"), &md)?;
    print!("{md}");
    for (label, a) in curves {
        println!("\n{label} ({}): {}", scene.id, stat_line(a));
    }
    Ok(())
}
