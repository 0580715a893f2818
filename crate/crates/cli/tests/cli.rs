use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hydroseg::hydro::{bin_channel, skeletonize, ChannelBin, HydroAnalysis};
use hydroseg::raster::{load_mask, LabelMask};
use serde_json::Value;

const TINY: &str = r#"
[synth]
n_source = 3
n_target = 3
[synth.source]
size = 64
[synth.target]
size = 64
[synth.tile]
window = 32
stride = 32
[augment]
out_size = 32
[models.segformer]
embed_dims = [8, 16]
decoder_dim = 8
blocks_per_stage = [1, 1]
[models.unet]
base_channels = 4
[pretrain.optim]
base_lr = 1e-3
warmup_iters = 1
total_iters = 3
batch_size = 2
[pretrain.train]
iters = 3
[finetune.optim]
base_lr = 1e-3
warmup_iters = 1
total_iters = 3
batch_size = 2
[finetune.train]
iters = 3
[scratch.optim]
base_lr = 1e-3
warmup_iters = 1
total_iters = 3
batch_size = 2
[scratch.train]
iters = 3
"#;

fn hydroseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hydroseg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hydroseg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the parsed JSON error line (the last stderr line).
fn failure(args: &[&str]) -> (i32, Value) {
    let out = hydroseg(args);
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().unwrap_or_default();
    (out.status.code().unwrap(), serde_json::from_str(line).unwrap_or(Value::Null))
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_version_succeed() {
    assert!(ok(&["--help"]).contains("experiment"));
    assert!(ok(&["--version"]).contains("hydroseg"));
}

#[test]
fn errors_have_distinct_codes_and_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = failure(&["frobnicate"]);
    assert_eq!((code, err["error"].as_str()), (2, Some("usage")));
    let (code, _) = failure(&["synth", "--bogus"]);
    assert_eq!(code, 2);

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "[pretrain.optim]\nlearning_rate = 1.0\n").unwrap();
    let (code, err) = failure(&["--config", s(&bad), "synth"]);
    assert_eq!((code, err["error"].as_str()), (3, Some("config")));
    assert!(err["message"].as_str().unwrap().contains("learning_rate"));

    let (code, err) = failure(&["--config", "/nonexistent/run.cfg", "synth"]);
    assert_eq!((code, err["error"].as_str()), (4, Some("io")));
    let (code, _) = failure(&["analyze", "--mask", "/nonexistent/mask.png"]);
    assert_eq!(code, 4);

    let (code, err) = failure(&["--out", s(&dir.path().join("c.hslb")), "train", "--stage", "finetune", "--data", s(dir.path())]);
    assert_eq!((code, err["error"].as_str()), (2, Some("usage")));
}

/// Brute-force stat: every water pixel goes to the bin of its nearest skeleton
/// pixel by exhaustive search, bins are ordered by cross-multiplied density,
/// and the curve is walked for the first point reaching `t`.
fn brute_force_stat(mask: &LabelMask, bin_len: f64, t: f64) -> f64 {
    let skel = skeletonize(mask).unwrap();
    let ch = bin_channel(mask, &skel, bin_len).unwrap();
    let w = mask.width();
    let pixels = |m: &LabelMask| -> Vec<(i64, i64)> {
        (0..m.height())
            .flat_map(|y| (0..m.width()).map(move |x| (x, y)))
            .filter(|&(x, y)| m.get(x, y))
            .map(|(x, y)| (x as i64, y as i64))
            .collect()
    };
    let sk: Vec<(i64, i64, usize)> = pixels(&skel)
        .into_iter()
        .map(|(x, y)| (x, y, ch.pixel_bins[y as usize * w + x as usize].unwrap()))
        .collect();
    let mut area = vec![0u64; ch.bins.len()];
    for (x, y) in pixels(mask) {
        let (_, b) = sk.iter().map(|&(sx, sy, b)| ((sx - x).pow(2) + (sy - y).pow(2), b)).min().unwrap();
        area[b] += 1;
    }
    let bins: Vec<ChannelBin> =
        ch.bins.iter().zip(&area).map(|(b, &a)| ChannelBin { area: a, ..b.clone() }).collect();
    let mut idx: Vec<usize> = (0..bins.len()).collect();
    idx.sort_by(|&i, &j| (bins[j].area as f64 * bins[i].length).total_cmp(&(bins[i].area as f64 * bins[j].length)));
    let lt: f64 = bins.iter().map(|b| b.length).sum();
    let at: f64 = area.iter().sum::<u64>() as f64;
    let (mut l, mut a) = (0.0, 0.0);
    for i in idx {
        let (l1, a1) = (l + bins[i].length / lt, a + bins[i].area as f64 / at);
        if a1 >= t {
            return l + (t - a) / (a1 - a) * (l1 - l);
        }
        (l, a) = (l1, a1);
    }
    l
}

#[test]
fn module_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let c = s(&cfg);

    let scenes = root.join("scenes");
    ok(&["--config", c, "--seed", "3", "--out", s(&scenes), "synth"]);
    let manifest = read_json(&scenes.join("target").join("manifest.json"));
    assert_eq!(manifest["domain"], "target");
    assert_eq!(manifest["scenes"].as_array().unwrap().len(), 3);
    assert_eq!(read_json(&scenes.join("config.resolved.json"))["seed"], 3);
    let before = fs::read(scenes.join("source").join("source_0000.png")).unwrap();

    let patches = root.join("patches");
    ok(&["--config", c, "--out", s(&patches), "tile", "--input", s(&scenes.join("source"))]);
    let lines = fs::read_to_string(patches.join("manifest.jsonl")).unwrap();
    let entries: Vec<Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(entries.iter().any(|e| e["split"] == "val"));
    let first = entries[0]["name"].as_str().unwrap();
    assert!(patches.join(format!("{first}.png")).exists() && patches.join(format!("{first}_mask.png")).exists());
    assert_eq!(fs::read(scenes.join("source").join("source_0000.png")).unwrap(), before, "inputs untouched");

    let aug = root.join("aug");
    ok(&["--config", c, "--out", s(&aug), "augment", "--patch", s(&patches.join(format!("{first}.png"))), "--count", "2"]);
    assert!(aug.join(format!("{first}_aug1_mask.png")).exists());

    let ckpt = root.join("model").join("a1.hslb");
    ok(&["--config", c, "--out", s(&ckpt), "train", "--stage", "pretrain", "--data", s(&patches)]);
    let csv = fs::read_to_string(root.join("model").join("a1_history.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("iter,lr,loss_bce,loss_dice,loss_total"));
    assert_eq!(csv.lines().count(), 4);
    assert!(root.join("model").join("a1_loss.svg").exists());
    assert!(root.join("model").join("a1_config.json").exists());

    let tuned = root.join("model").join("a2.hslb");
    ok(&["--config", c, "--out", s(&tuned), "train", "--stage", "finetune", "--init", s(&ckpt), "--data", s(&patches)]);
    let (code, _) = failure(&["--config", c, "--out", s(&tuned), "train", "--stage", "finetune", "--init", s(&ckpt), "--model", "unet", "--data", s(&patches)]);
    assert_eq!(code, 2);

    let ev = root.join("eval");
    let table = ok(&["--config", c, "--out", s(&ev), "eval", "--checkpoint", s(&tuned), "--data", s(&patches)]);
    assert!(table.contains("water"));
    let metrics = read_json(&ev.join("eval.json"));
    assert!(metrics["water"].get("iou").is_some() && metrics["background"].get("recall").is_some());
    let row = fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert_eq!(row.lines().count(), 2);
    assert_eq!(row.lines().next().unwrap().split(',').count(), 10);

    let mask = scenes.join("target").join("target_0000_mask.png");
    let an = root.join("analysis");
    ok(&["--config", c, "--out", s(&an), "analyze", "--mask", s(&mask)]);
    let analysis: HydroAnalysis = serde_json::from_value(read_json(&an.join("analysis.json"))).unwrap();
    let stat = analysis.stats.iter().find(|v| v.threshold == 0.8).unwrap().length_fraction;
    let oracle = brute_force_stat(&load_mask(&mask).unwrap(), analysis.bin_len, 0.8);
    assert!((stat - oracle).abs() < 1e-9, "{stat} vs {oracle}");
    assert_eq!(analysis.bins.iter().map(|b| b.area).sum::<u64>(), analysis.water_pixels);
    assert!(fs::read_to_string(an.join("concentration.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn experiment_and_report_produce_the_full_artifact_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");
    ok(&["--config", s(&cfg), "--seed", "11", "--out", s(&out), "experiment"]);
    for f in [
        "config.resolved.json",
        "metrics.json",
        "report.md",
        "analysis.json",
        "checkpoints/a1_pretrained.hslb",
        "checkpoints/a2_finetuned.hslb",
        "checkpoints/scratch_segformer.hslb",
        "checkpoints/scratch_unet.hslb",
        "history/a2_finetuned.csv",
        "plots/loss_a1_pretrained.svg",
        "plots/concentration.svg",
        "scenes/target_0000_pred.png",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let snapshot = read_json(&out.join("config.resolved.json"));
    assert_eq!(snapshot["seed"], 11);

    let rendered = dir.path().join("rendered");
    let md = ok(&["--out", s(&rendered), "report", "--input", s(&out)]);
    let target_arms = md
        .split("## Target validation")
        .nth(1)
        .unwrap()
        .lines()
        .filter(|l| l.contains("| Background |"))
        .count();
    let source_rows = md
        .split("## Target validation")
        .next()
        .unwrap()
        .lines()
        .filter(|l| l.contains("| Background |"))
        .count();
    assert_eq!((target_arms, source_rows), (4, 1));
    assert_eq!(fs::read_to_string(rendered.join("report.md")).unwrap(), md);
    assert_eq!(fs::read(rendered.join("report.json")).unwrap(), fs::read(out.join("metrics.json")).unwrap());

    let resumed = dir.path().join("again");
    ok(&["--config", s(&out.join("config.resolved.json")), "--out", s(&resumed), "experiment"]);
    assert_eq!(fs::read(resumed.join("metrics.json")).unwrap(), fs::read(out.join("metrics.json")).unwrap());
}
