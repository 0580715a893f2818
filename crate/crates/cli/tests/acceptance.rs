//! Acceptance criteria AC1–AC8. Every criterion prints one PASS/FAIL line; the
//! test fails if any criterion does.
//!
//! AC1 and AC8 drive the release binary through the shipped `acceptance.cfg`,
//! so this target takes several minutes on a single core.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use hydroseg::autodiff::{analytic_gradient, gradient_check_f32, Real, ScalarFn, Tape, Tensor, Var};
use hydroseg::hydro::{analyze, bin_channel, concentration_curve, concentration_stat, skeleton_length, skeletonize, HydroConfig};
use hydroseg::metrics::{compute_metrics, confusion, ConfusionMatrix};
use hydroseg::models::{build, forward, predict, ArchConfig, ModelParams, ParamVars, SegFormerTinyConfig, UNetTinyConfig};
use hydroseg::raster::LabelMask;
use hydroseg::tiling::{split_dataset, tile_origins, TileConfig, TilePatch};
use hydroseg::train::loss::P_CLAMP;
use hydroseg::train::{compound_loss, dice_loss, lr_at, weighted_bce_loss, LossConfig, OptimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn tensor(v: Vec<f64>) -> Tensor<f64> {
    let n = v.len();
    Tensor::new(vec![n], v).unwrap()
}

fn loss_value(p: &[f64], y: &[f64], f: impl Fn(&mut Tape<f64>, Var, Var) -> hydroseg::Result<Var>) -> f64 {
    let mut t = Tape::<f64>::new();
    let pv = t.constant(tensor(p.to_vec()));
    let yv = t.constant(tensor(y.to_vec()));
    let out = f(&mut t, pv, yv).unwrap();
    t.value(out).item()
}

fn dice_ref(p: &[f64], y: &[f64], eps: f64) -> f64 {
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(y) {
        inter += a * b;
        sp += a;
        sy += b;
    }
    1.0 - (2.0 * inter + eps) / (sp + sy + eps)
}

fn bce_ref(p: &[f64], y: &[f64], wb: f64, ww: f64) -> f64 {
    let s: f64 = p
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let a = a.clamp(P_CLAMP, 1.0 - P_CLAMP);
            ww * b * a.ln() + wb * (1.0 - b) * (1.0 - a).ln()
        })
        .sum();
    -s / p.len() as f64
}

fn ac2_losses() -> Check {
    let dice = |p: &[f64], y: &[f64], e: f64| loss_value(p, y, |t, p, y| dice_loss(t, p, y, e));
    let bce = |p: &[f64], y: &[f64], wb: f64, ww: f64| loss_value(p, y, |t, p, y| weighted_bce_loss(t, p, y, wb, ww));
    let ones = vec![1.0; 100];
    let zeros = vec![0.0; 100];
    let halves = vec![0.5; 100];
    let half_ones: Vec<f64> = (0..100).map(|i| if i < 50 { 1.0 } else { 0.0 }).collect();
    let examples = [
        ("dice p=y", dice(&ones, &ones, 1.0), 0.0),
        ("dice p=0 y=1", dice(&zeros, &ones, 1.0), 0.990099),
        ("dice p=0.5 half", dice(&halves, &half_ones, 1.0), 0.495049),
        ("bce p=0.5 unit", bce(&halves, &half_ones, 1.0, 1.0), 0.693147),
        ("bce y=1 w=0.7711", bce(&halves, &ones, 0.2289, 0.7711), 0.7711 * std::f64::consts::LN_2),
    ];
    for (name, got, want) in examples {
        ensure((got - want).abs() <= 1e-6, || format!("{name}: {got} vs {want}"))?;
    }
    let exact = bce(&half_ones, &half_ones, 0.2289, 0.7711);
    ensure(exact <= 1e-6 * 0.7711, || format!("bce at p=y: {exact}"))?;

    let cfg = LossConfig::default();
    let reference =
        |p: &[f64], y: &[f64]| cfg.lambda_bce * bce_ref(p, y, cfg.w_background, cfg.w_water) + cfg.lambda_dice * dice_ref(p, y, cfg.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let n = 8 + 3 * case;
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
        let y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let yt = tensor(y.clone());
        let f = |t: &mut Tape<f64>, pv: Var| -> hydroseg::Result<Var> {
            let yv = t.constant(yt.clone());
            Ok(compound_loss(t, pv, yv, &cfg)?.total)
        };
        let (_, g) = analytic_gradient(&f, &tensor(p.clone())).unwrap();
        let h = 1e-6;
        for i in 0..n {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (reference(&a, &y) - reference(&b, &y)) / (2.0 * h);
            let an = g.data()[i];
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-8));
        }
    }
    ensure(worst <= 1e-6, || format!("gradient rel err {worst:e}"))?;
    Ok(format!("5 closed forms within 1e-6; 20 FD fixtures, max rel err {worst:.1e}"))
}

fn ac3_metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut acc = ConfusionMatrix::default();
    let mut naive = [0u64; 4];
    for _ in 0..100 {
        let (pp, pg) = (rng.random_range(0.05..0.95), rng.random_range(0.05..0.95));
        let pred = LabelMask::from_fn(32, 32, |_, _| rng.random_bool(pp)).unwrap();
        let gt = LabelMask::from_fn(32, 32, |_, _| rng.random_bool(pg)).unwrap();
        acc.accumulate(&pred, &gt).map_err(|e| e.to_string())?;
        for y in 0..32 {
            for x in 0..32 {
                let k = match (pred.get(x, y), gt.get(x, y)) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, false) => 2,
                    (false, true) => 3,
                };
                naive[k] += 1;
            }
        }
        let cm = confusion(&pred, &gt).map_err(|e| e.to_string())?;
        for row in [compute_metrics(&cm, "water"), compute_metrics(&cm.inverted(), "background")] {
            if let (Some(iou), Some(f1)) = (row.iou, row.f1) {
                let d = (f1 - 2.0 * iou / (1.0 + iou)).abs();
                ensure(d <= 1e-12, || format!("F1/IoU identity off by {d:e}"))?;
            }
        }
    }
    ensure([acc.tp, acc.fp, acc.tn, acc.fn_] == naive, || format!("{acc:?} vs naive {naive:?}"))?;
    Ok(format!("100 pairs, confusion equals naive loop exactly ({} pixels)", acc.total()))
}

fn enumerate_axis(dim: usize, window: usize, stride: usize, flush: bool) -> Vec<usize> {
    let mut out: Vec<usize> = (0..dim).filter(|&p| p + window <= dim && p % stride == 0).collect();
    if flush && !out.contains(&(dim - window)) {
        out.push(dim - window);
    }
    out
}

fn ac4_tiling() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let window = rng.random_range(1..40);
        let stride = rng.random_range(1..=window);
        let (w, h) = (rng.random_range(window..window + 80), rng.random_range(window..window + 80));
        let flush = rng.random_bool(0.5);
        let cfg = TileConfig { window, stride, keep_only_water: false, edge_flush: flush };
        let got = tile_origins(w, h, &cfg).map_err(|e| e.to_string())?;
        let (xs, ys) = (enumerate_axis(w, window, stride, flush), enumerate_axis(h, window, stride, flush));
        let want: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
        ensure(got == want, || format!("origins differ for {w}x{h} window {window} stride {stride}"))?;
        if flush {
            let mut cover = vec![0u32; w * h];
            for &(x0, y0) in &got {
                for y in y0..y0 + window {
                    for x in x0..x0 + window {
                        cover[y * w + x] += 1;
                    }
                }
            }
            ensure(cover.iter().all(|&c| c >= 1), || format!("uncovered pixel in {w}x{h}"))?;
        }
    }
    let patches: Vec<TilePatch> = (0..180)
        .map(|i| {
            let img = hydroseg::raster::RasterImage::filled(2, 2, [0, 0, 0]).unwrap();
            TilePatch::new(img, LabelMask::zeros(2, 2).unwrap(), (i, 0), "fixture").unwrap()
        })
        .collect();
    let split = split_dataset(patches, 0.9, 0).map_err(|e| e.to_string())?;
    ensure((split.train.len(), split.val.len()) == (162, 18), || format!("{}/{}", split.train.len(), split.val.len()))?;
    Ok("200 random triples match enumeration, full coverage, 180 -> 162/18".into())
}

fn ac5_schedule() -> Check {
    let cfg = OptimConfig { min_lr: 0.0, ..OptimConfig::default() };
    let at = |i| lr_at(i, &cfg).map_err(|e| e.to_string());
    for (iter, want) in [(0, 6e-12), (750, 6e-6 * (1e-6 + (1.0 - 1e-6) * 0.5)), (1500, 6e-6), (10750, 3e-6), (20000, 0.0)] {
        let got = at(iter)?;
        ensure((got - want).abs() <= 1e-12 * want.max(1e-6), || format!("iter {iter}: {got:e} vs {want:e}"))?;
    }
    let (before, peak, after) = (at(1499)?, at(1500)?, at(1501)?);
    let jump = (peak - before).max(peak - after);
    ensure(jump <= 1.01 * 6e-6 / 1500.0, || format!("jump {jump:e} at the warmup boundary"))?;
    ensure(at(20001).is_err(), || "iter past total accepted".into())?;
    Ok("closed forms at 0/750/1500/10750/20000, continuous at 1500".into())
}

struct MeanLogits<'a> {
    params: &'a ModelParams,
}

impl ScalarFn for MeanLogits<'_> {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> hydroseg::Result<Var> {
        let p = ParamVars::bind(tape, self.params, false);
        let y = forward(tape, &self.params.arch, &p, x)?;
        Ok(tape.mean(y))
    }
}

fn random_batch(n: usize, s: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 3, s, s], |_| rng.random_range(-1.0..1.0))
}

fn kink_free(params: &ModelParams, s: usize, seed: u64, margin: f64) -> Option<Tensor<f32>> {
    (0..200).map(|k| random_batch(1, s, seed + 1000 * k)).find(|x| {
        let mut tape = Tape::<f64>::new();
        let p = ParamVars::bind(&mut tape, params, false);
        let xv = tape.constant(x.cast());
        forward(&mut tape, &params.arch, &p, xv).is_ok() && tape.kink_margin().is_none_or(|m| m >= margin)
    })
}

fn ac6_models() -> Check {
    let archs = [
        ArchConfig::Segformer(SegFormerTinyConfig::default()),
        ArchConfig::Unet(UNetTinyConfig { depth: 2, base_channels: 4 }),
    ];
    let mut worst = 0.0f64;
    for arch in archs {
        let params = build(&arch, 6).map_err(|e| e.to_string())?;
        for (n, s) in [(2, 32), (1, 64)] {
            let y = predict(&params, &random_batch(n, s, 1)).map_err(|e| e.to_string())?;
            ensure(y.shape() == [n, 1, s, s], || format!("{}: shape {:?}", arch.name(), y.shape()))?;
        }
        let eps = 1e-5;
        for (i, s) in [8, 16, 32].into_iter().enumerate() {
            let x = kink_free(&params, s, 60 + i as u64, 4.0 * eps).ok_or("no kink-free input")?;
            let err = gradient_check_f32(&MeanLogits { params: &params }, &x, eps).map_err(|e| e.to_string())?;
            ensure(err <= 1e-3, || format!("{} {s}x{s}: rel err {err:e}", arch.name()))?;
            worst = worst.max(err);
        }
    }
    Ok(format!("(N,1,H,W) at 32 and 64 px for both nets; gradcheck max rel err {worst:.1e}"))
}

fn ac7_hydro() -> Check {
    let rect = |w, h, x0, x1, y0, y1| {
        LabelMask::from_fn(w, h, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y)).unwrap()
    };
    let river = rect(256, 16, 0, 256, 6, 9);
    let skel = skeletonize(&river).map_err(|e| e.to_string())?;
    let ch = bin_channel(&river, &skel, 16.0).map_err(|e| e.to_string())?;
    let curve = concentration_curve(&ch).map_err(|e| e.to_string())?;
    let off = curve.points.iter().map(|(l, a)| (l - a).abs()).fold(0.0, f64::max);
    ensure(off <= 1e-9, || format!("uniform river off diagonal by {off:e}"))?;
    let s08 = concentration_stat(&curve, 0.8).map_err(|e| e.to_string())?;
    ensure((s08 - 0.8).abs() <= 1e-9, || format!("uniform stat(0.8) = {s08}"))?;

    let (width, radius, channel) = (1024usize, 40i64, 2i64);
    let h = 2 * radius as usize + 16;
    let cy = h as i64 / 2;
    let centers = [width as i64 / 4, width as i64 / 2, 3 * width as i64 / 4];
    let lakes = LabelMask::from_fn(width, h, |x, y| {
        let (x, y) = (x as i64, y as i64);
        (cy - channel / 2..cy - channel / 2 + channel).contains(&y)
            || centers.iter().any(|&c| (x - c).pow(2) + (y - cy).pow(2) <= radius * radius)
    })
    .unwrap();
    let a = analyze(&lakes, &HydroConfig::default()).map_err(|e| e.to_string())?;
    let conserved = a.bins.iter().map(|b| b.area).sum::<u64>();
    ensure(conserved == lakes.water_count() as u64, || format!("areas {conserved} vs {}", lakes.water_count()))?;
    let lake_stat = a.stats.iter().find(|s| s.threshold == 0.8).ok_or("no 0.8 stat")?.length_fraction;
    ensure(lake_stat < 0.2, || format!("lake stat(0.8) = {lake_stat}"))?;

    let band = rect(120, 21, 10, 110, 8, 13);
    let len = skeleton_length(&band, &skeletonize(&band).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure((len - 100.0).abs() <= 2.0, || format!("band length {len}"))?;
    Ok(format!("uniform diagonal, stat(0.8)=0.8; lakes stat(0.8)={lake_stat:.3}, area conserved; band length {len:.2}"))
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

/// Runs `experiment` for one seed and returns the output dir and wall time.
fn experiment(seed: u64, out: &Path) -> Result<Duration, String> {
    let cfg = repo_root().join("acceptance.cfg");
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_hydroseg"))
        .args(["--config", cfg.to_str().unwrap(), "--seed", &seed.to_string(), "--threads", "4"])
        .args(["--out", out.to_str().unwrap(), "experiment"])
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!("seed {seed}: {}", String::from_utf8_lossy(&status.stderr)));
    }
    Ok(start.elapsed())
}

fn water_ious(dir: &Path) -> Result<[f64; 4], String> {
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let arm = |name: &str| -> Result<f64, String> {
        report["arms"]
            .as_array()
            .and_then(|a| a.iter().find(|x| x["arm"] == name))
            .map(|x| x["report"]["water"]["iou"].as_f64().unwrap_or(0.0))
            .ok_or_else(|| format!("arm {name} missing"))
    };
    Ok([arm("direct-transfer")?, arm("scratch-segformer")?, arm("scratch-unet")?, arm("fine-tuned")?])
}

const SEEDS: [u64; 5] = [42, 43, 44, 45, 46];
const BUDGET: Duration = Duration::from_secs(20 * 60);

fn ac1_transfer(root: &Path) -> Check {
    let mut passing = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let dir = root.join(format!("seed{seed}"));
        let took = experiment(seed, &dir)?;
        let [direct, seg, unet, fine] = water_ious(&dir)?;
        let ok = fine > seg && seg > direct && fine - direct >= 0.10 && took <= BUDGET;
        passing += usize::from(ok);
        lines.push(format!(
            "seed {seed}: direct {:.2} scratch-seg {:.2} scratch-unet {:.2} fine-tuned {:.2} ({:.0}s) {}",
            100.0 * direct,
            100.0 * seg,
            100.0 * unet,
            100.0 * fine,
            took.as_secs_f64(),
            if ok { "ok" } else { "violated" }
        ));
    }
    for l in &lines {
        println!("    {l}");
    }
    ensure(passing >= 4, || format!("ordering held for {passing}/5 seeds"))?;
    Ok(format!("ordering fine > scratch-seg > direct with >= 10 pp margin for {passing}/5 seeds"))
}

fn ac8_determinism(root: &Path) -> Check {
    let first = root.join("seed42");
    if !first.join("metrics.json").exists() {
        experiment(42, &first)?;
    }
    let second = root.join("seed42-repeat");
    experiment(42, &second)?;
    let mut files = vec![PathBuf::from("metrics.json")];
    for e in fs::read_dir(first.join("checkpoints")).map_err(|e| e.to_string())? {
        files.push(Path::new("checkpoints").join(e.map_err(|e| e.to_string())?.file_name()));
    }
    files.sort();
    for f in &files {
        let (a, b) = (fs::read(first.join(f)), fs::read(second.join(f)));
        ensure(matches!((&a, &b), (Ok(x), Ok(y)) if x == y), || format!("{} differs", f.display()))?;
    }
    Ok(format!("{} artifacts byte-identical across two seed-42 runs", files.len()))
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let checks: [(&str, &dyn Fn() -> Check); 8] = [
        ("AC2 loss correctness", &ac2_losses),
        ("AC3 metric oracle", &ac3_metrics),
        ("AC4 tiling exactness", &ac4_tiling),
        ("AC5 schedule exactness", &ac5_schedule),
        ("AC6 model gradients and shapes", &ac6_models),
        ("AC7 hydro analysis", &ac7_hydro),
        ("AC1 synthetic transfer ordering", &|| ac1_transfer(root)),
        ("AC8 determinism", &|| ac8_determinism(root)),
    ];
    let mut results = Vec::new();
    for (name, check) in checks {
        let r = check();
        match &r {
            Ok(detail) => println!("{name}: PASS ({detail})"),
            Err(why) => println!("{name}: FAIL ({why})"),
        }
        results.push((name, r.is_ok()));
    }
    results.sort_by_key(|(name, _)| name[2..3].parse::<u32>().unwrap_or(0));
    println!("\nsummary");
    for (name, ok) in &results {
        println!("  {name}: {}", if *ok { "PASS" } else { "FAIL" });
    }
    let failed: Vec<&str> = results.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
