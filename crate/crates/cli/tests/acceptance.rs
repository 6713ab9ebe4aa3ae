//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! The end-to-end criteria drive the `sosdet` binary exactly as a user
//! would; artifacts are left under the cargo target tmp dir for inspection.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde_json::Value;

use sosdet::anchors::{build_anchors, match_anchors, AnchorGrid, AnchorSpec, MatchResult};
use sosdet::detect::{detect_image, DetectConfig};
use sosdet::eval::match_detections;
use sosdet::geometry::{nms, BoxF, Detection};
use sosdet::net::layers::{conv2d, conv2d_backward, maxpool2, maxpool2_backward, relu, relu_backward_in_place};
use sosdet::net::{images_to_tensor, init_weights, load_checkpoint, ModelConfig, Tensor};
use sosdet::raster::{build_pyramid, tile, Image, PyramidConfig, TilerConfig};
use sosdet::synth::{load_image, AnnotatedObject, LabeledBox};
use sosdet::train::{hard_negatives, multibox_loss, read_loss_csv, LossConfig};

type Outcome = Result<String, String>;

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// 1. pyramid and tiling

fn noise_image(side: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    let pixels = (0..side * side * 3).map(|_| r.random::<u8>()).collect();
    Image::from_raw(side, side, pixels).unwrap()
}

/// Origins by scanning every pixel position against the tiling rule.
fn brute_force_origins(w: usize, h: usize, cfg: &TilerConfig) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            let col_ok = x % cfg.stride == 0;
            let row_ok = if h < cfg.patch_height {
                y == 0
            } else {
                y % cfg.stride == 0 && y + cfg.patch_height <= h
            };
            if col_ok && row_ok {
                out.insert((x, y));
            }
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let image = noise_image(2048, 1);
    let (pcfg, tcfg) = (PyramidConfig::default(), TilerConfig::default());
    let start = Instant::now();
    let levels = build_pyramid(&image, &pcfg);
    let patches: Vec<_> = levels.iter().map(|l| tile(l, &tcfg)).collect();
    let elapsed = start.elapsed();

    ensure(levels.len() == 5, || format!("{} levels, want 5", levels.len()))?;
    let mut side = 2048usize;
    for (l, (level, ps)) in levels.iter().zip(&patches).enumerate() {
        ensure(level.image.width() == side && level.image.height() == side, || {
            format!("level {l} is {}x{}, want {side}²", level.image.width(), level.image.height())
        })?;
        let got: BTreeSet<_> = ps.iter().map(|p| (p.origin_x, p.origin_y)).collect();
        let want = brute_force_origins(side, side, &tcfg);
        ensure(got == want && got.len() == ps.len(), || format!("level {l} origins differ from brute force"))?;
        side /= 2;
    }
    ensure(patches[0].len() == 132, || format!("{} level-0 patches, want 132", patches[0].len()))?;
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    let counts: Vec<_> = patches.iter().map(Vec::len).collect();
    Ok(format!("5 levels, patches per level {counts:?}, {:.0} ms", elapsed.as_secs_f64() * 1e3))
}

// ---------------------------------------------------------------------------
// 2. default boxes and head size

fn criterion_2() -> Outcome {
    let spec = AnchorSpec::default();
    let grid = build_anchors(&spec);
    ensure(grid.len() == 3750, || format!("{} default boxes", grid.len()))?;
    let s1 = 0.1 * 200.0;
    let s2 = (s1 * 0.2 * 200.0f64).sqrt();
    ensure((spec.s1() - 20.0).abs() < 1e-9 && (spec.s2() - 800f64.sqrt()).abs() < 1e-9, || {
        format!("s1 {} s2 {}", spec.s1(), spec.s2())
    })?;
    let mut shapes = vec![(s1, s1), (s2, s2)];
    for a in [2.0f64, 3.0, 0.5, 1.0 / 3.0] {
        shapes.push((s1 * a.sqrt(), s1 / a.sqrt()));
    }
    let mut worst = 0.0f64;
    for row in 0..25 {
        for col in 0..25 {
            let (cx, cy) = (8.0 * (col as f64 + 0.5), 8.0 * (row as f64 + 0.5));
            for (k, &(w, h)) in shapes.iter().enumerate() {
                let b = grid.boxes[(row * 25 + col) * 6 + k];
                let want = [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0];
                for (g, e) in [b.xmin, b.ymin, b.xmax, b.ymax].iter().zip(want) {
                    worst = worst.max((g - e).abs());
                }
            }
        }
    }
    ensure(worst < 1e-9, || format!("default box deviates by {worst:e}"))?;

    let mut checked = Vec::new();
    for k in [1usize, 5, 20] {
        let cfg = ModelConfig {
            foreground_classes: k,
            ..ModelConfig::default()
        };
        let model = init_weights(&cfg, 3);
        let img = noise_image(200, 2);
        let out = model.forward(&images_to_tensor(&[&img]).unwrap()).unwrap();
        let c = k + 1;
        let want = (c + 4) * 6 * 25 * 25;
        let got = out.conf.len() + out.loc.len();
        ensure(got == want && cfg.predictions_per_patch() == want, || {
            format!("c={c}: {got} predictions, want {want}")
        })?;
        checked.push(format!("c={c}:{got}"));
    }
    Ok(format!("3750 boxes, s2={s2:.6}, max box error {worst:.1e}, predictions {}", checked.join(" ")))
}

// ---------------------------------------------------------------------------
// 3. gradient checks

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random_tensor(r: &mut Xoshiro256PlusPlus, shape: [usize; 4]) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Largest relative error between `analytic` and central differences of `f`
/// over every coordinate of `x`.
fn fd_check(x: &Tensor<f64>, analytic: &[f64], f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    const H: f64 = 1e-6;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let v = x.data()[i];
        probe.data_mut()[i] = v + H;
        let up = f(&probe);
        probe.data_mut()[i] = v - H;
        let down = f(&probe);
        probe.data_mut()[i] = v;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * H)));
    }
    worst
}

fn conv_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    // both convolution code paths: narrow inputs and wide ones
    let in_c = if seed % 2 == 0 { r.random_range(1..=4) } else { r.random_range(9..=12) };
    let out_c = r.random_range(1..=4);
    let (h, w) = (r.random_range(3..=6), r.random_range(3..=6));
    let x = random_tensor(&mut r, [2, in_c, h, w]);
    let wt = random_tensor(&mut r, [out_c, in_c, 3, 3]);
    let b: Vec<f64> = (0..out_c).map(|_| r.random_range(-1.0..1.0)).collect();
    let proj = random_tensor(&mut r, [2, out_c, h, w]);
    let g = conv2d_backward(&proj, &x, &wt, true).unwrap();
    let ex = fd_check(&x, g.input.as_ref().unwrap().data(), |x| dot(&conv2d(x, &wt, &b).unwrap(), &proj));
    let ew = fd_check(&wt, g.weight.data(), |wt| dot(&conv2d(&x, wt, &b).unwrap(), &proj));
    let bt = Tensor::from_vec([1, 1, 1, out_c], b.clone()).unwrap();
    let eb = fd_check(&bt, &g.bias, |bt| dot(&conv2d(&x, &wt, bt.data()).unwrap(), &proj));
    ex.max(ew).max(eb)
}

fn pool_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [2, r.random_range(1..=3), 2 * r.random_range(1..=4), 2 * r.random_range(1..=4)];
    let x = random_tensor(&mut r, shape);
    let (out, argmax) = maxpool2(&x).unwrap();
    let proj = random_tensor(&mut r, out.shape());
    let g = maxpool2_backward(&proj, &argmax, shape);
    fd_check(&x, g.data(), |x| dot(&maxpool2(x).unwrap().0, &proj))
}

fn relu_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut x = random_tensor(&mut r, [2, 3, 4, 5]);
    // keep clear of the kink
    for v in x.data_mut() {
        if v.abs() < 1e-3 {
            *v = 0.5;
        }
    }
    let out = relu(&x);
    let proj = random_tensor(&mut r, out.shape());
    let mut g = proj.clone();
    relu_backward_in_place(&mut g, &out);
    fd_check(&x, g.data(), |x| dot(&relu(x), &proj))
}

/// Small lattice with a handful of ground truths built by inflating default
/// boxes slightly, so every sample has matches.
fn loss_case(seed: u64) -> (AnchorGrid, Vec<Vec<LabeledBox>>, Tensor<f64>, Tensor<f64>, usize) {
    let mut r = rng(seed);
    let spec = AnchorSpec {
        input_side: 40,
        feature_side: 5,
        ..AnchorSpec::default()
    };
    let grid = build_anchors(&spec);
    let classes = 4;
    let batch = 2;
    let gts: Vec<Vec<LabeledBox>> = (0..batch)
        .map(|_| {
            (0..r.random_range(1..=3))
                .map(|_| {
                    let a = grid.boxes[r.random_range(0..grid.len())];
                    let (cx, cy) = a.center();
                    let f = r.random_range(1.0..1.15);
                    LabeledBox {
                        class_id: r.random_range(0..classes - 1),
                        bbox: BoxF::from_center(cx + r.random_range(-0.5..0.5), cy, a.width() * f, a.height() * f),
                    }
                })
                .collect()
        })
        .collect();
    let per_cell = grid.boxes_per_cell;
    let conf = random_tensor(&mut r, [batch, per_cell * classes, 5, 5]);
    let loc = random_tensor(&mut r, [batch, per_cell * 4, 5, 5]);
    (grid, gts, conf, loc, classes)
}

fn loss_check(seed: u64) -> Result<f64, String> {
    let (grid, gts, conf, loc, _) = loss_case(seed);
    let cfg = LossConfig::default();
    let out = multibox_loss(&conf, &loc, &grid, &gts, &cfg).map_err(|e| e.to_string())?;
    ensure(out.matched > 0, || format!("seed {seed}: no matched anchors"))?;
    let ec = fd_check(&conf, out.grad_conf.data(), |c| multibox_loss(c, &loc, &grid, &gts, &cfg).unwrap().loss);
    let el = fd_check(&loc, out.grad_loc.data(), |l| multibox_loss(&conf, l, &grid, &gts, &cfg).unwrap().loss);
    Ok(ec.max(el))
}

fn criterion_3() -> Outcome {
    const SEEDS: u64 = 20;
    let start = Instant::now();
    let mut worst = [0.0f64; 4];
    for seed in 0..SEEDS {
        worst[0] = worst[0].max(conv_check(seed));
        worst[1] = worst[1].max(pool_check(seed));
        worst[2] = worst[2].max(relu_check(seed));
        worst[3] = worst[3].max(loss_check(seed)?);
    }
    let elapsed = start.elapsed();
    let names = ["conv", "maxpool", "relu"];
    for (name, w) in names.iter().zip(&worst) {
        ensure(*w < 1e-4, || format!("{name} relative error {w:e} >= 1e-4"))?;
    }
    ensure(worst[3] < 1e-3, || format!("multibox loss relative error {:e} >= 1e-3", worst[3]))?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{SEEDS} seeds; max rel err conv {:.1e}, maxpool {:.1e}, relu {:.1e}, loss {:.1e}; {:.1} s",
        worst[0],
        worst[1],
        worst[2],
        worst[3],
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 4. brute-force oracles

fn oracle_iou(a: &BoxF, b: &BoxF) -> f64 {
    let w = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let h = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = w * h;
    let union = (a.xmax - a.xmin) * (a.ymax - a.ymin) + (b.xmax - b.xmin) * (b.ymax - b.ymin) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Coordinates on a coarse lattice so equal IoUs and equal scores occur.
fn lattice_box(r: &mut Xoshiro256PlusPlus, extent: f64) -> BoxF {
    let q = |v: f64| (v * 2.0).round() / 2.0;
    let x = q(r.random_range(0.0..extent * 0.8));
    let y = q(r.random_range(0.0..extent * 0.8));
    let w = q(r.random_range(1.0..extent * 0.5));
    let h = q(r.random_range(1.0..extent * 0.5));
    BoxF::new(x, y, x + w, y + h).unwrap()
}

fn oracle_match(gts: &[BoxF], grid: &AnchorGrid, threshold: f64) -> Vec<Option<usize>> {
    grid.boxes
        .iter()
        .map(|a| {
            let mut scored: Vec<(f64, usize)> = gts.iter().enumerate().map(|(g, b)| (oracle_iou(b, a), g)).collect();
            scored.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
            scored.first().filter(|(v, _)| *v > threshold).map(|&(_, g)| g)
        })
        .collect()
}

fn oracle_rank(a: &Detection, b: &Detection) -> Ordering {
    let ka = [a.bbox.xmin, a.bbox.ymin, a.bbox.xmax, a.bbox.ymax];
    let kb = [b.bbox.xmin, b.bbox.ymin, b.bbox.xmax, b.bbox.ymax];
    b.score
        .partial_cmp(&a.score)
        .unwrap()
        .then_with(|| ka.partial_cmp(&kb).unwrap())
        .then(a.class_id.cmp(&b.class_id))
}

/// A detection survives iff no surviving, higher-ranked detection of its
/// class overlaps it by more than the threshold; evaluated class by class.
fn oracle_nms(dets: &[Detection], t: f64) -> Vec<Detection> {
    let classes: BTreeSet<usize> = dets.iter().map(|d| d.class_id).collect();
    let mut out = Vec::new();
    for c in classes {
        let mut ranked: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
        ranked.sort_by(oracle_rank);
        let mut alive = vec![true; ranked.len()];
        for i in 0..ranked.len() {
            alive[i] = (0..i).all(|j| !alive[j] || oracle_iou(&ranked[j].bbox, &ranked[i].bbox) <= t);
        }
        out.extend(ranked.into_iter().zip(alive).filter(|(_, a)| *a).map(|(d, _)| d));
    }
    out.sort_by(oracle_rank);
    out
}

fn oracle_negatives(conf: &Tensor<f64>, matches: &[MatchResult], per_cell: usize, ratio: usize) -> Vec<usize> {
    let classes = conf.channels() / per_cell;
    let cells = conf.height() * conf.width();
    let anchors = cells * per_cell;
    let n: usize = matches.iter().map(|m| m.matched_count).sum();
    let mut scored = Vec::new();
    for b in 0..conf.batch() {
        let s = conf.sample(b);
        for a in 0..anchors {
            if matches[b].assignment[a].is_some() {
                continue;
            }
            let (cell, slot) = (a / per_cell, a % per_cell);
            let logit = |k: usize| s[(slot * classes + k) * cells + cell];
            let z: f64 = (0..classes).map(|k| logit(k).exp()).sum();
            let p_bg = logit(0).exp() / z;
            scored.push((-p_bg.ln(), b * anchors + a));
        }
    }
    scored.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
    let mut picked: Vec<usize> = scored.into_iter().take(ratio * n).map(|(_, i)| i).collect();
    picked.sort();
    picked
}

fn oracle_eval(dets: &[Detection], gts: &[AnnotatedObject], t: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| oracle_rank(&dets[a], &dets[b]).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for i in order {
        let mut options: Vec<(f64, usize)> = gts
            .iter()
            .enumerate()
            .filter(|(g, gt)| !used[*g] && gt.class_id == dets[i].class_id)
            .map(|(g, gt)| (oracle_iou(&dets[i].bbox, &gt.bbox), g))
            .filter(|(v, _)| *v >= t)
            .collect();
        options.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        if let Some(&(_, g)) = options.first() {
            used[g] = true;
            out[i] = Some(g);
        }
    }
    out
}

fn random_dets(r: &mut Xoshiro256PlusPlus, n: usize, classes: usize, extent: f64) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            bbox: lattice_box(r, extent),
            class_id: r.random_range(0..classes),
            score: (r.random_range(0..6) as f64) / 5.0,
        })
        .collect()
}

fn criterion_4() -> Outcome {
    const CASES: u64 = 1000;
    for case in 0..CASES {
        let mut r = rng(10_000 + case);
        let spec = AnchorSpec {
            input_side: 24,
            feature_side: r.random_range(1..=4),
            small_fraction: r.random_range(0.1..0.4),
            large_fraction: r.random_range(0.45..0.8),
            aspect_ratios: vec![2.0, 0.5],
        };
        let grid = build_anchors(&spec);
        let gts: Vec<BoxF> = (0..r.random_range(0..5)).map(|_| lattice_box(&mut r, 24.0)).collect();
        let t = [0.3, 0.5][r.random_range(0..2)];
        let got = match_anchors(&gts, &grid, t);
        let want = oracle_match(&gts, &grid, t);
        ensure(got.assignment == want, || format!("matcher disagrees on case {case}"))?;
        ensure(got.matched_count == want.iter().flatten().count(), || format!("matcher count, case {case}"))?;

        let n = r.random_range(0..12);
        let dets = random_dets(&mut r, n, 3, 30.0);
        let t = [0.0, 0.3, 0.45, 0.7][r.random_range(0..4)];
        let mut got = nms(&dets, t);
        got.sort_by(oracle_rank);
        ensure(got == oracle_nms(&dets, t), || format!("nms disagrees on case {case}"))?;

        let per_cell = 2;
        let (side, batch, classes) = (r.random_range(1..=3), r.random_range(1..=3), 3);
        let conf = random_tensor(&mut r, [batch, per_cell * classes, side, side]);
        let anchors = side * side * per_cell;
        let matches: Vec<MatchResult> = (0..batch)
            .map(|_| {
                let assignment: Vec<Option<usize>> =
                    (0..anchors).map(|_| r.random_bool(0.2).then_some(0)).collect();
                let matched_count = assignment.iter().flatten().count();
                MatchResult {
                    assignment,
                    matched_count,
                }
            })
            .collect();
        let ratio = r.random_range(1..=3);
        let mut got = hard_negatives(&conf, &matches, per_cell, ratio);
        got.sort();
        ensure(got == oracle_negatives(&conf, &matches, per_cell, ratio), || {
            format!("hard negatives disagree on case {case}")
        })?;

        let gts: Vec<AnnotatedObject> = (0..r.random_range(0..6))
            .map(|_| AnnotatedObject {
                class_id: r.random_range(0..2),
                bbox: lattice_box(&mut r, 30.0),
            })
            .collect();
        let n = r.random_range(0..8);
        let dets = random_dets(&mut r, n, 2, 30.0);
        let t = [0.1, 0.5][r.random_range(0..2)];
        let got: Vec<Option<usize>> = match_detections(&dets, &gts, t).iter().map(|l| l.gt).collect();
        ensure(got == oracle_eval(&dets, &gts, t), || format!("eval matching disagrees on case {case}"))?;
    }
    Ok(format!("{CASES} fuzzed cases each for matcher, NMS, hard negatives, eval matching"))
}

// ---------------------------------------------------------------------------
// end-to-end runs through the binary

fn sosdet(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sosdet"))
        .args(args)
        .output()
        .map_err(|e| format!("spawn: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "`sosdet {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

struct DeskRun {
    dir: PathBuf,
    train_time: Duration,
}

impl DeskRun {
    fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
    fn test_dir(&self) -> PathBuf {
        self.dir.join("test")
    }
    fn detections(&self) -> PathBuf {
        self.dir.join("detections.jsonl")
    }
    fn report_dir(&self) -> PathBuf {
        self.dir.join("report")
    }
    fn loss_log(&self) -> PathBuf {
        self.dir.join("model.ckpt.loss.csv")
    }
    fn report(&self) -> Result<Value, String> {
        read_json(&self.report_dir().join("report.json"))
    }
}

fn read_json(path: &Path) -> Result<Value, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

/// 200 training and 50 held-out scenes from seed 42, default training,
/// full-pyramid detection and evaluation, all serial.
fn desk_run(dir: &Path) -> Result<DeskRun, String> {
    let _ = fs::remove_dir_all(dir);
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let train = dir.join("train");
    let run = DeskRun {
        dir: dir.to_path_buf(),
        train_time: Duration::ZERO,
    };
    let common = ["--threads", "1", "--seed", "42"];
    let with = |rest: &[&str]| -> Vec<String> { common.iter().chain(rest).map(|x| x.to_string()).collect() };
    let call = |rest: &[&str]| -> Result<String, String> {
        let args = with(rest);
        sosdet(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    call(&["synth", "--out", s(&train), "--count", "200"])?;
    call(&["synth", "--out", s(&run.test_dir()), "--first", "200", "--count", "50"])?;
    let start = Instant::now();
    call(&["train", "--dataset", s(&train), "--out", s(&run.checkpoint())])?;
    let train_time = start.elapsed();
    call(&[
        "detect",
        "--checkpoint",
        s(&run.checkpoint()),
        "--input",
        s(&run.test_dir()),
        "--out",
        s(&run.detections()),
    ])?;
    call(&[
        "eval",
        "--detections",
        s(&run.detections()),
        "--annotations",
        s(&run.test_dir().join("annotations.jsonl")),
        "--out",
        s(&run.report_dir()),
    ])?;
    Ok(DeskRun { train_time, ..run })
}

fn op(report: &Value, bucket: Option<&str>) -> Result<(f64, f64, u64), String> {
    let b = match bucket {
        None => &report["overall"],
        Some(name) => report["buckets"]
            .as_array()
            .and_then(|bs| bs.iter().find(|b| b["name"] == name))
            .ok_or_else(|| format!("no bucket {name}"))?,
    };
    let p = &b["operating_point"];
    let f = |k: &str| p[k].as_f64().ok_or_else(|| format!("report lacks {k}"));
    Ok((f("precision")?, f("recall")?, p["ground_truths"].as_u64().unwrap_or(0)))
}

fn criterion_5(run: &DeskRun) -> Outcome {
    let model = load_checkpoint(&run.checkpoint()).map_err(|e| e.to_string())?;
    let cfg = DetectConfig {
        score_threshold: 0.05,
        ..DetectConfig::default()
    };
    let bits = |d: &[Detection]| -> Vec<([u64; 5], usize)> {
        d.iter()
            .map(|d| {
                let b = d.bbox;
                ([b.xmin, b.ymin, b.xmax, b.ymax, d.score].map(f64::to_bits), d.class_id)
            })
            .collect()
    };
    let mut total = 0;
    for i in 0..5 {
        let path = run.test_dir().join(format!("scene_{:05}.ppm", 200 + i));
        let image = load_image(&path).map_err(|e| e.to_string())?;
        let outs: Vec<_> = [1usize, 4, 64]
            .iter()
            .map(|&b| detect_image(&model, &image, &DetectConfig { batch_size: b, ..cfg.clone() }).map(|d| bits(&d)))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        ensure(outs[0] == outs[1] && outs[0] == outs[2], || format!("batch sizes disagree on {}", path.display()))?;
        total += outs[0].len();
    }

    let mut files = Vec::new();
    for threads in ["1", "8"] {
        let out = run.dir.join(format!("threads_{threads}.jsonl"));
        sosdet(&[
            "--threads",
            threads,
            "detect",
            "--checkpoint",
            s(&run.checkpoint()),
            "--input",
            s(&run.test_dir()),
            "--out",
            s(&out),
            "--score-threshold",
            "0.05",
        ])?;
        files.push(fs::read(&out).map_err(|e| e.to_string())?);
    }
    ensure(files[0] == files[1], || "--threads 1 and --threads 8 outputs differ".into())?;
    Ok(format!(
        "batch 1/4/64 identical on 5 images ({total} detections); threads 1 vs 8 identical ({} bytes)",
        files[0].len()
    ))
}

fn criterion_6(run: &DeskRun) -> Outcome {
    let (precision, recall, gts) = op(&run.report()?, None)?;
    let log = read_loss_csv(&run.loss_log()).map_err(|e| e.to_string())?;
    let early = log.iter().find(|r| r.iteration == 10).map(|r| r.loss);
    let reduction = match (early, log.last()) {
        (Some(early), Some(last)) => format!("{:.2}x", early / last.loss),
        _ => "n/a".into(),
    };
    let evidence = format!(
        "precision {precision:.4}, recall {recall:.4} over {gts} signs; training {:.1} min; loss iteration 10 to end reduced {reduction}",
        run.train_time.as_secs_f64() / 60.0
    );
    ensure(recall >= 0.80 && precision >= 0.80, || evidence.clone())?;
    Ok(evidence)
}

fn criterion_7(run: &DeskRun) -> Outcome {
    let dets = run.dir.join("detections_level0.jsonl");
    let report_dir = run.dir.join("report_level0");
    sosdet(&[
        "--threads",
        "1",
        "detect",
        "--checkpoint",
        s(&run.checkpoint()),
        "--input",
        s(&run.test_dir()),
        "--out",
        s(&dets),
        "--levels",
        "0",
    ])?;
    sosdet(&[
        "eval",
        "--detections",
        s(&dets),
        "--annotations",
        s(&run.test_dir().join("annotations.jsonl")),
        "--out",
        s(&report_dir),
    ])?;
    let full = run.report()?;
    let level0 = read_json(&report_dir.join("report.json"))?;
    let (_, large_full, large_n) = op(&full, Some("large"))?;
    let (_, large_l0, _) = op(&level0, Some("large"))?;
    let (_, small_full, small_n) = op(&full, Some("small"))?;
    let (_, small_l0, _) = op(&level0, Some("small"))?;
    let evidence = format!(
        "large recall {large_full:.3} -> {large_l0:.3} ({large_n} signs), small recall {small_full:.3} -> {small_l0:.3} ({small_n} signs)"
    );
    ensure(large_n > 0 && small_n > 0, || format!("empty bucket: {evidence}"))?;
    ensure(large_full - large_l0 >= 0.3 && (small_full - small_l0).abs() <= 0.05, || evidence.clone())?;
    Ok(evidence)
}

fn criterion_8(a: &DeskRun, root: &Path) -> Outcome {
    let b = desk_run(&root.join("run_b"))?;
    let same = |x: &Path, y: &Path| -> Result<bool, String> {
        Ok(fs::read(x).map_err(|e| e.to_string())? == fs::read(y).map_err(|e| e.to_string())?)
    };
    let mut compared = vec![
        a.checkpoint(),
        a.detections(),
        a.report_dir().join("report.json"),
        a.test_dir().join("annotations.jsonl"),
        a.loss_log(),
    ];
    for name in ["overall", "small", "medium", "large"] {
        compared.push(a.report_dir().join(format!("curve_{name}.csv")));
    }
    for pa in &compared {
        let rel = pa.strip_prefix(&a.dir).unwrap();
        ensure(same(pa, &b.dir.join(rel))?, || format!("{} differs between runs", rel.display()))?;
    }
    Ok(format!("{} artifacts byte-identical across two serial runs", compared.len()))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    // optional positional criterion numbers select a subset; default is all
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, outcome: Outcome| {
        let tag = if outcome.is_ok() { "PASS" } else { "FAIL" };
        eprintln!("  finished criterion {n}: {tag}");
        results.push((n, name, outcome));
    };

    let fast: [(u32, &str, fn() -> Outcome); 4] = [
        (1, "pyramid and tiling exactness", criterion_1),
        (2, "default boxes and head size", criterion_2),
        (3, "finite-difference gradient checks", criterion_3),
        (4, "brute-force oracle agreement", criterion_4),
    ];
    for (n, name, check) in fast {
        if wanted(n) {
            record(n, name, check());
        }
    }
    let desk: [(u32, &str); 4] = [
        (5, "batch and thread invariance"),
        (6, "desk end-to-end recall/precision"),
        (7, "single-level ablation"),
        (8, "serial determinism"),
    ];
    if desk.iter().any(|(n, _)| wanted(*n)) {
        match desk_run(&root.join("run_a")) {
            Ok(run) => {
                for (n, name) in desk {
                    if wanted(n) {
                        let outcome = match n {
                            5 => criterion_5(&run),
                            6 => criterion_6(&run),
                            7 => criterion_7(&run),
                            _ => criterion_8(&run, &root),
                        };
                        record(n, name, outcome);
                    }
                }
            }
            Err(e) => {
                for (n, name) in desk.into_iter().filter(|(n, _)| wanted(*n)) {
                    record(n, name, Err(format!("desk run failed: {e}")));
                }
            }
        }
    }

    results.sort_by_key(|r| r.0);
    println!();
    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(ev) => println!("PASS  [{n}] {name}: {ev}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  [{n}] {name}: {why}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
