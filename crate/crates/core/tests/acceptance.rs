//! Acceptance suite. Runs every criterion in order and prints one
//! `PASS`/`FAIL` line each; exits non-zero if any fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rrnet_core::cpm;
use rrnet_core::decoder::{decode, extract_peaks, group_triplets, DecodeConfig, DecodeMaps, Detection, Peak};
use rrnet_core::evaluator::{average_precision, evaluate, GtTriplet, DEFAULT_IOU};
use rrnet_core::frame::{build_params, forward, FrameConfig};
use rrnet_core::geometry::{iou, BBox, GridSpec, Point};
use rrnet_core::gradcheck::{run_suite, TOLERANCE};
use rrnet_core::loss::DEFAULT_LAMBDA;
use rrnet_core::netops::{ParamStore, Tape, Tensor};
use rrnet_core::par::Executor;
use rrnet_core::pipeline::{load_config, run_ablate, run_eval, run_gen, run_infer, run_train, DETECTIONS_FILE, LOSSES_FILE, REPORT_FILE};
use rrnet_core::synthdata::{encode_targets, generate_dataset, generate_scene, DataConfig};
use rrnet_core::trainer::{dataset_loss, ground_truth, scene_objective, TrainConfig};

const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const ROUND_TRIP_BUDGET: Duration = Duration::from_secs(30);
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
/// Steps per wiring in the ablation sweep; the sweep has no time gate but
/// nine full-length runs would dominate the suite.
const ABLATION_STEPS: usize = 400;
const ORACLE_INSTANCES: usize = 50;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    check(elapsed <= budget, format!("took {elapsed:.1?}, budget {budget:?}"))
}

fn config(overrides: &[&str]) -> TrainConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    load_config(None, &o).expect("valid overrides")
}

fn gradient_suite() -> Outcome {
    let began = Instant::now();
    let rows = run_suite(0, None, &Executor::sequential());
    let elapsed = began.elapsed();
    for required in ["head_apply", "iim_forward", "cpm_forward", "focal_loss", "conv2d", "matmul"] {
        check(rows.iter().any(|r| r.op.starts_with(required)), format!("{required} not checked"))?;
    }
    if let Some(r) = rows.iter().find(|r| r.instances < 10) {
        return Err(format!("{} ran {} instances", r.op, r.instances));
    }
    let worst = rows.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("rows");
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
    check(failed.is_empty(), format!("over {TOLERANCE:e}: {}", failed.join(", ")))?;
    within(elapsed, GRADCHECK_BUDGET)?;
    Ok(format!(
        "{} ops, worst {} at {:.2e}, {:.1?}",
        rows.len(),
        worst.op,
        worst.max_rel_error,
        elapsed
    ))
}

fn round_trip() -> Outcome {
    let began = Instant::now();
    let data = DataConfig::default();
    let (mut scenes, mut tried) = (0usize, 0usize);
    let (mut dets_total, mut gts_total) = (0usize, 0usize);
    while scenes < 100 {
        let (scene, _) = generate_scene(&data, tried).map_err(|e| e.to_string())?;
        tried += 1;
        let targets = encode_targets(&scene, &data);
        if targets.collisions > 0 {
            continue;
        }
        scenes += 1;
        let dets = decode(&DecodeMaps::from_targets(&targets), &data.grid, &DecodeConfig::default());
        let gts = GtTriplet::from_scene(&scene);
        let mut claimed = vec![false; gts.len()];
        for d in &dets {
            let hit = gts.iter().enumerate().position(|(gi, g)| {
                !claimed[gi]
                    && g.verb == d.verb
                    && g.object_class == d.object_class
                    && iou(&g.human_box, &d.human_box) >= 0.99
                    && iou(&g.object_box, &d.object_box) >= 0.99
            });
            match hit {
                Some(gi) => claimed[gi] = true,
                None => return Err(format!("scene {}: unmatched detection {d:?}", tried - 1)),
            }
        }
        check(claimed.iter().all(|&c| c), format!("scene {}: missed ground truth", tried - 1))?;
        dets_total += dets.len();
        gts_total += gts.len();
    }
    within(began.elapsed(), ROUND_TRIP_BUDGET)?;
    Ok(format!(
        "precision = recall = 1 over {scenes} scenes ({dets_total} detections, {gts_total} triplets, {} generated), {:.1?}",
        tried,
        began.elapsed()
    ))
}

fn overfit() -> Outcome {
    let began = Instant::now();
    let exec = Executor::sequential();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = config(&["corpus.scenes=16", "train.total_steps=2000", "train.lr=0.0005"]);
    check(cfg.frame == FrameConfig::full(), "not the full wiring")?;
    let data = run_gen(&cfg, &dir.path().join("data"), &exec).map_err(|e| e.to_string())?;
    let dataset = rrnet_core::pipeline::load_dataset(&cfg, &data.path).map_err(|e| e.to_string())?;
    let init = build_params(&cfg.frame, &cfg.dims(), cfg.train.seed).map_err(|e| e.to_string())?;
    let initial = dataset_loss(&cfg, &init, &dataset, &exec).map_err(|e| e.to_string())?.total;

    let run = dir.path().join("run");
    let record = run_train(&cfg, &data.path, &run, &exec).map_err(|e| e.to_string())?;
    let last = dataset_loss(&cfg, &record.params, &dataset, &exec).map_err(|e| e.to_string())?.total;
    let ckpt = record.final_checkpoint.clone().ok_or("no checkpoint written")?;
    run_infer(&cfg, &ckpt, &data.path, &dir.path().join("infer"), false, &exec).map_err(|e| e.to_string())?;
    let report = run_eval(&cfg, &dir.path().join("infer").join(DETECTIONS_FILE), &data.path, &dir.path().join("eval"))
        .map_err(|e| e.to_string())?;
    let elapsed = began.elapsed();

    let ratio = last / initial;
    let detail = format!(
        "loss {initial:.4} -> {last:.4} ({:.1}%), train map_role {:.3}, {} steps, {:.1?}",
        100.0 * ratio,
        report.map_role,
        record.history.len(),
        elapsed
    );
    check(record.history.len() <= 2000, format!("{} steps", record.history.len()))?;
    check(ratio <= 0.1, format!("final loss above 10% of initial: {detail}"))?;
    check(report.map_role >= 0.9, format!("train map_role below 0.9: {detail}"))?;
    within(elapsed, OVERFIT_BUDGET)?;
    Ok(detail)
}

fn ablation() -> Outcome {
    let began = Instant::now();
    let exec = Executor::sequential();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let steps = format!("train.total_steps={ABLATION_STEPS}");
    let cfg = config(&["corpus.scenes=200", "corpus.heldout=50", &steps]);
    let data = run_gen(&cfg, &dir.path().join("data"), &exec).map_err(|e| e.to_string())?;
    let out = dir.path().join("ablate");
    let rows = run_ablate(&cfg, &data.path, &out, &exec).map_err(|e| e.to_string())?;

    let csv = fs::read_to_string(out.join(REPORT_FILE)).map_err(|e| e.to_string())?;
    print!("{}", csv.lines().map(|l| format!("    {l}\n")).collect::<String>());
    check(csv.lines().count() == rows.len() + 1, "csv row count")?;
    let mut labels: Vec<String> = rows.iter().map(|r| r.frame.label()).collect();
    labels.sort();
    labels.dedup();
    check(labels.len() == 9, format!("{} distinct wirings", labels.len()))?;
    if let Some(r) = rows.iter().find(|r| !(r.initial_loss.is_finite() && r.final_loss.is_finite())) {
        return Err(format!("{} has a non-finite loss", r.frame.label()));
    }
    let map_of = |f: FrameConfig| rows.iter().find(|r| r.frame.label() == f.label()).map(|r| r.heldout_map);
    let (full, base) = (map_of(FrameConfig::full()).ok_or("no full row")?, map_of(FrameConfig::baseline()).ok_or("no baseline row")?);
    Ok(format!(
        "9 wirings x {ABLATION_STEPS} steps on 150+50 scenes, held-out map_role full {full:.4} vs baseline {base:.4} (delta {:+.4}), {:.1?}",
        full - base,
        began.elapsed()
    ))
}

/// Local maxima by definition: compare against every in-bounds neighbour,
/// then keep the lowest index of each connected plateau of maxima.
fn oracle_peaks(hm: &Tensor, channels: std::ops::Range<usize>, top_t: usize) -> Vec<Peak> {
    let (h, w) = (hm.shape()[1], hm.shape()[2]);
    let n = h * w;
    let adjacent = |a: usize, b: usize| {
        let (ay, ax, by, bx) = ((a / w) as i64, (a % w) as i64, (b / w) as i64, (b % w) as i64);
        a != b && (ay - by).abs() <= 1 && (ax - bx).abs() <= 1
    };
    let mut all = Vec::new();
    for (class_id, c) in channels.enumerate() {
        let v = |i: usize| hm.data()[c * n + i];
        let is_max: Vec<bool> = (0..n).map(|i| (0..n).all(|j| !adjacent(i, j) || v(i) >= v(j))).collect();
        // Component labels by repeated relaxation to the smallest index.
        let mut label: Vec<usize> = (0..n).collect();
        loop {
            let mut changed = false;
            for i in 0..n {
                for j in 0..n {
                    if is_max[i] && is_max[j] && adjacent(i, j) && label[j] < label[i] {
                        label[i] = label[j];
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        for i in (0..n).filter(|&i| is_max[i] && label[i] == i) {
            all.push(Peak { x: i % w, y: i / w, score: v(i), class_id, order: class_id * n + i });
        }
    }
    let mut out = Vec::new();
    while out.len() < top_t && !all.is_empty() {
        let mut best = 0;
        for k in 1..all.len() {
            let (a, b) = (&all[k], &all[best]);
            if a.score > b.score || (a.score == b.score && a.order < b.order) {
                best = k;
            }
        }
        out.push(all.remove(best));
    }
    out
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    // Coarse levels make plateaus and score ties common.
    let data = (0..c * h * w).map(|_| f64::from(rng.random_range(0u8..=8)) / 8.0).collect();
    Tensor::new(&[c, h, w], data).expect("shape")
}

fn oracle_group(hp: &[Peak], op: &[Peak], ip: &[Peak], maps: &DecodeMaps, grid: &GridSpec, s_min: f64) -> Vec<Detection> {
    let pick = |cands: &[Peak], t: Point| -> Option<Peak> {
        let mut best: Option<Peak> = None;
        for c in cands.iter().filter(|c| c.score > s_min) {
            let cost = c.point().distance(t) / c.score;
            let better = match best {
                None => true,
                Some(b) => {
                    let bc = b.point().distance(t) / b.score;
                    cost < bc || (cost == bc && (c.score > b.score || (c.score == b.score && c.order < b.order)))
                }
            };
            if better {
                best = Some(*c);
            }
        }
        best
    };
    let bbox = |p: &Peak| {
        let s = grid.stride as f64;
        BBox::new(
            (p.x as f64 + maps.off.at3(0, p.y, p.x)) * s,
            (p.y as f64 + maps.off.at3(1, p.y, p.x)) * s,
            maps.wh.at3(0, p.y, p.x),
            maps.wh.at3(1, p.y, p.x),
        )
    };
    let mut out: Vec<Detection> = Vec::new();
    for i in ip.iter().filter(|p| p.score > s_min) {
        let d = |c| maps.disp.at3(c, i.y, i.x);
        let th = Point::new(i.x as f64 + d(0), i.y as f64 + d(1));
        let to = Point::new(i.x as f64 + d(2), i.y as f64 + d(3));
        let (Some(h), Some(o)) = (pick(hp, th), pick(op, to)) else { continue };
        let det = Detection {
            verb: i.class_id,
            object_class: o.class_id,
            score: h.score * i.score * o.score,
            human_box: bbox(&h),
            object_box: bbox(&o),
        };
        // Stable insertion by descending score.
        let at = out.iter().position(|e| e.score < det.score).unwrap_or(out.len());
        out.insert(at, det);
    }
    out
}

fn decoder_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xdec0de);
    let mut peaks_seen = 0;
    for inst in 0..ORACLE_INSTANCES {
        let (c, h, w) = (rng.random_range(1..5), rng.random_range(2..10), rng.random_range(2..10));
        let hm = random_map(&mut rng, c, h, w);
        let lo = rng.random_range(0..c);
        let top_t = rng.random_range(1..40);
        let got = extract_peaks(&hm, lo..c, top_t);
        let want = oracle_peaks(&hm, lo..c, top_t);
        check(got == want, format!("extract_peaks instance {inst}: {got:?} != {want:?}"))?;
        peaks_seen += got.len();
    }
    let mut dets_seen = 0;
    for inst in 0..ORACLE_INSTANCES {
        let (k, nv, h, w) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(3..9), rng.random_range(3..9));
        let grid = GridSpec::new(h, w, rng.random_range(1..5));
        let uniform = |rng: &mut ChaCha8Rng, c: usize, lo: f64, hi: f64| {
            Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
        };
        let maps = DecodeMaps {
            hm_ho: random_map(&mut rng, 1 + k, h, w),
            hm_i: random_map(&mut rng, nv, h, w),
            // Whole-cell displacements produce exact cost ties.
            disp: Tensor::new(&[4, h, w], (0..4 * h * w).map(|_| f64::from(rng.random_range(-3i8..=3))).collect())
                .expect("shape"),
            wh: uniform(&mut rng, 2, 1.0, 20.0),
            off: uniform(&mut rng, 2, 0.0, 1.0),
        };
        let s_min = [0.0, 0.01, 0.3][rng.random_range(0..3)];
        let top_t = rng.random_range(1..30);
        let hp = extract_peaks(&maps.hm_ho, 0..1, top_t);
        let op = extract_peaks(&maps.hm_ho, 1..1 + k, top_t);
        let ip = extract_peaks(&maps.hm_i, 0..nv, top_t);
        let got = group_triplets(&hp, &op, &ip, &maps, &grid, s_min);
        let want = oracle_group(&hp, &op, &ip, &maps, &grid, s_min);
        check(got == want, format!("group_triplets instance {inst} differs"))?;
        dets_seen += got.len();
    }
    Ok(format!(
        "{ORACLE_INSTANCES}+{ORACLE_INSTANCES} instances bit-exact ({peaks_seen} peaks, {dets_seen} detections)"
    ))
}

fn evaluator_fixtures() -> Outcome {
    const EPS: f64 = 1e-9;
    let ap = average_precision(&[true, false, true], 2);
    check((ap - 5.0 / 6.0).abs() <= EPS, format!("[TP,FP,TP] gave {ap}"))?;

    // Two scenes, two verbs. Hand trace:
    //   verb 0 (2 gt): 0.9 TP, 0.8 FP (wrong class), 0.7 TP      -> 1·½ + ⅔·½ = 5/6
    //   verb 1 (1 gt): 0.95 FP (object IoU 0.33), 0.6 TP         -> ½
    //   map_role = (5/6 + ½) / 2 = 2/3
    let bx = |cx: f64| BBox::new(cx, 20.0, 10.0, 10.0);
    let g = |verb, cx: f64| GtTriplet { human_box: bx(cx), object_box: bx(cx + 30.0), object_class: 1, verb };
    let d = |verb, class, cx: f64, ocx: f64, score| Detection {
        verb,
        object_class: class,
        score,
        human_box: bx(cx),
        object_box: bx(ocx),
    };
    let gts = vec![vec![g(0, 10.0), g(1, 10.0)], vec![g(0, 100.0)]];
    let dets = vec![
        vec![d(0, 1, 10.0, 40.0, 0.9), d(1, 1, 10.0, 45.0, 0.95), d(1, 1, 10.0, 40.0, 0.6)],
        vec![d(0, 2, 100.0, 130.0, 0.8), d(0, 1, 100.0, 130.0, 0.7)],
    ];
    check((iou(&bx(40.0), &bx(45.0)) - 1.0 / 3.0).abs() < 1e-12, "fixture IoU")?;
    let r = evaluate(&dets, &gts, 2, DEFAULT_IOU).map_err(|e| e.to_string())?;
    let ap0 = r.ap(0).ok_or("verb 0 missing")?;
    let ap1 = r.ap(1).ok_or("verb 1 missing")?;
    check((ap0 - 5.0 / 6.0).abs() <= EPS, format!("verb 0 AP {ap0}"))?;
    check((ap1 - 0.5).abs() <= EPS, format!("verb 1 AP {ap1}"))?;
    check((r.map_role - 2.0 / 3.0).abs() <= EPS, format!("map_role {}", r.map_role))?;

    let data = DataConfig::default();
    let corpus = generate_dataset(&data, 100, &Executor::sequential()).map_err(|e| e.to_string())?;
    let truth = ground_truth(&corpus);
    let perfect: Vec<Vec<Detection>> = truth
        .iter()
        .map(|s| {
            s.iter()
                .map(|g| Detection {
                    verb: g.verb,
                    object_class: g.object_class,
                    score: 1.0,
                    human_box: g.human_box,
                    object_box: g.object_box,
                })
                .collect()
        })
        .collect();
    let perfect_map = evaluate(&perfect, &truth, data.num_verbs, DEFAULT_IOU).map_err(|e| e.to_string())?.map_role;
    check(perfect_map == 1.0, format!("perfect corpus map_role {perfect_map}"))?;
    Ok(format!("AP 5/6, 1/2, map_role 2/3 within {EPS:e}; perfect corpus of 100 scenes gives 1.0"))
}

fn structural() -> Outcome {
    let cfg = TrainConfig::default();
    let dims = cfg.dims();
    let data = generate_dataset(&cfg.data, 4, &Executor::sequential()).map_err(|e| e.to_string())?;
    let store = build_params(&cfg.frame, &dims, 7).map_err(|e| e.to_string())?;
    let c = dims.point_channels();
    let k = dims.num_object_classes;
    for (img, scene) in data.images.iter().zip(&data.scenes) {
        let mut tape = Tape::new();
        let out = forward(&mut tape, &store, &cfg.frame, &dims, &img.to_tensor()).map_err(|e| e.to_string())?;
        let (f_ho, f_ho_p) = (tape.value(out.f_ho), tape.value(out.f_ho_prime));
        check(f_ho.shape() == f_ho_p.shape(), "IIM changed the shape")?;
        let plane = f_ho.shape()[1] * f_ho.shape()[2];
        check(f_ho.data()[..plane] == f_ho_p.data()[..plane], "human channel altered by IIM")?;
        let beta = tape.value(out.beta.ok_or("no beta")?);
        check(beta.len() == k, format!("beta has {} entries", beta.len()))?;
        check(beta.data().iter().all(|&b| b > 0.0 && b < 1.0), "beta outside (0,1)")?;
        let adj = tape.value(out.cpm.as_ref().ok_or("no CPM")?.adjacency);
        check(adj.shape() == [c, c], format!("adjacency {:?}, want {c}x{c}", adj.shape()))?;

        let targets = encode_targets(scene, &cfg.data);
        let (total, b) = scene_objective(&mut tape, &out, &targets, &cfg.loss).map_err(|e| e.to_string())?;
        let expected = b.l_ho + b.l_i + DEFAULT_LAMBDA * (b.l_dh + b.l_do) + b.l_wh + b.l_off;
        check(cfg.loss.lambda == 0.1, "default lambda")?;
        check((b.total - expected).abs() <= 1e-12 * expected.abs().max(1.0), "total-loss identity")?;
        check(tape.value(total).item() == b.total, "recorded total differs from breakdown")?;
    }

    // Adjacency is a sum over locations, so any reordering leaves it unchanged.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cstore = ParamStore::new();
    cpm::init_params(&mut cstore, 3, c).map_err(|e| e.to_string())?;
    let (h, w) = (cfg.data.grid.height, cfg.data.grid.width);
    let f = Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut rng);
    let mut perm: Vec<usize> = (0..h * w).collect();
    perm.shuffle(&mut rng);
    let mut g = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for (dst, &src) in perm.iter().enumerate() {
            g.data_mut()[ch * h * w + dst] = f.data()[ch * h * w + src];
        }
    }
    let adjacency = |x: Tensor| -> Result<Tensor, String> {
        let mut tape = Tape::new();
        let v = tape.input(x);
        let a = cpm::project_adjacency(&mut tape, &cstore, v).map_err(|e| e.to_string())?;
        Ok(tape.value(a).clone())
    };
    let (a, b) = (adjacency(f)?, adjacency(g)?);
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    check(diff <= 1e-10 * a.max_abs().max(1.0), format!("permuted adjacency differs by {diff:e}"))?;
    Ok(format!("4 scenes: IIM shape and pass-through, beta in (0,1)^{k}, adjacency {c}x{c}, lambda 0.1 identity; permutation max diff {diff:.1e}"))
}

fn pipeline_once(dir: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let exec = Executor::new(1);
    let cfg = config(&["corpus.scenes=16", "train.total_steps=50"]);
    let data = run_gen(&cfg, &dir.join("data"), &exec).map_err(|e| e.to_string())?;
    let rec = run_train(&cfg, &data.path, &dir.join("run"), &exec).map_err(|e| e.to_string())?;
    let ckpt = rec.final_checkpoint.ok_or("no checkpoint")?;
    run_infer(&cfg, &ckpt, &data.path, &dir.join("infer"), false, &exec).map_err(|e| e.to_string())?;
    run_eval(&cfg, &dir.join("infer").join(DETECTIONS_FILE), &data.path, &dir.join("eval")).map_err(|e| e.to_string())?;
    let read = |p: &Path| fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    Ok((read(&dir.join("run").join(LOSSES_FILE))?, read(&dir.join("infer").join(DETECTIONS_FILE))?))
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let (la, da) = pipeline_once(a.path())?;
    let (lb, db) = pipeline_once(b.path())?;
    check(la == lb, "losses.csv differs")?;
    check(da == db, "detections differ")?;
    Ok(format!("losses.csv ({} bytes) and detections ({} bytes) identical across two runs", la.len(), da.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite),
        ("encode/decode round trip", round_trip),
        ("overfit demonstration", overfit),
        ("ablation harness", ablation),
        ("decoder oracle equivalence", decoder_oracles),
        ("evaluator fixtures", evaluator_fixtures),
        ("structural invariants", structural),
        ("determinism", determinism),
    ];
    // Bare arguments select criteria by name substring; flags from the test
    // runner are ignored.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    let mut ran = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        ran += 1;
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL [{}] {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
