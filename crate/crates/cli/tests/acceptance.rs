//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines always print.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use pairsel::features::{extract, match_descriptors, FrameFeatures, MatchSet};
use pairsel::geometry2d::{estimate_similarity, pair_geometry, RansacParams};
use pairsel::image_io::{Frame, FrameSequence, GrayImage};
use pairsel::optical_flow::{average_motion, track_points, FlowParams};
use pairsel::quality_metrics::{psnr, ssim, MetricImage, SSIM_C1, SSIM_C2};
use pairsel::selection::{candidate_pairs, score_pair, select, SelectionConfig, Strategy};
use pairsel::sim3_align::{umeyama, Pose, PoseId};
use pairsel::synth_culvert::{render_scene, write_scene, RenderedScene, SceneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_secs: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_secs, || {
        format!("took {:.2}s, limit {limit_secs}s", elapsed.as_secs_f64())
    })
}

fn pose(k: usize, yaw_deg: f64, pitch_deg: f64, roll_deg: f64, z: f64) -> Pose {
    let r = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw_deg.to_radians())
        * Rotation3::from_axis_angle(&Vector3::x_axis(), -pitch_deg.to_radians())
        * Rotation3::from_axis_angle(&Vector3::z_axis(), roll_deg.to_radians());
    Pose {
        id: PoseId::Index(k as u64),
        rotation: *r.matrix(),
        center: Vector3::new(0.0, 0.0, z),
    }
}

/// Camera turning steadily (pan, optionally with tilt) and rolling about
/// its viewing axis while creeping forward.
struct Motion {
    frames: usize,
    pan_deg: f64,
    tilt_deg: f64,
    roll_deg: f64,
    step: f64,
}

fn render(seed: u64, width: usize, height: usize, m: &Motion) -> RenderedScene {
    let trajectory = (0..m.frames)
        .map(|k| {
            let kf = k as f64;
            pose(k, m.pan_deg * kf, m.tilt_deg * kf, m.roll_deg * kf, 1.0 + m.step * kf)
        })
        .collect();
    let cfg = SceneConfig {
        radius: 1.0,
        length: 20.0,
        texture_seed: seed,
        texture_scale: 4.0,
        light_falloff: 0.05,
        width,
        height,
        focal: 0.75 * width as f64,
        trajectory,
    };
    render_scene(&cfg).expect("valid scene")
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let beta: f64 = rng.random_range(0.0..500.0);
        let t_angle: f64 = rng.random_range(0.1..90.0);
        let theta: f64 = rng.random_range(0.0..t_angle);
        let cfg = SelectionConfig { t_angle, ..Default::default() };
        let got = score_pair(beta, theta, &cfg);
        let want = beta + (1.0 - theta / t_angle);
        let rel = (got - want).abs() / want.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        ensure(rel <= 1e-12, || format!("score({beta}, {theta}, {t_angle}) = {got}, expected {want}"))?;
        ensure(score_pair(beta, 0.0, &cfg) == beta + 1.0, || format!("score({beta}, 0) != beta + 1"))?;
        ensure(score_pair(beta, t_angle, &cfg) == beta, || format!("score({beta}, T_angle) != beta"))?;
    }
    within(start.elapsed(), 1.0)?;
    Ok(format!("1000 triples, worst relative error {worst:.1e}"))
}

/// Independent re-measurement of a pair from frames alone.
fn remeasure(seq: &FrameSequence, i: usize, j: usize, cfg: &SelectionConfig) -> Option<(f64, f64, f64)> {
    let (fi, fj) = (&seq.frames()[i], &seq.frames()[j]);
    let (a, b) = (extract(fi, &cfg.features), extract(fj, &cfg.features));
    let m = MatchSet::new(i, j, match_descriptors(&a.descriptors, &b.descriptors, &cfg.matching)).ok()?;
    let mut geometry = cfg.geometry;
    geometry.ransac.seed = cfg.seed;
    let g = pair_geometry(&m, &a.keypoints, &b.keypoints, &geometry).ok()?;
    let pts: Vec<[f64; 2]> = a.keypoints.iter().map(|k| [k.x, k.y]).collect();
    let flow = average_motion(&track_points(fi, fj, &pts, &cfg.flow).ok()?, cfg.min_tracked);
    flow.reliable.then_some((flow.mean_magnitude, g.beta, g.theta))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let cfg = SelectionConfig::default();
    let mut chosen = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let motion = Motion {
            frames: 6,
            pan_deg: rng.random_range(1.5..4.0),
            tilt_deg: if rng.random::<bool>() { rng.random_range(0.0..2.0) } else { 0.0 },
            roll_deg: sign * rng.random_range(0.0..4.0),
            step: rng.random_range(0.0..0.05),
        };
        let scene = render(seed, 128, 96, &motion);
        let result = select(&scene.frames, &cfg).map_err(|e| e.to_string())?;
        let Some((i, j)) = result.chosen else { continue };
        chosen += 1;
        let (f, beta, theta) = remeasure(&scene.frames, i, j, &cfg)
            .ok_or_else(|| format!("scene {seed}: chosen pair ({i},{j}) fails on re-measurement"))?;
        ensure(f >= cfg.t_flow, || format!("scene {seed} ({i},{j}): F = {f}"))?;
        ensure(beta >= cfg.t_baseline && beta <= cfg.alpha * cfg.t_baseline, || {
            format!("scene {seed} ({i},{j}): beta = {beta}")
        })?;
        ensure(theta <= cfg.t_angle, || format!("scene {seed} ({i},{j}): theta = {theta}"))?;
    }
    ensure(chosen >= 25, || format!("only {chosen}/50 scenes produced a pair"))?;
    within(start.elapsed(), 300.0)?;
    Ok(format!("{chosen}/50 scenes chose a pair, 0 violations, {:.1}s", start.elapsed().as_secs_f64()))
}

/// Straight loop over the stride grid using only the lower-level modules.
fn enumerate(seq: &FrameSequence, cfg: &SelectionConfig) -> (Option<(usize, usize)>, Vec<(usize, usize, Option<u64>)>) {
    let features: Vec<FrameFeatures> = seq.frames().iter().map(|f| extract(f, &cfg.features)).collect();
    let mut geometry = cfg.geometry;
    geometry.ransac.seed = cfg.seed;
    let n = seq.len();
    let mut best: Option<(f64, usize, usize)> = None;
    let mut scores = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i + cfg.stride;
        while j < n {
            let (a, b) = (&features[i], &features[j]);
            let matches = match_descriptors(&a.descriptors, &b.descriptors, &cfg.matching);
            let mut score = None;
            if matches.len() >= 3 {
                let m = MatchSet::new(i, j, matches).unwrap();
                if let Ok(g) = pair_geometry(&m, &a.keypoints, &b.keypoints, &geometry) {
                    if g.beta >= cfg.t_baseline && g.beta <= cfg.alpha * cfg.t_baseline && g.theta <= cfg.t_angle {
                        let pts: Vec<[f64; 2]> = a.keypoints.iter().map(|k| [k.x, k.y]).collect();
                        let flows = track_points(&seq.frames()[i], &seq.frames()[j], &pts, &cfg.flow).unwrap();
                        let flow = average_motion(&flows, cfg.min_tracked);
                        if flow.reliable && flow.mean_magnitude >= cfg.t_flow {
                            score = Some(score_pair(g.beta, g.theta, cfg));
                        }
                    }
                }
            }
            if let Some(s) = score {
                let replace = match best {
                    None => true,
                    Some((bs, bi, bj)) => s > bs || (s == bs && (i, j) < (bi, bj)),
                };
                if replace {
                    best = Some((s, i, j));
                }
            }
            scores.push((i, j, score.map(f64::to_bits)));
            j += cfg.stride;
        }
        i += cfg.stride;
    }
    (best.map(|(_, i, j)| (i, j)), scores)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut with_choice = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let frames = if seed < 10 { rng.random_range(4..=7) } else { rng.random_range(8..=12) };
        let motion = Motion {
            frames,
            pan_deg: rng.random_range(1.5..4.0),
            tilt_deg: 0.0,
            roll_deg: rng.random_range(-4.0..4.0),
            step: rng.random_range(0.0..0.04),
        };
        let scene = render(100 + seed, 96, 72, &motion);
        let cfg = SelectionConfig {
            stride: if seed < 10 { 1 } else { 2 },
            seed,
            ..Default::default()
        };
        let result = select(&scene.frames, &cfg).map_err(|e| e.to_string())?;
        let (oracle_choice, oracle_scores) = enumerate(&scene.frames, &cfg);
        let ours: Vec<_> = result.stats.iter().map(|s| (s.i, s.j, s.score.map(f64::to_bits))).collect();
        ensure(ours == oracle_scores, || format!("sequence {seed}: per-pair scores differ"))?;
        ensure(result.chosen == oracle_choice, || {
            format!("sequence {seed}: select chose {:?}, enumerator {:?}", result.chosen, oracle_choice)
        })?;
        ensure(candidate_pairs(frames, cfg.stride).len() == ours.len(), || format!("sequence {seed}: pair count"))?;
        with_choice += usize::from(result.chosen.is_some());
    }
    within(start.elapsed(), 120.0)?;
    Ok(format!("20/20 identical ({with_choice} with a chosen pair), {:.1}s", start.elapsed().as_secs_f64()))
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    loop {
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = q.norm();
        if n > 0.1 && n <= 1.0 {
            return *UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix();
        }
    }
}

fn geodesic(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut ds, mut dr, mut dt) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..200 {
        let src: Vec<Vector3<f64>> = (0..20)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let s0: f64 = rng.random_range(0.1..10.0);
        let r0 = random_rotation(&mut rng);
        let t0 = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let dst: Vec<_> = src.iter().map(|p| r0 * p * s0 + t0).collect();
        let fit = umeyama(&src, &dst, true).map_err(|e| e.to_string())?.transform;
        ds = ds.max((fit.s - s0).abs() / s0);
        dr = dr.max(geodesic(&fit.r, &r0));
        dt = dt.max((fit.t - t0).norm() / s0);
        ensure((fit.s - s0).abs() / s0 <= 1e-9, || format!("case {case}: scale {} vs {s0}", fit.s))?;
        ensure(geodesic(&fit.r, &r0) <= 1e-7, || format!("case {case}: rotation error {}", geodesic(&fit.r, &r0)))?;
        ensure((fit.t - t0).norm() / s0 <= 1e-8, || format!("case {case}: translation error {}", (fit.t - t0).norm()))?;

        let mirrored: Vec<_> = dst.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let fit = umeyama(&src, &mirrored, true).map_err(|e| e.to_string())?.transform;
        ensure((fit.r.determinant() - 1.0).abs() < 1e-9, || format!("case {case}: det R = {}", fit.r.determinant()))?;
    }
    within(start.elapsed(), 10.0)?;
    Ok(format!("200 transforms, max |ds|/s {ds:.1e}, max rot {dr:.1e} rad, max |dt| {dt:.1e}; reflections det +1"))
}

fn texture(w: usize, h: usize) -> GrayImage {
    use std::f64::consts::TAU;
    GrayImage::from_fn(w, h, |x, y| {
        let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
        let s = (TAU * 3.0 * u).sin() * (TAU * 2.0 * v).cos()
            + 0.6 * (TAU * (7.0 * u + 5.0 * v)).sin()
            + 0.4 * (TAU * (11.0 * u - 9.0 * v)).cos()
            + 0.3 * (TAU * 13.0 * v).sin();
        (128.0 + 55.0 * s).round().clamp(0.0, 255.0) as u8
    })
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let (w, h) = (160, 120);
    let base = texture(w, h);
    let moved = GrayImage::from_fn(w, h, |x, y| base.get((x + w - 2) % w, (y + h - 3) % h));
    let f0 = Frame::new(0, base.clone()).unwrap();
    let f1 = Frame::new(1, moved).unwrap();
    let mut points = Vec::new();
    for y in (24..h - 24).step_by(6) {
        for x in (24..w - 24).step_by(6) {
            points.push([x as f64, y as f64]);
        }
    }
    let params = FlowParams::default();
    let flows = track_points(&f0, &f1, &points, &params).map_err(|e| e.to_string())?;
    let errors: Vec<f64> = flows
        .iter()
        .filter(|f| f.tracked)
        .map(|f| (f.displacement[0] - 2.0).hypot(f.displacement[1] - 3.0))
        .collect();
    ensure(errors.len() >= 100, || format!("only {} tracked points", errors.len()))?;
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    ensure(mean <= 0.25, || format!("mean endpoint error {mean}"))?;
    let same = track_points(&f0, &Frame::new(1, base).unwrap(), &points, &params).map_err(|e| e.to_string())?;
    let worst = same.iter().filter(|f| f.tracked).map(|f| f.magnitude()).fold(0.0, f64::max);
    ensure(worst < 0.01, || format!("identical frames moved {worst} px"))?;
    within(start.elapsed(), 10.0)?;
    Ok(format!("{} points, mean error {mean:.4} px; identical max {worst:.1e} px", errors.len()))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let angle = 10f64.to_radians();
    let (sin, cos) = angle.sin_cos();
    let (mut excluded, mut injected, mut worst) = (0usize, 0usize, 0.0f64);
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let (n, n_out) = (100, 30);
        let (cx, cy) = (160.0, 120.0);
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        let mut outlier = vec![false; n];
        for k in 0..n {
            let p = [rng.random_range(0.0..320.0), rng.random_range(0.0..240.0)];
            let (dx, dy) = (p[0] - cx, p[1] - cy);
            let mut q = [cx + cos * dx - sin * dy + 4.0, cy + sin * dx + cos * dy - 2.0];
            if k % (n / n_out) == 0 && outlier.iter().filter(|&&o| o).count() < n_out {
                outlier[k] = true;
                q = [rng.random_range(0.0..320.0), rng.random_range(0.0..240.0)];
            } else {
                q[0] += rng.random_range(-0.25..0.25);
                q[1] += rng.random_range(-0.25..0.25);
            }
            a.push(p);
            b.push(q);
        }
        let params = RansacParams { seed, ..Default::default() };
        let (model, mask) = estimate_similarity(&a, &b, &params).map_err(|e| format!("seed {seed}: {e}"))?;
        let err = (model.angle.to_degrees() - 10.0).abs();
        worst = worst.max(err);
        ensure(err <= 0.1, || format!("seed {seed}: angle error {err} deg"))?;
        injected += outlier.iter().filter(|&&o| o).count();
        excluded += outlier.iter().zip(&mask).filter(|(&o, &m)| o && !m).count();
    }
    let fraction = excluded as f64 / injected as f64;
    ensure(fraction >= 0.95, || format!("only {:.1}% of outliers excluded", 100.0 * fraction))?;
    within(start.elapsed(), 30.0)?;
    Ok(format!("50 seeds, worst angle error {worst:.4} deg, {:.1}% outliers excluded", 100.0 * fraction))
}

fn criterion_7() -> Outcome {
    let gray = |w: usize, h: usize, f: &dyn Fn(usize, usize) -> u8| MetricImage::from_gray(&GrayImage::from_fn(w, h, f));
    let zero = gray(32, 32, &|_, _| 0);
    let full = gray(32, 32, &|_, _| 255);
    let p = psnr(&zero, &full).map_err(|e| e.to_string())?;
    ensure(p == 0.0, || format!("PSNR(0, 255) = {p}"))?;

    let tex = texture(64, 48);
    let lo = gray(64, 48, &|x, y| tex.get(x, y) / 2 + 20);
    let hi = gray(64, 48, &|x, y| tex.get(x, y) / 2 + 36);
    let p = psnr(&lo, &hi).map_err(|e| e.to_string())?;
    let want = 10.0 * (65025.0f64 / 256.0).log10();
    ensure((p - want).abs() <= 1e-9, || format!("offset PSNR {p} vs {want}"))?;

    let a = MetricImage::from_gray(&tex);
    let s = ssim(&a, &a).map_err(|e| e.to_string())?;
    ensure((s - 1.0).abs() <= 1e-12, || format!("SSIM(a, a) = {s}"))?;

    let c0 = gray(32, 32, &|_, _| 0);
    let c10 = gray(32, 32, &|_, _| 10);
    let s = ssim(&c0, &c10).map_err(|e| e.to_string())?;
    let want_ssim = (SSIM_C1 * SSIM_C2) / ((100.0 + SSIM_C1) * SSIM_C2);
    ensure((s - want_ssim).abs() <= 1e-9, || format!("constant SSIM {s} vs {want_ssim}"))?;
    Ok(format!("PSNR 0 dB, offset {want:.4} dB, SSIM(a,a) 1, constant SSIM {s:.6}"))
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let cfg = SelectionConfig::default();
    let (mut ours_ok, mut fl_bad, mut q_bad) = (0, 0, 0);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(8000 + seed);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let motion = Motion {
            frames: 13,
            pan_deg: sign * rng.random_range(2.2..2.8),
            tilt_deg: 0.0,
            roll_deg: rng.random_range(2.8..3.4),
            step: rng.random_range(0.0..0.04),
        };
        let scene = render(300 + seed, 128, 96, &motion);
        let report = pairsel::bench::bench(&scene.frames, &cfg, &[Strategy::Ours, Strategy::FirstLast, Strategy::Quartiles], None)
            .map_err(|e| e.to_string())?;
        let ours = &report.rows[0];
        let mid_feasible = ours.pairs.iter().any(|s| s.feasible && s.i > 0 && s.j < 12);
        ensure(mid_feasible, || format!("sequence {seed}: no feasible mid-sequence pair"))?;
        ours_ok += usize::from(ours.feasible);
        let violates = |k: usize| report.rows[k].chosen_stats.as_ref().is_some_and(|s| !s.violations.is_empty());
        fl_bad += usize::from(violates(1));
        q_bad += usize::from(violates(2));
    }
    ensure(ours_ok == 20, || format!("ours feasible in {ours_ok}/20"))?;
    ensure(fl_bad >= 15, || format!("first_last violated a gate in only {fl_bad}/20"))?;
    ensure(q_bad >= 15, || format!("quartiles violated a gate in only {q_bad}/20"))?;
    Ok(format!(
        "ours feasible {ours_ok}/20, first_last violates {fl_bad}/20, quartiles violates {q_bad}/20, {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

fn bench_json(frames: &Path, out: &Path) -> Result<String, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_pairsel"))
        .args(["bench", "--seed", "7", "--frames"])
        .arg(frames)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    v.as_object_mut().ok_or("report is not an object")?.remove("timing");
    Ok(serde_json::to_string_pretty(&v).unwrap())
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let motion = Motion { frames: 6, pan_deg: 2.5, tilt_deg: 0.0, roll_deg: 2.0, step: 0.02 };
    let scene = render(9, 128, 96, &motion);
    let frames = dir.path().join("frames");
    write_scene(&scene, &frames, false).map_err(|e| e.to_string())?;
    let a = bench_json(&frames, &dir.path().join("a.json"))?;
    let b = bench_json(&frames, &dir.path().join("b.json"))?;
    ensure(a == b, || "bench reports differ".into())?;
    ensure(a.contains("\"random\""), || "report lacks the random row".into())?;
    Ok(format!("two runs byte-identical without timing ({} bytes)", a.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("score formula", criterion_1),
        ("constraint soundness", criterion_2),
        ("brute-force equivalence", criterion_3),
        ("Umeyama recovery", criterion_4),
        ("flow accuracy", criterion_5),
        ("similarity angle", criterion_6),
        ("metric fixtures", criterion_7),
        ("strategy comparison", criterion_8),
        ("bench determinism", criterion_9),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS  {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL  {detail}", k + 1);
            }
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
