//! Acceptance suite: one PASS/FAIL line per criterion; exits non-zero if
//! any criterion fails.

use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use faps_core::affine::{compose, derive_template_landmarks, estimate_similarity, policy_transform, BaseTemplate};
use faps_core::geometry::{
    box_iou, enumerate_space, intersection_crossover, AlignmentPolicy, ParentIndex, SearchSpace,
};
use faps_core::imaging::{align_direct, AlignedCanvas};
use faps_core::search::{explore, member_rng, run_search, ParamDraw, SearchConfig};
use faps_core::testcard::{random_placement, smooth_image};
use faps_core::trainers::{run_grid, SyntheticTrainer, SyntheticTrainerConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn faps(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_faps")).args(args).env_remove("FAPS_LOG_LEVEL").output().expect("run faps")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    check(elapsed <= limit, format!("{detail}; {:.2?} (limit {limit:?})", elapsed))
}

fn space_cardinality() -> Outcome {
    let start = Instant::now();
    let o = faps(&["space"]);
    let elapsed = start.elapsed();
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    let first = text.lines().next().unwrap_or("");
    let rows = text.lines().count().saturating_sub(2);
    if o.status.code() != Some(0) || first != "93" || rows != 93 {
        return Err(format!("exit {:?}, first line {first:?}, {rows} rows", o.status.code()));
    }
    within(elapsed, Duration::from_secs(1), "`faps space` reports 93 candidates".into())
}

fn reference_iou() -> Outcome {
    let iou = box_iou(
        faps_core::geometry::policy_to_box(AlignmentPolicy::new(192, 4), 300).map_err(|e| e.to_string())?,
        faps_core::geometry::policy_to_box(AlignmentPolicy::new(200, 4), 300).map_err(|e| e.to_string())?,
    );
    // hand count: the 192 box sits inside the 200 box, so IOU = 192^2 / 200^2
    let oracle = (192.0f64 * 192.0) / (200.0 * 200.0);
    check((iou - 0.9216).abs() <= 1e-4 && (iou - oracle).abs() < 1e-15, format!("IOU({{192,4}}, {{200,4}}) = {iou}"))
}

fn transform_identity() -> Outcome {
    let base = BaseTemplate::default();
    let policies = enumerate_space(&SearchSpace::default());
    let mut worst = 0f64;
    for seed in 0..1000 {
        let src = random_placement(seed, &base, 400, 12.0).landmarks;
        let t0 = estimate_similarity(&src, &base.landmarks).map_err(|e| e.to_string())?;
        for &p in &policies {
            let target = derive_template_landmarks(p, &base).map_err(|e| e.to_string())?;
            let direct = estimate_similarity(&src, &target).map_err(|e| e.to_string())?;
            let composed = compose(&policy_transform(p, &base).map_err(|e| e.to_string())?, &t0);
            worst = worst.max(direct.max_param_diff(&composed));
        }
    }
    check(worst <= 1e-9, format!("1000 landmark sets x 93 policies, worst parameter error {worst:.3e}"))
}

fn two_path_residual(seed: u64, base: &BaseTemplate, policies: &[AlignmentPolicy]) -> Result<(f32, f32), String> {
    let img = smooth_image(seed, 400, 400, 1, 6.0).map_err(|e| e.to_string())?;
    let placement = random_placement(seed, base, 400, 0.0);
    let mut canvas = AlignedCanvas::new(&img, &placement.landmarks, base).map_err(|e| e.to_string())?;
    let mut worst = (0f32, 0f32);
    for &p in policies {
        let direct = align_direct(&img, &placement.landmarks, p, base).map_err(|e| e.to_string())?;
        let via = canvas.crop(p).map_err(|e| e.to_string())?;
        let (max, mean) = direct.abs_diff_stats(&via).ok_or("size mismatch")?;
        worst = (worst.0.max(max), worst.1.max(mean));
    }
    Ok(worst)
}

fn pixel_equivalence() -> Outcome {
    let start = Instant::now();
    let base = BaseTemplate::default();
    let doubled_base = base.scaled(2);
    let policies = enumerate_space(&SearchSpace::default());
    let doubled: Vec<AlignmentPolicy> = policies.iter().map(|p| AlignmentPolicy::new(2 * p.m, 2 * p.delta)).collect();
    let (mut max300, mut mean300, mut max600, mut mean600) = (0f32, 0f32, 0f32, 0f32);
    let mut shrinks = true;
    for seed in 0..10 {
        let (a, b) = two_path_residual(seed, &base, &policies)?;
        let (c, d) = two_path_residual(seed, &doubled_base, &doubled)?;
        shrinks &= d < b;
        (max300, mean300) = (max300.max(a), mean300.max(b));
        (max600, mean600) = (max600.max(c), mean600.max(d));
    }
    let detail = format!(
        "10 images x 93 policies: max {max300:.4}, worst mean {mean300:.2e}; canvas 600: max {max600:.4}, worst mean {mean600:.2e}"
    );
    if !(max300 <= 2.0 && mean300 <= 0.5 && shrinks && mean600 < mean300) {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(60), detail)
}

type FBox = (f64, f64, f64, f64);

fn fbox(p: AlignmentPolicy) -> FBox {
    let l = (300.0 - p.m as f64) / 2.0;
    (l, l + p.delta as f64, l + p.m as f64, l + p.delta as f64 + p.m as f64)
}

fn fiou(a: FBox, b: FBox) -> f64 {
    let w = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let h = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let i = w * h;
    i / ((a.2 - a.0) * (a.3 - a.1) + (b.2 - b.0) * (b.3 - b.1) - i)
}

fn crossover_oracle() -> Outcome {
    let space = SearchSpace::default();
    let all = enumerate_space(&space);
    let mut pairs = 0;
    for &p1 in &all {
        for &p2 in &all {
            let c = intersection_crossover(p1, p2, &space).map_err(|e| e.to_string())?;
            let (a, b) = (fbox(p1), fbox(p2));
            let shared = (a.0.max(b.0), a.1.max(b.1), a.2.min(b.2), a.3.min(b.3));
            let scores: Vec<f64> = all.iter().map(|&q| fiou(fbox(q), shared)).collect();
            let best = scores.iter().copied().fold(f64::MIN, f64::max);
            let centre = ((shared.0 + shared.2) / 2.0, (shared.1 + shared.3) / 2.0);
            let dist = |q: AlignmentPolicy| {
                let f = fbox(q);
                ((f.0 + f.2) / 2.0 - centre.0).powi(2) + ((f.1 + f.3) / 2.0 - centre.1).powi(2)
            };
            let mut expected: Option<AlignmentPolicy> = None;
            for (&q, &s) in all.iter().zip(&scores) {
                if s >= best - 1e-12 && expected.is_none_or(|e| dist(q) < dist(e)) {
                    expected = Some(q);
                }
            }
            let parent = if fiou(fbox(c.policy), b) > fiou(fbox(c.policy), a) + 1e-12 {
                ParentIndex::Second
            } else {
                ParentIndex::First
            };
            if Some(c.policy) != expected || c.parent != parent {
                return Err(format!(
                    "{p1} x {p2}: got {} from {:?}, oracle {expected:?} from {parent:?}",
                    c.policy, c.parent
                ));
            }
            pairs += 1;
        }
    }
    check(pairs == 8649, format!("{pairs} ordered pairs match the brute-force argmax and tie-breaks"))
}

fn explore_distribution() -> Outcome {
    let space = SearchSpace::default();
    let cfg = SearchConfig::default();
    let all = enumerate_space(&space);
    let mut rng = member_rng(1234, 0);
    const N: usize = 100_000;
    let mut resampled = [0usize; 2];
    let mut levels = [[0usize; 4]; 2];
    for _ in 0..N {
        let out = explore(AlignmentPolicy::new(192, 4), &space, &cfg, &mut rng);
        if !all.contains(&out.policy) {
            return Err(format!("explore produced {} outside the space", out.policy));
        }
        for (k, d) in [out.draws.m, out.draws.delta].into_iter().enumerate() {
            match d {
                ParamDraw::Resample { .. } => resampled[k] += 1,
                ParamDraw::Perturb { level, .. } => levels[k][level as usize] += 1,
            }
        }
    }
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, name) in ["m", "delta"].into_iter().enumerate() {
        let r = resampled[k] as f64 / N as f64;
        ok &= (r - 0.2).abs() <= 0.01;
        let perturbed = (N - resampled[k]) as f64;
        let f: Vec<f64> = levels[k].iter().map(|&c| c as f64 / perturbed).collect();
        ok &= f.iter().zip([0.1, 0.3, 0.3, 0.3]).all(|(a, b)| (a - b).abs() <= 0.01);
        parts.push(format!("{name}: resample {r:.4}, levels [{:.4}, {:.4}, {:.4}, {:.4}]", f[0], f[1], f[2], f[3]));
    }
    check(ok, format!("10^5 draws, all in space; {}", parts.join("; ")))
}

fn search_vs_grid() -> Outcome {
    let start = Instant::now();
    let space = SearchSpace::default();
    let mut parts = Vec::new();
    let mut ok = true;
    for sigma in [0.0, 0.002] {
        let mut hits = 0;
        for seed in 1..=20u64 {
            let cfg = SearchConfig { seed, ..Default::default() };
            let tc = SyntheticTrainerConfig { noise_sigma: sigma, ..Default::default() };
            let trainer = SyntheticTrainer::new(tc, &space, seed).map_err(|e| e.to_string())?;
            let grid = run_grid(&space, &trainer, 30).map_err(|e| e.to_string())?;
            let r = run_search(&cfg, &space, &trainer).map_err(|e| e.to_string())?;
            ok &= r.trainer_steps == 8 * 30 && grid.trainer_steps == 93 * 30;
            let g = grid.best_policy;
            hits += ((r.best_policy.m - g.m).abs() <= space.s_m
                && (r.best_policy.delta - g.delta).abs() <= space.s_delta) as usize;
        }
        ok &= hits * 5 >= 20 * 4;
        parts.push(format!("sigma {sigma}: {hits}/20 within one step"));
    }
    let detail = format!("{}; 240 vs 2790 trainer steps", parts.join(", "));
    if !ok {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(60), detail)
}

fn determinism() -> Outcome {
    let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for name in ["first", "second"] {
        let out = dir.path().join(name);
        let o = faps(&["search", "--seed", "1234", "--mode", "seq", "--out", out.to_str().unwrap()]);
        if o.status.code() != Some(0) {
            return Err(format!("faps search exited {:?}", o.status.code()));
        }
        let read = |f: &str| fs::read(out.join(f)).map_err(|e| e.to_string());
        files.push((read("events.jsonl")?, read("result.json")?));
    }
    check(
        files[0] == files[1],
        format!("events.jsonl ({} bytes) and result.json identical across runs", files[0].0.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("search-space cardinality", space_cardinality),
        ("IOU of {192,4} and {200,4}", reference_iou),
        ("direct solve equals composed solve", transform_identity),
        ("pixel-level two-path equivalence", pixel_equivalence),
        ("crossover argmax oracle", crossover_oracle),
        ("explore distribution", explore_distribution),
        ("search efficiency vs grid", search_vs_grid),
        ("seeded determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "NOTE criterion 9: recognition accuracies on real face benchmarks need large-scale face training and are \
         not reproduced here; acceptance rests on criteria 1-8"
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
