//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

mod common;

use std::io::Cursor;
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use rand::Rng;
use vloc::error::Error;
use vloc::eval::{decompose_error, summarize, HORIZONTAL_THRESHOLDS_M, YAW_THRESHOLDS_DEG};
use vloc::features::{read_pyramid, write_pyramid, DenseFeatureLevel};
use vloc::geometry::wrap_angle;
use vloc::losses::*;
use vloc::map::{MapDatabase, MapKeypoint};
use vloc::matching::*;
use vloc::pipeline::generate_map;
use vloc::selection::{fps, wfps, Candidate, SelectionStrategy};
use vloc::synth::{run_benchmark, BenchmarkConfig, BenchmarkScene, PriorMode, WorldSpec};
use vloc::{CameraModel, Point3, Pose3, PoseSE2Offset};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn noiseless_closed_loop() -> Outcome {
    let cfg = BenchmarkConfig::default();
    let report = run_benchmark(&cfg).expect("benchmark runs");
    let s = &report.summary;
    let Some(m) = &s.metrics else {
        return outcome(false, "no frame available");
    };
    let pass = s.frames == 100
        && m.rms_horizontal <= 0.025
        && m.rms_yaw_deg <= 0.05
        && s.na_percent == 0.0
        && report.mean_frame_ms <= 100.0;
    outcome(
        pass,
        format!(
            "rms_h {:.4} m (<= 0.025), rms_yaw {:.4} deg (<= 0.05), N/A {:.1}% (0), {:.1} ms/frame (<= 100)",
            m.rms_horizontal, m.rms_yaw_deg, s.na_percent, report.mean_frame_ms
        ),
    )
}

fn noisy_spec() -> WorldSpec {
    WorldSpec {
        noise: 0.1,
        stable_fraction: 0.8,
        drop_rate: 0.5,
        ..Default::default()
    }
}

fn noise_robustness() -> Outcome {
    let cfg = BenchmarkConfig {
        spec: noisy_spec(),
        ..Default::default()
    };
    let report = run_benchmark(&cfg).expect("benchmark runs");
    let s = &report.summary;
    match &s.metrics {
        Some(m) => outcome(
            m.rms_horizontal <= 0.10,
            format!(
                "rms_h {:.4} m (<= 0.10), available {:.1}%",
                m.rms_horizontal, s.available_percent
            ),
        ),
        None => outcome(false, "no frame available"),
    }
}

fn ablation_ordering() -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 1..=10u64 {
        let spec = WorldSpec {
            seed,
            frames: 50,
            ..noisy_spec()
        };
        let cfg = BenchmarkConfig {
            spec,
            ..Default::default()
        };
        let scene = BenchmarkScene::new(&cfg.spec).expect("scene");
        let rms = |strategy| {
            let mut map = cfg.map.clone();
            map.selection.strategy = strategy;
            let db = generate_map(&scene.mapping, &map).expect("map");
            let report = scene.evaluate(&db, &cfg.localizer, PriorMode::Perturbed).expect("evaluate");
            report.summary.metrics.map_or(f64::INFINITY, |m| m.rms_horizontal)
        };
        let (f, w) = (rms(SelectionStrategy::Fps), rms(SelectionStrategy::Wfps));
        if w <= f {
            wins += 1;
        }
        rows.push(format!("{w:.4}/{f:.4}"));
    }
    outcome(
        wins >= 8,
        format!("WFPS+Reduce <= FPS+Reduce on {wins}/10 seeds (>= 8); rms_h wfps/fps {}", rows.join(" ")),
    )
}

fn selection_oracle() -> Outcome {
    let mut r = rng(4);
    let mut mismatches = 0;
    let mut uniform_mismatches = 0;
    for inst in 0..1000 {
        let len = r.random_range(1..=200);
        let c = random_candidates(&mut r, len, inst % 2 == 1);
        let n = r.random_range(1..=len);
        if fps(&c, n, None).unwrap() != brute_force_greedy(&c, n, 0, false) {
            mismatches += 1;
        }
        if wfps(&c, n, None).unwrap() != brute_force_greedy(&c, n, first_max_weight(&c), true) {
            mismatches += 1;
        }
        let w = r.random_range(0.05..=1.0);
        let uniform: Vec<Candidate> = c.iter().map(|x| Candidate { weight: w, ..*x }).collect();
        if wfps(&uniform, n, None).unwrap() != fps(&c, n, None).unwrap() {
            uniform_mismatches += 1;
        }
    }
    outcome(
        mismatches == 0 && uniform_mismatches == 0,
        format!("1000 instances: {mismatches} oracle mismatches, {uniform_mismatches} uniform-weight mismatches"),
    )
}

fn probability_head() -> Outcome {
    let mut r = rng(5);
    let (mut sum_err, mut shift_err, mut mode_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let vol = random_volume(&mut r);
        let w = r.random_range(0.05..=1.0);
        let reduce = marginalize(&vol, &vec![1.0; vol.n_keypoints], Marginalization::ReduceAverage).unwrap();
        let weighted = marginalize(&vol, &vec![w; vol.n_keypoints], Marginalization::WeightedAverage).unwrap();
        assert_eq!(reduce.available, weighted.available);
        for (a, b) in reduce.costs.iter().zip(&weighted.costs) {
            mode_err = mode_err.max((a - b).abs());
        }
        let t = r.random_range(0.01..1.0);
        let c = r.random_range(-5.0..5.0);
        let shifted = MarginalCosts {
            costs: reduce.costs.iter().map(|x| x + c).collect(),
            ..reduce.clone()
        };
        for head in [ProbabilityHead::JointSoftmax, ProbabilityHead::AxisAverage] {
            let a = marginal_distributions_with(&reduce, t, head).unwrap();
            let b = marginal_distributions_with(&shifted, t, head).unwrap();
            for (pa, pb) in a.axes().iter().zip(b.axes()) {
                sum_err = sum_err.max((pa.probs.iter().sum::<f64>() - 1.0).abs());
                for (x, y) in pa.probs.iter().zip(&pb.probs) {
                    shift_err = shift_err.max((x - y).abs());
                }
            }
        }
    }
    outcome(
        sum_err <= 1e-6 && shift_err <= 1e-9 && mode_err <= 1e-9,
        format!(
            "1000 volumes: max |sum-1| {sum_err:.1e} (<= 1e-6), shift {shift_err:.1e} (<= 1e-9), mode {mode_err:.1e} (<= 1e-9)"
        ),
    )
}

fn losses() -> Outcome {
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();
    let cfg = LossConfig::default();
    let gt = PoseSE2Offset::new(0.3, -0.2, 0.1);
    let est = PoseSE2Offset::new(0.4, 0.0, 0.15);

    checks.push(("offset at truth", loss_absolute(&gt, &gt, &cfg), 0.0));
    checks.push(("offset absolute", loss_absolute(&est, &gt, &cfg), 0.35));
    let squared = LossConfig {
        offset_variant: OffsetLossVariant::Squared,
        ..cfg
    };
    checks.push(("offset squared", loss_absolute(&est, &gt, &squared), 0.0525));

    let g = CostVolumeConfig::new([3, 3, 3], 1.0, 1.0, 0.1).unwrap();
    let mut costs = vec![1e6; 27];
    costs[g.node_index(0, 2, 1)] = 0.0;
    let delta = marginal_distributions(&MarginalCosts::new(g, costs), 0.1).unwrap();
    checks.push(("concentration at truth", loss_concentration(&delta, &g.offset(0, 2, 1), &cfg), 0.0));
    let g5 = CostVolumeConfig::new([5, 5, 5], 0.5, 0.5, 0.01).unwrap();
    let uniform = marginal_distributions(&MarginalCosts::new(g5, vec![0.0; 125]), 0.1).unwrap();
    let beta2 = LossConfig { beta: 2.0, ..cfg };
    checks.push((
        "concentration uniform",
        loss_concentration(&uniform, &PoseSE2Offset::zero(), &beta2),
        2.0 * (1.2 * 0.5 + 1.2 * 0.5 + 1.2 * 0.01),
    ));

    checks.push(("similarity margin", loss_similarity(&[1.5, 0.2], &cfg), 0.5));
    let raw = LossConfig {
        similarity_mode: SimilarityMode::RawSquared,
        ..cfg
    };
    checks.push(("similarity raw squared", loss_similarity(&[1.5, 0.9], &raw), 1.25));

    // Constant descriptor field matching the keypoint: every cost at the truth is zero.
    let mut level = DenseFeatureLevel::zeros(2, 32, 24);
    let mut e0 = [0.0f32; 8];
    e0[0] = 1.0;
    for v in 0..24 {
        for u in 0..32 {
            level.descriptor_mut(u, v).copy_from_slice(&e0);
        }
    }
    let cam = CameraModel::forward_facing(20.0, 20.0, 32.0, 24.0, 64, 48, 1.5).unwrap();
    let kp = MapKeypoint {
        u: 16.0,
        v: 12.0,
        weight: 1.0,
        world: Point3::new(5.0, 0.3, 1.2),
        descriptor: e0,
    };
    let at_gt = costs_at_ground_truth(&[kp], &level, &Pose3::identity(), &cam, &RegularizerWeights::identity(), &cfg).unwrap();
    checks.push(("similarity at truth", loss_similarity(&at_gt, &cfg), 0.0));

    let failed: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-12)
        .map(|(name, got, want)| format!("{name}: {got} vs {want}"))
        .collect();
    outcome(
        failed.is_empty() && at_gt.len() == 1,
        if failed.is_empty() {
            format!("{} hand cases within 1e-12", checks.len())
        } else {
            failed.join("; ")
        },
    )
}

fn located(err: &Error, needle: &str) -> bool {
    matches!(err, Error::Format { field, .. } if field.contains(needle))
}

fn persistence() -> Outcome {
    let mut r = rng(7);
    let mut problems = Vec::new();
    for i in 0..100 {
        let db = random_database(&mut r);
        let mut bytes = Vec::new();
        db.write_to(&mut bytes).unwrap();
        let back = MapDatabase::read_from(&mut Cursor::new(&bytes)).unwrap();
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        if back != db || again != bytes {
            problems.push(format!("database {i} differs after round trip"));
        }
        let cut = r.random_range(0..bytes.len());
        match MapDatabase::read_from(&mut Cursor::new(&bytes[..cut])) {
            Err(Error::Format { .. }) => {}
            other => problems.push(format!("database {i} truncated at {cut}: {:?}", other.map(|_| ()))),
        }

        let p = random_pyramid(&mut r);
        let mut bytes = Vec::new();
        write_pyramid(&p, &mut bytes).unwrap();
        let back = read_pyramid(&mut Cursor::new(&bytes)).unwrap();
        let mut again = Vec::new();
        write_pyramid(&back, &mut again).unwrap();
        if back != p || again != bytes {
            problems.push(format!("pyramid {i} differs after round trip"));
        }
        let cut = r.random_range(0..bytes.len());
        match read_pyramid(&mut Cursor::new(&bytes[..cut])) {
            Err(Error::Format { .. }) => {}
            other => problems.push(format!("pyramid {i} truncated at {cut}: {:?}", other.map(|_| ()))),
        }
        // First heatmap cell of level s=2 set to 1.5.
        let l0 = &p.levels()[0];
        let off = 14 + 10 + l0.width() * l0.height() * 8 * 4;
        let mut bad = bytes.clone();
        bad[off..off + 4].copy_from_slice(&1.5f32.to_le_bytes());
        match read_pyramid(&mut Cursor::new(&bad)) {
            Err(e) if located(&e, "level s=2 heatmap") && e.to_string().contains("cell index 0") => {}
            other => problems.push(format!("pyramid {i} bad heatmap: {:?}", other.map(|_| ()))),
        }
    }

    let db = loop {
        let db = random_database(&mut r);
        if !db.nodes()[0].levels[0].keypoints.is_empty() {
            break db;
        }
    };
    let mut bytes = Vec::new();
    db.write_to(&mut bytes).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    if !MapDatabase::read_from(&mut Cursor::new(&bad)).is_err_and(|e| located(&e, "magic")) {
        problems.push("bad map magic not located".into());
    }
    // Weight of node 0, level s=2, keypoint 0 set to 2.0.
    let off = 10 + 66 + 3 + 8;
    let mut bad = bytes.clone();
    bad[off..off + 4].copy_from_slice(&2.0f32.to_le_bytes());
    if !MapDatabase::read_from(&mut Cursor::new(&bad)).is_err_and(|e| located(&e, "node[0].level[s=2].keypoint[0]")) {
        problems.push("bad keypoint weight not located".into());
    }
    bytes.push(0);
    if !MapDatabase::read_from(&mut Cursor::new(&bytes)).is_err_and(|e| located(&e, "trailer")) {
        problems.push("trailing bytes not located".into());
    }

    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "100 databases and 100 pyramids bit-exact; truncation and corruption located".to_string()
        } else {
            problems.join("; ")
        },
    )
}

fn metrics() -> Outcome {
    let mut r = rng(8);
    let mut worst = 0.0f64;
    let mut pyth = 0.0f64;
    for _ in 0..10_000 {
        let (est, gt) = (random_pose(&mut r), random_pose(&mut r));
        let e = decompose_error(&est, &gt);
        let (h, lon, lat, yaw) = decompose_oracle(&est, &gt);
        let dyaw = wrap_angle((e.yaw_deg - yaw).to_radians()).to_degrees();
        worst = worst
            .max((e.horizontal - h).abs())
            .max((e.longitudinal - lon).abs())
            .max((e.lateral - lat).abs())
            .max(dyaw.abs());
        pyth = pyth.max((e.horizontal.powi(2) - e.longitudinal.powi(2) - e.lateral.powi(2)).abs() / h.max(1.0).powi(2));
    }

    let mut mismatched = 0;
    for set in 0..200 {
        let recs = random_records(&mut r, 1 + set % 50);
        let s = summarize(&recs).unwrap();
        let avail: Vec<_> = recs.iter().filter(|x| x.available).collect();
        let n = recs.len();
        let mut ok = s.frames == n
            && s.available_frames == avail.len()
            && s.available_percent == 100.0 * avail.len() as f64 / n as f64
            && s.na_percent == 100.0 - s.available_percent;
        match &s.metrics {
            None => ok &= avail.is_empty(),
            Some(m) => {
                for (k, t) in HORIZONTAL_THRESHOLDS_M.iter().enumerate() {
                    let count = avail.iter().filter(|x| x.horizontal.abs() <= *t).count();
                    ok &= m.horizontal_under_percent[k] == 100.0 * count as f64 / avail.len() as f64;
                }
                for (k, t) in YAW_THRESHOLDS_DEG.iter().enumerate() {
                    let count = avail.iter().filter(|x| x.yaw_deg.abs() <= *t).count();
                    ok &= m.yaw_under_percent[k] == 100.0 * count as f64 / avail.len() as f64;
                }
                let rms = avail.iter().map(|x| x.horizontal * x.horizontal).sum::<f64>() / avail.len() as f64;
                ok &= (m.rms_horizontal - rms.sqrt()).abs() <= 1e-12;
                let max = avail.iter().map(|x| x.horizontal).fold(0.0, f64::max);
                ok &= m.max_horizontal == max;
            }
        }
        if !ok {
            mismatched += 1;
        }
    }
    outcome(
        worst <= 1e-9 && pyth <= 1e-9 && mismatched == 0,
        format!(
            "10000 pairs: max deviation {worst:.1e} (<= 1e-9), Pythagorean {pyth:.1e}; {mismatched}/200 summaries differ from counting oracle"
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("noiseless closed loop", noiseless_closed_loop),
        ("noise robustness", noise_robustness),
        ("ablation ordering", ablation_ordering),
        ("FPS/WFPS oracle equivalence", selection_oracle),
        ("probability-head invariants", probability_head),
        ("loss correctness", losses),
        ("persistence", persistence),
        ("metrics", metrics),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {id} {}: {name}: {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
