//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wfp_core::classifier::{
    calibrate_with, gradient_check, DecisionMode, TcnConfig, TcnModel, TcnShape, ClassifierBundle,
};
use wfp_core::config::RunConfig;
use wfp_core::featex::{burst_features, BURST_FEATURES};
use wfp_core::pipeline::{
    evaluate, label_recorder_traces, measure_runtime, operation_traces, profile_rooms, profiling_cutoff,
    score_identification, segment_captures, split_by_app, train_bundle, CaptureSet, EvalOutcome, LabeledTrace,
};
use wfp_core::profiler::{kmeans_hamming, silhouette, BehaviorSample, Bits};
use wfp_core::synthgen::{generate_scenario, presets};
use wfp_core::trace_model::{Direction, FrameKind, FrameMeta, MacAddr, OneHotLabel, OperationLabel};

/// Writes to the stderr handle directly so the line survives output capture.
fn report(id: u32, name: &str, ok: bool, detail: String, elapsed: Duration) {
    let line = format!(
        "{} criterion {id} ({name}): {detail} [{:.2} s]\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

// ---------------------------------------------------------------- 1

#[test]
fn c01_openmax_mass_conservation() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let h = rng.random_range(1..=50);
        let raw: Vec<f64> = (0..h).map(|_| rng.random::<f64>().powi(3)).collect();
        let z: f64 = raw.iter().sum::<f64>().max(f64::MIN_POSITIVE);
        let q: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let c: Vec<f64> = (0..h).map(|_| rng.random::<f64>()).collect();
        let qhat = calibrate_with(&q, &c).unwrap();
        assert_eq!(qhat.len(), h + 1);
        worst = worst.max((qhat.iter().sum::<f64>() - 1.0).abs());
    }
    let elapsed = start.elapsed();
    let ok = worst < 1e-9 && elapsed < Duration::from_secs(1);
    report(1, "OpenMax mass conservation", ok, format!("max |sum - 1| = {worst:.2e} over 10000 pairs"), elapsed);
    assert!(ok);
}

// ---------------------------------------------------------------- 2

#[test]
fn c02_tcn_gradient_check() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..100 {
        let levels = rng.random_range(0..=3);
        let config = TcnConfig {
            channels: rng.random_range(2..=8),
            kernel: rng.random_range(2..=4),
            levels,
            dropout: 0.0,
            attention_heads: if levels == 0 { 1 } else { rng.random_range(0..=1) },
            seed: i,
            ..Default::default()
        };
        let shape = TcnShape {
            window: rng.random_range(3..=12),
            in_dims: rng.random_range(1..=4),
            classes: rng.random_range(2..=5),
        };
        let model = TcnModel::new(config, shape).unwrap();
        let x: Vec<f64> = (0..model.sample_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let label = rng.random_range(0..shape.classes);
        let g = gradient_check(&model, &x, label, 40, i).unwrap();
        worst = worst.max(g.max_rel_error);
        checked += g.checked;
    }
    let elapsed = start.elapsed();
    let ok = worst < 1e-4 && elapsed < Duration::from_secs(120);
    report(2, "TCN gradient check", ok, format!("max relative error {worst:.2e} over {checked} parameters, 100 configs"), elapsed);
    assert!(ok);
}

// ---------------------------------------------------------------- 3

/// Straight-line recomputation of the 22 burst statistics.
fn naive_features(frames: &[FrameMeta], start: f64) -> [f64; BURST_FEATURES] {
    let mut p = [0.0; BURST_FEATURES];
    let n = frames.len();
    if n == 0 {
        return p;
    }
    let avg = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let gaps = |ts: &[f64]| {
        if ts.len() < 2 {
            0.0
        } else {
            let mut s = 0.0;
            for w in ts.windows(2) {
                s += w[1] - w[0];
            }
            s / (ts.len() - 1) as f64
        }
    };
    let var = |v: &[f64]| {
        if v.is_empty() {
            return 0.0;
        }
        let m = avg(v);
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
    };
    // Rank r (1-based) of k sorted values: low if 5r <= k, high if 5r > 4k.
    let groups = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let k = v.len();
        let (mut lo, mut mid, mut hi) = (Vec::new(), Vec::new(), Vec::new());
        for (i, x) in v.into_iter().enumerate() {
            let r = i + 1;
            if 5 * r <= k {
                lo.push(x);
            } else if 5 * r > 4 * k {
                hi.push(x);
            } else {
                mid.push(x);
            }
        }
        [avg(&lo), avg(&mid), avg(&hi), var(&lo), var(&mid), var(&hi)]
    };
    let all_s: Vec<f64> = frames.iter().map(|f| f.size as f64).collect();
    let all_t: Vec<f64> = frames.iter().map(|f| f.t).collect();
    let up: Vec<&FrameMeta> = frames.iter().filter(|f| f.dir == Direction::Uplink).collect();
    let down: Vec<&FrameMeta> = frames.iter().filter(|f| f.dir == Direction::Downlink).collect();
    let sizes = |v: &[&FrameMeta]| v.iter().map(|f| f.size as f64).collect::<Vec<_>>();
    let times = |v: &[&FrameMeta]| v.iter().map(|f| f.t).collect::<Vec<_>>();

    p[0] = n as f64;
    p[1] = avg(&all_s);
    p[2] = gaps(&all_t);
    p[3] = up.len() as f64 / n as f64;
    let mut counts = [0.0f64; 10];
    for f in frames {
        let b = ((f.t - start) * 10.0).floor().clamp(0.0, 9.0) as usize;
        counts[b] += 1.0;
    }
    let m = counts.iter().sum::<f64>() / 10.0;
    let d2: f64 = counts.iter().map(|c| (c - m).powi(2)).sum();
    if d2 > 0.0 {
        let d3: f64 = counts.iter().map(|c| (c - m).powi(3)).sum();
        let d4: f64 = counts.iter().map(|c| (c - m).powi(4)).sum();
        p[4] = 10.0 * d4 / (d2 * d2) - 3.0;
        p[5] = 10f64.sqrt() * d3 / d2.powf(1.5);
    }
    p[6] = avg(&sizes(&up));
    let g = groups(sizes(&up));
    p[7..13].copy_from_slice(&g);
    p[13] = gaps(&times(&up));
    p[14] = avg(&sizes(&down));
    let g = groups(sizes(&down));
    p[15..21].copy_from_slice(&g);
    p[21] = gaps(&times(&down));
    p
}

#[test]
fn c03_feature_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut sizes_seen = BTreeMap::new();
    for i in 0..1000 {
        let n = match i {
            0..=49 => 0,
            50..=99 => 1,
            _ => rng.random_range(2..=120),
        };
        let t0 = rng.random_range(0.0..5000.0);
        let mut offs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        offs.sort_by(f64::total_cmp);
        let frames: Vec<FrameMeta> = offs
            .iter()
            .map(|o| FrameMeta {
                t: t0 + o,
                size: rng.random_range(28..=1500),
                dir: if rng.random_bool(0.4) { Direction::Uplink } else { Direction::Downlink },
                kind: FrameKind::Data,
                src: MacAddr([2, 0, 0, 0, 0, 1]),
                dst: MacAddr([2, 0, 0, 0, 0, 2]),
            })
            .collect();
        *sizes_seen.entry(n.min(2)).or_insert(0) += 1;
        let got = burst_features(&frames, t0);
        let want = naive_features(&frames, t0);
        for k in 0..BURST_FEATURES {
            let scale = want[k].abs().max(1.0);
            worst = worst.max((got[k] - want[k]).abs() / scale);
        }
    }
    let elapsed = start.elapsed();
    let ok = worst < 1e-9 && elapsed < Duration::from_secs(10) && sizes_seen.len() == 3;
    report(3, "feature oracle", ok, format!("max deviation {worst:.2e} over 1000 bursts (50 empty, 50 single-frame)"), elapsed);
    assert!(ok);
}

// ---------------------------------------------------------------- 4 and 5

fn random_samples(rng: &mut ChaCha8Rng, n: usize) -> Vec<BehaviorSample> {
    let h = rng.random_range(1..=4);
    let g = rng.random_range(1..=3);
    let wb = rng.random_range(1..=5);
    let macs = rng.random_range(1..=n.max(1));
    (0..n)
        .map(|_| {
            let window = (0..wb)
                .map(|_| {
                    OperationLabel::new(
                        OneHotLabel::new(rng.random_range(0..=h), h + 1).unwrap(),
                        OneHotLabel::new(rng.random_range(0..=g), g + 1).unwrap(),
                    )
                })
                .collect();
            let mac = MacAddr([2, 0, 0, 0, 0, rng.random_range(0..macs) as u8]);
            BehaviorSample::new(mac, window, 0.0)
        })
        .collect()
}

fn naive_distance(a: &BehaviorSample, b: &BehaviorSample) -> f64 {
    if a.mac == b.mac {
        return 0.0;
    }
    let (x, y) = (
        a.window.iter().flat_map(|o| o.flatten()).collect::<Vec<u8>>(),
        b.window.iter().flat_map(|o| o.flatten()).collect::<Vec<u8>>(),
    );
    x.iter().zip(&y).filter(|(p, q)| p != q).count() as f64
}

fn naive_silhouette(samples: &[BehaviorSample], assignment: &[usize]) -> f64 {
    let n = samples.len();
    let k = assignment.iter().max().unwrap() + 1;
    let mut total = 0.0;
    for i in 0..n {
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        for j in 0..n {
            sum[assignment[j]] += naive_distance(&samples[i], &samples[j]);
            count[assignment[j]] += 1;
        }
        let own = assignment[i];
        if count[own] == 1 {
            continue;
        }
        let a = sum[own] / (count[own] - 1) as f64;
        let mut b = f64::INFINITY;
        for c in 0..k {
            if c != own && count[c] > 0 {
                b = b.min(sum[c] / count[c] as f64);
            }
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

#[test]
fn c04_silhouette_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut instances = 0;
    while instances < 50 {
        let n = rng.random_range(2..=200);
        let samples = random_samples(&mut rng, n);
        let k = rng.random_range(2..=n.min(8));
        let assignment: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        if assignment.iter().collect::<std::collections::BTreeSet<_>>().len() < 2 {
            continue;
        }
        instances += 1;
        let got = silhouette(&samples, &assignment).unwrap();
        let want = naive_silhouette(&samples, &assignment);
        if got.to_bits() != want.to_bits() {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    let ok = mismatches == 0 && elapsed < Duration::from_secs(30);
    report(4, "silhouette oracle", ok, format!("{mismatches} mismatches over 50 instances"), elapsed);
    assert!(ok);
}

#[test]
fn c05_kmeans_convergence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    let mut max_iter = 0;
    for i in 0..100 {
        let n = rng.random_range(2..=300);
        let samples = random_samples(&mut rng, n);
        let k = rng.random_range(1..=n.min(10));
        let cl = kmeans_hamming(&samples, k, i).unwrap();
        violations += cl.objective.windows(2).filter(|w| w[1] > w[0]).count();
        max_iter = max_iter.max(cl.iterations);
        let recomputed: u64 = samples
            .iter()
            .zip(&cl.assignment)
            .map(|(s, &c)| s.flat().hamming(&cl.centroids[c]) as u64)
            .sum();
        // The last recorded objective belongs to the final assignment under
        // the final centroids only when the run converged.
        if cl.iterations < 100 && recomputed != *cl.objective.last().unwrap() {
            violations += 1;
        }
    }
    let ok = violations == 0 && max_iter <= 100;
    report(5, "k-means convergence", ok, format!("{violations} increases, max {max_iter} iterations over 100 instances"), start.elapsed());
    assert!(ok);
    let _ = Bits::zeros(0);
}

// ---------------------------------------------------------------- 6 to 10

struct World {
    set: CaptureSet,
    labeled: Vec<LabeledTrace>,
    train: Vec<usize>,
    test: Vec<usize>,
    bundle: ClassifierBundle,
    cfg: RunConfig,
    build: Duration,
}

impl World {
    fn test_traces(&self, include_withheld: bool) -> Vec<&LabeledTrace> {
        self.test
            .iter()
            .map(|&i| &self.labeled[i])
            .filter(|t| include_withheld || self.bundle.apps.contains(&t.dominant_app))
            .collect()
    }
}

fn acceptance_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 7;
    cfg.training.withheld_apps = presets::withheld_apps();
    cfg.openmax.delta = 0.2;
    cfg.openmax.action_delta = Some(0.5);
    cfg
}

fn build_world(loss: f64) -> World {
    let start = Instant::now();
    let cfg = acceptance_config();
    let scenario = presets::closed_world(cfg.seed);
    let gen = generate_scenario(&scenario).unwrap();
    let mut set = CaptureSet::from_generated(&gen, &scenario);
    if loss > 0.0 {
        set = set.with_loss(loss, cfg.seed).unwrap();
    }
    let traces = segment_captures(&set, &cfg.segmenter);
    let labeled = label_recorder_traces(&set, &traces).unwrap();
    let (train, test) = split_by_app(&labeled, cfg.training.train_fraction, cfg.seed);
    let tr: Vec<&LabeledTrace> = train.iter().map(|&i| &labeled[i]).collect();
    let (bundle, _) = train_bundle(&tr, &set.app_categories, &set.mapping, &cfg).unwrap();
    World {
        set,
        labeled,
        train,
        test,
        bundle,
        cfg,
        build: start.elapsed(),
    }
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| build_world(0.0))
}

fn closed_world_eval(w: &World) -> (EvalOutcome, Duration) {
    let start = Instant::now();
    let out = evaluate(&w.bundle, &w.test_traces(false), DecisionMode::SoftmaxOnly).unwrap();
    (out, w.build + start.elapsed())
}

fn closed_world_result() -> &'static (EvalOutcome, Duration) {
    static R: OnceLock<(EvalOutcome, Duration)> = OnceLock::new();
    R.get_or_init(|| closed_world_eval(world()))
}

#[test]
fn c06_closed_world() {
    let (out, elapsed) = closed_world_result();
    let ok = out.app.accuracy >= 0.95 && out.action.accuracy >= 0.90 && *elapsed <= Duration::from_secs(600);
    report(
        6,
        "closed world",
        ok,
        format!(
            "app accuracy {:.4} ({} frames), action accuracy {:.4} ({} bursts)",
            out.app.accuracy, out.app.samples, out.action.accuracy, out.action.samples
        ),
        *elapsed,
    );
    println!("{}", out.app.to_table("apps"));
    println!("{}", out.action.to_table("actions"));
    assert!(ok);
}

#[test]
fn c07_open_world() {
    let w = world();
    let start = Instant::now();
    let test = w.test_traces(true);
    let om = evaluate(&w.bundle, &test, DecisionMode::OpenMax).unwrap();
    let sm = evaluate(&w.bundle, &test, DecisionMode::SoftmaxOnly).unwrap();
    let elapsed = w.build + start.elapsed();
    let recall = om.unknown_recall.unwrap_or(0.0);
    let gain = om.app.accuracy - sm.app.accuracy;
    let ok = recall >= 0.70 && gain >= 0.05 && elapsed <= Duration::from_secs(600);
    report(
        7,
        "open world",
        ok,
        format!(
            "unknown recall {recall:.4}, OpenMax accuracy {:.4} vs softmax-only {:.4} (+{:.1} points)",
            om.app.accuracy,
            sm.app.accuracy,
            gain * 100.0
        ),
        elapsed,
    );
    assert!(ok);
}

#[test]
fn c08_user_identification() {
    let w = world();
    let start = Instant::now();
    let cfg = &w.cfg;
    let scenario = presets::office_users(cfg.seed, 5, 480.0);
    let gen = generate_scenario(&scenario).unwrap();
    let set = CaptureSet::from_generated(&gen, &scenario);
    let traces = segment_captures(&set, &cfg.segmenter);
    let ops = operation_traces(&w.bundle, &traces, DecisionMode::OpenMax).unwrap();
    let cutoff = profiling_cutoff(&set, cfg.profiler.profile_fraction).unwrap();
    let rooms = profile_rooms(&ops, cutoff, cfg).unwrap();
    let scores = score_identification(&rooms, &ops, cutoff, &gen.truth.user_of_mac(), cfg).unwrap();
    let expected: BTreeMap<&str, usize> = [("office1", 3), ("office2", 4), ("office3", 5)].into();
    let mut counts_ok = scores.len() == expected.len();
    let (mut correct, mut total) = (0, 0);
    let mut detail = Vec::new();
    for s in &scores {
        counts_ok &= expected.get(s.room.as_str()) == Some(&s.k_op);
        correct += s.correct;
        total += s.identified;
        detail.push(format!("{} k={} ({} users) acc {:.4}", s.room, s.k_op, s.true_users, s.accuracy()));
    }
    let accuracy = if total > 0 { correct as f64 / total as f64 } else { 0.0 };
    let elapsed = start.elapsed();
    let ok = counts_ok && accuracy >= 0.95 && elapsed <= Duration::from_secs(600);
    report(
        8,
        "user identification",
        ok,
        format!("{}; held-out accuracy {accuracy:.4} over {total} windows", detail.join(", ")),
        elapsed,
    );
    assert!(ok);
}

#[test]
fn c09_loss_robustness() {
    let (base, _) = closed_world_result();
    let start = Instant::now();
    let mut ok = true;
    let mut detail = Vec::new();
    for loss in [0.15, 0.25] {
        let w = build_world(loss);
        let (out, _) = closed_world_eval(&w);
        let (app, action) = (out.app.accuracy, out.action.accuracy);
        let pass = if loss <= 0.15 {
            base.app.accuracy - app < 0.05 && base.action.accuracy - action < 0.05
        } else {
            app >= 0.85 && action >= 0.85
        };
        ok &= pass;
        detail.push(format!("loss {:.0}%: app {app:.4} action {action:.4}", loss * 100.0));
    }
    report(
        9,
        "loss robustness",
        ok,
        format!(
            "baseline app {:.4} action {:.4}; {}",
            base.app.accuracy,
            base.action.accuracy,
            detail.join("; ")
        ),
        start.elapsed(),
    );
    assert!(ok);
}

#[test]
fn c10_throughput() {
    let w = world();
    let traces: Vec<_> = w.test_traces(true).into_iter().map(|t| &t.annotated.trace).collect();
    let start = Instant::now();
    let rt = measure_runtime(&w.bundle, &traces, 20_000, DecisionMode::OpenMax).unwrap();
    let ok = rt.total_ms_per_sample < 5.0;
    let stages: Vec<String> = rt.stages_ms_per_sample.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
    report(
        10,
        "throughput",
        ok,
        format!("{:.4} ms/sample over {} samples ({})", rt.total_ms_per_sample, rt.samples, stages.join(", ")),
        start.elapsed(),
    );
    assert!(ok);
    let _ = (&w.set, &w.train);
}
