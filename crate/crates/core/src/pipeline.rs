//! End-to-end flows: captures to labeled traces, bundle training,
//! evaluation, runtime measurement and user profiling.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::{annotate_trace, parse_interaction_log, AnnotatedTrace};
use crate::classifier::bundle::{assemble_from_decisions, infer_trace, Classifier, ClassifierBundle, DecisionMode};
use crate::classifier::openmax::{argmax_first, openmax_fit};
use crate::classifier::tcn::{tcn_train, SampleSet, TcnConfig, TcnModel, TcnShape, TrainReport};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::featex::{
    extract_action_samples, extract_app_samples, extract_app_samples_at, kde_csv, trace_burst_features, BurstFeatures,
    StandardScaler, APP_CHANNELS, BURST_FEATURES,
};
use crate::ingest::{filter_data_frames, parse_capture, segment_traces, SegmenterConfig};
use crate::metrics::{classification_report, MetricsReport};
use crate::profiler::{
    behavior_windows, build_profiles, collapse_timed, identify, match_clusters, refresh_profiles, BehaviorSample, UserProfileSet,
};
use crate::synthgen::{
    capture_file_name, hash_str, inject_loss, log_file_name, GeneratedScenario, RecorderDevice, Room, Scenario,
    MAPPING_FILE, RECORDERS_FILE, SCENARIO_FILE,
};
use crate::trace_model::{ActionMappingTable, FrameMeta, InteractionRecord, MacAddr, OperationLabel, TrafficTrace};

pub const UNKNOWN_LABEL: &str = "unknown";

/// Deterministic sub-seed for a named stage.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    hash_str(tag) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Everything an operator has after a capture campaign. Ground truth is
/// deliberately absent.
#[derive(Debug, Clone)]
pub struct CaptureSet {
    pub rooms: Vec<Room>,
    pub captures: BTreeMap<String, Vec<FrameMeta>>,
    /// Interaction logs keyed by recorder user.
    pub logs: BTreeMap<String, Vec<InteractionRecord>>,
    pub recorders: Vec<RecorderDevice>,
    pub mapping: ActionMappingTable,
    /// Store category of every app in the catalog.
    pub app_categories: BTreeMap<String, String>,
}

impl CaptureSet {
    pub fn from_generated(gen: &GeneratedScenario, scenario: &Scenario) -> Self {
        CaptureSet {
            rooms: scenario.rooms.clone(),
            captures: gen.captures.clone(),
            logs: gen.logs.clone(),
            recorders: gen.recorders.clone(),
            mapping: gen.mapping.clone(),
            app_categories: categories_of(scenario),
        }
    }

    /// Reads a capture directory written by the generator.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let scenario = Scenario::from_toml(&read(SCENARIO_FILE)?)?;
        let recorders: Vec<RecorderDevice> = serde_json::from_str(&read(RECORDERS_FILE)?)?;
        let mapping: ActionMappingTable = serde_json::from_str(&read(MAPPING_FILE)?)?;
        mapping.validate()?;
        let mut captures = BTreeMap::new();
        for room in &scenario.rooms {
            captures.insert(room.name.clone(), parse_capture(&dir.join(capture_file_name(&room.name)))?);
        }
        let mut logs = BTreeMap::new();
        for r in &recorders {
            let file = if r.log.is_empty() { log_file_name(&r.user) } else { r.log.clone() };
            logs.insert(r.user.clone(), parse_interaction_log(&dir.join(file))?);
        }
        Ok(CaptureSet {
            rooms: scenario.rooms.clone(),
            captures,
            logs,
            recorders,
            mapping,
            app_categories: categories_of(&scenario),
        })
    }

    /// Copy with every room capture thinned by independent frame loss.
    pub fn with_loss(&self, rate: f64, seed: u64) -> Result<Self> {
        let mut out = self.clone();
        for (room, frames) in out.captures.iter_mut() {
            *frames = inject_loss(frames, rate, derive_seed(seed, room))?;
        }
        Ok(out)
    }

    /// First and last capture timestamps over all rooms.
    pub fn time_span(&self) -> Option<(f64, f64)> {
        let mut span: Option<(f64, f64)> = None;
        for frames in self.captures.values() {
            if let (Some(a), Some(b)) = (frames.first(), frames.last()) {
                span = Some(match span {
                    Some((lo, hi)) => (lo.min(a.t), hi.max(b.t)),
                    None => (a.t, b.t),
                });
            }
        }
        span
    }
}

fn categories_of(s: &Scenario) -> BTreeMap<String, String> {
    s.apps.iter().map(|a| (a.app_id.clone(), a.category.clone())).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoomTrace {
    pub room: String,
    pub trace: TrafficTrace,
}

/// Data frames of each room, split into per-station traces.
pub fn segment_captures(set: &CaptureSet, seg: &SegmenterConfig) -> Vec<RoomTrace> {
    let mut out = Vec::new();
    for room in &set.rooms {
        let Some(frames) = set.captures.get(&room.name) else { continue };
        let data = filter_data_frames(frames, room.ap);
        for trace in segment_traces(&data, seg).traces {
            out.push(RoomTrace {
                room: room.name.clone(),
                trace,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrace {
    pub room: String,
    pub annotated: AnnotatedTrace,
    pub dominant_app: String,
}

/// Annotates traces of label-recorder devices with their logs. Traces of
/// other stations and traces without any labeled frame are dropped.
pub fn label_recorder_traces(set: &CaptureSet, traces: &[RoomTrace]) -> Result<Vec<LabeledTrace>> {
    let mut owner: BTreeMap<MacAddr, &RecorderDevice> = BTreeMap::new();
    for r in &set.recorders {
        for m in &r.macs {
            owner.insert(*m, r);
        }
    }
    let mut out = Vec::new();
    for rt in traces {
        let Some(rec) = owner.get(&rt.trace.mac) else { continue };
        let Some(log) = set.logs.get(&rec.user) else { continue };
        let annotated = annotate_trace(&rt.trace, log, &set.mapping)?;
        if let Some(app) = annotated.dominant_app() {
            out.push(LabeledTrace {
                room: rt.room.clone(),
                annotated,
                dominant_app: app,
            });
        }
    }
    Ok(out)
}

/// Trace-level split stratified by dominant app: the first
/// `round(n · fraction)` traces of each shuffled group train, the rest test.
pub fn split_by_app(traces: &[LabeledTrace], train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in traces.iter().enumerate() {
        groups.entry(&t.dominant_app).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split"));
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut idx) in groups {
        idx.shuffle(&mut rng);
        let mut n_train = (idx.len() as f64 * train_fraction).round() as usize;
        if idx.len() >= 2 {
            n_train = n_train.clamp(1, idx.len() - 1);
        }
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub app_samples: usize,
    pub app_report: TrainReport,
    pub action_samples: BTreeMap<String, usize>,
    pub action_reports: BTreeMap<String, TrainReport>,
}

fn fit_classifier(
    data: &SampleSet,
    classes: usize,
    config: TcnConfig,
    cfg: &RunConfig,
    delta: f64,
) -> Result<(Classifier, TrainReport)> {
    let mut model = TcnModel::new(
        config,
        TcnShape {
            window: data.window,
            in_dims: data.dims,
            classes,
        },
    )?;
    let report = tcn_train(&mut model, data)?;
    // Mean activation vectors come from correctly classified samples; a
    // class with fewer than three of those falls back to all its samples.
    let outputs: Vec<(Vec<f64>, bool)> = (0..data.len())
        .map(|i| {
            let (q, act) = model.predict(data.x(i))?;
            Ok((act, argmax_first(&q) == data.label(i)))
        })
        .collect::<Result<_>>()?;
    let mut correct = vec![0usize; classes];
    for (i, (_, ok)) in outputs.iter().enumerate() {
        correct[data.label(i)] += *ok as usize;
    }
    let mut acts = Vec::new();
    let mut labels = Vec::new();
    for (i, (act, ok)) in outputs.into_iter().enumerate() {
        let c = data.label(i);
        if ok || correct[c] < 3 {
            acts.push(act);
            labels.push(c);
        }
    }
    for (c, n) in correct.iter().enumerate() {
        if *n < 3 {
            log::warn!("class {c}: only {n} correctly classified training samples, fitting OpenMax on all of them");
        }
    }
    let openmax = openmax_fit(&acts, &labels, classes, cfg.openmax.tail_size, delta)?;
    Ok((Classifier { model, openmax }, report))
}

/// Number of action classes per category: one past the largest action
/// index in the mapping table.
pub fn actions_per_category(mapping: &ActionMappingTable) -> usize {
    mapping.apps.values().flatten().map(|r| r.action + 1).max().unwrap_or(0)
}

/// Burst app label: most frequent frame label within the burst.
fn burst_app_labels(t: &AnnotatedTrace) -> Vec<Option<String>> {
    t.burst_apps()
}

/// Trains the app classifier on the known apps of the training traces and
/// one action classifier per category.
/// Fewest training bursts per action for a category to get an action classifier.
const MIN_ACTION_SAMPLES: usize = 3;

pub fn train_bundle(
    train: &[&LabeledTrace],
    app_categories: &BTreeMap<String, String>,
    mapping: &ActionMappingTable,
    cfg: &RunConfig,
) -> Result<(ClassifierBundle, TrainSummary)> {
    let withheld: BTreeSet<&str> = cfg.training.withheld_apps.iter().map(String::as_str).collect();
    let apps: Vec<String> = train
        .iter()
        .map(|t| t.dominant_app.clone())
        .filter(|a| !withheld.contains(a.as_str()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if apps.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least two known apps to train, found {}", apps.len())));
    }
    let mut categories: Vec<String> = Vec::new();
    let mut routing = Vec::with_capacity(apps.len());
    for a in &apps {
        let c = app_categories
            .get(a)
            .ok_or_else(|| Error::Config(format!("no category known for app {a}")))?;
        let idx = match categories.iter().position(|x| x == c) {
            Some(i) => i,
            None => {
                categories.push(c.clone());
                categories.len() - 1
            }
        };
        routing.push(idx);
    }
    let app_index = |name: &str| apps.iter().position(|a| a == name);
    let w_s = cfg.app_window();
    let w_a = cfg.features.action_window;

    // App samples, capped per class.
    let mut candidates: Vec<Vec<(usize, usize)>> = vec![Vec::new(); apps.len()];
    for (ti, t) in train.iter().enumerate() {
        for (m, label) in t.annotated.frame_apps.iter().enumerate() {
            if let Some(c) = label.as_deref().and_then(app_index) {
                candidates[c].push((ti, m));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "app-subsample"));
    let cap = cfg.training.max_app_samples_per_class;
    let mut chosen: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (c, cand) in candidates.iter().enumerate() {
        let picks: Vec<usize> = if cap > 0 && cand.len() > cap {
            let mut v = index::sample(&mut rng, cand.len(), cap).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..cand.len()).collect()
        };
        for i in picks {
            let (ti, m) = cand[i];
            chosen.entry(ti).or_default().push((m, c));
        }
    }
    let mut app_data = SampleSet::new(w_s, APP_CHANNELS);
    for (ti, picks) in &chosen {
        let mut picks = picks.clone();
        picks.sort_unstable();
        let samples = extract_app_samples_at(&train[*ti].annotated.trace, w_s, picks.iter().map(|p| p.0))?;
        for (s, (_, c)) in samples.iter().zip(&picks) {
            app_data.push(&s.data, *c)?;
        }
    }
    let mut app_cfg = cfg.app_model.clone();
    app_cfg.seed = derive_seed(cfg.seed ^ cfg.app_model.seed, "app-model");
    log::info!("training app classifier on {} samples, {} apps", app_data.len(), apps.len());
    let (app, app_report) = fit_classifier(&app_data, apps.len(), app_cfg, cfg, cfg.openmax.delta)?;

    // Action samples per category.
    let feats: Vec<Vec<BurstFeatures>> =
        train.iter().map(|t| trace_burst_features(&t.annotated.trace, cfg.features.conventions)).collect();
    let scaler = StandardScaler::fit(feats.iter().flatten().map(|f| &f.p[..]))?;
    let g = actions_per_category(mapping);
    if g == 0 {
        return Err(Error::Config("the action mapping table defines no actions".into()));
    }
    let mut action_data: Vec<SampleSet> = vec![SampleSet::new(w_a, BURST_FEATURES); categories.len()];
    for (t, f) in train.iter().zip(&feats) {
        let samples = extract_action_samples(f, w_a, &scaler)?;
        let burst_apps = burst_app_labels(&t.annotated);
        for (n, s) in samples.iter().enumerate() {
            let (Some(app), Some(action)) = (burst_apps[n].as_deref().and_then(app_index), t.annotated.burst_actions[n])
            else {
                continue;
            };
            if action < g {
                action_data[routing[app]].push(&s.data, action)?;
            }
        }
    }
    let mut actions = BTreeMap::new();
    let mut action_reports = BTreeMap::new();
    let mut action_samples = BTreeMap::new();
    for (ci, data) in action_data.iter().enumerate() {
        let name = &categories[ci];
        action_samples.insert(name.clone(), data.len());
        let counts = data.class_counts(g);
        if let Some(missing) = counts.iter().position(|&c| c < MIN_ACTION_SAMPLES) {
            log::warn!(
                "category {name} has {} labeled bursts of action {missing}; its actions will be reported unknown",
                counts[missing]
            );
            continue;
        }
        let mut ac = cfg.action_model.clone();
        ac.seed = derive_seed(cfg.seed ^ cfg.action_model.seed, &format!("action-model-{name}"));
        log::info!("training action classifier {name} on {} samples", data.len());
        let (clf, rep) = fit_classifier(data, g, ac, cfg, cfg.openmax.action_delta())?;
        actions.insert(name.clone(), clf);
        action_reports.insert(name.clone(), rep);
    }
    let bundle = ClassifierBundle {
        apps,
        categories,
        routing,
        actions_per_category: g,
        app_window: w_s,
        action_window: w_a,
        conventions: cfg.features.conventions,
        action_scaler: scaler,
        app,
        actions,
    };
    bundle.validate()?;
    Ok((
        bundle,
        TrainSummary {
            app_samples: app_data.len(),
            app_report,
            action_samples,
            action_reports,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    /// Per-frame app decisions; the last class is unknown.
    pub app: MetricsReport,
    /// Per-burst actions over bursts of known apps with a logged action.
    pub action: MetricsReport,
    /// Share of frames from apps outside the bundle that were rejected.
    pub unknown_recall: Option<f64>,
}

pub fn evaluate(bundle: &ClassifierBundle, test: &[&LabeledTrace], mode: DecisionMode) -> Result<EvalOutcome> {
    let h = bundle.apps.len();
    let g = bundle.actions_per_category;
    let (mut app_t, mut app_p) = (Vec::new(), Vec::new());
    let (mut act_t, mut act_p) = (Vec::new(), Vec::new());
    for t in test {
        let inf = infer_trace(&t.annotated.trace, bundle, mode)?;
        for (label, &pred) in t.annotated.frame_apps.iter().zip(&inf.frame_apps) {
            let Some(name) = label else { continue };
            app_t.push(bundle.apps.iter().position(|a| a == name).unwrap_or(h));
            app_p.push(pred);
        }
        for (n, app) in t.annotated.burst_apps().iter().enumerate() {
            let known = app.as_deref().is_some_and(|a| bundle.apps.iter().any(|x| x == a));
            if let (true, Some(action)) = (known, t.annotated.burst_actions[n]) {
                act_t.push(action.min(g));
                act_p.push(inf.burst_actions[n]);
            }
        }
    }
    let mut app_labels = bundle.apps.clone();
    app_labels.push(UNKNOWN_LABEL.into());
    let mut act_labels: Vec<String> = (0..g).map(|i| format!("action{i}")).collect();
    act_labels.push(UNKNOWN_LABEL.into());
    let app = classification_report(&app_t, &app_p, &app_labels)?;
    let action = classification_report(&act_t, &act_p, &act_labels)?;
    let unknown_recall = (app.per_class[h].support > 0).then(|| app.per_class[h].recall);
    Ok(EvalOutcome {
        app,
        action,
        unknown_recall,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeReport {
    pub samples: usize,
    pub stages_ms_per_sample: BTreeMap<String, f64>,
    pub total_ms_per_sample: f64,
}

/// Times each inference stage per app sample (frame) over at least
/// `min_samples` frames, cycling through `traces` as needed.
pub fn measure_runtime(
    bundle: &ClassifierBundle,
    traces: &[&TrafficTrace],
    min_samples: usize,
    mode: DecisionMode,
) -> Result<RuntimeReport> {
    if traces.iter().all(|t| t.is_empty()) {
        return Err(Error::InvalidArgument("no frames to time".into()));
    }
    let mut stages: BTreeMap<String, f64> = BTreeMap::new();
    let mut add = |k: &str, d: std::time::Duration| *stages.entry(k.to_string()).or_default() += d.as_secs_f64() * 1e3;
    let mut samples = 0usize;
    let mut total = 0.0;
    let mut i = 0;
    while samples < min_samples {
        let trace = traces[i % traces.len()];
        i += 1;
        let start = Instant::now();
        let t0 = Instant::now();
        let app_samples = extract_app_samples(trace, bundle.app_window)?;
        add("app_features", t0.elapsed());
        let t0 = Instant::now();
        let frame_apps = app_samples.iter().map(|s| bundle.app.decide(&s.data, mode)).collect::<Result<Vec<_>>>()?;
        add("app_inference", t0.elapsed());
        let t0 = Instant::now();
        let feats = trace_burst_features(trace, bundle.conventions);
        let act_samples = extract_action_samples(&feats, bundle.action_window, &bundle.action_scaler)?;
        add("action_features", t0.elapsed());
        let t0 = Instant::now();
        let inf = assemble_from_decisions(trace, bundle, mode, frame_apps, &act_samples)?;
        add("action_inference_and_assembly", t0.elapsed());
        total += start.elapsed().as_secs_f64() * 1e3;
        samples += inf.frame_apps.len();
    }
    let n = samples as f64;
    Ok(RuntimeReport {
        samples,
        stages_ms_per_sample: stages.into_iter().map(|(k, v)| (k, v / n)).collect(),
        total_ms_per_sample: total / n,
    })
}

/// Kernel-density points of a few burst features per action over the
/// training bursts.
pub fn kde_export(train: &[&LabeledTrace], cfg: &RunConfig, tags: &[usize], grid: usize) -> String {
    let mut rows: Vec<(usize, BurstFeatures)> = Vec::new();
    for t in train {
        let feats = trace_burst_features(&t.annotated.trace, cfg.features.conventions);
        for (f, a) in feats.into_iter().zip(&t.annotated.burst_actions) {
            if let Some(a) = a {
                rows.push((*a, f));
            }
        }
    }
    let refs: Vec<(usize, &BurstFeatures)> = rows.iter().map(|(a, f)| (*a, f)).collect();
    kde_csv(&refs, tags, grid)
}

/// Operation labels of one trace with burst start times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationTrace {
    pub room: String,
    pub mac: MacAddr,
    pub start: f64,
    pub operations: Vec<OperationLabel>,
    pub times: Vec<f64>,
}

pub fn operation_traces(bundle: &ClassifierBundle, traces: &[RoomTrace], mode: DecisionMode) -> Result<Vec<OperationTrace>> {
    traces
        .iter()
        .map(|rt| {
            let inf = infer_trace(&rt.trace, bundle, mode)?;
            let t1 = rt.trace.start_time();
            Ok(OperationTrace {
                room: rt.room.clone(),
                mac: rt.trace.mac,
                start: t1,
                times: (0..inf.operations.len()).map(|n| t1 + n as f64).collect(),
                operations: inf.operations,
            })
        })
        .collect()
}

/// Behavior samples of each operation trace, tagged with the trace index.
pub fn behavior_samples(ops: &[OperationTrace], wb: usize) -> Vec<(usize, BehaviorSample)> {
    let mut out = Vec::new();
    for (i, o) in ops.iter().enumerate() {
        let seq = collapse_timed(o.mac, &o.operations, &o.times);
        out.extend(behavior_windows(&seq, wb).into_iter().map(|s| (i, s)));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoomProfiles {
    pub room: String,
    pub profiles: UserProfileSet,
    /// Distinct MACs among the profiling samples (the `K_max` used).
    pub macs: usize,
    pub samples: Vec<BehaviorSample>,
}

/// Behavior samples per room from traces starting before `cutoff`.
pub fn profiling_samples(ops: &[OperationTrace], cutoff: f64, wb: usize) -> BTreeMap<String, Vec<BehaviorSample>> {
    let mut by_room: BTreeMap<String, Vec<BehaviorSample>> = BTreeMap::new();
    for (i, s) in behavior_samples(ops, wb) {
        if ops[i].start < cutoff {
            by_room.entry(ops[i].room.clone()).or_default().push(s);
        }
    }
    by_room
}

/// Builds per-room profiles from samples starting before `cutoff`.
pub fn profile_rooms(ops: &[OperationTrace], cutoff: f64, cfg: &RunConfig) -> Result<Vec<RoomProfiles>> {
    let mut out = Vec::new();
    for (room, samples) in profiling_samples(ops, cutoff, cfg.profiler.behavior_window) {
        let macs = samples.iter().map(|s| s.mac).collect::<BTreeSet<_>>().len();
        let k_max = if cfg.profiler.k_max > 0 { cfg.profiler.k_max } else { macs };
        let seed = derive_seed(cfg.seed, &format!("profile-{room}"));
        let profiles = if cfg.profiler.refresh_window > 0.0 {
            refresh_profiles(&samples, cutoff, cfg.profiler.refresh_window, k_max, seed)?
        } else {
            build_profiles(&samples, k_max, seed)?
        };
        log::info!("room {room}: {} samples from {macs} MACs, k_op = {}", samples.len(), profiles.k_op);
        out.push(RoomProfiles {
            room,
            profiles,
            macs,
            samples,
        });
    }
    Ok(out)
}

/// Profiling cutoff time: `fraction` of the way through the capture.
pub fn profiling_cutoff(set: &CaptureSet, fraction: f64) -> Option<f64> {
    set.time_span().map(|(lo, hi)| lo + fraction * (hi - lo))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomScore {
    pub room: String,
    pub k_op: usize,
    pub true_users: usize,
    pub profile_purity: f64,
    pub identified: usize,
    pub correct: usize,
    pub trace_correct: usize,
    pub traces: usize,
    /// Per-user (correct, total) held-out samples.
    pub per_user: BTreeMap<String, (usize, usize)>,
}

impl RoomScore {
    pub fn accuracy(&self) -> f64 {
        if self.identified == 0 {
            0.0
        } else {
            self.correct as f64 / self.identified as f64
        }
    }
}

/// Scores profiles and held-out identification against a MAC-to-user map.
pub fn score_identification(
    rooms: &[RoomProfiles],
    ops: &[OperationTrace],
    cutoff: f64,
    user_of_mac: &BTreeMap<MacAddr, String>,
    cfg: &RunConfig,
) -> Result<Vec<RoomScore>> {
    let held: Vec<(usize, BehaviorSample)> =
        behavior_samples(ops, cfg.profiler.behavior_window).into_iter().filter(|(i, _)| ops[*i].start >= cutoff).collect();
    let mut out = Vec::new();
    for rp in rooms {
        let user_name = |m: &MacAddr| -> Result<&String> {
            user_of_mac.get(m).ok_or_else(|| Error::InvalidArgument(format!("MAC {m} missing from ground truth")))
        };
        let mut users: Vec<String> = Vec::new();
        let mut uid = |name: &String| match users.iter().position(|u| u == name) {
            Some(i) => i,
            None => {
                users.push(name.clone());
                users.len() - 1
            }
        };
        let mut truth = Vec::with_capacity(rp.samples.len());
        for s in &rp.samples {
            truth.push(uid(user_name(&s.mac)?));
        }
        let assignment: Vec<usize> = rp.samples.iter().map(|s| identify(s, &rp.profiles)).collect();
        let mut held_room: Vec<(usize, &BehaviorSample, usize)> = Vec::new();
        for (i, s) in held.iter().filter(|(i, _)| ops[*i].room == rp.room) {
            held_room.push((*i, s, uid(user_name(&s.mac)?)));
        }
        let n_users = users.len();
        let true_profiling_users = truth.iter().collect::<BTreeSet<_>>().len();
        let mapping = match_clusters(&assignment, &truth, rp.profiles.k_op, n_users);
        let purity_hits = assignment.iter().zip(&truth).filter(|(&c, &u)| mapping[c] == Some(u)).count();
        let mut per_user: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let mut correct = 0;
        let mut by_trace: BTreeMap<usize, (usize, Vec<usize>)> = BTreeMap::new();
        for (ti, s, u) in &held_room {
            let c = identify(s, &rp.profiles);
            let ok = mapping[c] == Some(*u);
            correct += ok as usize;
            let e = per_user.entry(users[*u].clone()).or_default();
            e.0 += ok as usize;
            e.1 += 1;
            let tr = by_trace.entry(*ti).or_insert((*u, Vec::new()));
            tr.1.push(c);
        }
        let mut trace_correct = 0;
        for (u, votes) in by_trace.values() {
            if let Some(c) = crate::annotate::majority_first_seen(votes.iter().copied()) {
                trace_correct += (mapping[c] == Some(*u)) as usize;
            }
        }
        out.push(RoomScore {
            room: rp.room.clone(),
            k_op: rp.profiles.k_op,
            true_users: true_profiling_users,
            profile_purity: if truth.is_empty() { 0.0 } else { purity_hits as f64 / truth.len() as f64 },
            identified: held_room.len(),
            correct,
            trace_correct,
            traces: by_trace.len(),
            per_user,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_scenario, presets};

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.app_model = TcnConfig { channels: 8, levels: 2, epochs: 2, ..Default::default() };
        cfg.action_model = TcnConfig { channels: 8, levels: 1, epochs: 2, ..Default::default() };
        cfg.training.max_app_samples_per_class = 60;
        cfg.features.app_window = 9;
        cfg.openmax.tail_size = 5;
        cfg
    }

    #[test]
    fn tiny_campaign_end_to_end() {
        let scenario = presets::by_name("tiny", 3).unwrap();
        let gen = generate_scenario(&scenario).unwrap();
        let set = CaptureSet::from_generated(&gen, &scenario);
        let cfg = tiny_cfg();
        let traces = segment_captures(&set, &cfg.segmenter);
        let labeled = label_recorder_traces(&set, &traces).unwrap();
        // Six sessions; idle gaps above gamma split some of them.
        assert!(labeled.len() >= 6);
        let (train, test) = split_by_app(&labeled, 0.6, 1);
        assert_eq!(train.len() + test.len(), labeled.len());
        for app in labeled.iter().map(|t| &t.dominant_app).collect::<BTreeSet<_>>() {
            assert!(train.iter().any(|&i| &labeled[i].dominant_app == app));
            assert!(test.iter().any(|&i| &labeled[i].dominant_app == app));
        }
        let tr: Vec<&LabeledTrace> = train.iter().map(|&i| &labeled[i]).collect();
        let te: Vec<&LabeledTrace> = test.iter().map(|&i| &labeled[i]).collect();
        let (bundle, summary) = train_bundle(&tr, &set.app_categories, &set.mapping, &cfg).unwrap();
        assert_eq!(bundle.apps.len(), 3);
        assert!(summary.app_samples <= 180);
        let out = evaluate(&bundle, &te, DecisionMode::OpenMax).unwrap();
        assert!((0.0..=1.0).contains(&out.app.accuracy));
        assert!(out.unknown_recall.is_none());
        let rt = measure_runtime(&bundle, &[&te[0].annotated.trace], 100, DecisionMode::OpenMax).unwrap();
        assert!(rt.samples >= 100);
        let stage_sum: f64 = rt.stages_ms_per_sample.values().sum();
        assert!(stage_sum <= rt.total_ms_per_sample * 1.0001);
        let csv = kde_export(&tr, &cfg, &[2, 4], 16);
        assert!(csv.lines().count() > 16);
    }

    #[test]
    fn loss_thins_every_room() {
        let scenario = presets::by_name("tiny", 3).unwrap();
        let gen = generate_scenario(&scenario).unwrap();
        let set = CaptureSet::from_generated(&gen, &scenario);
        let lossy = set.with_loss(0.25, 9).unwrap();
        for (room, frames) in &set.captures {
            let kept = lossy.captures[room].len() as f64 / frames.len() as f64;
            assert!((kept - 0.75).abs() < 0.02, "{kept}");
        }
    }
}
