//! Deterministic multi-user traffic generator.
//!
//! A [`Scenario`] describes rooms (one AP each), an app catalog with
//! per-action traffic shapes, and user scripts. [`generate_scenario`] turns
//! it into per-room capture frames, per-user label-recorder logs, the UI
//! action mapping table and a [`GroundTruth`] that is written separately
//! and never read by the inference path.
//!
//! Frame arrivals inside an action follow independent uplink and downlink
//! gamma renewal processes; the action's `burstiness` is the squared
//! coefficient of variation of the inter-arrival time (1 = Poisson).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::annotate::format_interaction_log;
use crate::error::{Error, Result};
use crate::ingest::write_capture;
use crate::trace_model::{
    ActionMappingTable, ActionRegion, Direction, FrameKind, FrameMeta, InteractionRecord, MacAddr,
    ScreenRect,
};

pub mod presets;

pub const MAX_FRAME_SIZE: u32 = 1500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub std: f64,
}

impl Gaussian {
    pub fn new(mean: f64, std: f64) -> Self {
        Gaussian { mean, std }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.std <= 0.0 {
            return self.mean;
        }
        Normal::new(self.mean, self.std)
            .expect("finite normal parameters")
            .sample(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionProfile {
    pub action_id: usize,
    /// Mean uplink frames per second.
    pub uplink_rate: f64,
    pub downlink_rate: f64,
    pub uplink_size: Gaussian,
    pub downlink_size: Gaussian,
    /// Seconds the action keeps the app busy.
    pub duration: Gaussian,
    /// Squared coefficient of variation of inter-arrival gaps.
    pub burstiness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppProfile {
    pub app_id: String,
    pub category: String,
    pub actions: Vec<ActionProfile>,
    /// Frames per second the app emits while not in the foreground.
    pub background_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preference {
    pub app: String,
    pub action: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SessionSchedule {
    /// Each preferred app gets `per_app` sessions of `length` seconds,
    /// separated by `gap` idle seconds, in shuffled order.
    Instances { per_app: usize, length: f64, gap: f64 },
    /// `per_day` sessions of `length` seconds at random times in each day.
    Daily { per_day: usize, length: f64 },
    /// Sessions of random length (mean `length`) separated by random gaps
    /// (mean `gap`) until the horizon.
    Periodic { length: f64, gap: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserScript {
    pub user_id: String,
    pub room: String,
    pub preferences: Vec<Preference>,
    pub schedule: SessionSchedule,
    /// Probability that the next operation stays in the current app.
    #[serde(default)]
    pub app_stickiness: f64,
    /// Seconds between MAC pseudonym changes; `None` keeps one address.
    #[serde(default)]
    pub mac_rotation_period: Option<f64>,
    /// Whether this device runs the label recorder (writes an interaction log).
    #[serde(default)]
    pub label_recorder: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub name: String,
    pub ap: MacAddr,
    /// AP beacons per second (management frames).
    #[serde(default)]
    pub beacon_rate: f64,
    /// Control frames per second.
    #[serde(default)]
    pub control_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub horizon: f64,
    /// Seconds between repeated taps while an action is running.
    #[serde(default = "default_tap_interval")]
    pub tap_interval: f64,
    /// Probability that an action is overlapped by a second concurrent one.
    #[serde(default)]
    pub overlap_prob: f64,
    pub rooms: Vec<Room>,
    pub apps: Vec<AppProfile>,
    pub users: Vec<UserScript>,
}

fn default_tap_interval() -> f64 {
    0.5
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidArgument("horizon must be > 0".into()));
        }
        if self.rooms.is_empty() || self.apps.is_empty() || self.users.is_empty() {
            return Err(Error::InvalidArgument("scenario needs rooms, apps and users".into()));
        }
        if !(self.tap_interval > 0.0) {
            return Err(Error::InvalidArgument("tap_interval must be > 0".into()));
        }
        for app in &self.apps {
            if app.actions.is_empty() {
                return Err(Error::InvalidArgument(format!("app {} has no actions", app.app_id)));
            }
            if app.background_rate < 0.0 {
                return Err(Error::InvalidArgument(format!("app {} background rate < 0", app.app_id)));
            }
            for a in &app.actions {
                if !(a.uplink_rate > 0.0 && a.downlink_rate > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "app {} action {}: rates must be positive",
                        app.app_id, a.action_id
                    )));
                }
                if !(a.duration.mean > 0.0 && a.burstiness > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "app {} action {}: duration and burstiness must be positive",
                        app.app_id, a.action_id
                    )));
                }
            }
        }
        for u in &self.users {
            let total: f64 = u.preferences.iter().map(|p| p.weight).sum();
            if u.preferences.is_empty() || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "user {} preferences must sum to 1 (got {total})",
                    u.user_id
                )));
            }
            if u.preferences.iter().any(|p| p.weight < 0.0) {
                return Err(Error::InvalidArgument(format!("user {} has a negative weight", u.user_id)));
            }
            for p in &u.preferences {
                let app = self.app(&p.app).ok_or_else(|| {
                    Error::InvalidArgument(format!("user {} prefers unknown app {}", u.user_id, p.app))
                })?;
                if !app.actions.iter().any(|a| a.action_id == p.action) {
                    return Err(Error::InvalidArgument(format!(
                        "user {} prefers unknown action {} of {}",
                        u.user_id, p.action, p.app
                    )));
                }
            }
            if !self.rooms.iter().any(|r| r.name == u.room) {
                return Err(Error::InvalidArgument(format!("user {} in unknown room {}", u.user_id, u.room)));
            }
            if let Some(p) = u.mac_rotation_period {
                if !(p > 0.0) {
                    return Err(Error::InvalidArgument("mac_rotation_period must be > 0".into()));
                }
            }
        }
        Ok(())
    }

    pub fn app(&self, id: &str) -> Option<&AppProfile> {
        self.apps.iter().find(|a| a.app_id == id)
    }

    /// UI layout of every app: action `j` is a button row on the lower part
    /// of a 1080x2340 screen, shifted per app so layouts differ.
    pub fn mapping_table(&self) -> ActionMappingTable {
        let mut table = ActionMappingTable::default();
        for (i, app) in self.apps.iter().enumerate() {
            let n = app.actions.len() as i32;
            let width = 1080 / n.max(1);
            let y0 = 1500 + 40 * (i as i32 % 10);
            let regions = app
                .actions
                .iter()
                .enumerate()
                .map(|(j, a)| ActionRegion {
                    rect: ScreenRect {
                        x0: j as i32 * width + 10,
                        y0,
                        x1: (j as i32 + 1) * width - 10,
                        y1: y0 + 180,
                    },
                    action: a.action_id,
                })
                .collect();
            table.apps.insert(app.app_id.clone(), regions);
        }
        table
    }
}

/// Label attached to every emitted frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub room: String,
    pub index: usize,
    pub t: f64,
    pub mac: MacAddr,
    pub user: Option<String>,
    pub app: Option<String>,
    pub action: Option<usize>,
    pub session: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTruth {
    pub id: usize,
    pub user: String,
    pub room: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTruth {
    pub user: String,
    pub session: usize,
    pub app: String,
    pub action: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapTruth {
    pub user: String,
    pub t: f64,
    pub app: String,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudonymTruth {
    pub mac: MacAddr,
    pub user: String,
    pub room: String,
}

/// One JSON-lines record of the ground-truth file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruthRecord {
    Frame(FrameTruth),
    Session(SessionTruth),
    Action(ActionTruth),
    Tap(TapTruth),
    Pseudonym(PseudonymTruth),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub frames: Vec<FrameTruth>,
    pub sessions: Vec<SessionTruth>,
    pub actions: Vec<ActionTruth>,
    pub taps: Vec<TapTruth>,
    pub pseudonyms: Vec<PseudonymTruth>,
}

impl GroundTruth {
    pub fn user_of_mac(&self) -> BTreeMap<MacAddr, String> {
        self.pseudonyms
            .iter()
            .map(|p| (p.mac, p.user.clone()))
            .collect()
    }

    pub fn frames_in_room<'a>(&'a self, room: &'a str) -> impl Iterator<Item = &'a FrameTruth> + 'a {
        self.frames.iter().filter(move |f| f.room == room)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let records = self
            .pseudonyms
            .iter()
            .cloned()
            .map(TruthRecord::Pseudonym)
            .chain(self.sessions.iter().cloned().map(TruthRecord::Session))
            .chain(self.actions.iter().cloned().map(TruthRecord::Action))
            .chain(self.taps.iter().cloned().map(TruthRecord::Tap))
            .chain(self.frames.iter().cloned().map(TruthRecord::Frame));
        for r in records {
            out.push_str(&serde_json::to_string(&r).expect("truth record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut gt = GroundTruth::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<TruthRecord>(line)? {
                TruthRecord::Frame(f) => gt.frames.push(f),
                TruthRecord::Session(s) => gt.sessions.push(s),
                TruthRecord::Action(a) => gt.actions.push(a),
                TruthRecord::Tap(t) => gt.taps.push(t),
                TruthRecord::Pseudonym(p) => gt.pseudonyms.push(p),
            }
        }
        Ok(gt)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

/// A label-recorder device the operator controls: which log belongs to
/// which MAC addresses. This is operator knowledge, not ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecorderDevice {
    pub user: String,
    pub room: String,
    pub log: String,
    pub macs: Vec<MacAddr>,
}

#[derive(Debug, Clone)]
pub struct GeneratedScenario {
    /// Capture frames per room, time-ordered.
    pub captures: BTreeMap<String, Vec<FrameMeta>>,
    /// Interaction logs of label-recorder users.
    pub logs: BTreeMap<String, Vec<InteractionRecord>>,
    pub recorders: Vec<RecorderDevice>,
    pub mapping: ActionMappingTable,
    pub truth: GroundTruth,
}

pub fn capture_file_name(room: &str) -> String {
    format!("capture_{room}.csv")
}

pub fn log_file_name(user: &str) -> String {
    format!("log_{user}.txt")
}

pub const TRUTH_FILE: &str = "ground_truth.jsonl";
pub const MAPPING_FILE: &str = "mapping_table.json";
pub const RECORDERS_FILE: &str = "recorders.json";
pub const SCENARIO_FILE: &str = "scenario.toml";

impl GeneratedScenario {
    pub fn write_to_dir(&self, dir: &Path, scenario: &Scenario) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (room, frames) in &self.captures {
            write_capture(&dir.join(capture_file_name(room)), frames)?;
        }
        for (user, log) in &self.logs {
            let p = dir.join(log_file_name(user));
            fs::write(&p, format_interaction_log(log)).map_err(|e| Error::io(&p, e))?;
        }
        let write = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write(TRUTH_FILE, self.truth.to_jsonl())?;
        write(MAPPING_FILE, serde_json::to_string_pretty(&self.mapping)?)?;
        write(RECORDERS_FILE, serde_json::to_string_pretty(&self.recorders)?)?;
        write(SCENARIO_FILE, scenario.to_toml())?;
        Ok(())
    }
}

struct Emitted {
    frame: FrameMeta,
    user: Option<String>,
    app: Option<String>,
    action: Option<usize>,
    session: Option<usize>,
}

fn round_us(t: f64) -> f64 {
    (t * 1e6).round() / 1e6
}

fn round_ms(t: f64) -> f64 {
    (t * 1e3).round() / 1e3
}

/// Locally administered unicast address derived from (seed, user, epoch).
fn pseudonym(seed: u64, user_index: usize, epoch: u64) -> MacAddr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_6373 ^ ((user_index as u64) << 32) ^ epoch.wrapping_mul(0x9e37_79b9));
    let mut b: [u8; 6] = rng.random();
    b[0] = (b[0] & 0xfc) | 0x02;
    MacAddr(b)
}

fn sample_size(dist: &Gaussian, rng: &mut impl Rng) -> u32 {
    dist.sample(rng).round().clamp(1.0, MAX_FRAME_SIZE as f64) as u32
}

/// Arrival times of a gamma renewal process with `rate` frames/s on
/// `[start, end)`.
fn renewal_arrivals(rate: f64, burstiness: f64, start: f64, end: f64, rng: &mut impl Rng) -> Vec<f64> {
    let shape = 1.0 / burstiness;
    let scale = 1.0 / (rate * shape);
    let gamma = Gamma::new(shape, scale).expect("positive gamma parameters");
    let mut out = Vec::new();
    // stationary-ish start: first gap is a uniform fraction of a full gap
    let mut t = start + gamma.sample(rng) * rng.random::<f64>();
    while t < end {
        let r = round_us(t);
        if r >= start && r < end {
            out.push(r);
        }
        t += gamma.sample(rng);
    }
    out
}

fn poisson_arrivals(rate: f64, start: f64, end: f64, rng: &mut impl Rng) -> Vec<f64> {
    if rate <= 0.0 || end <= start {
        return Vec::new();
    }
    renewal_arrivals(rate, 1.0, start, end, rng)
}

fn session_windows(schedule: &SessionSchedule, n_apps: usize, horizon: f64, rng: &mut impl Rng) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    match *schedule {
        SessionSchedule::Instances { per_app, length, gap } => {
            let total = per_app * n_apps;
            let mut t = gap;
            for _ in 0..total {
                if t >= horizon {
                    break;
                }
                out.push((t, (t + length).min(horizon)));
                t += length + gap;
            }
        }
        SessionSchedule::Daily { per_day, length } => {
            let days = (horizon / 86_400.0).ceil() as usize;
            for d in 0..days {
                let day0 = d as f64 * 86_400.0;
                let day_end = (day0 + 86_400.0).min(horizon);
                let slot = (day_end - day0) / per_day.max(1) as f64;
                for s in 0..per_day {
                    let lo = day0 + s as f64 * slot;
                    let room = (slot - length).max(0.0);
                    let start = lo + rng.random::<f64>() * room * 0.8 + 0.1 * room;
                    if start < horizon {
                        out.push((start, (start + length).min(horizon)));
                    }
                }
            }
        }
        SessionSchedule::Periodic { length, gap } => {
            let mut t = gap * (0.5 + rng.random::<f64>());
            while t < horizon {
                let len = length * (0.5 + rng.random::<f64>());
                out.push((t, (t + len).min(horizon)));
                t += len + gap * (0.5 + rng.random::<f64>());
            }
        }
    }
    out
}

/// Draws the next (app, action) preference index.
fn next_operation(prefs: &[Preference], stickiness: f64, current_app: Option<&str>, rng: &mut impl Rng) -> usize {
    let weights: Vec<f64> = match current_app {
        Some(app) if stickiness >= 1.0 || rng.random::<f64>() < stickiness => {
            let w: Vec<f64> = prefs
                .iter()
                .map(|p| if p.app == app { p.weight } else { 0.0 })
                .collect();
            if w.iter().sum::<f64>() > 0.0 {
                w
            } else {
                prefs.iter().map(|p| p.weight).collect()
            }
        }
        _ => prefs.iter().map(|p| p.weight).collect(),
    };
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Generates captures, logs and ground truth for a scenario.
///
/// Output is a pure function of the scenario (including its seed).
pub fn generate_scenario(scenario: &Scenario) -> Result<GeneratedScenario> {
    scenario.validate()?;
    let mapping = scenario.mapping_table();
    let mut per_room: BTreeMap<String, Vec<Emitted>> = scenario
        .rooms
        .iter()
        .map(|r| (r.name.clone(), Vec::new()))
        .collect();
    let mut truth = GroundTruth::default();
    let mut logs = BTreeMap::new();
    let mut recorders = Vec::new();
    let mut session_id = 0usize;

    for room in &scenario.rooms {
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ hash_str(&room.name));
        let sink = per_room.get_mut(&room.name).expect("room exists");
        for t in poisson_arrivals(room.beacon_rate, 0.0, scenario.horizon, &mut rng) {
            sink.push(Emitted {
                frame: FrameMeta {
                    t,
                    size: 220 + rng.random_range(0..40),
                    dir: Direction::Downlink,
                    src: room.ap,
                    dst: MacAddr::BROADCAST,
                    kind: FrameKind::Management,
                },
                user: None,
                app: None,
                action: None,
                session: None,
            });
        }
        for t in poisson_arrivals(room.control_rate, 0.0, scenario.horizon, &mut rng) {
            sink.push(Emitted {
                frame: FrameMeta {
                    t,
                    size: 14,
                    dir: Direction::Downlink,
                    src: room.ap,
                    dst: MacAddr::BROADCAST,
                    kind: FrameKind::Control,
                },
                user: None,
                app: None,
                action: None,
                session: None,
            });
        }
    }

    for (ui, user) in scenario.users.iter().enumerate() {
        let room = scenario
            .rooms
            .iter()
            .find(|r| r.name == user.room)
            .expect("validated room");
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed.wrapping_add(0x5151 * (ui as u64 + 1)));
        let mac_at = |t: f64| -> MacAddr {
            let epoch = match user.mac_rotation_period {
                Some(p) => (t / p).floor() as u64,
                None => 0,
            };
            pseudonym(scenario.seed, ui, epoch)
        };
        let mut macs_seen: Vec<MacAddr> = Vec::new();
        let mut log: Vec<InteractionRecord> = Vec::new();
        let mut emitted: Vec<Emitted> = Vec::new();

        let mut pref_apps: Vec<&str> = Vec::new();
        for p in &user.preferences {
            if p.weight > 0.0 && !pref_apps.contains(&p.app.as_str()) {
                pref_apps.push(&p.app);
            }
        }
        let windows = session_windows(&user.schedule, pref_apps.len(), scenario.horizon, &mut rng);
        // instance schedules visit each preferred app the same number of times
        let mut instance_apps: Vec<&str> = Vec::new();
        if let SessionSchedule::Instances { per_app, .. } = user.schedule {
            for _ in 0..per_app {
                instance_apps.extend(pref_apps.iter().copied());
            }
            instance_apps.shuffle(&mut rng);
        }

        let mut busy_until = 0.0f64;
        for (si, &(s_start, s_end)) in windows.iter().enumerate() {
            let sid = session_id;
            session_id += 1;
            truth.sessions.push(SessionTruth {
                id: sid,
                user: user.user_id.clone(),
                room: room.name.clone(),
                start: s_start,
                end: s_end,
            });
            // background drip of installed apps before this session
            let bg_rate: f64 = pref_apps
                .iter()
                .filter_map(|a| scenario.app(a))
                .map(|a| a.background_rate)
                .sum();
            emit_background(&mut emitted, bg_rate, busy_until, s_start, &mac_at, room.ap, &user.user_id, &mut rng);

            let forced_app = instance_apps.get(si).copied();
            let mut current_app: Option<String> = forced_app.map(str::to_string);
            let mut t = s_start;
            while t < s_end {
                let pi = match forced_app {
                    Some(app) => next_operation(&user.preferences, 1.0, Some(app), &mut rng),
                    None => next_operation(&user.preferences, user.app_stickiness, current_app.as_deref(), &mut rng),
                };
                let pref = &user.preferences[pi];
                let app = scenario.app(&pref.app).expect("validated app");
                let action = app
                    .actions
                    .iter()
                    .find(|a| a.action_id == pref.action)
                    .expect("validated action");
                let dur = action.duration.sample(&mut rng).max(action.duration.mean * 0.25).max(0.5);
                let a_end = (t + dur).min(s_end);
                truth.actions.push(ActionTruth {
                    user: user.user_id.clone(),
                    session: sid,
                    app: app.app_id.clone(),
                    action: action.action_id,
                    start: t,
                    end: a_end,
                });
                emit_action(&mut emitted, app, action, t, a_end, &mac_at, room.ap, &user.user_id, sid, &mut rng);
                if scenario.overlap_prob > 0.0 && rng.random::<f64>() < scenario.overlap_prob {
                    let oi = next_operation(&user.preferences, 0.0, None, &mut rng);
                    let op = &user.preferences[oi];
                    let oapp = scenario.app(&op.app).expect("validated app");
                    let oact = oapp.actions.iter().find(|a| a.action_id == op.action).expect("validated action");
                    emit_action(&mut emitted, oapp, oact, t, a_end, &mac_at, room.ap, &user.user_id, sid, &mut rng);
                }

                let rect = mapping.apps[&app.app_id]
                    .iter()
                    .find(|r| r.action == action.action_id)
                    .expect("mapping covers every action")
                    .rect;
                let mut tap = t;
                while tap < a_end {
                    let tt = round_ms(tap);
                    if tt >= t && tt < a_end {
                        let x = rng.random_range(rect.x0..rect.x1);
                        let y = rng.random_range(rect.y0..rect.y1);
                        truth.taps.push(TapTruth {
                            user: user.user_id.clone(),
                            t: tt,
                            app: app.app_id.clone(),
                            action: action.action_id,
                        });
                        log.push(InteractionRecord {
                            t: tt,
                            app_name: app.app_id.clone(),
                            x,
                            y,
                        });
                    }
                    tap += scenario.tap_interval;
                }
                current_app = Some(app.app_id.clone());
                t = a_end;
            }
            busy_until = s_end;
        }
        let bg_rate: f64 = pref_apps
            .iter()
            .filter_map(|a| scenario.app(a))
            .map(|a| a.background_rate)
            .sum();
        emit_background(&mut emitted, bg_rate, busy_until, scenario.horizon, &mac_at, room.ap, &user.user_id, &mut rng);

        for e in &emitted {
            let mac = if e.frame.dir == Direction::Uplink { e.frame.src } else { e.frame.dst };
            if !macs_seen.contains(&mac) {
                macs_seen.push(mac);
            }
        }
        for &mac in &macs_seen {
            truth.pseudonyms.push(PseudonymTruth {
                mac,
                user: user.user_id.clone(),
                room: room.name.clone(),
            });
        }
        if user.label_recorder {
            log.sort_by(|a, b| a.t.total_cmp(&b.t));
            recorders.push(RecorderDevice {
                user: user.user_id.clone(),
                room: room.name.clone(),
                log: log_file_name(&user.user_id),
                macs: macs_seen.clone(),
            });
            logs.insert(user.user_id.clone(), log);
        }
        per_room.get_mut(&room.name).expect("room exists").extend(emitted);
    }

    let mut captures = BTreeMap::new();
    for (room, mut emitted) in per_room {
        // stable sort keeps generation order for identical timestamps
        emitted.sort_by(|a, b| a.frame.t.total_cmp(&b.frame.t));
        let mut frames = Vec::with_capacity(emitted.len());
        for (index, e) in emitted.into_iter().enumerate() {
            let mac = match e.frame.kind {
                FrameKind::Data if e.frame.dir == Direction::Uplink => e.frame.src,
                FrameKind::Data => e.frame.dst,
                _ => e.frame.src,
            };
            truth.frames.push(FrameTruth {
                room: room.clone(),
                index,
                t: e.frame.t,
                mac,
                user: e.user,
                app: e.app,
                action: e.action,
                session: e.session,
            });
            frames.push(e.frame);
        }
        captures.insert(room, frames);
    }
    Ok(GeneratedScenario {
        captures,
        logs,
        recorders,
        mapping,
        truth,
    })
}

#[allow(clippy::too_many_arguments)]
fn emit_action(
    out: &mut Vec<Emitted>,
    app: &AppProfile,
    action: &ActionProfile,
    start: f64,
    end: f64,
    mac_at: &impl Fn(f64) -> MacAddr,
    ap: MacAddr,
    user: &str,
    session: usize,
    rng: &mut impl Rng,
) {
    let ups = renewal_arrivals(action.uplink_rate, action.burstiness, start, end, rng);
    let downs = renewal_arrivals(action.downlink_rate, action.burstiness, start, end, rng);
    for (times, dir) in [(ups, Direction::Uplink), (downs, Direction::Downlink)] {
        for t in times {
            let sta = mac_at(t);
            let (src, dst, size) = match dir {
                Direction::Uplink => (sta, ap, sample_size(&action.uplink_size, rng)),
                Direction::Downlink => (ap, sta, sample_size(&action.downlink_size, rng)),
            };
            out.push(Emitted {
                frame: FrameMeta {
                    t,
                    size,
                    dir,
                    src,
                    dst,
                    kind: FrameKind::Data,
                },
                user: Some(user.to_string()),
                app: Some(app.app_id.clone()),
                action: Some(action.action_id),
                session: Some(session),
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn emit_background(
    out: &mut Vec<Emitted>,
    rate: f64,
    start: f64,
    end: f64,
    mac_at: &impl Fn(f64) -> MacAddr,
    ap: MacAddr,
    user: &str,
    rng: &mut impl Rng,
) {
    let size = Gaussian::new(110.0, 25.0);
    for t in poisson_arrivals(rate, start, end, rng) {
        let sta = mac_at(t);
        let up = rng.random::<bool>();
        let (src, dst, dir) = if up {
            (sta, ap, Direction::Uplink)
        } else {
            (ap, sta, Direction::Downlink)
        };
        out.push(Emitted {
            frame: FrameMeta {
                t,
                size: sample_size(&size, rng),
                dir,
                src,
                dst,
                kind: FrameKind::Data,
            },
            user: Some(user.to_string()),
            app: None,
            action: None,
            session: None,
        });
    }
}

pub(crate) fn hash_str(s: &str) -> u64 {
    // FNV-1a, stable across platforms and runs
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Keep-mask for independent per-frame loss with probability `rate`.
pub fn loss_mask(n: usize, rate: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("loss rate {rate} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c6f_7373);
    Ok((0..n).map(|_| rng.random::<f64>() >= rate).collect())
}

/// Drops each frame independently with probability `rate`.
pub fn inject_loss(frames: &[FrameMeta], rate: f64, seed: u64) -> Result<Vec<FrameMeta>> {
    let mask = loss_mask(frames.len(), rate, seed)?;
    Ok(frames
        .iter()
        .zip(mask)
        .filter_map(|(f, keep)| keep.then(|| f.clone()))
        .collect())
}

/// Writes `frames` to a capture file after dropping a fraction of them.
pub fn write_lossy_capture(path: &Path, frames: &[FrameMeta], rate: f64, seed: u64) -> Result<usize> {
    let kept = inject_loss(frames, rate, seed)?;
    write_capture(path, &kept)?;
    Ok(kept.len())
}

/// Serializes the full generated output to one deterministic byte stream
/// (used to check reproducibility).
pub fn fingerprint_bytes(gen: &GeneratedScenario) -> Vec<u8> {
    let mut out = Vec::new();
    for (room, frames) in &gen.captures {
        writeln!(out, "# {room}").expect("vec write");
        for f in frames {
            writeln!(out, "{}", crate::ingest::format_capture_row(f)).expect("vec write");
        }
    }
    for (user, log) in &gen.logs {
        writeln!(out, "# {user}").expect("vec write");
        out.extend(format_interaction_log(log).into_bytes());
    }
    out.extend(gen.truth.to_jsonl().into_bytes());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64, horizon: f64) -> Scenario {
        Scenario {
            seed,
            horizon,
            tap_interval: 0.5,
            overlap_prob: 0.0,
            rooms: vec![Room {
                name: "r1".into(),
                ap: "02:aa:00:00:00:01".parse().unwrap(),
                beacon_rate: 0.0,
                control_rate: 0.0,
            }],
            apps: vec![AppProfile {
                app_id: "com.example.music".into(),
                category: "music".into(),
                background_rate: 0.2,
                actions: vec![ActionProfile {
                    action_id: 0,
                    uplink_rate: 5.0,
                    downlink_rate: 12.0,
                    uplink_size: Gaussian::new(120.0, 20.0),
                    downlink_size: Gaussian::new(1300.0, 400.0),
                    duration: Gaussian::new(6.0, 1.0),
                    burstiness: 1.5,
                }],
            }],
            users: vec![UserScript {
                user_id: "u1".into(),
                room: "r1".into(),
                preferences: vec![Preference {
                    app: "com.example.music".into(),
                    action: 0,
                    weight: 1.0,
                }],
                schedule: SessionSchedule::Periodic { length: 20.0, gap: 10.0 },
                app_stickiness: 0.5,
                mac_rotation_period: None,
                label_recorder: true,
            }],
        }
    }

    #[test]
    fn identical_seed_identical_output() {
        let a = fingerprint_bytes(&generate_scenario(&tiny(7, 60.0)).unwrap());
        let b = fingerprint_bytes(&generate_scenario(&tiny(7, 60.0)).unwrap());
        assert_eq!(a, b);
        let c = fingerprint_bytes(&generate_scenario(&tiny(8, 60.0)).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_non_positive_horizon() {
        assert!(generate_scenario(&tiny(1, 0.0)).is_err());
        assert!(generate_scenario(&tiny(1, -5.0)).is_err());
    }

    #[test]
    fn hourly_rotation_gives_multiple_pseudonyms() {
        let mut s = tiny(3, 7200.0);
        s.users[0].mac_rotation_period = Some(3600.0);
        s.users[0].schedule = SessionSchedule::Periodic { length: 60.0, gap: 600.0 };
        let gen = generate_scenario(&s).unwrap();
        let macs: Vec<_> = gen.truth.pseudonyms.iter().filter(|p| p.user == "u1").collect();
        assert!(macs.len() >= 2, "got {macs:?}");
    }

    #[test]
    fn frames_respect_clamps_and_action_windows() {
        let mut s = tiny(11, 300.0);
        s.apps[0].actions[0].downlink_size = Gaussian::new(1450.0, 300.0);
        s.apps[0].actions[0].uplink_size = Gaussian::new(10.0, 40.0);
        let gen = generate_scenario(&s).unwrap();
        let frames = &gen.captures["r1"];
        for (f, truth) in frames.iter().zip(gen.truth.frames_in_room("r1")) {
            assert!((1..=MAX_FRAME_SIZE).contains(&f.size));
            assert_eq!(f.t, truth.t);
            if let (Some(app), Some(action)) = (&truth.app, truth.action) {
                let inside = gen.truth.actions.iter().any(|a| {
                    &a.app == app && a.action == action && f.t >= a.start && f.t < a.end
                });
                assert!(inside, "frame at {} outside its action window", f.t);
            }
        }
    }

    #[test]
    fn taps_land_in_their_rectangles() {
        let gen = generate_scenario(&tiny(5, 120.0)).unwrap();
        let log = &gen.logs["u1"];
        assert_eq!(log.len(), gen.truth.taps.len());
        for (rec, tap) in log.iter().zip(&gen.truth.taps) {
            assert_eq!(gen.mapping.lookup(&rec.app_name, rec.x, rec.y).unwrap(), Some(tap.action));
        }
    }

    #[test]
    fn beacons_are_tagged_management() {
        let mut s = tiny(9, 120.0);
        s.rooms[0].beacon_rate = 10.0;
        let gen = generate_scenario(&s).unwrap();
        let frames = &gen.captures["r1"];
        let mgmt = frames.iter().filter(|f| f.kind == FrameKind::Management).count();
        assert!(mgmt > 1000);
        let kept = crate::ingest::filter_data_frames(frames, s.rooms[0].ap);
        assert_eq!(kept.len(), frames.len() - mgmt);
    }

    #[test]
    fn zero_loss_is_identity() {
        let gen = generate_scenario(&tiny(2, 60.0)).unwrap();
        let frames = &gen.captures["r1"];
        assert_eq!(&inject_loss(frames, 0.0, 1).unwrap(), frames);
        assert!(inject_loss(frames, 1.0, 1).is_err());
        assert!(inject_loss(frames, -0.1, 1).is_err());
    }

    #[test]
    fn loss_rate_within_binomial_bound() {
        let n = 100_000usize;
        for (rate, seed) in [(0.25, 1u64), (0.3417, 2)] {
            let kept = loss_mask(n, rate, seed).unwrap().iter().filter(|k| **k).count();
            let dropped = (n - kept) as f64;
            let mean = n as f64 * rate;
            let sigma = (n as f64 * rate * (1.0 - rate)).sqrt();
            assert!((dropped - mean).abs() <= 3.0 * sigma, "dropped {dropped} vs {mean} ± {}", 3.0 * sigma);
        }
        assert_eq!(loss_mask(10, 0.5, 4).unwrap(), loss_mask(10, 0.5, 4).unwrap());
    }

    #[test]
    fn preferences_must_sum_to_one() {
        let mut s = tiny(1, 10.0);
        s.users[0].preferences[0].weight = 0.9;
        assert!(s.validate().is_err());
    }

    #[test]
    fn scenario_toml_roundtrip() {
        let s = tiny(4, 90.0);
        assert_eq!(Scenario::from_toml(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn ground_truth_jsonl_roundtrip() {
        let gen = generate_scenario(&tiny(6, 40.0)).unwrap();
        assert_eq!(GroundTruth::from_jsonl(&gen.truth.to_jsonl()).unwrap(), gen.truth);
    }
}
