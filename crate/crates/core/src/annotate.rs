//! Label-recorder alignment.
//!
//! Log lines are `t_rel_s|package_name|x,y`. Frames take the app of the
//! foreground interval they fall in; bursts take the action of the latest
//! tap inside the burst second whose location hits a button in the app's
//! mapping table.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featex::burstify;
use crate::trace_model::{ActionMappingTable, InteractionRecord, TrafficTrace};

/// Known app names in classifier order. Index `len()` is the unknown class.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppIndex {
    pub apps: Vec<String>,
}

impl AppIndex {
    pub fn new(apps: Vec<String>) -> Self {
        AppIndex { apps }
    }

    pub fn len(&self) -> usize {
        self.apps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.apps.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.apps.iter().position(|a| a == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedTrace {
    pub trace: TrafficTrace,
    /// Foreground app name per frame; `None` outside every log interval.
    pub frame_apps: Vec<Option<String>>,
    /// Action index per one-second burst; `None` is the unknown class.
    pub burst_actions: Vec<Option<usize>>,
}

impl AnnotatedTrace {
    /// Frame labels resolved against a known-app index (`None` = unknown).
    pub fn frame_app_labels(&self, index: &AppIndex) -> Vec<Option<usize>> {
        self.frame_apps
            .iter()
            .map(|a| a.as_deref().and_then(|n| index.index_of(n)))
            .collect()
    }

    /// Most frequent frame app per burst; ties go to the label seen first.
    pub fn burst_apps(&self) -> Vec<Option<String>> {
        let bursts = burstify(&self.trace);
        bursts
            .iter()
            .map(|b| majority_first_seen(self.frame_apps[b.range.clone()].iter().cloned()).flatten())
            .collect()
    }

    /// The app with the most frames in the trace.
    pub fn dominant_app(&self) -> Option<String> {
        let mut counts: Vec<(Option<String>, usize)> = Vec::new();
        for a in &self.frame_apps {
            match counts.iter_mut().find(|(k, _)| k == a) {
                Some((_, c)) => *c += 1,
                None => counts.push((a.clone(), 1)),
            }
        }
        counts
            .into_iter()
            .filter(|(k, _)| k.is_some())
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .and_then(|(k, _)| k)
    }
}

/// Majority vote keeping the earliest-seen label on ties. `None` for an
/// empty input.
pub fn majority_first_seen<T: PartialEq>(items: impl IntoIterator<Item = T>) -> Option<T> {
    let mut counts: Vec<(T, usize)> = Vec::new();
    for it in items {
        match counts.iter_mut().find(|(k, _)| *k == it) {
            Some((_, c)) => *c += 1,
            None => counts.push((it, 1)),
        }
    }
    let mut best: Option<(T, usize)> = None;
    for (k, c) in counts {
        if best.as_ref().is_none_or(|(_, bc)| c > *bc) {
            best = Some((k, c));
        }
    }
    best.map(|(k, _)| k)
}

pub fn format_interaction_log(records: &[InteractionRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 32);
    for r in records {
        out.push_str(&format!("{:.3}|{}|{},{}\n", r.t, r.app_name, r.x, r.y));
    }
    out
}

/// Result of parsing a log: time-sorted records plus a flag telling whether
/// the file needed re-sorting.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLog {
    pub records: Vec<InteractionRecord>,
    pub resorted: bool,
}

pub fn parse_interaction_log(path: &Path) -> Result<Vec<InteractionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_interaction_log_str(&text, &path.display().to_string())?.records)
}

pub fn parse_interaction_log_str(text: &str, file: &str) -> Result<ParsedLog> {
    let bad = |row: usize, msg: &str| Error::Schema {
        file: file.to_string(),
        row,
        msg: msg.to_string(),
    };
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('|');
        let (Some(t), Some(app), Some(loc), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad(row, "expected t|package|x,y"));
        };
        let t: f64 = t.trim().parse().map_err(|_| bad(row, "bad timestamp"))?;
        if !(t.is_finite() && t >= 0.0) {
            return Err(bad(row, "timestamp must be non-negative"));
        }
        let app = app.trim();
        if app.is_empty() {
            return Err(bad(row, "empty package name"));
        }
        let (x, y) = loc.split_once(',').ok_or_else(|| bad(row, "location must be x,y"))?;
        let x: i32 = x.trim().parse().map_err(|_| bad(row, "bad x coordinate"))?;
        let y: i32 = y.trim().parse().map_err(|_| bad(row, "bad y coordinate"))?;
        records.push(InteractionRecord {
            t,
            app_name: app.to_string(),
            x,
            y,
        });
    }
    let resorted = records.windows(2).any(|w| w[1].t < w[0].t);
    if resorted {
        log::warn!("{file}: interaction log out of order, re-sorting");
        sort_records(&mut records);
    }
    Ok(ParsedLog { records, resorted })
}

/// Sorts by time, then by content so shuffled inputs sort identically.
pub fn sort_records(records: &mut [InteractionRecord]) {
    records.sort_by(|a, b| {
        a.t.total_cmp(&b.t)
            .then_with(|| a.app_name.cmp(&b.app_name))
            .then(a.x.cmp(&b.x))
            .then(a.y.cmp(&b.y))
    });
}

/// Foreground intervals `[start, next app change)`; the last is open-ended.
fn app_intervals(log: &[InteractionRecord]) -> Vec<(f64, f64, &str)> {
    let mut out: Vec<(f64, f64, &str)> = Vec::new();
    for r in log {
        match out.last_mut() {
            Some(last) if last.2 == r.app_name => {}
            Some(last) => {
                last.1 = r.t;
                out.push((r.t, f64::INFINITY, &r.app_name));
            }
            None => out.push((r.t, f64::INFINITY, &r.app_name)),
        }
    }
    out
}

/// Foreground app for each frame of `trace`.
pub fn label_frames_by_app(trace: &TrafficTrace, log: &[InteractionRecord]) -> Vec<Option<String>> {
    let intervals = app_intervals(log);
    let mut k = 0usize;
    trace
        .frames()
        .iter()
        .map(|f| {
            while k < intervals.len() && intervals[k].1 <= f.t {
                k += 1;
            }
            match intervals.get(k) {
                Some(&(start, end, app)) if f.t >= start && f.t < end => Some(app.to_string()),
                _ => None,
            }
        })
        .collect()
}

/// Action label per burst from taps inside the burst second.
pub fn label_bursts_by_action(
    trace: &TrafficTrace,
    log: &[InteractionRecord],
    table: &ActionMappingTable,
) -> Result<Vec<Option<usize>>> {
    let bursts = burstify(trace);
    let mut out = Vec::with_capacity(bursts.len());
    let mut lo = log.partition_point(|r| r.t < trace.start_time());
    for b in &bursts {
        let end = b.start + 1.0;
        while lo < log.len() && log[lo].t < b.start {
            lo += 1;
        }
        let mut label = None;
        let mut i = lo;
        while i < log.len() && log[i].t < end {
            let r = &log[i];
            if let Some(action) = table.lookup(&r.app_name, r.x, r.y)? {
                label = Some(action);
            }
            i += 1;
        }
        out.push(label);
    }
    Ok(out)
}

pub fn annotate_trace(
    trace: &TrafficTrace,
    log: &[InteractionRecord],
    table: &ActionMappingTable,
) -> Result<AnnotatedTrace> {
    Ok(AnnotatedTrace {
        trace: trace.clone(),
        frame_apps: label_frames_by_app(trace, log),
        burst_actions: label_bursts_by_action(trace, log, table)?,
    })
}
