//! Capture CSV ingestion, data-frame filtering and rate-threshold trace
//! segmentation.
//!
//! The capture schema is one frame per row with a mandatory header:
//!
//! ```text
//! t_rel_s,src_mac,dst_mac,size_bytes,kind
//! 0.000125,02:00:00:00:01:01,02:aa:00:00:00:01,342,data
//! ```
//!
//! `kind` is one of `mgmt`, `ctrl`, `data`. Times are relative seconds
//! written with microsecond precision.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace_model::{Direction, FrameKind, FrameMeta, MacAddr, TraceDataset, TrafficTrace};

pub const CAPTURE_HEADER: &str = "t_rel_s,src_mac,dst_mac,size_bytes,kind";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    /// Frames per second a station must exceed to count as foreground.
    pub gamma: f64,
    pub min_trace_frames: usize,
    /// Length of the trailing window the rate is measured over, seconds.
    pub rate_window: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            gamma: 3.0,
            min_trace_frames: 31,
            rate_window: 1.0,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::Config("gamma must be > 0".into()));
        }
        if self.min_trace_frames < 1 {
            return Err(Error::Config("min_trace_frames must be >= 1".into()));
        }
        if !(self.rate_window > 0.0) {
            return Err(Error::Config("rate_window must be > 0".into()));
        }
        Ok(())
    }
}

/// Parses a capture CSV file.
pub fn parse_capture(path: &Path) -> Result<Vec<FrameMeta>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_capture_str(&text, &path.display().to_string())
}

pub fn parse_capture_str(text: &str, file: &str) -> Result<Vec<FrameMeta>> {
    let schema = |row: usize, msg: String| Error::Schema {
        file: file.to_string(),
        row,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CAPTURE_HEADER => {}
        Some((_, h)) => return Err(schema(1, format!("expected header {CAPTURE_HEADER:?}, got {h:?}"))),
        None => return Err(schema(1, "missing header".into())),
    }
    let mut frames = Vec::new();
    for (i, line) in lines {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 5 {
            return Err(schema(row, format!("expected 5 columns, got {}", cols.len())));
        }
        let t: f64 = cols[0]
            .parse()
            .map_err(|_| schema(row, format!("bad time {:?}", cols[0])))?;
        if !(t.is_finite() && t >= 0.0) {
            return Err(schema(row, format!("time {t} must be a non-negative number")));
        }
        let src: MacAddr = cols[1].parse().map_err(|e: Error| schema(row, e.to_string()))?;
        let dst: MacAddr = cols[2].parse().map_err(|e: Error| schema(row, e.to_string()))?;
        let size: u32 = cols[3]
            .parse()
            .map_err(|_| schema(row, format!("bad size {:?}", cols[3])))?;
        if size == 0 {
            return Err(schema(row, "size_bytes must be >= 1".into()));
        }
        let kind: FrameKind = cols[4].parse().map_err(|e: Error| schema(row, e.to_string()))?;
        frames.push(FrameMeta {
            t,
            size,
            dir: Direction::Downlink,
            src,
            dst,
            kind,
        });
    }
    Ok(frames)
}

pub fn format_capture_row(f: &FrameMeta) -> String {
    format!("{:.6},{},{},{},{}", f.t, f.src, f.dst, f.size, f.kind.as_str())
}

pub fn write_capture(path: &Path, frames: &[FrameMeta]) -> Result<()> {
    let mut out = Vec::with_capacity(frames.len() * 56 + 64);
    writeln!(out, "{CAPTURE_HEADER}").expect("write to vec");
    for f in frames {
        writeln!(out, "{}", format_capture_row(f)).expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Counts of frames discarded by [`filter_data_frames_with_report`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: usize,
    pub non_data: usize,
    pub other_ap: usize,
}

/// Keeps data frames exchanged with `ap` and resolves their direction.
pub fn filter_data_frames(frames: &[FrameMeta], ap: MacAddr) -> Vec<FrameMeta> {
    filter_data_frames_with_report(frames, ap).0
}

pub fn filter_data_frames_with_report(frames: &[FrameMeta], ap: MacAddr) -> (Vec<FrameMeta>, FilterReport) {
    let mut report = FilterReport::default();
    let mut out = Vec::new();
    for f in frames {
        if f.kind != FrameKind::Data {
            report.non_data += 1;
            continue;
        }
        let dir = if f.dst == ap {
            Direction::Uplink
        } else if f.src == ap {
            Direction::Downlink
        } else {
            report.other_ap += 1;
            continue;
        };
        out.push(FrameMeta { dir, ..f.clone() });
    }
    report.kept = out.len();
    (out, report)
}

/// The non-AP endpoint of a direction-resolved data frame.
pub fn station_of(f: &FrameMeta) -> MacAddr {
    match f.dir {
        Direction::Uplink => f.src,
        Direction::Downlink => f.dst,
    }
}

/// Splits direction-resolved data frames into per-station foreground traces.
///
/// A frame is active when the number of frames from the same station in the
/// trailing `(t - rate_window, t]` interval exceeds `gamma * rate_window`.
/// A run opens with the frames that made its first active frame active and
/// closes at the last active frame once no further frame becomes active
/// within `rate_window` of it. Runs shorter than `min_trace_frames` are
/// dropped.
pub fn segment_traces(frames: &[FrameMeta], cfg: &SegmenterConfig) -> TraceDataset {
    let mut per_station: BTreeMap<MacAddr, Vec<FrameMeta>> = BTreeMap::new();
    for f in frames {
        per_station.entry(station_of(f)).or_default().push(f.clone());
    }
    let mut traces = Vec::new();
    for (mac, mut frames) in per_station {
        frames.sort_by(|a, b| a.t.total_cmp(&b.t));
        for (lo, hi) in active_runs(&frames, cfg) {
            if hi - lo < cfg.min_trace_frames {
                continue;
            }
            let trace = TrafficTrace::new(mac, frames[lo..hi].to_vec()).expect("non-empty sorted run");
            traces.push(trace);
        }
    }
    TraceDataset::new(traces)
}

/// Half-open index ranges of active runs in one station's sorted frames.
fn active_runs(frames: &[FrameMeta], cfg: &SegmenterConfig) -> Vec<(usize, usize)> {
    let threshold = cfg.gamma * cfg.rate_window;
    let mut runs = Vec::new();
    let mut window_start = 0usize;
    // (run start, last active index)
    let mut open: Option<(usize, usize)> = None;
    for i in 0..frames.len() {
        let t = frames[i].t;
        while frames[window_start].t <= t - cfg.rate_window {
            window_start += 1;
        }
        let count = (i - window_start + 1) as f64;
        if count <= threshold {
            continue;
        }
        open = match open {
            Some((start, last)) if t - frames[last].t < cfg.rate_window => Some((start, i)),
            Some((start, last)) => {
                runs.push((start, last + 1));
                Some((window_start, i))
            }
            None => Some((window_start, i)),
        };
    }
    if let Some((start, last)) = open {
        runs.push((start, last + 1));
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const AP: MacAddr = MacAddr([0x02, 0xaa, 0, 0, 0, 1]);
    const STA: MacAddr = MacAddr([0x02, 0, 0, 0, 0, 7]);

    fn up(t: f64) -> FrameMeta {
        FrameMeta {
            t,
            size: 120,
            dir: Direction::Uplink,
            src: STA,
            dst: AP,
            kind: FrameKind::Data,
        }
    }

    #[test]
    fn parses_well_formed_rows() {
        let text = format!(
            "{CAPTURE_HEADER}\n0.000001,{STA},{AP},100,data\n0.5,{AP},{STA},1500,data\n1.25,{AP},ff:ff:ff:ff:ff:ff,80,mgmt\n"
        );
        let frames = parse_capture_str(&text, "mem").unwrap();
        assert_eq!(frames.len(), 3);
        assert_eq!(frames[0].t, 0.000001);
        assert_eq!(frames[1].size, 1500);
        assert_eq!(frames[2].kind, FrameKind::Management);
    }

    #[test]
    fn zero_size_row_is_schema_error() {
        let text = format!("{CAPTURE_HEADER}\n0.0,{STA},{AP},100,data\n0.1,{STA},{AP},0,data\n");
        match parse_capture_str(&text, "mem") {
            Err(Error::Schema { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn missing_header_and_bad_kind() {
        assert!(parse_capture_str("0.0,a,b,1,data\n", "mem").is_err());
        let text = format!("{CAPTURE_HEADER}\n0.0,{STA},{AP},10,beacon\n");
        assert!(matches!(parse_capture_str(&text, "mem"), Err(Error::Schema { row: 2, .. })));
    }

    #[test]
    fn filter_keeps_data_and_sets_direction() {
        let other_ap = MacAddr([2, 0xbb, 0, 0, 0, 1]);
        let frames = vec![
            FrameMeta { kind: FrameKind::Management, ..up(0.0) },
            FrameMeta { kind: FrameKind::Control, ..up(0.1) },
            FrameMeta { dir: Direction::Downlink, ..up(0.2) },
            FrameMeta { src: AP, dst: STA, dir: Direction::Uplink, ..up(0.3) },
            FrameMeta { dst: other_ap, ..up(0.4) },
        ];
        let (kept, report) = filter_data_frames_with_report(&frames, AP);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].dir, Direction::Uplink);
        assert_eq!(kept[1].dir, Direction::Downlink);
        assert_eq!(report, FilterReport { kept: 2, non_data: 2, other_ap: 1 });
    }

    #[test]
    fn constant_rate_yields_one_trace() {
        let frames: Vec<_> = (0..600).map(|i| up(i as f64 * 0.1)).collect();
        let ds = segment_traces(&frames, &SegmenterConfig::default());
        assert_eq!(ds.len(), 1);
        // the first three frames never exceed the threshold themselves but
        // belong to the window of the first active frame
        assert_eq!(ds.traces[0].len(), 600);
    }

    #[test]
    fn background_drip_yields_nothing() {
        let frames: Vec<_> = (0..300).map(|i| up(i as f64)).collect();
        assert!(segment_traces(&frames, &SegmenterConfig::default()).is_empty());
    }

    #[test]
    fn idle_gap_splits_sessions() {
        let mut frames: Vec<_> = (0..200).map(|i| up(i as f64 * 0.1)).collect();
        frames.extend((0..200).map(|i| up(50.0 + i as f64 * 0.1)));
        let ds = segment_traces(&frames, &SegmenterConfig::default());
        assert_eq!(ds.len(), 2);
        assert!((ds.traces[1].start_time() - 50.0).abs() < 1.0);
    }

    #[test]
    fn short_runs_are_discarded() {
        let frames: Vec<_> = (0..20).map(|i| up(i as f64 * 0.1)).collect();
        assert!(segment_traces(&frames, &SegmenterConfig::default()).is_empty());
        let cfg = SegmenterConfig { min_trace_frames: 5, ..Default::default() };
        assert_eq!(segment_traces(&frames, &cfg).len(), 1);
    }

    fn arb_frames() -> impl Strategy<Value = Vec<FrameMeta>> {
        prop::collection::vec((0.001f64..2.0, any::<bool>()), 1..400).prop_map(|gaps| {
            let mut t = 0.0;
            gaps.into_iter()
                .map(|(g, burst)| {
                    t += if burst { g / 40.0 } else { g };
                    up(t)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn segmentation_is_idempotent(frames in arb_frames()) {
            let cfg = SegmenterConfig { min_trace_frames: 3, ..Default::default() };
            for tr in segment_traces(&frames, &cfg).traces {
                let again = segment_traces(tr.frames(), &cfg);
                prop_assert_eq!(again.traces.len(), 1);
                prop_assert_eq!(&again.traces[0], &tr);
            }
        }

        #[test]
        fn output_frames_come_from_input_in_order(frames in arb_frames()) {
            let ds = segment_traces(&frames, &SegmenterConfig { min_trace_frames: 3, ..Default::default() });
            let mut cursor = 0usize;
            for tr in &ds.traces {
                for f in tr.frames() {
                    let pos = frames[cursor..].iter().position(|g| g == f);
                    prop_assert!(pos.is_some());
                    cursor += pos.unwrap() + 1;
                }
            }
        }

        #[test]
        fn lower_gamma_never_captures_less(frames in arb_frames(), g in 1.0f64..8.0, dg in 0.0f64..4.0) {
            let hi = SegmenterConfig { gamma: g + dg, min_trace_frames: 5, ..Default::default() };
            let lo = SegmenterConfig { gamma: g, ..hi };
            prop_assert!(segment_traces(&frames, &lo).total_frames() >= segment_traces(&frames, &hi).total_frames());
        }
    }
}
