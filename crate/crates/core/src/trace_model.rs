//! Domain types shared by every stage of the pipeline: frame metadata,
//! segmented traces, one-hot labels and the label-recorder records.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A 48-bit MAC address. Displays and serializes in canonical lowercase
/// colon-separated form, e.g. `02:1a:00:00:00:07`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    pub const BROADCAST: MacAddr = MacAddr([0xff; 6]);

    pub fn octets(&self) -> [u8; 6] {
        self.0
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl fmt::Debug for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MacAddr({self})")
    }
}

impl FromStr for MacAddr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = [0u8; 6];
        let mut parts = s.trim().split(|c| c == ':' || c == '-');
        for slot in out.iter_mut() {
            let part = parts.next().ok_or_else(|| Error::Mac(s.to_string()))?;
            if part.len() != 2 {
                return Err(Error::Mac(s.to_string()));
            }
            *slot = u8::from_str_radix(part, 16).map_err(|_| Error::Mac(s.to_string()))?;
        }
        if parts.next().is_some() {
            return Err(Error::Mac(s.to_string()));
        }
        Ok(MacAddr(out))
    }
}

impl Serialize for MacAddr {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MacAddr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameKind {
    #[serde(rename = "mgmt")]
    Management,
    #[serde(rename = "ctrl")]
    Control,
    Data,
}

impl FrameKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FrameKind::Management => "mgmt",
            FrameKind::Control => "ctrl",
            FrameKind::Data => "data",
        }
    }
}

impl FromStr for FrameKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mgmt" => Ok(FrameKind::Management),
            "ctrl" => Ok(FrameKind::Control),
            "data" => Ok(FrameKind::Data),
            other => Err(Error::InvalidArgument(format!("unknown frame kind {other:?}"))),
        }
    }
}

/// Frame direction relative to the access point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// From the AP to the station (`-1`).
    Downlink,
    /// From the station to the AP (`+1`).
    Uplink,
}

impl Direction {
    pub fn sign(&self) -> f64 {
        match self {
            Direction::Downlink => -1.0,
            Direction::Uplink => 1.0,
        }
    }
}

/// Plaintext header metadata of one captured frame.
///
/// `dir` is only meaningful once [`crate::ingest::filter_data_frames`] has
/// resolved it against the AP address; raw parsed frames carry `Downlink`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub t: f64,
    pub size: u32,
    pub dir: Direction,
    pub src: MacAddr,
    pub dst: MacAddr,
    pub kind: FrameKind,
}

impl FrameMeta {
    pub fn validate(&self) -> Result<()> {
        if !(self.t.is_finite() && self.t >= 0.0) {
            return Err(Error::InvalidArgument(format!("frame time {} must be >= 0", self.t)));
        }
        if self.size == 0 {
            return Err(Error::InvalidArgument("frame size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A maximal foreground run of data frames exchanged by one station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficTrace {
    pub mac: MacAddr,
    frames: Vec<FrameMeta>,
}

impl TrafficTrace {
    pub fn new(mac: MacAddr, frames: Vec<FrameMeta>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("trace must contain at least one frame".into()));
        }
        if frames.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(Error::InvalidArgument("trace arrival times must be non-decreasing".into()));
        }
        Ok(TrafficTrace { mac, frames })
    }

    pub fn frames(&self) -> &[FrameMeta] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.frames[0].t
    }

    pub fn end_time(&self) -> f64 {
        self.frames[self.frames.len() - 1].t
    }

    /// Time between the first and last frame; zero for a single frame.
    pub fn duration(&self) -> f64 {
        trace_duration(self)
    }
}

pub fn trace_duration(trace: &TrafficTrace) -> f64 {
    trace.end_time() - trace.start_time()
}

/// All traces collected in one capture, ordered by MAC then start time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceDataset {
    pub traces: Vec<TrafficTrace>,
}

impl TraceDataset {
    pub fn new(mut traces: Vec<TrafficTrace>) -> Self {
        traces.sort_by(|a, b| {
            a.mac
                .cmp(&b.mac)
                .then(a.start_time().total_cmp(&b.start_time()))
        });
        TraceDataset { traces }
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// Traces per observed MAC address.
    pub fn by_mac(&self) -> BTreeMap<MacAddr, Vec<&TrafficTrace>> {
        let mut map: BTreeMap<MacAddr, Vec<&TrafficTrace>> = BTreeMap::new();
        for tr in &self.traces {
            map.entry(tr.mac).or_default().push(tr);
        }
        map
    }

    pub fn mac_count(&self) -> usize {
        self.by_mac().len()
    }

    pub fn total_frames(&self) -> usize {
        self.traces.iter().map(|t| t.len()).sum()
    }
}

/// A one-hot vector stored as its hot index. The last index (`dims - 1`)
/// is reserved for the unknown class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OneHotLabel {
    dims: usize,
    index: usize,
}

impl OneHotLabel {
    pub fn new(index: usize, dims: usize) -> Result<Self> {
        if index >= dims {
            return Err(Error::IndexOutOfRange { index, dims });
        }
        Ok(OneHotLabel { dims, index })
    }

    pub fn unknown(dims: usize) -> Self {
        assert!(dims > 0, "one-hot label needs at least one slot");
        OneHotLabel {
            dims,
            index: dims - 1,
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn is_unknown(&self) -> bool {
        self.index == self.dims - 1
    }

    pub fn to_vec(&self) -> Vec<u8> {
        let mut v = vec![0u8; self.dims];
        v[self.index] = 1;
        v
    }
}

pub fn onehot_encode(index: usize, dims: usize) -> Result<Vec<u8>> {
    Ok(OneHotLabel::new(index, dims)?.to_vec())
}

/// Recovers the hot index of a one-hot vector; rejects anything that does
/// not have exactly one `1`.
pub fn onehot_decode(v: &[u8]) -> Result<usize> {
    let mut hot = None;
    for (i, &b) in v.iter().enumerate() {
        match b {
            0 => {}
            1 if hot.is_none() => hot = Some(i),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "not a one-hot vector: {v:?}"
                )))
            }
        }
    }
    hot.ok_or_else(|| Error::InvalidArgument("one-hot vector has no set bit".into()))
}

/// Concatenated app and action prediction for one burst.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OperationLabel {
    pub app: OneHotLabel,
    pub action: OneHotLabel,
}

impl OperationLabel {
    pub fn new(app: OneHotLabel, action: OneHotLabel) -> Self {
        OperationLabel { app, action }
    }

    pub fn width(&self) -> usize {
        self.app.dims() + self.action.dims()
    }

    pub fn flatten(&self) -> Vec<u8> {
        let mut v = self.app.to_vec();
        v.extend(self.action.to_vec());
        v
    }
}

/// One line of a label-recorder interaction log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub t: f64,
    pub app_name: String,
    pub x: i32,
    pub y: i32,
}

/// Half-open screen rectangle `[x0, x1) x [y0, y1)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenRect {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl ScreenRect {
    pub fn contains(&self, x: i32, y: i32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn intersects(&self, other: &ScreenRect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRegion {
    pub rect: ScreenRect,
    pub action: usize,
}

/// Per-app table from UI button rectangles to action indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionMappingTable {
    pub apps: BTreeMap<String, Vec<ActionRegion>>,
}

impl ActionMappingTable {
    /// Checks that rectangles within each app are non-empty and pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        for (app, regions) in &self.apps {
            for (i, a) in regions.iter().enumerate() {
                if a.rect.is_empty() {
                    return Err(Error::InvalidArgument(format!("empty rectangle in app {app}")));
                }
                for b in &regions[i + 1..] {
                    if a.rect.intersects(&b.rect) {
                        return Err(Error::InvalidArgument(format!(
                            "overlapping rectangles in app {app}: {:?} and {:?}",
                            a.rect, b.rect
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn has_app(&self, app: &str) -> bool {
        self.apps.contains_key(app)
    }

    /// Action index for a tap, `None` when the tap hits no rectangle or the
    /// app is absent from the table.
    pub fn lookup(&self, app: &str, x: i32, y: i32) -> Result<Option<usize>> {
        let Some(regions) = self.apps.get(app) else {
            return Ok(None);
        };
        let mut hits = regions.iter().filter(|r| r.rect.contains(x, y));
        match (hits.next(), hits.next()) {
            (None, _) => Ok(None),
            (Some(r), None) => Ok(Some(r.action)),
            (Some(_), Some(_)) => Err(Error::AmbiguousTap {
                app: app.to_string(),
                x,
                y,
            }),
        }
    }
}
