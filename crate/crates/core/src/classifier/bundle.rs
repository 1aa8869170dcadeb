//! Trained classifier bundle, its binary file format, and per-burst
//! operation labelling.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic        4 bytes  "WFPB"
//! version      u16      FORMAT_VERSION
//! reserved     u16      0
//! payload_len  u64
//! payload      payload_len bytes
//! checksum     32 bytes SHA-256 of the payload
//! ```
//!
//! The payload is a length-prefixed UTF-8 JSON document (u64 length) with
//! the configs, routing table, scaler and OpenMax models, followed by one
//! parameter array per network (u64 count, then f64 values): the app model
//! first, then action models in category-name order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::openmax::{argmax_first, openmax_calibrate, openmax_decide, OpenMaxModel};
use super::tcn::{TcnConfig, TcnModel, TcnShape};
use crate::annotate::majority_first_seen;
use crate::error::{Error, Result};
use crate::featex::{
    burstify, extract_action_samples, extract_app_samples, trace_burst_features, ActionSample, FeatureConventions,
    StandardScaler,
};
use crate::trace_model::{OneHotLabel, OperationLabel, TrafficTrace};

pub const MAGIC: &[u8; 4] = b"WFPB";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionMode {
    #[default]
    OpenMax,
    /// Plain argmax of the softmax output; never predicts unknown.
    SoftmaxOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub model: TcnModel,
    pub openmax: OpenMaxModel,
}

impl Classifier {
    pub fn classes(&self) -> usize {
        self.model.shape.classes
    }

    /// Class index, or `classes()` for unknown.
    pub fn decide(&self, x: &[f64], mode: DecisionMode) -> Result<usize> {
        let (q, act) = self.model.predict(x)?;
        Ok(match mode {
            DecisionMode::SoftmaxOnly => argmax_first(&q),
            DecisionMode::OpenMax => openmax_decide(&openmax_calibrate(&q, &act, &self.openmax)?, self.openmax.delta),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierBundle {
    pub apps: Vec<String>,
    pub categories: Vec<String>,
    /// Category index of each known app.
    pub routing: Vec<usize>,
    pub actions_per_category: usize,
    pub app_window: usize,
    pub action_window: usize,
    pub conventions: FeatureConventions,
    pub action_scaler: StandardScaler,
    pub app: Classifier,
    /// Action classifier per category name.
    pub actions: BTreeMap<String, Classifier>,
}

impl ClassifierBundle {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(m));
        if self.routing.len() != self.apps.len() {
            return bad(format!("routing has {} entries for {} apps", self.routing.len(), self.apps.len()));
        }
        if let Some(r) = self.routing.iter().find(|&&r| r >= self.categories.len()) {
            return bad(format!("routing points at missing category {r}"));
        }
        if self.app.classes() != self.apps.len() {
            return bad(format!("app model has {} outputs for {} apps", self.app.classes(), self.apps.len()));
        }
        for (cat, c) in &self.actions {
            if !self.categories.contains(cat) {
                return bad(format!("action model for unknown category {cat}"));
            }
            if c.classes() != self.actions_per_category {
                return bad(format!("action model {cat} has {} outputs", c.classes()));
            }
        }
        Ok(())
    }

    pub fn category_of(&self, app: usize) -> Option<&str> {
        self.routing.get(app).map(|&c| self.categories[c].as_str())
    }
}

/// Per-frame and per-burst decisions for one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceInference {
    /// App index per frame; `apps.len()` is unknown.
    pub frame_apps: Vec<usize>,
    pub burst_apps: Vec<usize>,
    /// Action index per burst; `actions_per_category` is unknown.
    pub burst_actions: Vec<usize>,
    pub operations: Vec<OperationLabel>,
}

pub fn infer_trace(trace: &TrafficTrace, bundle: &ClassifierBundle, mode: DecisionMode) -> Result<TraceInference> {
    let frame_apps = decide_frame_apps(trace, bundle, mode)?;
    let feats = trace_burst_features(trace, bundle.conventions);
    let samples = extract_action_samples(&feats, bundle.action_window, &bundle.action_scaler)?;
    assemble_from_decisions(trace, bundle, mode, frame_apps, &samples)
}

/// App decision for every frame of the trace.
pub fn decide_frame_apps(trace: &TrafficTrace, bundle: &ClassifierBundle, mode: DecisionMode) -> Result<Vec<usize>> {
    extract_app_samples(trace, bundle.app_window)?
        .iter()
        .map(|s| bundle.app.decide(&s.data, mode))
        .collect()
}

/// Burst apps by majority over frame decisions, then the action of each
/// burst from the classifier of its app's category.
pub fn assemble_from_decisions(
    trace: &TrafficTrace,
    bundle: &ClassifierBundle,
    mode: DecisionMode,
    frame_apps: Vec<usize>,
    samples: &[ActionSample],
) -> Result<TraceInference> {
    let h = bundle.apps.len();
    let g = bundle.actions_per_category;
    let bursts = burstify(trace);
    if samples.len() != bursts.len() {
        return Err(Error::shape(bursts.len(), samples.len()));
    }
    let mut burst_apps = Vec::with_capacity(bursts.len());
    let mut last = h;
    for b in &bursts {
        if let Some(a) = majority_first_seen(frame_apps[b.range.clone()].iter().copied()) {
            last = a;
        }
        burst_apps.push(last);
    }

    let mut burst_actions = Vec::with_capacity(bursts.len());
    let mut operations = Vec::with_capacity(bursts.len());
    for (n, &a) in burst_apps.iter().enumerate() {
        let action = match bundle.category_of(a).and_then(|c| bundle.actions.get(c)) {
            Some(clf) => clf.decide(&samples[n].data, mode)?,
            None => g,
        };
        burst_actions.push(action);
        operations.push(OperationLabel::new(OneHotLabel::new(a, h + 1)?, OneHotLabel::new(action, g + 1)?));
    }
    Ok(TraceInference {
        frame_apps,
        burst_apps,
        burst_actions,
        operations,
    })
}

/// One operation label per one-second burst of the trace.
pub fn assemble_operation_sequence(
    trace: &TrafficTrace,
    bundle: &ClassifierBundle,
    mode: DecisionMode,
) -> Result<Vec<OperationLabel>> {
    Ok(infer_trace(trace, bundle, mode)?.operations)
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    config: TcnConfig,
    shape: TcnShape,
    openmax: OpenMaxModel,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    apps: Vec<String>,
    categories: Vec<String>,
    routing: Vec<usize>,
    actions_per_category: usize,
    app_window: usize,
    action_window: usize,
    conventions: FeatureConventions,
    action_scaler: StandardScaler,
    app: ClassifierMeta,
    actions: BTreeMap<String, ClassifierMeta>,
}

fn meta_of(c: &Classifier) -> ClassifierMeta {
    ClassifierMeta {
        config: c.model.config.clone(),
        shape: c.model.shape,
        openmax: c.openmax.clone(),
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    put_u64(out, v.len() as u64);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_bundle(bundle: &ClassifierBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let meta = BundleMeta {
        apps: bundle.apps.clone(),
        categories: bundle.categories.clone(),
        routing: bundle.routing.clone(),
        actions_per_category: bundle.actions_per_category,
        app_window: bundle.app_window,
        action_window: bundle.action_window,
        conventions: bundle.conventions,
        action_scaler: bundle.action_scaler.clone(),
        app: meta_of(&bundle.app),
        actions: bundle.actions.iter().map(|(k, c)| (k.clone(), meta_of(c))).collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut payload = Vec::new();
    put_u64(&mut payload, json.len() as u64);
    payload.extend_from_slice(&json);
    put_f64s(&mut payload, bundle.app.model.params());
    for c in bundle.actions.values() {
        put_f64s(&mut payload, c.model.params());
    }
    let mut out = Vec::with_capacity(payload.len() + 48);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    put_u64(&mut out, payload.len() as u64);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("truncated payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| Error::Format("length overflow".into()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode_bundle(bytes: &[u8]) -> Result<ClassifierBundle> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a model bundle (bad magic)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported bundle version {version}, expected {FORMAT_VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Format("length overflow".into()))?;
    if bytes.len() != 16 + len + 32 {
        return Err(Error::Format(format!("expected {} bytes, file has {}", 16 + len + 32, bytes.len())));
    }
    let payload = &bytes[16..16 + len];
    if Sha256::digest(payload).as_slice() != &bytes[16 + len..] {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let mut r = Reader { buf: payload, pos: 0 };
    let json_len = r.len()?;
    let meta: BundleMeta = serde_json::from_slice(r.take(json_len)?)?;
    let mut build = |m: ClassifierMeta| -> Result<Classifier> {
        let params = r.f64s()?;
        Ok(Classifier {
            model: TcnModel::from_params(m.config, m.shape, params)?,
            openmax: m.openmax,
        })
    };
    let app = build(meta.app)?;
    let mut actions = BTreeMap::new();
    for (k, m) in meta.actions {
        actions.insert(k, build(m)?);
    }
    if r.pos != payload.len() {
        return Err(Error::Format("trailing bytes in payload".into()));
    }
    let bundle = ClassifierBundle {
        apps: meta.apps,
        categories: meta.categories,
        routing: meta.routing,
        actions_per_category: meta.actions_per_category,
        app_window: meta.app_window,
        action_window: meta.action_window,
        conventions: meta.conventions,
        action_scaler: meta.action_scaler,
        app,
        actions,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_bundle(path: &Path, bundle: &ClassifierBundle) -> Result<()> {
    std::fs::write(path, encode_bundle(bundle)?).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: &Path) -> Result<ClassifierBundle> {
    decode_bundle(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::classifier::openmax::{ClassModel, Weibull};
    use crate::featex::BURST_FEATURES;
    use crate::trace_model::{Direction, FrameKind, FrameMeta, MacAddr};

    fn tiny_classifier(window: usize, dims: usize, classes: usize, seed: u64) -> Classifier {
        let cfg = TcnConfig { channels: 4, levels: 1, seed, ..Default::default() };
        let model = TcnModel::new(cfg, TcnShape { window, in_dims: dims, classes }).unwrap();
        let openmax = OpenMaxModel {
            classes: (0..classes)
                .map(|_| ClassModel {
                    mav: vec![0.0; classes],
                    weibull: Weibull { shape: 2.0, scale: 1e6, shift: 0.0, degenerate: false },
                    tail: 20,
                })
                .collect(),
            tail_size: 20,
            delta: 0.5,
        };
        Classifier { model, openmax }
    }

    pub(crate) fn tiny_bundle() -> ClassifierBundle {
        let mut actions = BTreeMap::new();
        actions.insert("music".to_string(), tiny_classifier(5, BURST_FEATURES, 4, 2));
        ClassifierBundle {
            apps: vec!["a".into(), "b".into(), "c".into()],
            categories: vec!["music".into(), "video".into()],
            routing: vec![0, 0, 1],
            actions_per_category: 4,
            app_window: 7,
            action_window: 5,
            conventions: FeatureConventions::default(),
            action_scaler: StandardScaler::identity(BURST_FEATURES),
            app: tiny_classifier(7, 3, 3, 1),
            actions,
        }
    }

    fn trace() -> TrafficTrace {
        let sta = MacAddr([2, 0, 0, 0, 0, 9]);
        let ap = MacAddr([2, 0xa0, 0, 0, 0, 1]);
        let frames = (0..80)
            .map(|i| {
                let up = i % 3 == 0;
                FrameMeta {
                    t: 100.0 + i as f64 * 0.07,
                    size: 80 + (i * 37 % 1200) as u32,
                    dir: if up { Direction::Uplink } else { Direction::Downlink },
                    src: if up { sta } else { ap },
                    dst: if up { ap } else { sta },
                    kind: FrameKind::Data,
                }
            })
            .collect();
        TrafficTrace::new(sta, frames).unwrap()
    }

    #[test]
    fn roundtrip_preserves_bundle() {
        let b = tiny_bundle();
        let bytes = encode_bundle(&b).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(decode_bundle(&bytes).unwrap(), b);
    }

    #[test]
    fn corrupt_or_foreign_files_are_rejected() {
        let bytes = encode_bundle(&tiny_bundle()).unwrap();
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_bundle(&v2), Err(Error::Format(m)) if m.contains("version")));
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(decode_bundle(&flipped), Err(Error::Format(m)) if m.contains("checksum")));
        assert!(decode_bundle(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_bundle(b"PK\x03\x04 not a bundle").is_err());
    }

    #[test]
    fn one_operation_per_burst() {
        let tr = trace();
        let b = tiny_bundle();
        for mode in [DecisionMode::OpenMax, DecisionMode::SoftmaxOnly] {
            let inf = infer_trace(&tr, &b, mode).unwrap();
            assert_eq!(inf.operations.len(), burstify(&tr).len());
            assert_eq!(inf.frame_apps.len(), tr.len());
            for (op, &a) in inf.operations.iter().zip(&inf.burst_apps) {
                assert_eq!(op.width(), 4 + 5);
                // Category "video" has no action model, so its bursts get unknown actions.
                if a == 2 || a == 3 {
                    assert!(op.action.is_unknown());
                }
            }
        }
    }

    #[test]
    fn unknown_app_gets_unknown_action() {
        let mut b = tiny_bundle();
        for c in &mut b.app.openmax.classes {
            c.weibull.scale = 1e-9;
        }
        let ops = assemble_operation_sequence(&trace(), &b, DecisionMode::OpenMax).unwrap();
        assert!(ops.iter().all(|o| o.app.is_unknown() && o.action.is_unknown()));
    }

    #[test]
    fn invalid_routing_is_rejected() {
        let mut b = tiny_bundle();
        b.routing = vec![0, 5, 1];
        assert!(encode_bundle(&b).is_err());
    }
}
