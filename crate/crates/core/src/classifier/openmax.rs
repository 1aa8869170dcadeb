//! Open-set calibration of classifier outputs.
//!
//! Each known class keeps the mean activation vector (MAV) of its correctly
//! classified training samples and a Weibull model of the largest distances
//! to that MAV. A test sample's probability for class `h` is scaled by the
//! confidence `c_h = 1 - CDF_h(distance)`; the removed mass becomes the
//! unknown-class probability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape assigned to a constant tail, making the CDF a near step at `scale`.
pub const DEGENERATE_SHAPE: f64 = 1e4;
pub const MIN_TAIL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weibull {
    pub shape: f64,
    pub scale: f64,
    pub shift: f64,
    /// Set when the tail was constant and no finite MLE exists.
    pub degenerate: bool,
}

impl Weibull {
    pub fn cdf(&self, x: f64) -> f64 {
        let z = x - self.shift;
        if z <= 0.0 {
            return 0.0;
        }
        1.0 - (-(z / self.scale).powf(self.shape)).exp()
    }

    /// Maximum-likelihood fit with zero shift.
    pub fn fit(data: &[f64]) -> Result<Weibull> {
        if data.len() < 2 {
            return Err(Error::InvalidArgument("Weibull fit needs at least two points".into()));
        }
        if data.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidArgument("Weibull data must be finite and non-negative".into()));
        }
        let max = data.iter().cloned().fold(0.0, f64::max);
        let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
        if max <= 0.0 || (max - min) <= 1e-12 * max {
            return Ok(Weibull {
                shape: DEGENERATE_SHAPE,
                scale: max.max(f64::MIN_POSITIVE),
                shift: 0.0,
                degenerate: true,
            });
        }
        // Work on data scaled into (0, 1] so the fitted shape is scale-free.
        let x: Vec<f64> = data.iter().map(|v| (v / max).max(1e-12)).collect();
        let lnx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
        let mean_ln = lnx.iter().sum::<f64>() / x.len() as f64;
        let g = |k: f64| {
            let mut s0 = 0.0;
            let mut s1 = 0.0;
            for (xi, li) in x.iter().zip(&lnx) {
                let w = xi.powf(k);
                s0 += w;
                s1 += w * li;
            }
            s1 / s0 - 1.0 / k - mean_ln
        };
        let (mut lo, mut hi) = (1e-3, 1.0);
        while g(hi) < 0.0 {
            lo = hi;
            hi *= 2.0;
            if hi > DEGENERATE_SHAPE {
                return Ok(Weibull {
                    shape: DEGENERATE_SHAPE,
                    scale: max,
                    shift: 0.0,
                    degenerate: true,
                });
            }
        }
        while g(lo) > 0.0 {
            hi = lo;
            lo /= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * hi {
                break;
            }
        }
        let k = 0.5 * (lo + hi);
        let mean_pow = x.iter().map(|v| v.powf(k)).sum::<f64>() / x.len() as f64;
        Ok(Weibull {
            shape: k,
            scale: max * mean_pow.powf(1.0 / k),
            shift: 0.0,
            degenerate: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassModel {
    pub mav: Vec<f64>,
    pub weibull: Weibull,
    /// Tail size actually used.
    pub tail: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenMaxModel {
    pub classes: Vec<ClassModel>,
    pub tail_size: usize,
    pub delta: f64,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Fits one MAV and Weibull per class from activation vectors of correctly
/// classified training samples.
pub fn openmax_fit(activations: &[Vec<f64>], labels: &[usize], classes: usize, tail_size: usize, delta: f64) -> Result<OpenMaxModel> {
    if activations.len() != labels.len() {
        return Err(Error::shape(activations.len(), labels.len()));
    }
    if tail_size < MIN_TAIL {
        return Err(Error::InvalidArgument(format!("tail size must be at least {MIN_TAIL}")));
    }
    let dims = activations.first().map(|a| a.len()).unwrap_or(0);
    let mut out = Vec::with_capacity(classes);
    for h in 0..classes {
        let members: Vec<&Vec<f64>> = activations.iter().zip(labels).filter(|(_, &l)| l == h).map(|(a, _)| a).collect();
        if members.len() < MIN_TAIL {
            return Err(Error::InsufficientSamples {
                class: h,
                available: members.len(),
                needed: MIN_TAIL,
            });
        }
        let mut mav = vec![0.0; dims];
        for a in &members {
            if a.len() != dims {
                return Err(Error::shape(dims, a.len()));
            }
            for (m, v) in mav.iter_mut().zip(a.iter()) {
                *m += v;
            }
        }
        mav.iter_mut().for_each(|m| *m /= members.len() as f64);
        let mut dist: Vec<f64> = members.iter().map(|a| euclidean(a, &mav)).collect();
        dist.sort_by(|a, b| b.total_cmp(a));
        let tail = tail_size.min(dist.len());
        if tail < tail_size {
            log::warn!("class {h}: only {tail} correct samples, shrinking Weibull tail from {tail_size}");
        }
        let weibull = Weibull::fit(&dist[..tail])?;
        out.push(ClassModel { mav, weibull, tail });
    }
    Ok(OpenMaxModel {
        classes: out,
        tail_size,
        delta,
    })
}

impl OpenMaxModel {
    /// Confidence `c_h` for each known class.
    pub fn confidences(&self, activation: &[f64]) -> Result<Vec<f64>> {
        self.classes
            .iter()
            .map(|c| {
                if c.mav.len() != activation.len() {
                    return Err(Error::shape(c.mav.len(), activation.len()));
                }
                Ok(1.0 - c.weibull.cdf(euclidean(activation, &c.mav)))
            })
            .collect()
    }
}

/// `Q̂_h = q_h c_h` for known classes plus `Σ q_h (1 - c_h)` as the last entry.
pub fn calibrate_with(q: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    if q.len() != c.len() {
        return Err(Error::shape(q.len(), c.len()));
    }
    let mut out = Vec::with_capacity(q.len() + 1);
    let mut unknown = 0.0;
    for (qh, ch) in q.iter().zip(c) {
        out.push(qh * ch);
        unknown += qh * (1.0 - ch);
    }
    out.push(unknown);
    Ok(out)
}

pub fn openmax_calibrate(q: &[f64], activation: &[f64], om: &OpenMaxModel) -> Result<Vec<f64>> {
    if q.len() != om.classes.len() {
        return Err(Error::shape(om.classes.len(), q.len()));
    }
    calibrate_with(q, &om.confidences(activation)?)
}

/// Index `H` (the last) for unknown when its mass exceeds `delta`, else the
/// lowest-index argmax of the known part.
pub fn openmax_decide(qhat: &[f64], delta: f64) -> usize {
    let h = qhat.len() - 1;
    if qhat[h] > delta {
        return h;
    }
    argmax_first(&qhat[..h])
}

pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
