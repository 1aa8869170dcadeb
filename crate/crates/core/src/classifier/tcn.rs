//! Temporal convolutional network with a self-attention layer.
//!
//! Stack: `levels` residual blocks of two dilated causal convolutions
//! (dilation `2^l`), single-head scaled dot-product self-attention with a
//! residual connection, mean pooling over time, and a fully connected layer
//! whose output (the logits) is the activation vector.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcnConfig {
    pub channels: usize,
    pub kernel: usize,
    pub levels: usize,
    pub dropout: f64,
    pub attention_heads: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of the training set held out for per-epoch validation accuracy.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            channels: 64,
            kernel: 3,
            levels: 4,
            dropout: 0.2,
            attention_heads: 1,
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 32,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.kernel < 2 {
            return bad("kernel must be at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.channels == 0 {
            return bad("channels must be positive");
        }
        if self.attention_heads > 1 {
            return bad("only single-head attention (attention_heads = 1) or none (0) is supported");
        }
        if self.levels == 0 && self.attention_heads == 0 {
            return bad("model needs at least one residual level or the attention layer");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 0.5)");
        }
        Ok(())
    }
}

/// Input window, input channels and number of output classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcnShape {
    pub window: usize,
    pub in_dims: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Param {
    off: usize,
    rows: usize,
    cols: usize,
}

impl Param {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Level {
    dilation: usize,
    in_ch: usize,
    w1: Param,
    b1: Param,
    w2: Param,
    b2: Param,
    down: Option<(Param, Param)>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    levels: Vec<Level>,
    attn: Option<[Param; 3]>,
    fc_w: Param,
    fc_b: Param,
    total: usize,
    /// Feature width entering the attention layer.
    width: usize,
}

impl Layout {
    fn new(cfg: &TcnConfig, shape: &TcnShape) -> Layout {
        let mut off = 0;
        let mut alloc = |rows: usize, cols: usize| {
            let p = Param { off, rows, cols };
            off += rows * cols;
            p
        };
        let c = cfg.channels;
        let k = cfg.kernel;
        let mut levels = Vec::with_capacity(cfg.levels);
        let mut in_ch = shape.in_dims;
        for l in 0..cfg.levels {
            let w1 = alloc(k * in_ch, c);
            let b1 = alloc(1, c);
            let w2 = alloc(k * c, c);
            let b2 = alloc(1, c);
            let down = (in_ch != c).then(|| (alloc(in_ch, c), alloc(1, c)));
            levels.push(Level {
                dilation: 1 << l,
                in_ch,
                w1,
                b1,
                w2,
                b2,
                down,
            });
            in_ch = c;
        }
        let width = in_ch;
        let attn = (cfg.attention_heads == 1).then(|| [alloc(width, width), alloc(width, width), alloc(width, width)]);
        let fc_w = alloc(width, shape.classes);
        let fc_b = alloc(1, shape.classes);
        Layout {
            levels,
            attn,
            fc_w,
            fc_b,
            total: off,
            width,
        }
    }

    /// Parameter blocks with their fan-in, used for initialization.
    fn blocks(&self) -> Vec<(Param, usize)> {
        let mut out = Vec::new();
        for l in &self.levels {
            out.push((l.w1, l.w1.rows));
            out.push((l.b1, l.w1.rows));
            out.push((l.w2, l.w2.rows));
            out.push((l.b2, l.w2.rows));
            if let Some((w, b)) = l.down {
                out.push((w, w.rows));
                out.push((b, w.rows));
            }
        }
        if let Some(a) = self.attn {
            for p in a {
                out.push((p, p.rows));
            }
        }
        out.push((self.fc_w, self.fc_w.rows));
        out.push((self.fc_b, self.fc_w.rows));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcnModel {
    pub config: TcnConfig,
    pub shape: TcnShape,
    params: Vec<f64>,
    layout: Layout,
}

struct LevelCache {
    input: Array2<f64>,
    u1: Array2<f64>,
    z1: Array2<f64>,
    m1: Option<Array2<f64>>,
    u2: Array2<f64>,
    z2: Array2<f64>,
    m2: Option<Array2<f64>>,
    pre: Array2<f64>,
}

struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    p: Array2<f64>,
}

struct Cache {
    levels: Vec<LevelCache>,
    h: Array2<f64>,
    attn: Option<AttnCache>,
    z: Array1<f64>,
    logits: Array1<f64>,
    probs: Array1<f64>,
}

/// Causal dilated unfolding: row `t` holds inputs `t - (K-1-j)·d` for
/// `j = 0..K`, zero before the start.
fn im2col(x: &ArrayView2<f64>, k: usize, d: usize) -> Array2<f64> {
    let (t, c) = x.dim();
    let mut u = Array2::zeros((t, k * c));
    for row in 0..t {
        for j in 0..k {
            let back = (k - 1 - j) * d;
            if back <= row {
                u.row_mut(row).slice_mut(ndarray::s![j * c..(j + 1) * c]).assign(&x.row(row - back));
            }
        }
    }
    u
}

fn col2im(du: &Array2<f64>, k: usize, d: usize, c: usize) -> Array2<f64> {
    let t = du.nrows();
    let mut dx = Array2::zeros((t, c));
    for row in 0..t {
        for j in 0..k {
            let back = (k - 1 - j) * d;
            if back <= row {
                let mut dst = dx.row_mut(row - back);
                dst += &du.row(row).slice(ndarray::s![j * c..(j + 1) * c]);
            }
        }
    }
    dx
}

fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v.max(0.0))
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

impl TcnModel {
    /// Fresh model with weights and biases drawn from `U(±1/√fan_in)`.
    pub fn new(config: TcnConfig, shape: TcnShape) -> Result<Self> {
        config.validate()?;
        if shape.window == 0 || shape.in_dims == 0 || shape.classes < 2 {
            return Err(Error::InvalidArgument(format!("invalid model shape {shape:?}")));
        }
        let layout = Layout::new(&config, &shape);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for (p, fan_in) in layout.blocks() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut params[p.off..p.off + p.len()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(TcnModel {
            config,
            shape,
            params,
            layout,
        })
    }

    pub fn from_params(config: TcnConfig, shape: TcnShape, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, &shape);
        if params.len() != layout.total {
            return Err(Error::shape(layout.total, params.len()));
        }
        Ok(TcnModel {
            config,
            shape,
            params,
            layout,
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn sample_len(&self) -> usize {
        self.shape.window * self.shape.in_dims
    }

    fn view(&self, p: Param) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((p.rows, p.cols), &self.params[p.off..p.off + p.len()]).expect("layout")
    }

    fn bias(&self, p: Param) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[p.off..p.off + p.len()])
    }

    fn input<'a>(&self, x: &'a [f64]) -> Result<ArrayView2<'a, f64>> {
        if x.len() != self.sample_len() {
            return Err(Error::shape(
                format!("{}x{}", self.shape.window, self.shape.in_dims),
                format!("{} values", x.len()),
            ));
        }
        Ok(ArrayView2::from_shape((self.shape.window, self.shape.in_dims), x).expect("checked length"))
    }

    fn forward_cache(&self, x: ArrayView2<f64>, mut rng: Option<&mut ChaCha8Rng>) -> Cache {
        let k = self.config.kernel;
        let p = self.config.dropout;
        let mut h = x.to_owned();
        let mut levels = Vec::with_capacity(self.layout.levels.len());
        for lv in &self.layout.levels {
            let u1 = im2col(&h.view(), k, lv.dilation);
            let mut z1 = u1.dot(&self.view(lv.w1));
            z1 += &self.bias(lv.b1);
            let mut a1 = relu(&z1);
            let m1 = match rng.as_deref_mut() {
                Some(r) if p > 0.0 => {
                    let m = dropout_mask(a1.dim(), p, r);
                    a1 *= &m;
                    Some(m)
                }
                _ => None,
            };
            let u2 = im2col(&a1.view(), k, lv.dilation);
            let mut z2 = u2.dot(&self.view(lv.w2));
            z2 += &self.bias(lv.b2);
            let mut a2 = relu(&z2);
            let m2 = match rng.as_deref_mut() {
                Some(r) if p > 0.0 => {
                    let m = dropout_mask(a2.dim(), p, r);
                    a2 *= &m;
                    Some(m)
                }
                _ => None,
            };
            let mut pre = a2;
            match lv.down {
                Some((w, b)) => {
                    general_mat_mul(1.0, &h, &self.view(w), 1.0, &mut pre);
                    pre += &self.bias(b);
                }
                None => pre += &h,
            }
            let out = relu(&pre);
            levels.push(LevelCache {
                input: h,
                u1,
                z1,
                m1,
                u2,
                z2,
                m2,
                pre,
            });
            h = out;
        }
        let (y, attn) = match self.layout.attn {
            Some([wq, wk, wv]) => {
                let q = h.dot(&self.view(wq));
                let kk = h.dot(&self.view(wk));
                let v = h.dot(&self.view(wv));
                let scale = 1.0 / (self.layout.width as f64).sqrt();
                let mut s = q.dot(&kk.t()) * scale;
                for mut row in s.rows_mut() {
                    softmax_in_place(row.as_slice_mut().expect("contiguous"));
                }
                let mut y = h.clone();
                general_mat_mul(1.0, &s, &v, 1.0, &mut y);
                (y, Some(AttnCache { q, k: kk, v, p: s }))
            }
            None => (h.clone(), None),
        };
        let z = y.mean_axis(Axis(0)).expect("non-empty window");
        let mut logits = self.view(self.layout.fc_w).t().dot(&z);
        logits += &self.bias(self.layout.fc_b);
        let mut probs = logits.clone();
        softmax_in_place(probs.as_slice_mut().expect("contiguous"));
        Cache {
            levels,
            h,
            attn,
            z,
            logits,
            probs,
        }
    }

    /// Softmax output `Q` in evaluation mode.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cache(self.input(x)?, None).probs.to_vec())
    }

    /// Probability vector and pre-softmax activation vector.
    pub fn predict(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.forward_cache(self.input(x)?, None);
        Ok((c.probs.to_vec(), c.logits.to_vec()))
    }

    /// Cross-entropy loss of one sample in evaluation mode.
    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64> {
        self.check_label(label)?;
        let c = self.forward_cache(self.input(x)?, None);
        Ok(cross_entropy(&c.logits, label))
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.shape.classes {
            return Err(Error::IndexOutOfRange {
                index: label,
                dims: self.shape.classes,
            });
        }
        Ok(())
    }

    /// Adds the loss gradient of one sample to `grad` and returns the loss.
    fn backward(&self, cache: &Cache, label: usize, grad: &mut [f64]) -> f64 {
        let loss = cross_entropy(&cache.logits, label);
        let mut dlogits = cache.probs.clone();
        dlogits[label] -= 1.0;

        let fc_w = self.layout.fc_w;
        {
            let mut g = grad_view(grad, fc_w);
            for (i, zi) in cache.z.iter().enumerate() {
                g.row_mut(i).scaled_add(*zi, &dlogits);
            }
        }
        grad_bias(grad, self.layout.fc_b).scaled_add(1.0, &dlogits);
        let dz = self.view(fc_w).dot(&dlogits);

        let t = cache.h.nrows() as f64;
        let mut dy = Array2::zeros(cache.h.dim());
        for mut row in dy.rows_mut() {
            row.scaled_add(1.0 / t, &dz);
        }

        let mut dh = dy.clone();
        if let (Some([wq, wk, wv]), Some(a)) = (self.layout.attn, cache.attn.as_ref()) {
            let scale = 1.0 / (self.layout.width as f64).sqrt();
            let dp = dy.dot(&a.v.t());
            let dv = a.p.t().dot(&dy);
            let mut ds = &a.p * &dp;
            let rs = ds.sum_axis(Axis(1));
            ds = &a.p * &(&dp - &rs.insert_axis(Axis(1)));
            ds *= scale;
            let dq = ds.dot(&a.k);
            let dk = ds.t().dot(&a.q);
            general_mat_mul(1.0, &cache.h.t(), &dq, 1.0, &mut grad_view(grad, wq));
            general_mat_mul(1.0, &cache.h.t(), &dk, 1.0, &mut grad_view(grad, wk));
            general_mat_mul(1.0, &cache.h.t(), &dv, 1.0, &mut grad_view(grad, wv));
            general_mat_mul(1.0, &dq, &self.view(wq).t(), 1.0, &mut dh);
            general_mat_mul(1.0, &dk, &self.view(wk).t(), 1.0, &mut dh);
            general_mat_mul(1.0, &dv, &self.view(wv).t(), 1.0, &mut dh);
        }

        let k = self.config.kernel;
        let c = self.config.channels;
        let mut dout = dh;
        for (li, (lv, lc)) in self.layout.levels.iter().zip(&cache.levels).enumerate().rev() {
            let mut dpre = dout;
            ndarray::Zip::from(&mut dpre).and(&lc.pre).for_each(|d, &p| {
                if p <= 0.0 {
                    *d = 0.0
                }
            });
            let mut dx = match lv.down {
                Some((w, b)) => {
                    general_mat_mul(1.0, &lc.input.t(), &dpre, 1.0, &mut grad_view(grad, w));
                    grad_bias(grad, b).scaled_add(1.0, &dpre.sum_axis(Axis(0)));
                    (li > 0).then(|| dpre.dot(&self.view(w).t()))
                }
                None => (li > 0).then(|| dpre.clone()),
            };
            let mut dz2 = dpre;
            if let Some(m) = &lc.m2 {
                dz2 *= m;
            }
            relu_grad(&mut dz2, &lc.z2);
            general_mat_mul(1.0, &lc.u2.t(), &dz2, 1.0, &mut grad_view(grad, lv.w2));
            grad_bias(grad, lv.b2).scaled_add(1.0, &dz2.sum_axis(Axis(0)));
            let du2 = dz2.dot(&self.view(lv.w2).t());
            let mut dz1 = col2im(&du2, k, lv.dilation, c);
            if let Some(m) = &lc.m1 {
                dz1 *= m;
            }
            relu_grad(&mut dz1, &lc.z1);
            general_mat_mul(1.0, &lc.u1.t(), &dz1, 1.0, &mut grad_view(grad, lv.w1));
            grad_bias(grad, lv.b1).scaled_add(1.0, &dz1.sum_axis(Axis(0)));
            if let Some(dx) = dx.as_mut() {
                let du1 = dz1.dot(&self.view(lv.w1).t());
                *dx += &col2im(&du1, k, lv.dilation, lv.in_ch);
            }
            dout = dx.unwrap_or_else(|| Array2::zeros((0, 0)));
        }
        loss
    }

    /// Loss gradient of one sample in evaluation mode.
    pub fn gradient(&self, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        self.check_label(label)?;
        let cache = self.forward_cache(self.input(x)?, None);
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.backward(&cache, label, &mut grad);
        Ok((loss, grad))
    }

    fn relu_pattern(&self, x: ArrayView2<f64>) -> Vec<bool> {
        let c = self.forward_cache(x, None);
        let mut out = Vec::new();
        for l in &c.levels {
            out.extend(l.z1.iter().map(|v| *v > 0.0));
            out.extend(l.z2.iter().map(|v| *v > 0.0));
            out.extend(l.pre.iter().map(|v| *v > 0.0));
        }
        out
    }
}

fn grad_view(grad: &mut [f64], p: Param) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((p.rows, p.cols), &mut grad[p.off..p.off + p.len()]).expect("layout")
}

fn grad_bias(grad: &mut [f64], p: Param) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut grad[p.off..p.off + p.len()])
}

fn relu_grad(d: &mut Array2<f64>, z: &Array2<f64>) {
    ndarray::Zip::from(d).and(z).for_each(|d, &z| {
        if z <= 0.0 {
            *d = 0.0
        }
    });
}

fn cross_entropy(logits: &Array1<f64>, label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn tcn_forward(model: &TcnModel, sample: &[f64]) -> Result<Vec<f64>> {
    model.forward(sample)
}

/// Flat storage for equally shaped labeled samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleSet {
    pub window: usize,
    pub dims: usize,
    data: Vec<f64>,
    labels: Vec<usize>,
}

impl SampleSet {
    pub fn new(window: usize, dims: usize) -> Self {
        SampleSet {
            window,
            dims,
            data: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[f64], label: usize) -> Result<()> {
        if x.len() != self.window * self.dims {
            return Err(Error::shape(self.window * self.dims, x.len()));
        }
        self.data.extend_from_slice(x);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        let n = self.window * self.dims;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &l in &self.labels {
            if l < classes {
                c[l] += 1;
            }
        }
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over the training portion before the first update.
    pub initial_loss: f64,
    /// Mean per-sample training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation accuracy after each epoch; empty without a validation split.
    pub val_accuracy: Vec<f64>,
    pub train_samples: usize,
    pub val_samples: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains with cross-entropy and Adam using the model's own config.
pub fn tcn_train(model: &mut TcnModel, data: &SampleSet) -> Result<TrainReport> {
    if data.window != model.shape.window || data.dims != model.shape.in_dims {
        return Err(Error::shape(
            format!("{}x{}", model.shape.window, model.shape.in_dims),
            format!("{}x{}", data.window, data.dims),
        ));
    }
    let classes = model.shape.classes;
    if let Some(&bad) = data.labels().iter().find(|&&l| l >= classes) {
        return Err(Error::IndexOutOfRange { index: bad, dims: classes });
    }
    let counts = data.class_counts(classes);
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InsufficientSamples {
            class,
            available: 0,
            needed: 1,
        });
    }
    let cfg = model.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7463_6e5f_7472_6169);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (data.len() as f64 * cfg.val_fraction).floor() as usize;
    let (val, train) = order.split_at(n_val);
    let mut train = train.to_vec();
    let val = val.to_vec();

    let mut report = TrainReport {
        train_samples: train.len(),
        val_samples: val.len(),
        ..Default::default()
    };
    report.initial_loss = train
        .iter()
        .map(|&i| model.loss(data.x(i), data.label(i)))
        .sum::<Result<f64>>()?
        / train.len() as f64;

    let mut adam = Adam::new(model.params.len(), cfg.learning_rate);
    let mut grad = vec![0.0; model.params.len()];
    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let x = model.input(data.x(i))?;
                let cache = model.forward_cache(x, Some(&mut rng));
                total += model.backward(&cache, data.label(i), &mut grad);
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam.step(&mut model.params, &grad);
        }
        report.epoch_losses.push(total / train.len() as f64);
        if !val.is_empty() {
            let mut correct = 0usize;
            for &i in &val {
                if argmax(&model.forward(data.x(i))?) == data.label(i) {
                    correct += 1;
                }
            }
            report.val_accuracy.push(correct as f64 / val.len() as f64);
        }
        log::debug!(
            "epoch {} loss {:.4} val {:?}",
            report.epoch_losses.len(),
            report.final_loss(),
            report.val_accuracy.last()
        );
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters skipped because a ReLU changed state inside `±h`.
    pub skipped_kinks: usize,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Denominator floor for the relative error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients with central differences over `n` random
/// parameters, dropout disabled.
pub fn gradient_check(model: &TcnModel, sample: &[f64], label: usize, n: usize, seed: u64) -> Result<GradCheck> {
    let (_, grad) = model.gradient(sample, label)?;
    let x = model.input(sample)?;
    let base_pattern = model.relu_pattern(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let h = GRAD_CHECK_STEP;
    let budget = n.saturating_mul(20).max(n);
    for _ in 0..budget {
        if out.checked == n {
            break;
        }
        let i = rng.random_range(0..model.params.len());
        let orig = model.params[i];
        probe.params[i] = orig + h;
        let lp = probe.loss(sample, label)?;
        let pp = probe.relu_pattern(x);
        probe.params[i] = orig - h;
        let lm = probe.loss(sample, label)?;
        let pm = probe.relu_pattern(x);
        probe.params[i] = orig;
        if pp != base_pattern || pm != base_pattern {
            out.skipped_kinks += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grad[i];
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        if !err.is_finite() {
            return Err(Error::InvalidArgument("non-finite gradient".into()));
        }
        out.max_rel_error = out.max_rel_error.max(err);
        out.checked += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(levels: usize, heads: usize) -> TcnConfig {
        TcnConfig {
            channels: 6,
            levels,
            attention_heads: heads,
            dropout: 0.0,
            seed: 11,
            ..Default::default()
        }
    }

    fn random_sample(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn output_is_a_distribution_and_deterministic() {
        let m = TcnModel::new(small(2, 1), TcnShape { window: 9, in_dims: 3, classes: 5 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_sample(27, &mut rng);
        let q = tcn_forward(&m, &x).unwrap();
        assert_eq!(q.len(), 5);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(q, tcn_forward(&m, &x).unwrap());
        assert!(tcn_forward(&m, &x[..26]).is_err());
    }

    #[test]
    fn fresh_model_is_near_uniform() {
        let m = TcnModel::new(TcnConfig::default(), TcnShape { window: 31, in_dims: 3, classes: 40 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut total = 0.0;
        for _ in 0..1000 {
            let x: Vec<f64> = (0..31)
                .flat_map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), if rng.random::<bool>() { 1.0 } else { -1.0 }])
                .collect();
            total += m.forward(&x).unwrap().iter().cloned().fold(0.0, f64::max);
        }
        let mean = total / 1000.0;
        assert!((mean - 1.0 / 40.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn causal_unfold_matches_definition() {
        let x = Array2::from_shape_fn((5, 2), |(t, c)| (t * 10 + c) as f64);
        let u = im2col(&x.view(), 3, 2);
        assert_eq!(u.row(4).to_vec(), vec![0.0, 1.0, 20.0, 21.0, 40.0, 41.0]);
        assert_eq!(u.row(1).to_vec(), vec![0.0, 0.0, 0.0, 0.0, 10.0, 11.0]);
        let back = col2im(&Array2::ones((5, 6)), 3, 2, 2);
        assert_eq!(back.column(0).to_vec(), vec![3.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (levels, heads) in [(2, 1), (3, 0), (0, 1), (1, 1)] {
            let m = TcnModel::new(small(levels, heads), TcnShape { window: 7, in_dims: 4, classes: 3 }).unwrap();
            let x = random_sample(28, &mut rng);
            let r = gradient_check(&m, &x, 1, 60, 9).unwrap();
            assert!(r.max_rel_error < 1e-4, "levels {levels} heads {heads}: {r:?}");
            assert_eq!(r.checked, 60);
        }
    }

    #[test]
    fn zero_input_gives_finite_gradients() {
        let m = TcnModel::new(small(2, 1), TcnShape { window: 5, in_dims: 3, classes: 4 }).unwrap();
        let (loss, g) = m.gradient(&[0.0; 15], 2).unwrap();
        assert!(loss.is_finite());
        assert!(g.iter().all(|v| v.is_finite()));
    }

    fn separable(n: usize, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = SampleSet::new(8, 2);
        for i in 0..n {
            let y = i % 2;
            let shift = if y == 0 { -0.6 } else { 0.6 };
            let x: Vec<f64> = (0..16).map(|_| shift + rng.random_range(-0.4..0.4)).collect();
            s.push(&x, y).unwrap();
        }
        s
    }

    #[test]
    fn learns_separable_classes() {
        let data = separable(200, 3);
        let cfg = TcnConfig { channels: 8, levels: 2, seed: 4, ..Default::default() };
        let mut m = TcnModel::new(cfg, TcnShape { window: 8, in_dims: 2, classes: 2 }).unwrap();
        let rep = tcn_train(&mut m, &data).unwrap();
        assert_eq!(rep.epoch_losses.len(), 20);
        assert!(rep.final_loss() < rep.initial_loss);
        let correct = (0..data.len()).filter(|&i| argmax(&m.forward(data.x(i)).unwrap()) == data.label(i)).count();
        assert!(correct as f64 / data.len() as f64 >= 0.99, "{correct}");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data = separable(64, 8);
        let cfg = TcnConfig { channels: 4, levels: 1, epochs: 3, seed: 7, ..Default::default() };
        let shape = TcnShape { window: 8, in_dims: 2, classes: 2 };
        let mut a = TcnModel::new(cfg.clone(), shape).unwrap();
        let mut b = TcnModel::new(cfg, shape).unwrap();
        tcn_train(&mut a, &data).unwrap();
        tcn_train(&mut b, &data).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn missing_class_is_rejected() {
        let data = separable(10, 1);
        let mut m = TcnModel::new(small(1, 1), TcnShape { window: 8, in_dims: 2, classes: 3 }).unwrap();
        assert!(matches!(tcn_train(&mut m, &data), Err(Error::InsufficientSamples { class: 2, .. })));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TcnConfig { kernel: 1, ..Default::default() }.validate().is_err());
        assert!(TcnConfig { dropout: 1.0, ..Default::default() }.validate().is_err());
        assert!(TcnConfig { attention_heads: 2, ..Default::default() }.validate().is_err());
    }
}
