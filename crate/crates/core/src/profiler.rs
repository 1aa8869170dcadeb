//! Behavior profiling: run-length collapsed operation sequences, sliding
//! behavior samples in Hamming space, silhouette-based choice of the number
//! of users, k-modes clustering and nearest-centroid identification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace_model::{MacAddr, OperationLabel};

pub const MAX_ITERATIONS: usize = 100;

/// Operation sequence with consecutive duplicates merged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSequence {
    pub mac: MacAddr,
    pub operations: Vec<OperationLabel>,
    /// Start time of the first burst of each merged run.
    pub times: Vec<f64>,
}

pub fn collapse(mac: MacAddr, ops: &[OperationLabel]) -> BehaviorSequence {
    let times: Vec<f64> = (0..ops.len()).map(|i| i as f64).collect();
    collapse_timed(mac, ops, &times)
}

/// Like [`collapse`], keeping the time of the first element of each run.
pub fn collapse_timed(mac: MacAddr, ops: &[OperationLabel], times: &[f64]) -> BehaviorSequence {
    let mut operations: Vec<OperationLabel> = Vec::new();
    let mut kept = Vec::new();
    for (op, t) in ops.iter().zip(times) {
        if operations.last() != Some(op) {
            operations.push(*op);
            kept.push(*t);
        }
    }
    BehaviorSequence {
        mac,
        operations,
        times: kept,
    }
}

/// Fixed-length bit vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bits {
    len: usize,
    words: Vec<u64>,
}

impl Bits {
    pub fn zeros(len: usize) -> Self {
        Bits {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn set(&mut self, i: usize) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn weight(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn hamming(&self, other: &Bits) -> u32 {
        self.words.iter().zip(&other.words).map(|(a, b)| (a ^ b).count_ones()).sum()
    }

    /// Bit `i` is bit `i % 8` of byte `i / 8`.
    pub fn to_hex(&self) -> String {
        let bytes: Vec<u8> = (0..self.len.div_ceil(8)).map(|b| (self.words[b / 8] >> ((b % 8) * 8)) as u8).collect();
        hex::encode(bytes)
    }

    pub fn from_hex(s: &str, len: usize) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::Format(format!("bad centroid hex: {e}")))?;
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::shape(len.div_ceil(8), bytes.len()));
        }
        let mut out = Bits::zeros(len);
        for (b, byte) in bytes.iter().enumerate() {
            out.words[b / 8] |= (*byte as u64) << ((b % 8) * 8);
        }
        if (len..bytes.len() * 8).any(|i| out.get(i)) {
            return Err(Error::Format("centroid has bits set past its length".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorSample {
    pub mac: MacAddr,
    pub window: Vec<OperationLabel>,
    pub start_time: f64,
    flat: Bits,
}

impl BehaviorSample {
    pub fn new(mac: MacAddr, window: Vec<OperationLabel>, start_time: f64) -> Self {
        let width = window.first().map(|o| o.width()).unwrap_or(0);
        let mut flat = Bits::zeros(width * window.len());
        for (i, op) in window.iter().enumerate() {
            assert_eq!(op.width(), width, "mixed label widths in one window");
            flat.set(i * width + op.app.index());
            flat.set(i * width + op.app.dims() + op.action.index());
        }
        BehaviorSample {
            mac,
            window,
            start_time,
            flat,
        }
    }

    pub fn flat(&self) -> &Bits {
        &self.flat
    }
}

pub fn behavior_windows(seq: &BehaviorSequence, wb: usize) -> Vec<BehaviorSample> {
    let e = seq.operations.len();
    if wb == 0 || e < wb {
        return Vec::new();
    }
    (0..=e - wb)
        .map(|s| BehaviorSample::new(seq.mac, seq.operations[s..s + wb].to_vec(), seq.times[s]))
        .collect()
}

/// Zero for samples from the same MAC, otherwise Hamming distance.
pub fn sample_distance(a: &BehaviorSample, b: &BehaviorSample) -> Result<u32> {
    if a.flat.len() != b.flat.len() {
        return Err(Error::shape(a.flat.len(), b.flat.len()));
    }
    if a.mac == b.mac {
        return Ok(0);
    }
    Ok(a.flat.hamming(&b.flat))
}

/// Symmetric `n × n` matrix of [`sample_distance`].
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<u32>,
}

impl DistanceMatrix {
    pub fn new(samples: &[BehaviorSample]) -> Result<Self> {
        let n = samples.len();
        let mut d = vec![0u32; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = sample_distance(&samples[i], &samples[j])?;
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        Ok(DistanceMatrix { n, d })
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.d[i * self.n + j]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Mean silhouette for an assignment into clusters `0..k`; clusters with no
/// members are ignored and singleton members score 0.
pub fn silhouette_from_matrix(dist: &DistanceMatrix, assignment: &[usize]) -> Result<f64> {
    let n = dist.len();
    if assignment.len() != n {
        return Err(Error::shape(n, assignment.len()));
    }
    let k = assignment.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut sizes = vec![0u64; k];
    for &c in assignment {
        sizes[c] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::InvalidArgument("silhouette needs at least two non-empty clusters".into()));
    }
    let mut total = 0.0;
    let mut sums = vec![0u64; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0);
        for j in 0..n {
            sums[assignment[j]] += dist.get(i, j) as u64;
        }
        let own = assignment[i];
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] as f64 / (sizes[own] - 1) as f64;
        let r = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] as f64 / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(r);
        if m > 0.0 {
            total += (r - a) / m;
        }
    }
    Ok(total / n as f64)
}

pub fn silhouette(samples: &[BehaviorSample], assignment: &[usize]) -> Result<f64> {
    silhouette_from_matrix(&DistanceMatrix::new(samples)?, assignment)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Bits>,
    /// Sum of distances to the assigned centroid after each assignment step.
    pub objective: Vec<u64>,
    pub iterations: usize,
}

fn majority(samples: &[&Bits], len: usize) -> Bits {
    let mut counts = vec![0usize; len];
    for s in samples {
        for (w, word) in s.words.iter().enumerate() {
            let mut x = *word;
            while x != 0 {
                let b = x.trailing_zeros() as usize;
                counts[w * 64 + b] += 1;
                x &= x - 1;
            }
        }
    }
    let mut out = Bits::zeros(len);
    for (i, &c) in counts.iter().enumerate() {
        if 2 * c > samples.len() {
            out.set(i);
        }
    }
    out
}

/// Picks one of the distinct vectors among `candidates`; the choice depends
/// only on the set of distinct vectors and the RNG state.
fn pick_distinct(candidates: Vec<&Bits>, rng: &mut ChaCha8Rng) -> Bits {
    let mut distinct = candidates;
    distinct.sort();
    distinct.dedup();
    distinct[rng.random_range(0..distinct.len())].clone()
}

fn nearest(x: &Bits, centroids: &[Bits]) -> (usize, u32) {
    let mut best = (0, u32::MAX);
    for (c, mu) in centroids.iter().enumerate() {
        let d = x.hamming(mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn farthest_first(flat: &[&Bits], k: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<Bits> {
    let center = majority(flat, len);
    let mut mind: Vec<u32> = flat.iter().map(|b| b.hamming(&center)).collect();
    let mut centroids = Vec::with_capacity(k);
    for _ in 0..k {
        let best = *mind.iter().max().expect("non-empty");
        let tied: Vec<&Bits> = flat.iter().zip(&mind).filter(|(_, &d)| d == best).map(|(b, _)| *b).collect();
        let c = pick_distinct(tied, rng);
        for (m, b) in mind.iter_mut().zip(flat) {
            let d = b.hamming(&c);
            // The first pick measures from the global majority; replace it.
            *m = if centroids.is_empty() { d } else { (*m).min(d) };
        }
        centroids.push(c);
    }
    centroids
}

/// k-modes clustering under Hamming distance with majority centroids.
pub fn kmeans_hamming(samples: &[BehaviorSample], k: usize, seed: u64) -> Result<Clustering> {
    let flat: Vec<&Bits> = samples.iter().map(|s| &s.flat).collect();
    kmodes(&flat, k, seed)
}

pub fn kmodes(flat: &[&Bits], k: usize, seed: u64) -> Result<Clustering> {
    if k == 0 || k > flat.len() {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {} samples", flat.len())));
    }
    let len = flat[0].len();
    if let Some(b) = flat.iter().find(|b| b.len() != len) {
        return Err(Error::shape(len, b.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = farthest_first(flat, k, len, &mut rng);
    let mut assignment: Vec<usize> = Vec::new();
    let mut objective = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut next = Vec::with_capacity(flat.len());
        let mut cost = 0u64;
        for b in flat {
            let (c, d) = nearest(b, &centroids);
            next.push(c);
            cost += d as u64;
        }
        objective.push(cost);
        let stable = next == assignment;
        assignment = next;
        if stable {
            break;
        }
        let mut members: Vec<Vec<&Bits>> = vec![Vec::new(); k];
        for (b, &c) in flat.iter().zip(&assignment) {
            members[c].push(b);
        }
        for c in 0..k {
            if !members[c].is_empty() {
                centroids[c] = majority(&members[c], len);
            }
        }
        for c in 0..k {
            if members[c].is_empty() {
                let dist: Vec<u32> = flat.iter().zip(&assignment).map(|(b, &a)| b.hamming(&centroids[a])).collect();
                let best = *dist.iter().max().expect("non-empty");
                if best == 0 {
                    continue;
                }
                let tied: Vec<&Bits> = flat.iter().zip(&dist).filter(|(_, &d)| d == best).map(|(b, _)| *b).collect();
                centroids[c] = pick_distinct(tied, &mut rng);
            }
        }
    }
    Ok(Clustering {
        assignment,
        centroids,
        objective,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSelection {
    pub k_op: usize,
    /// `(k, S_k)` for `k = 2..=K_max`.
    pub curve: Vec<(usize, f64)>,
    pub clustering: Clustering,
}

/// Score for an assignment with fewer than two non-empty clusters.
pub const DEGENERATE_SILHOUETTE: f64 = -1.0;

/// Clusters for every `k` in `2..=k_max` and keeps the best silhouette;
/// ties go to the smaller `k`.
pub fn select_k(samples: &[BehaviorSample], k_max: usize, seed: u64) -> Result<KSelection> {
    if k_max < 2 {
        return Err(Error::InvalidArgument("K_max must be at least 2".into()));
    }
    if samples.len() < k_max {
        return Err(Error::InvalidArgument(format!("{} samples cannot form {k_max} clusters", samples.len())));
    }
    let dist = DistanceMatrix::new(samples)?;
    let mut best: Option<(f64, usize, Clustering)> = None;
    let mut curve = Vec::with_capacity(k_max - 1);
    for k in 2..=k_max {
        let cl = kmeans_hamming(samples, k, seed)?;
        let s = silhouette_from_matrix(&dist, &cl.assignment).unwrap_or(DEGENERATE_SILHOUETTE);
        log::debug!("k = {k}: silhouette {s:.4}");
        curve.push((k, s));
        if best.as_ref().is_none_or(|(bs, _, _)| s > *bs) {
            best = Some((s, k, cl));
        }
    }
    let (_, k_op, clustering) = best.expect("k_max >= 2");
    Ok(KSelection { k_op, curve, clustering })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfileSet {
    pub k_op: usize,
    pub centroids: Vec<Bits>,
    /// Sample indices of each cluster.
    pub members: Vec<Vec<usize>>,
    pub silhouette: Vec<(usize, f64)>,
}

impl UserProfileSet {
    pub fn bit_len(&self) -> usize {
        self.centroids.first().map(|c| c.len()).unwrap_or(0)
    }
}

/// Selects `k` and clusters all samples into profiles.
pub fn build_profiles(samples: &[BehaviorSample], k_max: usize, seed: u64) -> Result<UserProfileSet> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no behavior samples to profile".into()));
    }
    if k_max < 2 || samples.len() < 2 {
        log::warn!("fewer than two candidate users; using a single profile");
        let cl = kmeans_hamming(samples, 1, seed)?;
        return Ok(UserProfileSet {
            k_op: 1,
            centroids: cl.centroids,
            members: vec![(0..samples.len()).collect()],
            silhouette: Vec::new(),
        });
    }
    let sel = select_k(samples, k_max.min(samples.len()), seed)?;
    let mut members = vec![Vec::new(); sel.k_op];
    for (i, &c) in sel.clustering.assignment.iter().enumerate() {
        members[c].push(i);
    }
    Ok(UserProfileSet {
        k_op: sel.k_op,
        centroids: sel.clustering.centroids,
        members,
        silhouette: sel.curve,
    })
}

/// Re-clusters only samples starting in `(now - window, now]`.
pub fn refresh_profiles(samples: &[BehaviorSample], now: f64, window: f64, k_max: usize, seed: u64) -> Result<UserProfileSet> {
    let recent: Vec<BehaviorSample> =
        samples.iter().filter(|s| s.start_time > now - window && s.start_time <= now).cloned().collect();
    build_profiles(&recent, k_max, seed)
}

/// Nearest centroid by pure Hamming distance, lowest index on ties.
pub fn identify(sample: &BehaviorSample, profiles: &UserProfileSet) -> usize {
    nearest(&sample.flat, &profiles.centroids).0
}

/// Majority of per-window decisions; ties to the lowest cluster index.
pub fn identify_trace(samples: &[BehaviorSample], profiles: &UserProfileSet) -> Option<usize> {
    if samples.is_empty() {
        return None;
    }
    let mut votes = vec![0usize; profiles.centroids.len()];
    for s in samples {
        votes[identify(s, profiles)] += 1;
    }
    let mut best = 0;
    for (i, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = i;
        }
    }
    Some(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilesFile {
    pub k_op: usize,
    pub bit_len: usize,
    pub centroids: Vec<String>,
    pub member_counts: Vec<usize>,
    pub silhouette_curve: Vec<(usize, f64)>,
    /// Optional human-readable name per cluster.
    #[serde(default)]
    pub names: Vec<String>,
}

impl ProfilesFile {
    pub fn from_profiles(p: &UserProfileSet) -> Self {
        ProfilesFile {
            k_op: p.k_op,
            bit_len: p.bit_len(),
            centroids: p.centroids.iter().map(Bits::to_hex).collect(),
            member_counts: p.members.iter().map(Vec::len).collect(),
            silhouette_curve: p.silhouette.clone(),
            names: Vec::new(),
        }
    }

    pub fn to_profiles(&self) -> Result<UserProfileSet> {
        let centroids = self.centroids.iter().map(|h| Bits::from_hex(h, self.bit_len)).collect::<Result<Vec<_>>>()?;
        if centroids.len() != self.k_op {
            return Err(Error::Format(format!("{} centroids for k = {}", centroids.len(), self.k_op)));
        }
        Ok(UserProfileSet {
            k_op: self.k_op,
            centroids,
            members: vec![Vec::new(); self.k_op],
            silhouette: self.silhouette_curve.clone(),
        })
    }
}

/// Minimum-cost perfect assignment on a square cost matrix; returns the
/// column chosen for each row.
pub fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    assert!(cost.iter().all(|r| r.len() == n), "cost matrix must be square");
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Best one-to-one mapping from clusters to users maximizing the number of
/// samples whose cluster maps to their user. Unmatched clusters map to `None`.
pub fn match_clusters(assignment: &[usize], users: &[usize], k: usize, n_users: usize) -> Vec<Option<usize>> {
    let n = k.max(n_users);
    let mut overlap = vec![vec![0i64; n]; n];
    for (&c, &u) in assignment.iter().zip(users) {
        overlap[c][u] += 1;
    }
    let cost: Vec<Vec<i64>> = overlap.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let m = hungarian(&cost);
    (0..k).map(|c| (m[c] < n_users).then_some(m[c])).collect()
}

/// Share of samples whose cluster maps to their own user under
/// [`match_clusters`].
pub fn purity(assignment: &[usize], users: &[usize], k: usize, n_users: usize) -> f64 {
    if assignment.is_empty() {
        return 0.0;
    }
    let m = match_clusters(assignment, users, k, n_users);
    let hits = assignment.iter().zip(users).filter(|(&c, &u)| m[c] == Some(u)).count();
    hits as f64 / assignment.len() as f64
}
