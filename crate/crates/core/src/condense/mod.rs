//! Diffusion condensation over embedding vectors.
//!
//! Each iteration builds a Gaussian kernel `K(x_m, x_n) = exp(-|x_m - x_n|^2 / eps)`
//! over the current cluster representatives, normalizes it into a
//! row-stochastic diffusion operator `P = D^-1 K` (with each column weighted
//! by the number of original points the representative stands for), moves the
//! representatives with `X <- P X`, then merges every group closer than the
//! merge threshold (single linkage). Iterations that merge nothing widen the
//! kernel by `epsilon_growth`.

mod kmeans;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EmbeddingField;
use crate::real::Real;

pub use kmeans::{kmeans_detailed, spectral_kmeans, KMeansResult, KMEANS_MAX_ITERS};

/// Above this many pairwise entries the distance matrix goes through GEMM.
const DIRECT_DISTANCE_LIMIT: usize = 1 << 22;
const EPSILON_SUBSAMPLE: usize = 1024;

#[derive(Debug, Error)]
pub enum CondenseError {
    #[error("bandwidth must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
    #[error("invalid condensation config: {0}")]
    InvalidConfig(String),
    #[error("no convergence after {} iterations ({} clusters left)", .0.iterations, .0.final_clusters())]
    DidNotConverge(Box<CondensationTrace>),
    #[error("trace has no snapshots")]
    EmptyTrace,
    #[error("k = {k} exceeds the {n} available points")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
}

/// `n x dim` row-major matrix of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    n: usize,
    dim: usize,
    points: Vec<f64>,
}

impl PointCloud {
    pub fn new(n: usize, dim: usize, points: Vec<f64>) -> Result<Self, CondenseError> {
        if n == 0 || dim == 0 {
            return Err(CondenseError::InvalidCloud(format!("{n} points of dim {dim}")));
        }
        if points.len() != n * dim {
            return Err(CondenseError::InvalidCloud(format!("{} values for {n}x{dim}", points.len())));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(CondenseError::InvalidCloud("non-finite coordinate".into()));
        }
        Ok(Self { n, dim, points })
    }

    /// One point per pixel in row-major order, optionally scaled to unit length.
    pub fn from_field<T: Real>(field: &EmbeddingField<T>, normalize: bool) -> Result<Self, CondenseError> {
        let mut points: Vec<f64> = field.data.iter().map(|v| v.as_f64()).collect();
        if normalize {
            l2_normalize_rows(&mut points, field.dim);
        }
        Self::new(field.num_pixels(), field.dim, points)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    /// Copy with every row scaled to unit length (zero rows stay zero).
    pub fn normalized(&self) -> PointCloud {
        let mut points = self.points.clone();
        l2_normalize_rows(&mut points, self.dim);
        PointCloud { points, ..*self }
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn subset(&self, idx: &[usize]) -> PointCloud {
        let points = idx.iter().flat_map(|&i| self.point(i).iter().copied()).collect();
        PointCloud { n: idx.len(), dim: self.dim, points }
    }
}

pub(crate) fn l2_normalize_rows(points: &mut [f64], dim: usize) {
    for row in points.chunks_exact_mut(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnapshotPolicy {
    EveryIteration,
    /// Record whenever clusters merge, plus every `every`-th iteration.
    OnMergeEvents { every: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CondenseConfig {
    /// Initial bandwidth; `None` uses the median pairwise squared distance.
    pub epsilon0: Option<f64>,
    pub epsilon_growth: f64,
    /// Merge distance; `None` uses `1e-3` times the initial diameter.
    pub merge_threshold: Option<f64>,
    pub max_iters: usize,
    pub snapshot_policy: SnapshotPolicy,
    /// Run on every point regardless of size.
    pub exact: bool,
    /// Point budget when not exact; the rest follow their nearest sampled point.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        Self {
            epsilon0: None,
            epsilon_growth: 2.0,
            merge_threshold: None,
            max_iters: 500,
            snapshot_policy: SnapshotPolicy::OnMergeEvents { every: 10 },
            exact: false,
            max_points: 4096,
            seed: 0,
        }
    }
}

impl CondenseConfig {
    pub fn validate(&self) -> Result<(), CondenseError> {
        let bad = |m: String| Err(CondenseError::InvalidConfig(m));
        if let Some(e) = self.epsilon0 {
            if !(e > 0.0) {
                return Err(CondenseError::NonPositiveEpsilon(e));
            }
        }
        if !(self.epsilon_growth > 1.0) {
            return bad(format!("epsilon_growth {} must exceed 1", self.epsilon_growth));
        }
        if let Some(t) = self.merge_threshold {
            if !(t > 0.0) {
                return bad(format!("merge_threshold {t} must be positive"));
            }
        }
        if self.max_points == 0 {
            return bad("max_points must be positive".into());
        }
        if let SnapshotPolicy::OnMergeEvents { every: 0 } = self.snapshot_policy {
            return bad("snapshot interval must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub num_clusters: usize,
    /// Cluster id of every input point.
    pub assignment: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub iteration: usize,
    pub children: Vec<u32>,
    pub parent: u32,
}

/// Lifetime of one cluster id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub id: u32,
    pub born: usize,
    pub died: Option<usize>,
    pub size: usize,
    /// Iterations the cluster stayed intact: `died - born`, or up to the last
    /// iteration for survivors.
    pub persistence: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensationTrace {
    pub num_points: usize,
    /// Diffusion iterations performed.
    pub iterations: usize,
    pub converged: bool,
    pub epsilon0: f64,
    pub epsilon_final: f64,
    pub merge_threshold: f64,
    pub snapshots: Vec<Snapshot>,
    pub merges: Vec<MergeEvent>,
    /// Indexed by cluster id.
    pub clusters: Vec<ClusterRecord>,
    /// `(iteration, clusters remaining)` after every iteration, starting at 0.
    pub cluster_counts: Vec<(usize, usize)>,
    /// Largest `|row sum - 1|` over every operator applied.
    pub max_row_sum_error: f64,
    /// Largest per-coordinate range of the representatives after every iteration.
    pub spreads: Vec<f64>,
}

impl CondensationTrace {
    pub fn final_clusters(&self) -> usize {
        self.cluster_counts.last().map_or(0, |c| c.1)
    }

    pub fn persistence(&self, id: u32) -> usize {
        self.clusters[id as usize].persistence
    }

    /// Everything but the per-point assignments.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "num_points": self.num_points,
            "iterations": self.iterations,
            "converged": self.converged,
            "epsilon0": self.epsilon0,
            "epsilon_final": self.epsilon_final,
            "merge_threshold": self.merge_threshold,
            "cluster_counts": self.cluster_counts,
            "snapshots": self.snapshots.iter().map(|s| serde_json::json!({
                "iteration": s.iteration, "num_clusters": s.num_clusters
            })).collect::<Vec<_>>(),
            "merges": self.merges,
            "persistence": self.clusters.iter().filter(|c| c.size > 0).collect::<Vec<_>>(),
        })
    }
}

/// Squared Euclidean distances between all rows of `x` (`m x dim`).
fn pairwise_sq(x: &[f64], m: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((m, m));
    if m * m * dim <= DIRECT_DISTANCE_LIMIT {
        for a in 0..m {
            let xa = &x[a * dim..(a + 1) * dim];
            for b in (a + 1)..m {
                let d: f64 = xa.iter().zip(&x[b * dim..(b + 1) * dim]).map(|(p, q)| (p - q) * (p - q)).sum();
                out[[a, b]] = d;
                out[[b, a]] = d;
            }
        }
        return out;
    }
    let xv = ArrayView2::from_shape((m, dim), x).expect("point matrix");
    general_mat_mul(-2.0, &xv, &xv.t(), 0.0, &mut out);
    let norms: Vec<f64> = x.chunks_exact(dim).map(|r| r.iter().map(|v| v * v).sum()).collect();
    for a in 0..m {
        for b in 0..m {
            out[[a, b]] = if a == b { 0.0 } else { (out[[a, b]] + norms[a] + norms[b]).max(0.0) };
        }
    }
    out
}

/// Turn squared distances into the weighted operator in place; returns the
/// largest deviation of a row sum from 1.
fn operator_in_place(dist: &mut Array2<f64>, weights: &[f64], eps: f64) -> f64 {
    let mut worst = 0.0f64;
    for mut row in dist.rows_mut() {
        let mut degree = 0.0;
        for (v, &w) in row.iter_mut().zip(weights) {
            *v = (-*v / eps).exp() * w;
            degree += *v;
        }
        row.iter_mut().for_each(|v| *v /= degree);
        worst = worst.max((row.sum() - 1.0).abs());
    }
    worst
}

/// Gaussian kernel `K` and diffusion operator `P = D^-1 K` over `x`.
pub fn diffusion_operator(x: &PointCloud, eps: f64) -> Result<(Array2<f64>, Array2<f64>), CondenseError> {
    if !(eps > 0.0) {
        return Err(CondenseError::NonPositiveEpsilon(eps));
    }
    let mut k = pairwise_sq(&x.points, x.n, x.dim);
    k.mapv_inplace(|d| (-d / eps).exp());
    let mut p = k.clone();
    for mut row in p.rows_mut() {
        let degree = row.sum();
        row.mapv_inplace(|v| v / degree);
    }
    Ok((k, p))
}

/// Median pairwise squared distance over an evenly strided subsample.
pub fn median_sq_distance(x: &PointCloud) -> f64 {
    let stride = x.n.div_ceil(EPSILON_SUBSAMPLE).max(1);
    let idx: Vec<usize> = (0..x.n).step_by(stride).collect();
    let mut d = Vec::with_capacity(idx.len() * idx.len() / 2);
    for (i, &a) in idx.iter().enumerate() {
        for &b in &idx[i + 1..] {
            d.push(x.point(a).iter().zip(x.point(b)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn find(&mut self, mut a: usize) -> usize {
        while self.0[a] != a {
            self.0[a] = self.0[self.0[a]];
            a = self.0[a];
        }
        a
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Mutable state of a run: representatives and their bookkeeping.
struct State {
    dim: usize,
    x: Vec<f64>,
    weights: Vec<f64>,
    ids: Vec<u32>,
    /// Representative index of each condensed point.
    owner: Vec<usize>,
    clusters: Vec<ClusterRecord>,
    merges: Vec<MergeEvent>,
}

impl State {
    fn m(&self) -> usize {
        self.ids.len()
    }

    /// Single-linkage merge of representatives closer than `threshold`.
    /// Returns whether anything merged.
    fn merge(&mut self, dist: &Array2<f64>, threshold: f64, iteration: usize) -> bool {
        let m = self.m();
        let limit = threshold * threshold;
        let mut sets = DisjointSet((0..m).collect());
        let mut any = false;
        for a in 0..m {
            for b in (a + 1)..m {
                if dist[[a, b]] < limit {
                    sets.union(a, b);
                    any = true;
                }
            }
        }
        if !any {
            return false;
        }
        let roots: Vec<usize> = (0..m).map(|a| sets.find(a)).collect();
        let mut new_index = vec![usize::MAX; m];
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (a, &r) in roots.iter().enumerate() {
            if new_index[r] == usize::MAX {
                new_index[r] = groups.len();
                groups.push(Vec::new());
            }
            groups[new_index[r]].push(a);
        }
        let dim = self.dim;
        let mut x = Vec::with_capacity(groups.len() * dim);
        let mut weights = Vec::with_capacity(groups.len());
        let mut ids = Vec::with_capacity(groups.len());
        for g in &groups {
            let total: f64 = g.iter().map(|&a| self.weights[a]).sum();
            let mut centroid = vec![0.0; dim];
            for &a in g {
                let w = self.weights[a] / total;
                centroid.iter_mut().zip(&self.x[a * dim..(a + 1) * dim]).for_each(|(c, v)| *c += w * v);
            }
            x.extend_from_slice(&centroid);
            weights.push(total);
            if g.len() == 1 {
                ids.push(self.ids[g[0]]);
            } else {
                let parent = self.clusters.len() as u32;
                let children: Vec<u32> = g.iter().map(|&a| self.ids[a]).collect();
                for &c in &children {
                    let rec = &mut self.clusters[c as usize];
                    rec.died = Some(iteration);
                    rec.persistence = iteration - rec.born;
                }
                self.clusters.push(ClusterRecord {
                    id: parent,
                    born: iteration,
                    died: None,
                    size: total.round() as usize,
                    persistence: 0,
                });
                self.merges.push(MergeEvent { iteration, children, parent });
                ids.push(parent);
            }
        }
        for o in &mut self.owner {
            *o = new_index[roots[*o]];
        }
        self.x = x;
        self.weights = weights;
        self.ids = ids;
        true
    }

    fn assignment(&self) -> Vec<u32> {
        self.owner.iter().map(|&r| self.ids[r]).collect()
    }

    fn spread(&self) -> f64 {
        let dim = self.dim;
        (0..dim)
            .map(|j| {
                let col = self.x.iter().skip(j).step_by(dim);
                let lo = col.clone().copied().fold(f64::INFINITY, f64::min);
                let hi = col.copied().fold(f64::NEG_INFINITY, f64::max);
                hi - lo
            })
            .fold(0.0, f64::max)
    }
}

fn nearest_rows(from: &PointCloud, to: &PointCloud) -> Vec<usize> {
    let dim = from.dim;
    let to_norms: Vec<f64> = to.points.chunks_exact(dim).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut out = Vec::with_capacity(from.n);
    for chunk_start in (0..from.n).step_by(1024) {
        let rows = (from.n - chunk_start).min(1024);
        let a = ArrayView2::from_shape((rows, dim), &from.points[chunk_start * dim..(chunk_start + rows) * dim])
            .expect("chunk");
        let b = ArrayView2::from_shape((to.n, dim), &to.points[..]).expect("targets");
        let mut dots = Array2::<f64>::zeros((rows, to.n));
        general_mat_mul(1.0, &a, &b.t(), 0.0, &mut dots);
        for row in dots.rows() {
            let best = row
                .iter()
                .zip(&to_norms)
                .map(|(&d, &n)| n - 2.0 * d)
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .expect("non-empty targets");
            out.push(best);
        }
    }
    out
}

/// Run condensation to a single cluster (or `max_iters`).
///
/// Returns [`CondenseError::DidNotConverge`] carrying the partial trace when
/// the iteration budget runs out first.
pub fn condense_run(x: &PointCloud, cfg: &CondenseConfig) -> Result<CondensationTrace, CondenseError> {
    cfg.validate()?;
    let n = x.n;

    // Points that take part in the diffusion; the rest follow a nearest member.
    let (active, follow): (PointCloud, Option<Vec<usize>>) = if cfg.exact || n <= cfg.max_points {
        (x.clone(), None)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = index::sample(&mut rng, n, cfg.max_points).into_vec();
        idx.sort_unstable();
        let sub = x.subset(&idx);
        let nearest = nearest_rows(x, &sub);
        (sub, Some(nearest))
    };
    let m0 = active.n;

    let epsilon0 = match cfg.epsilon0 {
        Some(e) => e,
        None => {
            let med = median_sq_distance(&active);
            if med > 0.0 {
                med
            } else {
                1.0
            }
        }
    };

    let mut state = State {
        dim: active.dim,
        x: active.points.clone(),
        weights: vec![1.0; m0],
        ids: (0..m0 as u32).collect(),
        owner: (0..m0).collect(),
        clusters: (0..m0 as u32)
            .map(|id| ClusterRecord { id, born: 0, died: None, size: 1, persistence: 0 })
            .collect(),
        merges: Vec::new(),
    };

    let mut dist = pairwise_sq(&state.x, m0, state.dim);
    let diameter = dist.iter().copied().fold(0.0, f64::max).sqrt();
    let threshold = cfg.merge_threshold.unwrap_or(if diameter > 0.0 { 1e-3 * diameter } else { f64::MIN_POSITIVE });

    let expand = |assign: Vec<u32>| -> Vec<u32> {
        match &follow {
            None => assign,
            Some(nearest) => nearest.iter().map(|&s| assign[s]).collect(),
        }
    };

    let mut snapshots = Vec::new();
    let mut cluster_counts = Vec::new();
    let mut spreads = Vec::new();
    if state.merge(&dist, threshold, 0) {
        dist = pairwise_sq(&state.x, state.m(), state.dim);
    }
    snapshots.push(Snapshot { iteration: 0, num_clusters: state.m(), assignment: expand(state.assignment()) });
    cluster_counts.push((0, state.m()));

    let mut eps = epsilon0;
    let mut max_row_err = 0.0f64;
    let mut t = 0;
    while state.m() > 1 && t < cfg.max_iters {
        t += 1;
        let m = state.m();
        max_row_err = max_row_err.max(operator_in_place(&mut dist, &state.weights, eps));
        let xv = ArrayView2::from_shape((m, state.dim), &state.x[..]).expect("representatives");
        let mut next = Array2::<f64>::zeros((m, state.dim));
        general_mat_mul(1.0, &dist, &xv, 0.0, &mut next);
        state.x = next.into_raw_vec_and_offset().0;
        spreads.push(state.spread());

        dist = pairwise_sq(&state.x, m, state.dim);
        let merged = state.merge(&dist, threshold, t);
        if merged {
            dist = pairwise_sq(&state.x, state.m(), state.dim);
        } else {
            eps *= cfg.epsilon_growth;
        }
        cluster_counts.push((t, state.m()));
        let record = match cfg.snapshot_policy {
            SnapshotPolicy::EveryIteration => true,
            SnapshotPolicy::OnMergeEvents { every } => merged || t % every == 0 || state.m() == 1,
        };
        if record {
            snapshots.push(Snapshot { iteration: t, num_clusters: state.m(), assignment: expand(state.assignment()) });
        }
    }
    if snapshots.last().map(|s| s.iteration) != Some(t) {
        snapshots.push(Snapshot { iteration: t, num_clusters: state.m(), assignment: expand(state.assignment()) });
    }
    for &id in &state.ids {
        let rec = &mut state.clusters[id as usize];
        rec.persistence = t - rec.born;
    }
    let converged = state.m() == 1;
    let trace = CondensationTrace {
        num_points: n,
        iterations: t,
        converged,
        epsilon0,
        epsilon_final: eps,
        merge_threshold: threshold,
        snapshots,
        merges: state.merges,
        clusters: state.clusters,
        cluster_counts,
        max_row_sum_error: max_row_err,
        spreads,
    };
    if converged {
        Ok(trace)
    } else {
        Err(CondenseError::DidNotConverge(Box::new(trace)))
    }
}

/// Single label map stacking clusters by persistence.
///
/// Every cluster seen in a snapshot with at least `min_clusters` clusters is
/// painted onto its points in ascending persistence order (later-born first
/// on ties), so each point ends up with its most persistent containing
/// cluster. Output ids are dense, numbered by first appearance in point order.
pub fn persistent_structures(trace: &CondensationTrace, min_clusters: usize) -> Result<Vec<u32>, CondenseError> {
    let first = trace.snapshots.first().ok_or(CondenseError::EmptyTrace)?;
    let mut eligible: Vec<&Snapshot> = trace.snapshots.iter().filter(|s| s.num_clusters >= min_clusters).collect();
    if eligible.is_empty() {
        eligible.push(first);
    }
    let rank = |id: u32| {
        let rec = &trace.clusters[id as usize];
        (rec.persistence, rec.born)
    };
    let mut best: Vec<u32> = eligible[0].assignment.clone();
    for snap in &eligible[1..] {
        for (b, &id) in best.iter_mut().zip(&snap.assignment) {
            if id != *b && rank(id) > rank(*b) {
                *b = id;
            }
        }
    }
    Ok(densify(&best))
}

/// Relabel ids to `0..k` by order of first appearance.
pub fn densify(ids: &[u32]) -> Vec<u32> {
    let mut map = std::collections::HashMap::new();
    ids.iter()
        .map(|&id| {
            let next = map.len() as u32;
            *map.entry(id).or_insert(next)
        })
        .collect()
}
