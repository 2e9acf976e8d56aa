//! Alternative synopsis consolidation strategies behind one interface.
//!
//! All policies keep at most `capacity` items. Only k-means guarantees that a
//! centroid is the weighted mean of the frames it absorbed; neighbour drop
//! and uniform sampling discard frames, so their total weight is the number
//! of frames kept rather than the number seen.

use std::sync::Arc;

use log::warn;

use crate::config::{ClusteringPolicy, MemoryConfig};
use crate::csm::{ClusterState, UpdateTrace};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::types::{sq_dist, FeatureMap, Tier};

pub trait Consolidator: Send {
    fn policy(&self) -> ClusteringPolicy;

    /// Folds `feature` into `state`. K-means also reports which points landed
    /// in which cluster.
    fn consolidate(&mut self, state: &ClusterState, feature: &FeatureMap) -> Result<(ClusterState, Option<UpdateTrace>)>;

    /// Whether `Σ weights` equals the number of frames consolidated.
    fn conserves_weight(&self) -> bool {
        true
    }

    /// Copy of the policy's internal state, for replaying from a checkpoint.
    fn clone_box(&self) -> Box<dyn Consolidator>;
}

/// Builds the consolidator named by `config.clustering_policy`.
pub fn consolidator_for(config: &MemoryConfig, seed: u64) -> Box<dyn Consolidator> {
    match config.clustering_policy {
        ClusteringPolicy::KMeans => Box::new(KMeans {
            max_iters: config.kmeans_max_iters,
        }),
        ClusteringPolicy::Dbscan => Box::new(Dbscan::default()),
        ClusteringPolicy::Gmm => Box::new(Gmm {
            kmeans_iters: config.kmeans_max_iters,
            em_iters: 20,
        }),
        ClusteringPolicy::NeighborMerge => Box::new(NeighborMerge),
        ClusteringPolicy::NeighborDrop => Box::new(NeighborDrop { seed }),
        ClusteringPolicy::UniformSample => Box::new(UniformSample { stride: 1 }),
    }
}

fn check_low(state: &ClusterState, feature: &FeatureMap) -> Result<()> {
    if feature.tier() != Tier::Low {
        return Err(Error::TierMismatch {
            expected: Tier::Low,
            got: feature.tier(),
        });
    }
    if feature.shape() != state.shape() {
        return Err(Error::ShapeMismatch(format!("expected {}, got {}", state.shape(), feature.shape())));
    }
    Ok(())
}

/// Plain column form of a state, convenient for policies that restructure it.
#[derive(Clone)]
struct Items {
    centroids: Vec<Arc<[f64]>>,
    weights: Vec<u64>,
    sums: Vec<u64>,
    counts: Vec<u64>,
}

impl Items {
    fn of(state: &ClusterState) -> Self {
        Items {
            centroids: state.centroids().to_vec(),
            weights: state.weights().to_vec(),
            sums: state.position_sums().to_vec(),
            counts: state.member_counts().to_vec(),
        }
    }

    fn push(&mut self, feature: &FeatureMap) {
        self.centroids.push(feature.to_f64().into());
        self.weights.push(1);
        self.sums.push(feature.frame_index());
        self.counts.push(1);
    }

    fn len(&self) -> usize {
        self.centroids.len()
    }

    fn remove(&mut self, k: usize) {
        self.centroids.remove(k);
        self.weights.remove(k);
        self.sums.remove(k);
        self.counts.remove(k);
    }

    /// Merges `b` into `a` (weighted mean) and removes `b`.
    fn merge(&mut self, a: usize, b: usize) {
        let (wa, wb) = (self.weights[a] as f64, self.weights[b] as f64);
        let total = wa + wb;
        let merged: Vec<f64> = self.centroids[a]
            .iter()
            .zip(self.centroids[b].iter())
            .map(|(x, y)| (wa * x + wb * y) / total)
            .collect();
        self.centroids[a] = merged.into();
        self.weights[a] += self.weights[b];
        self.sums[a] += self.sums[b];
        self.counts[a] += self.counts[b];
        self.remove(b);
    }

    fn into_state(self, template: &ClusterState, steps: u64) -> Result<ClusterState> {
        ClusterState::from_parts(
            template.shape(),
            template.capacity(),
            steps,
            self.centroids,
            self.weights,
            self.sums,
            self.counts,
        )
    }
}

/// Groups weighted points into clusters with exact weighted-mean centroids.
fn regroup(points: &Items, groups: &[Vec<usize>]) -> Items {
    let mut out = Items {
        centroids: Vec::new(),
        weights: Vec::new(),
        sums: Vec::new(),
        counts: Vec::new(),
    };
    for g in groups.iter().filter(|g| !g.is_empty()) {
        let centroid: Arc<[f64]> = if let [only] = g.as_slice() {
            points.centroids[*only].clone()
        } else {
            let mut acc = vec![0.0f64; points.centroids[g[0]].len()];
            let mut total = 0.0;
            for &i in g {
                let w = points.weights[i] as f64;
                total += w;
                for (a, x) in acc.iter_mut().zip(points.centroids[i].iter()) {
                    *a += w * x;
                }
            }
            acc.iter_mut().for_each(|a| *a /= total);
            acc.into()
        };
        out.centroids.push(centroid);
        out.weights.push(g.iter().map(|&i| points.weights[i]).sum());
        out.sums.push(g.iter().map(|&i| points.sums[i]).sum());
        out.counts.push(g.iter().map(|&i| points.counts[i]).sum());
    }
    out
}

/// The default warm-started weighted Lloyd update.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub max_iters: usize,
}

impl Consolidator for KMeans {
    fn policy(&self) -> ClusteringPolicy {
        ClusteringPolicy::KMeans
    }

    fn clone_box(&self) -> Box<dyn Consolidator> {
        Box::new(self.clone())
    }

    fn consolidate(&mut self, state: &ClusterState, feature: &FeatureMap) -> Result<(ClusterState, Option<UpdateTrace>)> {
        let (next, trace) = state.update(feature, self.max_iters)?;
        Ok((next, Some(trace)))
    }
}

/// Keeps every `stride`-th frame, doubling the stride whenever memory fills
/// (older frames not on the new stride are dropped).
#[derive(Debug, Clone)]
pub struct UniformSample {
    pub stride: u64,
}

impl Consolidator for UniformSample {
    fn policy(&self) -> ClusteringPolicy {
        ClusteringPolicy::UniformSample
    }

    fn clone_box(&self) -> Box<dyn Consolidator> {
        Box::new(self.clone())
    }

    fn conserves_weight(&self) -> bool {
        false
    }

    fn consolidate(&mut self, state: &ClusterState, feature: &FeatureMap) -> Result<(ClusterState, Option<UpdateTrace>)> {
        check_low(state, feature)?;
        let t = feature.frame_index();
        let mut items = Items::of(state);
        if state.capacity() > 0 && t.is_multiple_of(self.stride) {
            if items.len() >= state.capacity() {
                self.stride *= 2;
                let stride = self.stride;
                let mut k = 0;
                while k < items.len() {
                    // Kept items are single frames, so the sum is the index.
                    if !items.sums[k].is_multiple_of(stride) {
                        items.remove(k);
                    } else {
                        k += 1;
                    }
                }
            }
            if t.is_multiple_of(self.stride) && items.len() < state.capacity() {
                items.push(feature);
            }
        }
        Ok((items.into_state(state, state.steps() + 1)?, None))
    }
}

/// Index of the most similar adjacent pair `(k, k + 1)`; ties go to lower `k`.
fn closest_adjacent(items: &Items) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..items.len() - 1 {
        let d = sq_dist(&items.centroids[k], &items.centroids[k + 1]);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Appends the new frame and, over capacity, merges the two most similar
/// temporally adjacent items.
#[derive(Debug, Clone, Copy)]
pub struct NeighborMerge;

impl Consolidator for NeighborMerge {
    fn policy(&self) -> ClusteringPolicy {
        ClusteringPolicy::NeighborMerge
    }

    fn clone_box(&self) -> Box<dyn Consolidator> {
        Box::new(*self)
    }

    fn consolidate(&mut self, state: &ClusterState, feature: &FeatureMap) -> Result<(ClusterState, Option<UpdateTrace>)> {
        check_low(state, feature)?;
        let mut items = Items::of(state);
        if state.capacity() > 0 {
            items.push(feature);
            if items.len() > state.capacity() {
                let k = closest_adjacent(&items);
                items.merge(k, k + 1);
            }
        }
        Ok((items.into_state(state, state.steps() + 1)?, None))
    }
}

/// Like [`NeighborMerge`], but keeps one of the pair at random and drops the
/// other unchanged.
#[derive(Debug, Clone, Copy)]
pub struct NeighborDrop {
    pub seed: u64,
}

impl Consolidator for NeighborDrop {
    fn policy(&self) -> ClusteringPolicy {
        ClusteringPolicy::NeighborDrop
    }

    fn clone_box(&self) -> Box<dyn Consolidator> {
        Box::new(*self)
    }

    fn conserves_weight(&self) -> bool {
        false
    }

    fn consolidate(&mut self, state: &ClusterState, feature: &FeatureMap) -> Result<(ClusterState, Option<UpdateTrace>)> {
        check_low(state, feature)?;
        let mut items = Items::of(state);
        if state.capacity() > 0 {
            items.push(feature);
            if items.len() > state.capacity() {
                let k = closest_adjacent(&items);
                let coin = CounterRng::at(self.seed, 0xD209, feature.frame_index()).below(2) as usize;
                items.remove(k + coin);
            }
        }
        Ok((items.into_state(state, state.steps() + 1)?, None))
    }
}

/// DBSCAN over the current items plus the new frame, then merged down to
/// capacity by size.
///
/// `eps` is half the median pairwise distance of the warm-up window (the
/// first `capacity` frames), fixed when memory first fills; `min_pts = 2`
/// counting the point itself. Noise points stay singletons. While over
/// capacity, the lightest cluster merges into its nearest neighbour.
#[derive(Debug, Clone, Default)]
pub struct Dbscan {
    pub eps: Option<f64>,
}

impl Dbscan {
    pub const MIN_PTS: usize = 2;

    fn warmup_eps(items: &Items) -> f64 {
        let mut d: Vec<f64> = Vec::new();
        for a in 0..items.len() {
            for b in (a + 1)..items.len() {
                d.push(sq_dist(&items.centroids[a], &items.centroids[b]).sqrt());
            }
        }
        if d.is_empty() {
            return 0.0;
        }
        d.sort_by(f64::total_cmp);
        let m = d.len();
        let median = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
        0.5 * median
    }
}

/// Cluster labels in discovery order; noise points get their own label.
pub fn dbscan_labels(points: &[Arc<[f64]>], eps: f64, min_pts: usize) -> Vec<usize> {
    let n = points.len();
    let eps2 = eps * eps;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| sq_dist(&points[i], &points[j]) <= eps2).collect())
        .collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for i in 0..n {
        if label[i].is_some() {
            continue;
        }
        label[i] = Some(next);
        if neighbors[i].len() >= min_pts {
            let mut stack: Vec<usize> = neighbors[i].clone();
            while let Some(j) = stack.pop() {
                if label[j].is_some() {
                    continue;
                }
                label[j] = Some(next);
                if neighbors[j].len() >= min_pts {
                    stack.extend(neighbors[j].iter().copied().filter(|&q| label[q].is_none()));
                }
            }
        }
        next += 1;
    }
    label.into_iter().map(|l| l.expect("every point labelled")).collect()
}

impl Consolidator for Dbscan {
    fn policy(&self) -> ClusteringPolicy {
        ClusteringPolicy::Dbscan
    }

    fn clone_box(&self) -> Box<dyn Consolidator> {
        Box::new(self.clone())
    }

    fn consolidate(&mut self, state: &ClusterState, feature: &FeatureMap) -> Result<(ClusterState, Option<UpdateTrace>)> {
        check_low(state, feature)?;
        let cap = state.capacity();
        let mut items = Items::of(state);
        if cap == 0 {
            return Ok((items.into_state(state, state.steps() + 1)?, None));
        }
        if items.len() < cap {
            items.push(feature);
            return Ok((items.into_state(state, state.steps() + 1)?, None));
        }
        let eps = *self.eps.get_or_insert_with(|| Self::warmup_eps(&items));
        items.push(feature);
        let labels = dbscan_labels(&items.centroids, eps, Self::MIN_PTS);
        let n_labels = labels.iter().max().map_or(0, |m| m + 1);
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_labels];
        for (i, &l) in labels.iter().enumerate() {
            groups[l].push(i);
        }
        let mut m = regroup(&items, &groups);
        while m.len() > cap {
            let w = &m.weights;
            let light = (0..m.len()).min_by(|&a, &b| w[a].cmp(&w[b]).then(a.cmp(&b))).unwrap();
            let target = (0..m.len())
                .filter(|&k| k != light)
                .min_by(|&a, &b| {
                    sq_dist(&m.centroids[light], &m.centroids[a])
                        .total_cmp(&sq_dist(&m.centroids[light], &m.centroids[b]))
                        .then(a.cmp(&b))
                })
                .unwrap();
            m.merge(target, light);
        }
        let merged = m.into_state(state, state.steps() + 1)?;
        Ok((merged, None))
    }
}

/// Diagonal-covariance Gaussian mixture fitted by EM to the weighted items
/// plus the new frame, initialised from the k-means update. Items are then
/// hard-assigned to their most responsible component. If the fit diverges the
/// previous state is kept and the frame is dropped.
#[derive(Debug, Clone)]
pub struct Gmm {
    pub kmeans_iters: usize,
    pub em_iters: usize,
}

/// Per-dimension variance floor, relative to the mean per-dimension variance
/// of the points, plus an absolute floor.
const GMM_REL_FLOOR: f64 = 1e-2;
const GMM_ABS_FLOOR: f64 = 1e-6;

/// Hard EM assignment of weighted points to `means.len()` diagonal
/// Gaussians. Returns `None` if the fit produced non-finite values.
pub fn gmm_assign(points: &[Arc<[f64]>], weights: &[u64], init_means: &[Arc<[f64]>], iters: usize) -> Option<Vec<usize>> {
    let n = points.len();
    let k = init_means.len();
    let len = points[0].len();
    let wsum: f64 = weights.iter().map(|&w| w as f64).sum();

    let mut global_mean = vec![0.0; len];
    for (p, &w) in points.iter().zip(weights) {
        for (g, x) in global_mean.iter_mut().zip(p.iter()) {
            *g += w as f64 * x;
        }
    }
    global_mean.iter_mut().for_each(|g| *g /= wsum);
    let mut global_var = 0.0;
    for (p, &w) in points.iter().zip(weights) {
        global_var += w as f64 * sq_dist(p, &global_mean);
    }
    let floor = GMM_ABS_FLOOR + GMM_REL_FLOOR * global_var / (wsum * len as f64);

    let mut means: Vec<Vec<f64>> = init_means.iter().map(|m| m.to_vec()).collect();
    let mut vars: Vec<Vec<f64>> = vec![vec![floor.max(global_var / (wsum * len as f64)); len]; k];
    let mut mix: Vec<f64> = vec![1.0 / k as f64; k];
    let mut resp = vec![0.0f64; n * k];

    let half_log_2pi = 0.5 * len as f64 * (2.0 * std::f64::consts::PI).ln();
    let e_step = |means: &[Vec<f64>], vars: &[Vec<f64>], mix: &[f64], resp: &mut [f64]| -> bool {
        // Per component: inverse variances and the log normalizer.
        let inv: Vec<Vec<f64>> = vars.iter().map(|v| v.iter().map(|x| 1.0 / x).collect()).collect();
        let norm: Vec<f64> = (0..k)
            .map(|j| mix[j].max(f64::MIN_POSITIVE).ln() - 0.5 * vars[j].iter().map(|v| v.ln()).sum::<f64>() - half_log_2pi)
            .collect();
        let mut ok = true;
        for i in 0..n {
            let row = &mut resp[i * k..(i + 1) * k];
            for j in 0..k {
                let mut q = 0.0;
                for ((x, m), iv) in points[i].iter().zip(&means[j]).zip(&inv[j]) {
                    let d = x - m;
                    q += d * d * iv;
                }
                row[j] = norm[j] - 0.5 * q;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                s += *r;
            }
            for r in row.iter_mut() {
                *r /= s;
            }
            ok &= row.iter().all(|r| r.is_finite());
        }
        ok
    };

    for _ in 0..iters {
        if !e_step(&means, &vars, &mix, &mut resp) {
            return None;
        }
        for j in 0..k {
            let nk: f64 = (0..n).map(|i| weights[i] as f64 * resp[i * k + j]).sum();
            if nk <= f64::MIN_POSITIVE {
                mix[j] = 0.0;
                continue;
            }
            mix[j] = nk / wsum;
            let mut m = vec![0.0; len];
            for i in 0..n {
                let r = weights[i] as f64 * resp[i * k + j];
                if r == 0.0 {
                    continue;
                }
                for (a, x) in m.iter_mut().zip(points[i].iter()) {
                    *a += r * x;
                }
            }
            m.iter_mut().for_each(|a| *a /= nk);
            let mut v = vec![0.0; len];
            for i in 0..n {
                let r = weights[i] as f64 * resp[i * k + j];
                if r == 0.0 {
                    continue;
                }
                for ((a, x), mu) in v.iter_mut().zip(points[i].iter()).zip(&m) {
                    let d = x - mu;
                    *a += r * d * d;
                }
            }
            v.iter_mut().for_each(|a| *a = (*a / nk).max(floor));
            means[j] = m;
            vars[j] = v;
        }
    }
    if !e_step(&means, &vars, &mix, &mut resp) {
        return None;
    }
    Some(
        (0..n)
            .map(|i| {
                let row = &resp[i * k..(i + 1) * k];
                let mut best = 0;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect(),
    )
}

impl Consolidator for Gmm {
    fn policy(&self) -> ClusteringPolicy {
        ClusteringPolicy::Gmm
    }

    fn clone_box(&self) -> Box<dyn Consolidator> {
        Box::new(self.clone())
    }

    fn consolidate(&mut self, state: &ClusterState, feature: &FeatureMap) -> Result<(ClusterState, Option<UpdateTrace>)> {
        check_low(state, feature)?;
        let (init, _) = state.update(feature, self.kmeans_iters)?;
        if state.len() < state.capacity() || state.capacity() == 0 {
            return Ok((init, None));
        }
        let mut items = Items::of(state);
        items.push(feature);
        let Some(assign) = gmm_assign(&items.centroids, &items.weights, init.centroids(), self.em_iters) else {
            warn!(
                "gmm fit diverged at frame {}; keeping the previous state",
                feature.frame_index()
            );
            let kept = Items::of(state).into_state(state, state.steps() + 1)?;
            return Ok((kept, None));
        };
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); init.len()];
        for (i, &j) in assign.iter().enumerate() {
            groups[j].push(i);
        }
        Ok((regroup(&items, &groups).into_state(state, state.steps() + 1)?, None))
    }
}
