//! Context synopsis memory: a fixed number of weighted cluster centroids over
//! every low-resolution feature map seen so far.
//!
//! Each arriving map is folded in by a warm-started weighted Lloyd run over
//! the `N + 1` points `{c_1..c_N, e}` with weights `{w_1..w_N, 1}`:
//!
//! * the initial centroids are the current ones, so in the first iteration
//!   every old centroid claims itself and the new map joins its nearest
//!   cluster;
//! * nearest-centroid ties go to the lowest cluster index;
//! * an emptied cluster is reseeded with the point farthest from its assigned
//!   centroid among clusters holding two or more points (ties: lowest point
//!   index);
//! * a centroid is `Σ w_i x_i / Σ w_i` accumulated in point order, except a
//!   single-point cluster, whose centroid is that point exactly;
//! * iteration stops after `max_iters` rounds or once an assignment repeats.
//!
//! A cluster's temporal position is carried as an integer sum of member frame
//! indices, so `position_sum / weight` is the exact mean member index.
//!
//! The state keeps the pairwise centroid distance matrix between updates.
//! Only centroids that move have their distances recomputed, which makes a
//! step cost `O(N·L)` per moved centroid instead of `O(N²·L)`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::types::{sq_dist, FeatureMap, Shape, Tier};

/// Weighted centroids plus per-cluster bookkeeping.
#[derive(Clone)]
pub struct ClusterState {
    shape: Shape,
    capacity: usize,
    steps: u64,
    centroids: Vec<Arc<[f64]>>,
    weights: Vec<u64>,
    position_sums: Vec<u64>,
    member_counts: Vec<u64>,
    /// Row-major `len × len` squared distances between centroids, when known.
    pairwise: Option<Arc<Vec<f64>>>,
}

/// What one update did: `assignment[i]` is the cluster that point `i` ended in,
/// where points `0..n` are the previous centroids and point `n` is the new map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateTrace {
    pub assignment: Vec<usize>,
    pub iterations: usize,
    /// Per resulting cluster: whether its centroid differs from the previous
    /// centroid at the same index (new clusters count as moved).
    pub moved: Vec<bool>,
    pub repairs: usize,
}

impl std::fmt::Debug for ClusterState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClusterState")
            .field("shape", &self.shape)
            .field("capacity", &self.capacity)
            .field("steps", &self.steps)
            .field("weights", &self.weights)
            .field("position_sums", &self.position_sums)
            .finish_non_exhaustive()
    }
}

impl PartialEq for ClusterState {
    fn eq(&self, other: &Self) -> bool {
        self.to_bytes() == other.to_bytes()
    }
}

impl ClusterState {
    pub fn new(shape: Shape, capacity: usize) -> Self {
        ClusterState {
            shape,
            capacity,
            steps: 0,
            centroids: Vec::new(),
            weights: Vec::new(),
            position_sums: Vec::new(),
            member_counts: Vec::new(),
            pairwise: Some(Arc::new(Vec::new())),
        }
    }

    /// Assembles a state from parts. Used by the alternative consolidation
    /// policies; the distance cache is rebuilt lazily on the next k-means step.
    pub fn from_parts(
        shape: Shape,
        capacity: usize,
        steps: u64,
        centroids: Vec<Arc<[f64]>>,
        weights: Vec<u64>,
        position_sums: Vec<u64>,
        member_counts: Vec<u64>,
    ) -> Result<Self> {
        let n = centroids.len();
        if weights.len() != n || position_sums.len() != n || member_counts.len() != n {
            return Err(Error::InvalidState("cluster field lengths differ".into()));
        }
        if n > capacity {
            return Err(Error::InvalidState(format!("{n} clusters exceed capacity {capacity}")));
        }
        if centroids.iter().any(|c| c.len() != shape.len()) {
            return Err(Error::InvalidState(format!("centroid length != {}", shape.len())));
        }
        if weights.contains(&0) {
            return Err(Error::InvalidState("zero-weight cluster".into()));
        }
        Ok(ClusterState {
            shape,
            capacity,
            steps,
            centroids,
            weights,
            position_sums,
            member_counts,
            pairwise: None,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    /// Frames consolidated so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k]
    }

    pub fn shared_centroid(&self, k: usize) -> Arc<[f64]> {
        self.centroids[k].clone()
    }

    pub fn centroids(&self) -> &[Arc<[f64]>] {
        &self.centroids
    }

    pub fn weights(&self) -> &[u64] {
        &self.weights
    }

    pub fn position_sums(&self) -> &[u64] {
        &self.position_sums
    }

    pub fn member_counts(&self) -> &[u64] {
        &self.member_counts
    }

    pub fn total_weight(&self) -> u64 {
        self.weights.iter().sum()
    }

    /// Mean member frame index of cluster `k`.
    pub fn position(&self, k: usize) -> f64 {
        self.position_sums[k] as f64 / self.weights[k] as f64
    }

    /// Mean member frame index of every cluster.
    pub fn positions(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.position(k)).collect()
    }

    /// Centroid `k` rounded to storage precision.
    pub fn centroid_map(&self, k: usize) -> FeatureMap {
        let values: Vec<f32> = self.centroids[k].iter().map(|&v| v as f32).collect();
        FeatureMap::new(k as u64, Tier::Low, self.shape, values).expect("centroids are finite")
    }

    fn check_input(&self, feature: &FeatureMap) -> Result<()> {
        feature.expect_tier(Tier::Low)?;
        if feature.shape() != self.shape {
            return Err(Error::ShapeMismatch(format!(
                "expected {}, got {}",
                self.shape,
                feature.shape()
            )));
        }
        Ok(())
    }

    /// Folds one low-resolution map into the memory and returns the new state.
    ///
    /// Below capacity the map becomes a singleton cluster; at capacity it is
    /// consolidated by weighted Lloyd iterations.
    pub fn update(&self, feature: &FeatureMap, max_iters: usize) -> Result<(ClusterState, UpdateTrace)> {
        self.check_input(feature)?;
        let mut next = self.clone();
        let trace = next.absorb(feature, max_iters)?;
        Ok((next, trace))
    }

    /// In-place variant of [`ClusterState::update`].
    pub fn absorb(&mut self, feature: &FeatureMap, max_iters: usize) -> Result<UpdateTrace> {
        self.check_input(feature)?;
        if max_iters == 0 {
            return Err(Error::InvalidConfig("kmeans_max_iters must be at least 1".into()));
        }
        let point: Arc<[f64]> = feature.to_f64().into();
        let index = feature.frame_index();
        self.steps += 1;
        if self.capacity == 0 {
            return Ok(UpdateTrace {
                assignment: vec![],
                iterations: 0,
                moved: vec![],
                repairs: 0,
            });
        }
        if self.len() < self.capacity {
            return Ok(self.push_singleton(point, index));
        }
        Ok(self.lloyd(point, index, max_iters))
    }

    fn push_singleton(&mut self, point: Arc<[f64]>, index: u64) -> UpdateTrace {
        let n = self.len();
        let pairwise = self.pairwise.take().filter(|p| p.len() == n * n);
        self.pairwise = pairwise.map(|old| {
            let row: Vec<f64> = self.centroids.iter().map(|c| sq_dist(c, &point)).collect();
            let m = n + 1;
            let mut grown = vec![0.0; m * m];
            for a in 0..n {
                grown[a * m..a * m + n].copy_from_slice(&old[a * n..a * n + n]);
                grown[a * m + n] = row[a];
                grown[n * m + a] = row[a];
            }
            Arc::new(grown)
        });
        self.centroids.push(point);
        self.weights.push(1);
        self.position_sums.push(index);
        self.member_counts.push(1);
        let mut moved = vec![false; n + 1];
        moved[n] = true;
        UpdateTrace {
            assignment: (0..=n).collect(),
            iterations: 0,
            moved,
            repairs: 0,
        }
    }

    fn pairwise_matrix(&mut self) -> Arc<Vec<f64>> {
        let n = self.len();
        if let Some(p) = &self.pairwise {
            if p.len() == n * n {
                return p.clone();
            }
        }
        let mut m = vec![0.0; n * n];
        for a in 0..n {
            for b in (a + 1)..n {
                let d = sq_dist(&self.centroids[a], &self.centroids[b]);
                m[a * n + b] = d;
                m[b * n + a] = d;
            }
        }
        let m = Arc::new(m);
        self.pairwise = Some(m.clone());
        m
    }

    fn lloyd(&mut self, new_point: Arc<[f64]>, new_index: u64, max_iters: usize) -> UpdateTrace {
        let n = self.len();
        let np = n + 1;
        let pairwise = self.pairwise_matrix();

        let mut points: Vec<Arc<[f64]>> = self.centroids.clone();
        points.push(new_point);
        let mut point_weights = self.weights.clone();
        point_weights.push(1);
        let mut point_pos = self.position_sums.clone();
        point_pos.push(new_index);
        let mut point_members = self.member_counts.clone();
        point_members.push(1);

        // dist[i * n + j]: point i to current centroid j.
        let mut dist = vec![0.0; np * n];
        for i in 0..n {
            dist[i * n..(i + 1) * n].copy_from_slice(&pairwise[i * n..(i + 1) * n]);
        }
        for j in 0..n {
            dist[n * n + j] = sq_dist(&points[n], &self.centroids[j]);
        }

        let mut centroids = self.centroids.clone();
        let mut members: Vec<Vec<usize>> = (0..n).map(|j| vec![j]).collect();
        let mut prev_assign: Option<Vec<usize>> = None;
        let mut iterations = 0;
        let mut repairs = 0;

        while iterations < max_iters {
            let mut assign = nearest_assignment(&dist, np, n);
            repairs += repair_empty(&mut assign, &dist, n);
            if prev_assign.as_ref() == Some(&assign) {
                break;
            }
            iterations += 1;
            let mut grouped: Vec<Vec<usize>> = vec![Vec::new(); n];
            for (i, &j) in assign.iter().enumerate() {
                grouped[j].push(i);
            }
            for j in 0..n {
                if grouped[j] == members[j] {
                    continue;
                }
                centroids[j] = weighted_mean(&grouped[j], &points, &point_weights);
                for i in 0..np {
                    dist[i * n + j] = sq_dist(&points[i], &centroids[j]);
                }
            }
            members = grouped;
            prev_assign = Some(assign);
        }

        let assignment = prev_assign.expect("at least one iteration runs");
        let moved: Vec<bool> = (0..n)
            .map(|j| !bits_equal(&centroids[j], &self.centroids[j]))
            .collect();

        let mut next_pairwise = vec![0.0; n * n];
        for a in 0..n {
            for b in (a + 1)..n {
                let d = match (moved[a], moved[b]) {
                    (false, false) => pairwise[a * n + b],
                    (false, true) => dist[a * n + b],
                    (true, false) => dist[b * n + a],
                    (true, true) => sq_dist(&centroids[a], &centroids[b]),
                };
                next_pairwise[a * n + b] = d;
                next_pairwise[b * n + a] = d;
            }
        }

        for j in 0..n {
            let group = &members[j];
            self.weights[j] = group.iter().map(|&i| point_weights[i]).sum();
            self.position_sums[j] = group.iter().map(|&i| point_pos[i]).sum();
            self.member_counts[j] = group.iter().map(|&i| point_members[i]).sum();
        }
        self.centroids = centroids;
        self.pairwise = Some(Arc::new(next_pairwise));

        UpdateTrace {
            assignment,
            iterations,
            moved,
            repairs,
        }
    }

    /// Canonical little-endian encoding; equal states encode to equal bytes.
    ///
    /// Layout: `"FVSC"`, version `u16`, grid_h/grid_w/dim `u32`, capacity,
    /// steps and cluster count `u64`, then per cluster weight, position sum
    /// and member count `u64` followed by the centroid as `f64`s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(46 + self.len() * (24 + 8 * self.shape.len()));
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        for v in [self.shape.grid_h, self.shape.grid_w, self.shape.dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.capacity as u64).to_le_bytes());
        out.extend_from_slice(&self.steps.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for k in 0..self.len() {
            out.extend_from_slice(&self.weights[k].to_le_bytes());
            out.extend_from_slice(&self.position_sums[k].to_le_bytes());
            out.extend_from_slice(&self.member_counts[k].to_le_bytes());
            for v in self.centroids[k].iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != STATE_MAGIC {
            return Err(Error::parse(0, None, "bad cluster-state magic"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != STATE_VERSION {
            return Err(Error::parse(4, None, format!("unsupported version {version}")));
        }
        let grid_h = r.u32()? as usize;
        let grid_w = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let shape = Shape::new(grid_h, grid_w, dim);
        let capacity = r.u64()? as usize;
        let steps = r.u64()?;
        let n = r.u64()? as usize;
        let mut weights = Vec::with_capacity(n);
        let mut sums = Vec::with_capacity(n);
        let mut counts = Vec::with_capacity(n);
        let mut centroids = Vec::with_capacity(n);
        for _ in 0..n {
            weights.push(r.u64()?);
            sums.push(r.u64()?);
            counts.push(r.u64()?);
            let mut c = Vec::with_capacity(shape.len());
            for _ in 0..shape.len() {
                c.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            centroids.push(Arc::from(c));
        }
        if r.pos != bytes.len() {
            return Err(Error::parse(r.pos as u64, None, "trailing bytes"));
        }
        ClusterState::from_parts(shape, capacity, steps, centroids, weights, sums, counts)
    }
}

const STATE_MAGIC: &[u8; 4] = b"FVSC";
const STATE_VERSION: u16 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(self.pos as u64, None, "unexpected end of cluster state"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Builds the initial memory from the first frames, one singleton per frame.
pub fn init(shape: Shape, capacity: usize, frames: &[FeatureMap]) -> Result<ClusterState> {
    if frames.len() > capacity {
        return Err(Error::InvalidState(format!(
            "{} initial frames exceed capacity {capacity}",
            frames.len()
        )));
    }
    let mut state = ClusterState::new(shape, capacity);
    for f in frames {
        state.absorb(f, 1)?;
    }
    Ok(state)
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn nearest_assignment(dist: &[f64], np: usize, n: usize) -> Vec<usize> {
    (0..np)
        .map(|i| {
            let row = &dist[i * n..(i + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if row[j] < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn repair_empty(assign: &mut [usize], dist: &[f64], n: usize) -> usize {
    let mut sizes = vec![0usize; n];
    for &j in assign.iter() {
        sizes[j] += 1;
    }
    let mut repairs = 0;
    for j in 0..n {
        if sizes[j] != 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, &c) in assign.iter().enumerate() {
            if sizes[c] < 2 {
                continue;
            }
            let d = dist[i * n + c];
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let (i, _) = far.expect("n + 1 points in n clusters leave a donor");
        sizes[assign[i]] -= 1;
        assign[i] = j;
        sizes[j] = 1;
        repairs += 1;
    }
    repairs
}

fn weighted_mean(group: &[usize], points: &[Arc<[f64]>], weights: &[u64]) -> Arc<[f64]> {
    if let [only] = group {
        return points[*only].clone();
    }
    let len = points[group[0]].len();
    let mut acc = vec![0.0f64; len];
    let mut total = 0.0f64;
    for &i in group {
        let w = weights[i] as f64;
        total += w;
        for (a, &x) in acc.iter_mut().zip(points[i].iter()) {
            *a += w * x;
        }
    }
    for a in acc.iter_mut() {
        *a /= total;
    }
    acc.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(index: u64, shape: Shape, values: Vec<f32>) -> FeatureMap {
        FeatureMap::new(index, Tier::Low, shape, values).unwrap()
    }

    const S2: Shape = Shape::new(1, 1, 2);

    #[test]
    fn init_singletons() {
        let frames = vec![map(0, S2, vec![0.0, 1.0]), map(1, S2, vec![2.0, 3.0])];
        let s = init(S2, 60, &frames).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.weights(), &[1, 1]);
        assert_eq!(s.positions(), vec![0.0, 1.0]);
        let empty = init(S2, 60, &[]).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn init_rejects_high_tier() {
        let f = FeatureMap::new(0, Tier::High, S2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(init(S2, 4, &[f]), Err(Error::TierMismatch { .. })));
    }

    #[test]
    fn coincident_point_joins_its_twin() {
        let s = init(S2, 2, &[map(0, S2, vec![0.0, 0.0]), map(1, S2, vec![1.0, 1.0])]).unwrap();
        let (next, trace) = s.update(&map(2, S2, vec![0.0, 0.0]), 10).unwrap();
        assert_eq!(trace.assignment, vec![0, 1, 0]);
        assert_eq!(next.weights(), &[2, 1]);
        assert_eq!(next.positions(), vec![1.0, 1.0]);
        assert_eq!(next.centroid(0), &[0.0, 0.0]);
        assert_eq!(next.centroid(1), &[1.0, 1.0]);
    }

    #[test]
    fn position_mean_of_members() {
        let s = init(S2, 2, &[map(2, S2, vec![0.0, 0.0]), map(9, S2, vec![5.0, 5.0])]).unwrap();
        let (next, _) = s.update(&map(4, S2, vec![0.1, 0.0]), 10).unwrap();
        assert_eq!(next.position(0), 3.0);
        assert_eq!(next.position(1), 9.0);
    }

    #[test]
    fn identical_stream_is_deterministic() {
        let mut s = ClusterState::new(S2, 3);
        for i in 0..50 {
            s.absorb(&map(i, S2, vec![1.0, 1.0]), 10).unwrap();
        }
        assert_eq!(s.len(), 3);
        assert_eq!(s.total_weight(), 50);
        // Duplicates claim the lowest index; repair hands the farthest (all at
        // distance 0) lowest-index donor to the emptied slot.
        let mut again = ClusterState::new(S2, 3);
        for i in 0..50 {
            again.absorb(&map(i, S2, vec![1.0, 1.0]), 10).unwrap();
        }
        assert_eq!(s.to_bytes(), again.to_bytes());
        assert!(s.weights().iter().all(|&w| w >= 1));
    }

    #[test]
    fn zero_capacity_drops_frames() {
        let mut s = ClusterState::new(S2, 0);
        s.absorb(&map(0, S2, vec![1.0, 1.0]), 10).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.steps(), 1);
    }

    #[test]
    fn bytes_round_trip() {
        let mut s = ClusterState::new(S2, 2);
        for (i, v) in [[0.0, 0.5], [3.0, 1.0], [0.25, 0.5], [2.5, 1.5]].iter().enumerate() {
            s.absorb(&map(i as u64, S2, v.to_vec()), 10).unwrap();
        }
        let back = ClusterState::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        let bytes = s.to_bytes();
        assert!(ClusterState::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn cached_distances_match_fresh_ones() {
        let shape = Shape::new(1, 1, 3);
        let mut rng = crate::rng::CounterRng::new(11, 0);
        let mut s = ClusterState::new(shape, 5);
        for i in 0..200 {
            let v: Vec<f32> = (0..3).map(|_| rng.next_normal() as f32).collect();
            s.absorb(&map(i, shape, v), 10).unwrap();
        }
        let cached = s.pairwise.clone().unwrap();
        s.pairwise = None;
        let fresh = s.pairwise_matrix();
        assert_eq!(*cached, *fresh);
    }
}
