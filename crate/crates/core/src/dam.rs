//! Detail augmentation memory: high-resolution maps of key frames found by
//! retrieval against the largest synopsis clusters.
//!
//! Anchors are visited in rank order. For each anchor the frame minimizing the
//! policy's key is taken (ties: lowest frame index), skipping frames already
//! taken by a higher-ranked anchor so no frame is stored twice.
//!
//! [`Retriever`] keeps, per cluster slot, the `n_dam` best frames seen so far
//! and how far into the stream it has scanned. The cache stays valid while the
//! anchor is bit-identical; a moved anchor triggers a full rescan. With at
//! most `n_dam - 1` frames excluded, the best remaining frame is always in a
//! list of `n_dam`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bank::FeatureBank;
use crate::config::{MemoryConfig, RetrievalPolicy, SelectionPolicy};
use crate::csm::ClusterState;
use crate::error::{Error, Result};
use crate::types::{sq_dist_f32, FeatureMap, Tier};

/// Retrieval knobs taken from the memory configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub n_dam: usize,
    pub retrieval: RetrievalPolicy,
    pub selection: SelectionPolicy,
}

impl From<&MemoryConfig> for PolicyConfig {
    fn from(c: &MemoryConfig) -> Self {
        PolicyConfig {
            n_dam: c.n_dam,
            retrieval: c.retrieval_policy,
            selection: c.selection_policy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DamEntry {
    pub frame_index: u64,
    /// Cluster slot used as anchor; `None` for uniform sampling.
    pub anchor_cluster: Option<usize>,
    pub anchor_rank: usize,
    /// The policy's key at selection: squared distance, negated cosine
    /// similarity, or temporal gap.
    pub distance: f64,
    pub feature: FeatureMap,
}

impl DamEntry {
    /// Temporal position of a key frame is its frame index.
    pub fn position(&self) -> u64 {
        self.frame_index
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DamState {
    pub entries: Vec<DamEntry>,
}

impl DamState {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frame_indices(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.frame_index).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RetrievalStats {
    pub frames_scanned: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

/// Cluster indices by weight, largest first; equal weights keep index order.
pub fn rank_clusters(state: &ClusterState) -> Vec<usize> {
    let w = state.weights();
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].cmp(&w[a]).then(a.cmp(&b)));
    idx
}

/// The anchor clusters, in the order they claim frames.
pub fn select_anchors(state: &ClusterState, selection: SelectionPolicy, k: usize) -> Vec<usize> {
    let n = state.len();
    let k = k.min(n);
    match selection {
        SelectionPolicy::TopKLargest => rank_clusters(state).into_iter().take(k).collect(),
        SelectionPolicy::TopKSmallest => {
            let w = state.weights();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| w[a].cmp(&w[b]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        }
        SelectionPolicy::UniformK => {
            let ranked = rank_clusters(state);
            (0..k).map(|z| ranked[z * n / k]).collect()
        }
    }
}

/// Evenly spaced frame indices `⌊z·t/k⌋`.
pub fn uniform_frames(frames: u64, k: usize) -> Vec<u64> {
    let k = (k as u64).min(frames);
    (0..k).map(|z| z * frames / k).collect()
}

/// Cosine similarity key (negated so smaller is better). A zero-norm vector
/// has similarity 0.
pub fn cosine_key(anchor: &[f64], anchor_norm: f64, frame: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut nf = 0.0f64;
    for (a, &b) in anchor.iter().zip(frame) {
        let b = f64::from(b);
        dot += a * b;
        nf += b * b;
    }
    let denom = anchor_norm * nf.sqrt();
    if denom == 0.0 {
        return -0.0;
    }
    -(dot / denom)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
enum AnchorKey {
    Feature(Arc<[f64]>),
    Cosine(Arc<[f64]>),
}

impl AnchorKey {
    fn same_anchor(&self, other: &AnchorKey) -> bool {
        fn eq(a: &Arc<[f64]>, b: &Arc<[f64]>) -> bool {
            Arc::ptr_eq(a, b) || (a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()))
        }
        match (self, other) {
            (AnchorKey::Feature(a), AnchorKey::Feature(b)) => eq(a, b),
            (AnchorKey::Cosine(a), AnchorKey::Cosine(b)) => eq(a, b),
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
struct CacheEntry {
    key: AnchorKey,
    anchor_norm: f64,
    cap: usize,
    scanned: u64,
    /// Best `(key, frame)` pairs ascending, at most `cap` long.
    best: Vec<(f64, u64)>,
}

fn better(a: (f64, u64), b: (f64, u64)) -> bool {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).is_lt()
}

fn offer(best: &mut Vec<(f64, u64)>, cap: usize, cand: (f64, u64)) {
    if best.len() == cap && !better(cand, *best.last().unwrap()) {
        return;
    }
    let pos = best.partition_point(|&x| better(x, cand));
    best.insert(pos, cand);
    best.truncate(cap);
}

/// Incremental key-frame retrieval with per-anchor caches.
#[derive(Debug, Clone)]
pub struct Retriever {
    policy: PolicyConfig,
    cache: Vec<Option<CacheEntry>>,
    stats: RetrievalStats,
}

impl Retriever {
    pub fn new(policy: PolicyConfig) -> Self {
        Retriever {
            policy,
            cache: Vec::new(),
            stats: RetrievalStats::default(),
        }
    }

    pub fn policy(&self) -> PolicyConfig {
        self.policy
    }

    /// Counters accumulated since construction.
    pub fn stats(&self) -> RetrievalStats {
        self.stats
    }

    /// Selects key frames among frames `0..frames` for the given cluster state.
    pub fn retrieve(
        &mut self,
        state: &ClusterState,
        low: &FeatureBank,
        high: &FeatureBank,
        frames: u64,
    ) -> Result<DamState> {
        if low.tier() != Tier::Low || high.tier() != Tier::High {
            return Err(Error::BankIntegrity("bank tiers swapped".into()));
        }
        if low.len() < frames {
            return Err(Error::BankIntegrity(format!(
                "low-res bank holds {} frames, snapshot needs {frames}",
                low.len()
            )));
        }
        if low.shape() != state.shape() && !state.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "cluster shape {} vs low bank {}",
                state.shape(),
                low.shape()
            )));
        }
        let picks = self.pick_frames(state, low, frames)?;
        let mut entries = Vec::with_capacity(picks.len());
        for (rank, (anchor, frame, key)) in picks.into_iter().enumerate() {
            let feature = high.read(frame).map_err(|e| match e {
                Error::NotFound { index, count } => Error::BankIntegrity(format!(
                    "key frame {index} missing from high-res bank ({count} frames)"
                )),
                other => other,
            })?;
            entries.push(DamEntry {
                frame_index: frame,
                anchor_cluster: anchor,
                anchor_rank: rank,
                distance: key,
                feature,
            });
        }
        Ok(DamState { entries })
    }

    /// `(anchor, frame, key)` per selected key frame.
    fn pick_frames(
        &mut self,
        state: &ClusterState,
        low: &FeatureBank,
        frames: u64,
    ) -> Result<Vec<(Option<usize>, u64, f64)>> {
        let k = self.policy.n_dam.min(state.len());
        if k == 0 || frames == 0 {
            return Ok(Vec::new());
        }
        if self.policy.retrieval == RetrievalPolicy::Uniform {
            return Ok(uniform_frames(frames, k).into_iter().map(|f| (None, f, 0.0)).collect());
        }
        let anchors = select_anchors(state, self.policy.selection, k);
        let mut taken: Vec<u64> = Vec::with_capacity(anchors.len());
        let mut out = Vec::with_capacity(anchors.len());
        for &cluster in &anchors {
            let candidates = match self.policy.retrieval {
                RetrievalPolicy::TemporalCentric => temporal_candidates(state.position(cluster), frames, k),
                _ => self.scan_candidates(state, cluster, low, frames, k)?,
            };
            let (key, frame) = candidates
                .into_iter()
                .find(|(_, f)| !taken.contains(f))
                .ok_or_else(|| Error::InvalidState(format!("no free frame for anchor {cluster}")))?;
            taken.push(frame);
            out.push((Some(cluster), frame, key));
        }
        Ok(out)
    }

    fn scan_candidates(
        &mut self,
        state: &ClusterState,
        cluster: usize,
        low: &FeatureBank,
        frames: u64,
        cap: usize,
    ) -> Result<Vec<(f64, u64)>> {
        let centroid = state.shared_centroid(cluster);
        let key = match self.policy.retrieval {
            RetrievalPolicy::Cosine => AnchorKey::Cosine(centroid),
            _ => AnchorKey::Feature(centroid),
        };
        if self.cache.len() < state.len() {
            self.cache.resize(state.len(), None);
        }
        let slot = &mut self.cache[cluster];
        let reusable = slot
            .as_ref()
            .is_some_and(|e| e.cap == cap && e.scanned <= frames && e.key.same_anchor(&key));
        if reusable {
            self.stats.cache_hits += 1;
        } else {
            self.stats.cache_misses += 1;
            let anchor_norm = match &key {
                AnchorKey::Cosine(c) => norm(c),
                AnchorKey::Feature(_) => 0.0,
            };
            *slot = Some(CacheEntry {
                key,
                anchor_norm,
                cap,
                scanned: 0,
                best: Vec::with_capacity(cap + 1),
            });
        }
        let entry = slot.as_mut().expect("cache slot filled above");
        for i in entry.scanned..frames {
            let k = low.with_values(i, |v| match &entry.key {
                AnchorKey::Feature(c) => sq_dist_f32(c, v),
                AnchorKey::Cosine(c) => cosine_key(c, entry.anchor_norm, v),
            })?;
            offer(&mut entry.best, cap, (k, i));
        }
        self.stats.frames_scanned += frames - entry.scanned;
        entry.scanned = frames;
        Ok(entry.best.clone())
    }
}

/// The `cap` frame indices nearest to `position`, ordered by `(|i - p|, i)`.
fn temporal_candidates(position: f64, frames: u64, cap: usize) -> Vec<(f64, u64)> {
    let last = frames - 1;
    let center = position.floor().max(0.0).min(last as f64) as u64;
    let lo = center.saturating_sub(cap as u64);
    let hi = (center + cap as u64 + 1).min(last);
    let mut best = Vec::with_capacity(cap + 1);
    for i in lo..=hi {
        offer(&mut best, cap, (temporal_key(position, i), i));
    }
    best
}

pub fn temporal_key(position: f64, frame: u64) -> f64 {
    (frame as f64 - position).abs()
}

/// One-shot retrieval over every committed frame, without caching.
pub fn retrieve_key_frames(
    state: &ClusterState,
    low: &FeatureBank,
    high: &FeatureBank,
    policy: PolicyConfig,
) -> Result<DamState> {
    Retriever::new(policy).retrieve(state, low, high, low.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Shape;

    const LOW: Shape = Shape::new(1, 1, 2);
    const HIGH: Shape = Shape::new(1, 2, 2);

    fn banks(points: &[[f32; 2]]) -> (FeatureBank, FeatureBank) {
        let low = FeatureBank::in_memory(Tier::Low, LOW).unwrap();
        let high = FeatureBank::in_memory(Tier::High, HIGH).unwrap();
        for (i, p) in points.iter().enumerate() {
            low.append(FeatureMap::new(i as u64, Tier::Low, LOW, p.to_vec()).unwrap()).unwrap();
            let h = vec![p[0], p[1], p[0], p[1]];
            high.append(FeatureMap::new(i as u64, Tier::High, HIGH, h).unwrap()).unwrap();
        }
        (low, high)
    }

    fn state(points: &[[f32; 2]], cap: usize) -> ClusterState {
        let mut s = ClusterState::new(LOW, cap);
        for (i, p) in points.iter().enumerate() {
            s.absorb(&FeatureMap::new(i as u64, Tier::Low, LOW, p.to_vec()).unwrap(), 10).unwrap();
        }
        s
    }

    fn policy(n_dam: usize, retrieval: RetrievalPolicy) -> PolicyConfig {
        PolicyConfig {
            n_dam,
            retrieval,
            selection: SelectionPolicy::TopKLargest,
        }
    }

    #[test]
    fn ranking() {
        let s = ClusterState::from_parts(
            LOW,
            3,
            9,
            vec![vec![0.0, 0.0].into(), vec![1.0, 0.0].into(), vec![2.0, 0.0].into()],
            vec![1, 5, 3],
            vec![0, 10, 6],
            vec![1, 5, 3],
        )
        .unwrap();
        assert_eq!(rank_clusters(&s), vec![1, 2, 0]);
        assert_eq!(select_anchors(&s, SelectionPolicy::TopKSmallest, 2), vec![0, 2]);
        assert_eq!(select_anchors(&s, SelectionPolicy::UniformK, 2), vec![1, 2]);
        let eq = state(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], 3);
        assert_eq!(rank_clusters(&eq), vec![0, 1, 2]);
    }

    #[test]
    fn single_frame() {
        let pts = [[0.5, 0.5]];
        let (low, high) = banks(&pts);
        let dam = retrieve_key_frames(&state(&pts, 4), &low, &high, policy(2, RetrievalPolicy::FeatureCentric)).unwrap();
        assert_eq!(dam.frame_indices(), vec![0]);
        assert_eq!(dam.entries[0].distance, 0.0);
        assert_eq!(dam.entries[0].feature.tier(), Tier::High);
    }

    #[test]
    fn temporal_nearest_index() {
        assert_eq!(temporal_candidates(3.4, 10, 1), vec![(temporal_key(3.4, 3), 3)]);
        assert_eq!(temporal_candidates(3.5, 10, 1)[0].1, 3);
        assert_eq!(temporal_candidates(3.6, 10, 2).iter().map(|c| c.1).collect::<Vec<_>>(), vec![4, 3]);
        assert_eq!(temporal_candidates(0.0, 1, 3), vec![(0.0, 0)]);
        assert_eq!(temporal_candidates(9.0, 10, 2).iter().map(|c| c.1).collect::<Vec<_>>(), vec![9, 8]);
    }

    #[test]
    fn cosine_prefers_collinear() {
        let anchor = [1.0, 0.0];
        let n = norm(&anchor);
        assert!(cosine_key(&anchor, n, &[2.0, 0.0]) < cosine_key(&anchor, n, &[0.0, 1.0]));
        assert_eq!(cosine_key(&anchor, n, &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn collisions_fall_through_to_next_best() {
        // Both clusters are nearest to frame 1; the lower-ranked anchor gets
        // its runner-up.
        let pts = [[0.0, 0.0], [0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [0.05, 0.0]];
        let (low, high) = banks(&pts);
        let s = ClusterState::from_parts(
            LOW,
            2,
            5,
            vec![vec![0.0, 0.0].into(), vec![0.0, 0.0].into()],
            vec![3, 2],
            vec![0, 0],
            vec![3, 2],
        )
        .unwrap();
        let dam = retrieve_key_frames(&s, &low, &high, policy(2, RetrievalPolicy::FeatureCentric)).unwrap();
        assert_eq!(dam.frame_indices(), vec![0, 1]);
    }

    #[test]
    fn cache_reuse_matches_fresh_scan() {
        let pts: Vec<[f32; 2]> = (0..40).map(|i| [((i * 7) % 11) as f32, ((i * 3) % 5) as f32]).collect();
        let (low, high) = banks(&pts);
        let s = state(&pts[..20], 4);
        let mut r = Retriever::new(policy(3, RetrievalPolicy::FeatureCentric));
        let first = r.retrieve(&s, &low, &high, 20).unwrap();
        let again = r.retrieve(&s, &low, &high, 20).unwrap();
        assert_eq!(first, again);
        assert_eq!(r.stats().frames_scanned, 3 * 20);
        let grown = r.retrieve(&s, &low, &high, 40).unwrap();
        let fresh = Retriever::new(policy(3, RetrievalPolicy::FeatureCentric)).retrieve(&s, &low, &high, 40).unwrap();
        assert_eq!(grown, fresh);
        assert_eq!(r.stats().frames_scanned, 3 * 40);
    }

    #[test]
    fn uniform_sampling() {
        assert_eq!(uniform_frames(10, 3), vec![0, 3, 6]);
        assert_eq!(uniform_frames(2, 3), vec![0, 1]);
        let pts: Vec<[f32; 2]> = (0..12).map(|i| [i as f32, 0.0]).collect();
        let (low, high) = banks(&pts);
        let dam = retrieve_key_frames(&state(&pts, 4), &low, &high, policy(4, RetrievalPolicy::Uniform)).unwrap();
        assert_eq!(dam.frame_indices(), vec![0, 3, 6, 9]);
        assert!(dam.entries.iter().all(|e| e.anchor_cluster.is_none()));
    }

    #[test]
    fn missing_high_res_frame_is_integrity_error() {
        let pts = [[0.0, 0.0], [1.0, 1.0]];
        let (low, _) = banks(&pts);
        let high = FeatureBank::in_memory(Tier::High, HIGH).unwrap();
        let err = retrieve_key_frames(&state(&pts, 2), &low, &high, policy(2, RetrievalPolicy::FeatureCentric)).unwrap_err();
        assert!(matches!(err, Error::BankIntegrity(_)), "{err}");
    }
}
