//! Reference implementations written straight from the documented rules,
//! without sharing code paths with the library.
#![allow(dead_code)]

use vstream_core::config::{MemoryConfig, RetrievalPolicy};
use vstream_core::synth::{StreamSpec, SyntheticStream};
use vstream_core::{FeatureMap, Shape};

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let t = a[i] - b[i];
        s += t * t;
    }
    s
}

pub struct LloydStep {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub weights: Vec<u64>,
}

/// One weighted Lloyd iteration over `centroids ∪ {x}` warm-started at
/// `centroids`: nearest centroid (lowest index on ties), empty clusters
/// reseeded in index order with the point farthest from its centroid among
/// clusters of two or more points (lowest point index on ties), then
/// weighted means (a lone point is its own centroid).
pub fn lloyd_once(centroids: &[Vec<f64>], weights: &[u64], x: &[f64]) -> LloydStep {
    let n = centroids.len();
    let mut pts: Vec<Vec<f64>> = centroids.to_vec();
    pts.push(x.to_vec());
    let mut w: Vec<u64> = weights.to_vec();
    w.push(1);

    let mut assignment = Vec::new();
    for p in &pts {
        let mut best = 0;
        for j in 0..n {
            if dist2(p, &centroids[j]) < dist2(p, &centroids[best]) {
                best = j;
            }
        }
        assignment.push(best);
    }
    for j in 0..n {
        let count = |a: &Vec<usize>, c: usize| a.iter().filter(|&&q| q == c).count();
        if count(&assignment, j) > 0 {
            continue;
        }
        let mut donor: Option<usize> = None;
        for i in 0..pts.len() {
            if count(&assignment, assignment[i]) < 2 {
                continue;
            }
            let d = dist2(&pts[i], &centroids[assignment[i]]);
            match donor {
                Some(b) if dist2(&pts[b], &centroids[assignment[b]]) >= d => {}
                _ => donor = Some(i),
            }
        }
        assignment[donor.unwrap()] = j;
    }
    let mut out = Vec::new();
    let mut out_w = Vec::new();
    for j in 0..n {
        let members: Vec<usize> = (0..pts.len()).filter(|&i| assignment[i] == j).collect();
        let total: u64 = members.iter().map(|&i| w[i]).sum();
        out_w.push(total);
        if members.len() == 1 {
            out.push(pts[members[0]].clone());
            continue;
        }
        let mut c = vec![0.0; x.len()];
        for &i in &members {
            for k in 0..x.len() {
                c[k] += w[i] as f64 * pts[i][k];
            }
        }
        for v in &mut c {
            *v /= total as f64;
        }
        out.push(c);
    }
    LloydStep {
        assignment,
        centroids: out,
        weights: out_w,
    }
}

/// Exhaustive key-frame scan: for each anchor in order, the frame with the
/// smallest key among frames not yet taken (lowest index on ties).
pub fn scan_key_frames(
    policy: RetrievalPolicy,
    anchors: &[(Vec<f64>, f64)],
    frames: &[FeatureMap],
) -> Vec<(u64, f64)> {
    let mut taken: Vec<u64> = Vec::new();
    let mut out = Vec::new();
    for (centroid, position) in anchors {
        let mut best: Option<(u64, f64)> = None;
        for f in frames {
            let i = f.frame_index();
            if taken.contains(&i) {
                continue;
            }
            let v: Vec<f64> = f.values().iter().map(|&x| x as f64).collect();
            let key = match policy {
                RetrievalPolicy::FeatureCentric => dist2(centroid, &v),
                RetrievalPolicy::Cosine => {
                    let dot: f64 = centroid.iter().zip(&v).map(|(a, b)| a * b).sum();
                    let na = centroid.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nb = v.iter().map(|b| b * b).sum::<f64>().sqrt();
                    if na == 0.0 || nb == 0.0 {
                        0.0
                    } else {
                        -dot / (na * nb)
                    }
                }
                RetrievalPolicy::TemporalCentric => (i as f64 - position).abs(),
                RetrievalPolicy::Uniform => unreachable!("uniform has no key"),
            };
            if best.is_none_or(|(_, k)| key < k) {
                best = Some((i, key));
            }
        }
        if let Some(b) = best {
            taken.push(b.0);
            out.push(b);
        }
    }
    out
}

/// Anchors for the default selection: heaviest first, lower index on ties.
pub fn heaviest(weights: &[u64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    // Stable sort keeps index order among equal weights.
    idx.sort_by(|a, b| weights[*b].cmp(&weights[*a]));
    idx.truncate(k);
    idx
}

/// Small-shape config for fast oracle runs.
pub fn tiny_config(n_csm: usize, n_dam: usize) -> MemoryConfig {
    MemoryConfig {
        n_csm,
        n_dam,
        low_grid_h: 2,
        low_grid_w: 2,
        high_grid_h: 4,
        high_grid_w: 4,
        dim: 4,
        merger_ratio: 1,
        ..MemoryConfig::scaled()
    }
}

pub fn mixture(config: &MemoryConfig, seed: u64, n: u64) -> SyntheticStream {
    SyntheticStream::new(StreamSpec {
        n_scenes: 6,
        cluster_spread: 0.3,
        drift_rate: 0.001,
        ..StreamSpec::for_config(config, seed, n)
    })
    .unwrap()
}

pub fn low_frames(stream: &SyntheticStream) -> Vec<FeatureMap> {
    (0..stream.len()).map(|t| stream.frame(t).low).collect()
}

pub const fn shape(d: usize) -> Shape {
    Shape::new(1, 1, d)
}

/// Gaussian mixture with components interleaved every few frames, so every
/// component shows up during warm-up.
pub fn interleaved_mixture(config: &MemoryConfig, seed: u64, n: u64) -> SyntheticStream {
    SyntheticStream::new(StreamSpec {
        n_scenes: 6,
        scene_len_min: 1,
        scene_len_max: 3,
        cluster_spread: 0.3,
        drift_rate: 0.001,
        ..StreamSpec::for_config(config, seed, n)
    })
    .unwrap()
}
