//! Policy comparison harness: capacity grids, per-run quality and cost
//! metrics, and a per-step timing slope estimate.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::config::{token_budget, ClusteringPolicy, MemoryConfig, RetrievalPolicy, SelectionPolicy};
use crate::csm::{ClusterState, UpdateTrace};
use crate::policies::consolidator_for;
use crate::rng::CounterRng;
use crate::error::{Error, Result};
use crate::runtime::Pipeline;
use crate::synth::{StreamSpec, SyntheticStream};
use crate::types::{sq_dist_f32, FeatureMap, Tier};

/// Frame indices absorbed by each cluster, replayed from update traces.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Membership {
    pub members: Vec<Vec<u64>>,
}

impl Membership {
    pub fn apply(&mut self, trace: &UpdateTrace, frame_index: u64) {
        let n = self.members.len();
        if trace.assignment.is_empty() {
            return;
        }
        let k = trace.assignment.iter().max().map_or(0, |m| m + 1);
        let mut next: Vec<Vec<u64>> = vec![Vec::new(); k];
        for (i, old) in std::mem::take(&mut self.members).into_iter().enumerate() {
            let slot = &mut next[trace.assignment[i]];
            if slot.is_empty() {
                *slot = old;
            } else {
                slot.extend(old);
            }
        }
        next[trace.assignment[n]].push(frame_index);
        for m in &mut next {
            m.sort_unstable();
        }
        self.members = next;
    }
}

/// Least-squares slope of per-step cost against step index.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct SlopeEstimate {
    pub ns_per_step: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Two-sided confidence level of `ci_low..ci_high`.
    pub confidence: f64,
    pub points: usize,
    /// Median per-step time over all samples.
    pub median_ns: f64,
}

impl SlopeEstimate {
    /// The confidence interval contains zero.
    pub fn indistinguishable_from_zero(&self) -> bool {
        self.ci_low <= 0.0 && 0.0 <= self.ci_high
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Ordinary least squares through `(x, y)` with a Student-t interval on the
/// slope. Needs at least three points.
pub fn fit_slope(xs: &[f64], ys: &[f64], confidence: f64) -> Option<SlopeEstimate> {
    let n = xs.len();
    if n < 3 || ys.len() != n || !(0.0..1.0).contains(&confidence) {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let resid: f64 = xs.iter().zip(ys).map(|(x, y)| (y - my - slope * (x - mx)).powi(2)).sum();
    let se = (resid / (nf - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, nf - 2.0).ok()?.inverse_cdf(0.5 + confidence / 2.0);
    Some(SlopeEstimate {
        ns_per_step: slope,
        ci_low: slope - t * se,
        ci_high: slope + t * se,
        confidence,
        points: n,
        median_ns: median(&mut ys.to_vec()),
    })
}

/// Splits `(step, ns)` samples into `windows` contiguous windows and fits a
/// line through the window medians.
pub fn timing_slope(samples: &[(u64, f64)], windows: usize, confidence: f64) -> Option<SlopeEstimate> {
    if windows < 3 || samples.len() < windows {
        return None;
    }
    let per = samples.len() / windows;
    let mut xs = Vec::with_capacity(windows);
    let mut ys = Vec::with_capacity(windows);
    for w in 0..windows {
        let chunk = &samples[w * per..(w + 1) * per];
        xs.push(chunk.iter().map(|s| s.0 as f64).sum::<f64>() / chunk.len() as f64);
        ys.push(median(&mut chunk.iter().map(|s| s.1).collect::<Vec<_>>()));
    }
    let mut est = fit_slope(&xs, &ys, confidence)?;
    est.median_ns = median(&mut samples.iter().map(|s| s.1).collect::<Vec<_>>());
    Some(est)
}

#[derive(Debug, Clone, Copy)]
pub struct CostOptions {
    pub checkpoints: usize,
    /// Frames timed from each checkpoint.
    pub probes: usize,
    pub rounds: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for CostOptions {
    fn default() -> Self {
        CostOptions {
            checkpoints: 10,
            probes: 8,
            rounds: 15,
            confidence: 0.95,
            seed: 0,
        }
    }
}

/// Per-step consolidation cost as a function of `t`.
///
/// The policy runs over `frames` once, saving its state at evenly spaced
/// checkpoints after warm-up. Each checkpoint is then timed on the next
/// `probes` frames, visiting checkpoints in a fresh random order every round
/// so slow drift of the machine is not mistaken for a trend in `t`. The
/// slope is fitted through the per-checkpoint medians.
pub fn update_cost_slope(config: &MemoryConfig, frames: &[FeatureMap], opts: CostOptions) -> Result<SlopeEstimate> {
    let start = config.n_csm;
    let k = opts.checkpoints;
    if k < 3 || opts.probes == 0 || opts.rounds == 0 || frames.len() < start + opts.probes + k {
        return Err(Error::InvalidConfig(format!(
            "{} frames too few for {k} checkpoints after {start} warm-up steps",
            frames.len()
        )));
    }
    let last = frames.len() - opts.probes;
    let at: Vec<usize> = (0..k).map(|i| start + i * (last - start) / (k - 1)).collect();
    let mut consolidator = consolidator_for(config, opts.seed);
    let mut state = ClusterState::new(config.low_shape(), config.n_csm);
    let mut saved = Vec::with_capacity(k);
    for (t, f) in frames[..last].iter().enumerate() {
        if at.get(saved.len()) == Some(&t) {
            saved.push((state.clone(), consolidator.clone_box()));
        }
        state = consolidator.consolidate(&state, f)?.0;
    }
    if saved.len() < k {
        saved.push((state.clone(), consolidator.clone_box()));
    }

    let mut rng = CounterRng::new(opts.seed, 0xC057);
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(opts.rounds * opts.probes); k];
    let mut order: Vec<usize> = (0..k).collect();
    for _ in 0..opts.rounds {
        for i in (1..k).rev() {
            order.swap(i, rng.below(i as u64 + 1) as usize);
        }
        for &c in &order {
            let (s, policy) = &saved[c];
            for f in &frames[at[c]..at[c] + opts.probes] {
                let mut p = policy.clone_box();
                let began = Instant::now();
                let out = p.consolidate(s, f)?;
                let ns = began.elapsed().as_nanos() as f64;
                std::hint::black_box(out);
                samples[c].push(ns);
            }
        }
    }
    let xs: Vec<f64> = at.iter().map(|&t| t as f64).collect();
    let ys: Vec<f64> = samples.iter_mut().map(|v| median(v)).collect();
    let mut est = fit_slope(&xs, &ys, opts.confidence)
        .ok_or_else(|| Error::InvalidState("degenerate checkpoint layout".into()))?;
    est.median_ns = median(&mut samples.concat());
    Ok(est)
}

/// Mean over frames of the squared distance to the nearest memory item.
pub fn quantization_error(state: &ClusterState, stream: &SyntheticStream) -> f64 {
    if state.is_empty() || stream.is_empty() {
        return 0.0;
    }
    let total: f64 = (0..stream.len())
        .map(|t| {
            let f = stream.frame(t).low;
            state
                .centroids()
                .iter()
                .map(|c| sq_dist_f32(c, f.values()))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / stream.len() as f64
}

/// Largest relative deviation of a centroid from the mean of the frames it
/// absorbed, `‖c − mean‖∞ / max(1, ‖mean‖∞)`.
pub fn centroid_mean_error(state: &ClusterState, members: &Membership, stream: &SyntheticStream) -> f64 {
    let mut worst = 0.0f64;
    for (k, frames) in members.members.iter().enumerate() {
        let mut mean = vec![0.0f64; state.shape().len()];
        for &t in frames {
            for (m, x) in mean.iter_mut().zip(stream.frame(t).low.values()) {
                *m += f64::from(*x);
            }
        }
        mean.iter_mut().for_each(|m| *m /= frames.len() as f64);
        let scale = mean.iter().fold(1.0f64, |a, m| a.max(m.abs()));
        let dev = state.centroid(k).iter().zip(&mean).fold(0.0f64, |a, (c, m)| a.max((c - m).abs()));
        worst = worst.max(dev / scale);
    }
    worst
}

pub fn jaccard(a: &[u64], b: &[u64]) -> f64 {
    let a: BTreeSet<u64> = a.iter().copied().collect();
    let b: BTreeSet<u64> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// One point of the capacity grid: the share of the budget given to the
/// cluster memory and the pooling ratio between the two tiers.
#[derive(Debug, Clone, Serialize)]
pub struct GridCell {
    pub r_csm: f64,
    pub r_pool: usize,
    pub n_csm: usize,
    pub n_dam: usize,
    pub tokens: usize,
    pub reason: Option<String>,
    #[serde(skip)]
    pub config: Option<MemoryConfig>,
}

impl GridCell {
    pub fn is_valid(&self) -> bool {
        self.config.is_some()
    }
}

/// Enumerates configurations that spend `budget` tokens. Cells where the
/// pooling ratio is not a perfect square, where no cluster fits, or where the
/// key-frame count exceeds the cluster count are returned with a reason.
pub fn capacity_grid(base: &MemoryConfig, budget: usize, r_csm: &[f64], r_pool: &[usize]) -> Vec<GridCell> {
    let mut cells = Vec::new();
    for &pool in r_pool {
        for &rc in r_csm {
            let mut cell = GridCell {
                r_csm: rc,
                r_pool: pool,
                n_csm: 0,
                n_dam: 0,
                tokens: 0,
                reason: None,
                config: None,
            };
            let side = (pool as f64).sqrt().round() as usize;
            if side * side != pool || pool == 0 {
                cell.reason = Some(format!("pool ratio {pool} is not a perfect square"));
                cells.push(cell);
                continue;
            }
            if !base.high_grid_h.is_multiple_of(side) || !base.high_grid_w.is_multiple_of(side) {
                cell.reason = Some(format!("high grid not divisible by pool side {side}"));
                cells.push(cell);
                continue;
            }
            // The high tier is fixed; pooling shrinks the low grid.
            let mut cfg = MemoryConfig {
                pool_ratio: pool,
                low_grid_h: base.high_grid_h / side,
                low_grid_w: base.high_grid_w / side,
                ..base.clone()
            };
            let (Ok(tl), Ok(th)) = (cfg.tokens_per_item(Tier::Low), cfg.tokens_per_item(Tier::High)) else {
                cell.reason = Some("grid not divisible by merger ratio".into());
                cells.push(cell);
                continue;
            };
            let n_csm = (rc * budget as f64 / tl as f64).round() as usize;
            let rest = budget.saturating_sub(n_csm * tl);
            let n_dam = rest / th;
            cell.n_csm = n_csm;
            cell.n_dam = n_dam;
            cell.tokens = n_csm * tl + n_dam * th;
            cfg.n_csm = n_csm;
            cfg.n_dam = n_dam;
            cfg.budget_limit = cfg.budget_limit.max(budget);
            if n_csm == 0 {
                cell.reason = Some("no cluster fits".into());
            } else if n_csm * tl > budget {
                cell.reason = Some("cluster memory exceeds budget".into());
            } else if n_dam > n_csm {
                cell.reason = Some(format!("n_dam {n_dam} exceeds n_csm {n_csm}"));
            } else if let Err(e) = cfg.validate() {
                cell.reason = Some(e.to_string());
            } else {
                cell.config = Some(cfg);
            }
            cells.push(cell);
        }
    }
    cells
}

/// Everything measured for one policy combination on one stream.
#[derive(Debug, Clone, Serialize)]
pub struct PolicyRun {
    pub clustering: ClusteringPolicy,
    pub retrieval: RetrievalPolicy,
    pub selection: SelectionPolicy,
    pub n_csm: usize,
    pub n_dam: usize,
    pub steps: u64,
    pub update_ns_mean: f64,
    pub slope: Option<SlopeEstimate>,
    pub quantization_error: f64,
    pub memory_items: usize,
    pub memory_tokens: usize,
    pub total_weight: u64,
    pub weight_conserved: bool,
    /// Only checked for k-means, the one policy that promises it.
    pub centroid_mean_error: Option<f64>,
    pub key_frames: Vec<u64>,
    pub jaccard_vs_reference: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub seed: u64,
    /// Cost-slope settings; `None` skips the slope measurement.
    pub cost: Option<CostOptions>,
}

/// Runs one configuration over `stream` and measures it.
pub fn run_policy(config: &MemoryConfig, stream: &SyntheticStream, opts: RunOptions) -> Result<PolicyRun> {
    let spec = stream.spec();
    if spec.low != config.low_shape() || spec.high != config.high_shape() {
        return Err(Error::ShapeMismatch(format!(
            "stream shapes {}/{} vs config {}/{}",
            spec.low,
            spec.high,
            config.low_shape(),
            config.high_shape()
        )));
    }
    let mut pipe = Pipeline::new(config.clone(), opts.seed)?;
    let track = config.clustering_policy == ClusteringPolicy::KMeans;
    let mut members = Membership::default();
    let mut samples = Vec::with_capacity(stream.len() as usize);
    for t in 0..stream.len() {
        let pair = stream.frame(t);
        let began = Instant::now();
        let trace = pipe.step_pair(pair)?;
        let ns = began.elapsed().as_nanos() as f64;
        samples.push((t, ns));
        if let (true, Some(trace)) = (track, trace.as_ref()) {
            members.apply(trace, t);
        }
    }
    let slope = match opts.cost {
        Some(cost) => {
            let lows: Vec<FeatureMap> = (0..stream.len()).map(|t| stream.frame(t).low).collect();
            Some(update_cost_slope(config, &lows, CostOptions { seed: opts.seed, ..cost })?)
        }
        None => None,
    };
    let update_ns_mean = if samples.is_empty() {
        0.0
    } else {
        samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64
    };
    let dam = pipe.retrieve()?;
    let state = pipe.state().clone();
    let memory_tokens = state.len() * config.tokens_per_item(Tier::Low)? + dam.len() * config.tokens_per_item(Tier::High)?;
    Ok(PolicyRun {
        clustering: config.clustering_policy,
        retrieval: config.retrieval_policy,
        selection: config.selection_policy,
        n_csm: config.n_csm,
        n_dam: config.n_dam,
        steps: stream.len(),
        update_ns_mean,
        slope,
        quantization_error: quantization_error(&state, stream),
        memory_items: state.len() + dam.len(),
        memory_tokens,
        total_weight: state.total_weight(),
        weight_conserved: state.total_weight() == stream.len(),
        centroid_mean_error: track.then(|| centroid_mean_error(&state, &members, stream)),
        key_frames: dam.frame_indices(),
        jaccard_vs_reference: None,
    })
}

/// Runs every clustering policy in `policies` on the same stream and fills in
/// key-frame overlap against the first run.
pub fn bench_policies(
    config: &MemoryConfig,
    spec: &StreamSpec,
    policies: &[ClusteringPolicy],
    opts: RunOptions,
) -> Result<Vec<PolicyRun>> {
    let stream = SyntheticStream::new(spec.clone())?;
    let mut runs = Vec::with_capacity(policies.len());
    for &p in policies {
        let cfg = MemoryConfig {
            clustering_policy: p,
            ..config.clone()
        };
        runs.push(run_policy(&cfg, &stream, opts)?);
    }
    if let Some(reference) = runs.first().map(|r| r.key_frames.clone()) {
        for r in &mut runs {
            r.jaccard_vs_reference = Some(jaccard(&reference, &r.key_frames));
        }
    }
    Ok(runs)
}

/// Runs every valid grid cell on a stream generated for that cell's shapes
/// and returns the runs alongside the cells.
pub fn grid_search(
    base: &MemoryConfig,
    spec: &StreamSpec,
    r_csm: &[f64],
    r_pool: &[usize],
    opts: RunOptions,
) -> Result<Vec<(GridCell, Option<PolicyRun>)>> {
    let budget = token_budget(base)?;
    let mut out = Vec::new();
    for cell in capacity_grid(base, budget, r_csm, r_pool) {
        let run = match &cell.config {
            Some(cfg) => {
                let cell_spec = StreamSpec {
                    low: cfg.shape(Tier::Low),
                    high: cfg.shape(Tier::High),
                    ..spec.clone()
                };
                Some(run_policy(cfg, &SyntheticStream::new(cell_spec)?, opts)?)
            }
            None => None,
        };
        out.push((cell, run));
    }
    Ok(out)
}
