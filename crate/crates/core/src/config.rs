//! Memory configuration, policy selection and the LLM-token budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Shape, Tier};

/// Token ceiling for real-time answering.
pub const REALTIME_TOKEN_LIMIT: usize = 12_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusteringPolicy {
    #[default]
    KMeans,
    Dbscan,
    Gmm,
    NeighborMerge,
    NeighborDrop,
    UniformSample,
}

impl ClusteringPolicy {
    pub const ALL: [ClusteringPolicy; 6] = [
        ClusteringPolicy::KMeans,
        ClusteringPolicy::Dbscan,
        ClusteringPolicy::Gmm,
        ClusteringPolicy::NeighborMerge,
        ClusteringPolicy::NeighborDrop,
        ClusteringPolicy::UniformSample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClusteringPolicy::KMeans => "k-means",
            ClusteringPolicy::Dbscan => "dbscan",
            ClusteringPolicy::Gmm => "gmm",
            ClusteringPolicy::NeighborMerge => "neighbor-merge",
            ClusteringPolicy::NeighborDrop => "neighbor-drop",
            ClusteringPolicy::UniformSample => "uniform-sample",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

/// How a key frame is located for an anchor cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalPolicy {
    /// Euclidean argmin between the anchor centroid and low-res frame maps.
    #[default]
    FeatureCentric,
    /// Frame index nearest the anchor's mean temporal position.
    TemporalCentric,
    /// Highest cosine similarity to the anchor centroid.
    Cosine,
    /// Evenly spaced frame indices, no anchors.
    Uniform,
}

impl RetrievalPolicy {
    pub const ALL: [RetrievalPolicy; 4] = [
        RetrievalPolicy::FeatureCentric,
        RetrievalPolicy::TemporalCentric,
        RetrievalPolicy::Cosine,
        RetrievalPolicy::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RetrievalPolicy::FeatureCentric => "feature-centric",
            RetrievalPolicy::TemporalCentric => "temporal-centric",
            RetrievalPolicy::Cosine => "cosine",
            RetrievalPolicy::Uniform => "uniform",
        }
    }
}

/// Which clusters serve as retrieval anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionPolicy {
    #[default]
    TopKLargest,
    TopKSmallest,
    UniformK,
}

impl SelectionPolicy {
    pub const ALL: [SelectionPolicy; 3] = [
        SelectionPolicy::TopKLargest,
        SelectionPolicy::TopKSmallest,
        SelectionPolicy::UniformK,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionPolicy::TopKLargest => "top-k-largest",
            SelectionPolicy::TopKSmallest => "top-k-smallest",
            SelectionPolicy::UniformK => "uniform-k",
        }
    }
}

/// Which memory gets its spatial rotary coordinates doubled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RopeScaleTarget {
    /// DAM tokens at `(2y, 2x)`, CSM tokens at `(y, x)`.
    #[default]
    Dam,
    /// CSM tokens at `(2y, 2x)`, DAM tokens at `(y, x)`; aligns both grids.
    Csm,
}

fn default_n_csm() -> usize {
    60
}
fn default_n_dam() -> usize {
    30
}
fn default_low_grid() -> usize {
    16
}
fn default_high_grid() -> usize {
    32
}
fn default_dim() -> usize {
    64
}
fn default_ratio() -> usize {
    4
}
fn default_iters() -> usize {
    10
}
fn default_budget() -> usize {
    REALTIME_TOKEN_LIMIT
}
fn default_queue() -> usize {
    256
}

/// Capacities, shapes and policies of the memory.
///
/// Serialized as a flat TOML table; unknown keys are rejected. Missing keys
/// take the [`MemoryConfig::full_size`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    #[serde(default = "default_n_csm")]
    pub n_csm: usize,
    #[serde(default = "default_n_dam")]
    pub n_dam: usize,
    #[serde(default = "default_low_grid")]
    pub low_grid_h: usize,
    #[serde(default = "default_low_grid")]
    pub low_grid_w: usize,
    #[serde(default = "default_high_grid")]
    pub high_grid_h: usize,
    #[serde(default = "default_high_grid")]
    pub high_grid_w: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// ViT patches merged into one LLM token; a perfect square.
    #[serde(default = "default_ratio")]
    pub merger_ratio: usize,
    /// High-res spatial size over low-res spatial size.
    #[serde(default = "default_ratio")]
    pub pool_ratio: usize,
    #[serde(default = "default_iters")]
    pub kmeans_max_iters: usize,
    #[serde(default)]
    pub clustering_policy: ClusteringPolicy,
    #[serde(default)]
    pub retrieval_policy: RetrievalPolicy,
    #[serde(default)]
    pub selection_policy: SelectionPolicy,
    #[serde(default = "default_budget")]
    pub budget_limit: usize,
    #[serde(default)]
    pub rope_scale_target: RopeScaleTarget,
    /// Run DAM retrieval after every ingested frame instead of at query time.
    #[serde(default)]
    pub eager_retrieval: bool,
    /// Most recent high-res frames kept in memory; older ones go to disk.
    /// Absent means never offload.
    #[serde(default)]
    pub offload_watermark: Option<usize>,
    #[serde(default = "default_queue")]
    pub queue_capacity: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self::full_size()
    }
}

impl MemoryConfig {
    /// 60 synopsis slots of 16×16 patches, 30 detail slots of 32×32 patches,
    /// 2×2 patch merging: 11520 LLM tokens.
    pub fn full_size() -> Self {
        MemoryConfig {
            n_csm: default_n_csm(),
            n_dam: default_n_dam(),
            low_grid_h: 16,
            low_grid_w: 16,
            high_grid_h: 32,
            high_grid_w: 32,
            dim: default_dim(),
            merger_ratio: 4,
            pool_ratio: 4,
            kmeans_max_iters: default_iters(),
            clustering_policy: ClusteringPolicy::KMeans,
            retrieval_policy: RetrievalPolicy::FeatureCentric,
            selection_policy: SelectionPolicy::TopKLargest,
            budget_limit: REALTIME_TOKEN_LIMIT,
            rope_scale_target: RopeScaleTarget::Dam,
            eager_retrieval: false,
            offload_watermark: None,
            queue_capacity: default_queue(),
        }
    }

    /// Desk-scale shapes: 4×4 low grid, 8×8 high grid, d = 64.
    pub fn scaled() -> Self {
        MemoryConfig {
            low_grid_h: 4,
            low_grid_w: 4,
            high_grid_h: 8,
            high_grid_w: 8,
            ..Self::full_size()
        }
    }

    pub fn low_shape(&self) -> Shape {
        Shape::new(self.low_grid_h, self.low_grid_w, self.dim)
    }

    pub fn high_shape(&self) -> Shape {
        Shape::new(self.high_grid_h, self.high_grid_w, self.dim)
    }

    pub fn shape(&self, tier: Tier) -> Shape {
        match tier {
            Tier::Low => self.low_shape(),
            Tier::High => self.high_shape(),
        }
    }

    pub fn spatial_size_low(&self) -> usize {
        self.low_grid_h * self.low_grid_w
    }

    pub fn spatial_size_high(&self) -> usize {
        self.high_grid_h * self.high_grid_w
    }

    /// Side of the square patch block merged into one LLM token.
    pub fn merge_side(&self) -> Result<usize> {
        let side = (self.merger_ratio as f64).sqrt().round() as usize;
        if self.merger_ratio == 0 || side * side != self.merger_ratio {
            return Err(Error::InvalidConfig(format!(
                "merger_ratio {} is not a positive perfect square",
                self.merger_ratio
            )));
        }
        Ok(side)
    }

    /// LLM-token grid `(rows, cols)` of one map of the given tier.
    pub fn token_grid(&self, tier: Tier) -> Result<(usize, usize)> {
        let side = self.merge_side()?;
        let shape = self.shape(tier);
        if !shape.grid_h.is_multiple_of(side) || !shape.grid_w.is_multiple_of(side) {
            return Err(Error::InvalidConfig(format!(
                "{tier:?} grid {}x{} not divisible by merge side {side}",
                shape.grid_h, shape.grid_w
            )));
        }
        Ok((shape.grid_h / side, shape.grid_w / side))
    }

    pub fn tokens_per_item(&self, tier: Tier) -> Result<usize> {
        let (h, w) = self.token_grid(tier)?;
        Ok(h * w)
    }

    pub fn csm_tokens(&self) -> Result<usize> {
        Ok(self.n_csm * self.tokens_per_item(Tier::Low)?)
    }

    pub fn dam_tokens(&self) -> Result<usize> {
        Ok(self.n_dam * self.tokens_per_item(Tier::High)?)
    }

    /// Fraction of the token budget spent on the synopsis memory.
    pub fn csm_fraction(&self) -> Result<f64> {
        let total = token_budget(self)?;
        if total == 0 {
            return Ok(0.0);
        }
        Ok(self.csm_tokens()? as f64 / total as f64)
    }

    /// Checks every structural invariant, including the token budget.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.dim == 0 || self.low_shape().is_empty() || self.high_shape().is_empty() {
            return bad("grid and channel dimensions must be positive".into());
        }
        if self.spatial_size_high() != self.pool_ratio * self.spatial_size_low() {
            return bad(format!(
                "high spatial size {} != pool_ratio {} x low spatial size {}",
                self.spatial_size_high(),
                self.pool_ratio,
                self.spatial_size_low()
            ));
        }
        if self.n_dam > self.n_csm {
            return bad(format!("n_dam {} exceeds n_csm {}", self.n_dam, self.n_csm));
        }
        if self.kmeans_max_iters == 0 {
            return bad("kmeans_max_iters must be at least 1".into());
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be at least 1".into());
        }
        let tokens = token_budget(self)?;
        if tokens > self.budget_limit {
            return bad(format!("token budget {tokens} exceeds limit {}", self.budget_limit));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: MemoryConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Total LLM tokens of a full memory:
/// `n_csm · low/merger + n_dam · high/merger`.
pub fn token_budget(config: &MemoryConfig) -> Result<usize> {
    let m = config.merger_ratio;
    if m == 0 || !config.spatial_size_low().is_multiple_of(m) || !config.spatial_size_high().is_multiple_of(m) {
        return Err(Error::InvalidConfig(format!(
            "spatial sizes {}/{} not divisible by merger_ratio {m}",
            config.spatial_size_low(),
            config.spatial_size_high()
        )));
    }
    Ok(config.n_csm * (config.spatial_size_low() / m) + config.n_dam * (config.spatial_size_high() / m))
}
