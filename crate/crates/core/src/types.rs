//! Value types shared across the engine.
//!
//! Feature storage is `f32`; every distance, mean and accumulation is done in
//! `f64` (see [`sq_dist`]).

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Low,
    High,
}

impl Tier {
    pub fn to_byte(self) -> u8 {
        match self {
            Tier::Low => 0,
            Tier::High => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Tier> {
        match b {
            0 => Some(Tier::Low),
            1 => Some(Tier::High),
            _ => None,
        }
    }
}

/// Grid geometry of a feature map: `grid_h × grid_w` patches of `dim` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
}

impl Shape {
    pub const fn new(grid_h: usize, grid_w: usize, dim: usize) -> Self {
        Shape {
            grid_h,
            grid_w,
            dim,
        }
    }

    pub const fn spatial(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Number of scalars in a flattened map.
    pub const fn len(&self) -> usize {
        self.grid_h * self.grid_w * self.dim
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.grid_h, self.grid_w, self.dim)
    }
}

/// One frame's embedding grid. Immutable once built; clones share storage.
#[derive(Clone, PartialEq)]
pub struct FeatureMap {
    frame_index: u64,
    tier: Tier,
    shape: Shape,
    values: Arc<[f32]>,
}

impl FeatureMap {
    /// Builds a map after checking the value count against the shape and
    /// rejecting NaN/Inf.
    pub fn new(frame_index: u64, tier: Tier, shape: Shape, values: impl Into<Arc<[f32]>>) -> Result<Self> {
        let values = values.into();
        if values.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "frame {frame_index}: {} values for shape {shape}",
                values.len()
            )));
        }
        if let Some(offset) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                frame_index,
                offset,
            });
        }
        Ok(FeatureMap {
            frame_index,
            tier,
            shape,
            values,
        })
    }

    pub fn frame_index(&self) -> u64 {
        self.frame_index
    }

    pub fn tier(&self) -> Tier {
        self.tier
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn shared_values(&self) -> Arc<[f32]> {
        self.values.clone()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    pub(crate) fn expect_tier(&self, tier: Tier) -> Result<()> {
        if self.tier != tier {
            return Err(Error::TierMismatch {
                expected: tier,
                got: self.tier,
            });
        }
        Ok(())
    }
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureMap")
            .field("frame_index", &self.frame_index)
            .field("tier", &self.tier)
            .field("shape", &self.shape)
            .finish_non_exhaustive()
    }
}

/// AM-RoPE position of one LLM token: fractional time, integer height and width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionTriplet {
    pub t: f64,
    pub h: u32,
    pub w: u32,
}

/// Squared Euclidean distance, accumulated left to right in `f64`.
///
/// Every distance in the engine goes through this function (or
/// [`sq_dist_f32`]) so cached and recomputed values are bit-identical.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// [`sq_dist`] against stored `f32` features.
#[inline]
pub fn sq_dist_f32(a: &[f64], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, &y) in a.iter().zip(b) {
        let d = x - f64::from(y);
        acc += d * d;
    }
    acc
}
