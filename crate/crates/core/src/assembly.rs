//! Flash memory assembly: synopsis and detail items interleaved by temporal
//! position, tokenized at LLM-token granularity with one rotary position
//! triplet per token.
//!
//! Items sort by `(temporal position, CSM before DAM, id)`. An item's tokens
//! are its `side × side` patch blocks (`side² = merger_ratio`) in row-major
//! block order; token `(x, y)` of a synopsis item at mean position `p` gets
//! `(p, y, x)` and token `(x, y)` of a key frame `f` gets `(f, 2y, 2x)`.
//! [`RopeScaleTarget::Csm`] swaps which memory gets the doubled coordinates.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{token_budget, MemoryConfig, RopeScaleTarget};
use crate::csm::ClusterState;
use crate::dam::DamState;
use crate::error::{Error, Result};
use crate::fvsb::{self, Header, PayloadKind};
use crate::types::{FeatureMap, PositionTriplet, Shape, Tier};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Csm,
    Dam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryItem {
    pub source: Source,
    /// Cluster slot for synopsis items, frame index for key frames.
    pub id: u64,
    pub temporal_position: f64,
    pub feature: FeatureMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlashMemorySnapshot {
    pub items: Vec<MemoryItem>,
    pub token_positions: Vec<PositionTriplet>,
    pub token_count: usize,
    /// Frames consolidated when the snapshot was taken.
    pub frame_count: u64,
}

impl FlashMemorySnapshot {
    pub fn empty() -> Self {
        FlashMemorySnapshot {
            items: Vec::new(),
            token_positions: Vec::new(),
            token_count: 0,
            frame_count: 0,
        }
    }

    pub fn count(&self, source: Source) -> usize {
        self.items.iter().filter(|i| i.source == source).count()
    }
}

fn order(a: &MemoryItem, b: &MemoryItem) -> std::cmp::Ordering {
    a.temporal_position
        .total_cmp(&b.temporal_position)
        .then(a.source.cmp(&b.source))
        .then(a.id.cmp(&b.id))
}

/// Interleaves both memories and emits per-token positions.
pub fn assemble(csm: &ClusterState, dam: &DamState, config: &MemoryConfig) -> Result<FlashMemorySnapshot> {
    if !csm.is_empty() && csm.shape() != config.low_shape() {
        return Err(Error::InvalidState(format!(
            "cluster shape {} does not match config {}",
            csm.shape(),
            config.low_shape()
        )));
    }
    if csm.len() > config.n_csm {
        return Err(Error::InvalidState(format!("{} clusters exceed n_csm {}", csm.len(), config.n_csm)));
    }
    if dam.len() > config.n_dam {
        return Err(Error::InvalidState(format!("{} key frames exceed n_dam {}", dam.len(), config.n_dam)));
    }
    let mut items = Vec::with_capacity(csm.len() + dam.len());
    for k in 0..csm.len() {
        items.push(MemoryItem {
            source: Source::Csm,
            id: k as u64,
            temporal_position: csm.position(k),
            feature: csm.centroid_map(k),
        });
    }
    for e in &dam.entries {
        if e.feature.tier() != Tier::High || e.feature.shape() != config.high_shape() {
            return Err(Error::InvalidState(format!(
                "key frame {} has shape {} / {:?}",
                e.frame_index,
                e.feature.shape(),
                e.feature.tier()
            )));
        }
        items.push(MemoryItem {
            source: Source::Dam,
            id: e.frame_index,
            temporal_position: e.frame_index as f64,
            feature: e.feature.clone(),
        });
    }
    items.sort_by(order);

    let mut token_positions = Vec::new();
    for item in &items {
        token_positions.extend(am_rope_triplets(item, config)?);
    }
    Ok(FlashMemorySnapshot {
        token_count: token_positions.len(),
        items,
        token_positions,
        frame_count: csm.steps(),
    })
}

/// Rotary position triplets for every LLM token of `item`, row-major.
pub fn am_rope_triplets(item: &MemoryItem, config: &MemoryConfig) -> Result<Vec<PositionTriplet>> {
    let side = config.merge_side()?;
    let shape = item.feature.shape();
    if !shape.grid_h.is_multiple_of(side) || !shape.grid_w.is_multiple_of(side) {
        return Err(Error::InvalidState(format!("grid {shape} not divisible by merge side {side}")));
    }
    let (rows, cols) = (shape.grid_h / side, shape.grid_w / side);
    let doubled = matches!(
        (item.source, config.rope_scale_target),
        (Source::Dam, RopeScaleTarget::Dam) | (Source::Csm, RopeScaleTarget::Csm)
    );
    let scale = if doubled { 2 } else { 1 };
    let mut out = Vec::with_capacity(rows * cols);
    for y in 0..rows {
        for x in 0..cols {
            out.push(PositionTriplet {
                t: item.temporal_position,
                h: (y * scale) as u32,
                w: (x * scale) as u32,
            });
        }
    }
    Ok(out)
}

/// Splits a map into LLM-token patch blocks: `side × side × dim` values each,
/// blocks row-major, patches row-major within a block.
pub fn tokenize(feature: &FeatureMap, side: usize) -> Vec<Vec<f32>> {
    let s = feature.shape();
    let v = feature.values();
    let (rows, cols, d) = (s.grid_h / side, s.grid_w / side, s.dim);
    let mut out = Vec::with_capacity(rows * cols);
    for by in 0..rows {
        for bx in 0..cols {
            let mut tok = Vec::with_capacity(side * side * d);
            for dy in 0..side {
                let row = by * side + dy;
                let start = (row * s.grid_w + bx * side) * d;
                tok.extend_from_slice(&v[start..start + side * d]);
            }
            out.push(tok);
        }
    }
    out
}

/// Inverse of [`tokenize`].
pub fn detokenize(tokens: &[Vec<f32>], shape: Shape, side: usize) -> Vec<f32> {
    let (rows, cols, d) = (shape.grid_h / side, shape.grid_w / side, shape.dim);
    let mut v = vec![0.0f32; shape.len()];
    for by in 0..rows {
        for bx in 0..cols {
            let tok = &tokens[by * cols + bx];
            for dy in 0..side {
                let row = by * side + dy;
                let start = (row * shape.grid_w + bx * side) * d;
                v[start..start + side * d].copy_from_slice(&tok[dy * side * d..(dy + 1) * side * d]);
            }
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ItemRecord {
    source: Source,
    id: u64,
    temporal_position: f64,
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    token_offset: usize,
    token_count: usize,
}

/// JSON side of an exported snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotDocument {
    pub format: String,
    pub version: u32,
    pub frame_count: u64,
    pub token_count: usize,
    pub merge_side: usize,
    pub config: MemoryConfig,
    /// Whatever produced the snapshot (seed, command line, ...).
    pub provenance: serde_json::Value,
    items: Vec<ItemRecord>,
    /// `[t, h, w]` per token.
    pub token_positions: Vec<(f64, u32, u32)>,
}

pub const SNAPSHOT_FORMAT: &str = "vstream-snapshot";

/// Writes the JSON document and the FVSB token payload (one record per LLM
/// token, payload kind 2, record shape `side × side × dim`).
pub fn export_snapshot<J: Write, T: Write>(
    snapshot: &FlashMemorySnapshot,
    config: &MemoryConfig,
    provenance: serde_json::Value,
    json: J,
    tokens: T,
) -> Result<()> {
    let side = config.merge_side()?;
    let header = Header::new(PayloadKind::Token, Shape::new(side, side, config.dim))?;
    let mut payload = fvsb::Writer::new(tokens, header)?;
    let mut items = Vec::with_capacity(snapshot.items.len());
    let mut offset = 0;
    for item in &snapshot.items {
        let toks = tokenize(&item.feature, side);
        for t in &toks {
            payload.write_record(t)?;
        }
        let s = item.feature.shape();
        items.push(ItemRecord {
            source: item.source,
            id: item.id,
            temporal_position: item.temporal_position,
            grid_h: s.grid_h,
            grid_w: s.grid_w,
            dim: s.dim,
            token_offset: offset,
            token_count: toks.len(),
        });
        offset += toks.len();
    }
    payload.finish()?;
    let doc = SnapshotDocument {
        format: SNAPSHOT_FORMAT.into(),
        version: 1,
        frame_count: snapshot.frame_count,
        token_count: snapshot.token_count,
        merge_side: side,
        config: config.clone(),
        provenance,
        items,
        token_positions: snapshot.token_positions.iter().map(|p| (p.t, p.h, p.w)).collect(),
    };
    let mut json = json;
    serde_json::to_writer_pretty(&mut json, &doc).map_err(|e| Error::Storage(e.into()))?;
    json.write_all(b"\n")?;
    json.flush()?;
    Ok(())
}

/// Paths used by [`export_snapshot_files`] for a base path.
pub fn snapshot_paths(base: &Path) -> (PathBuf, PathBuf) {
    let mut json = base.as_os_str().to_owned();
    json.push(".json");
    let mut tok = base.as_os_str().to_owned();
    tok.push(".tokens.fvsb");
    (json.into(), tok.into())
}

pub fn export_snapshot_files(
    snapshot: &FlashMemorySnapshot,
    config: &MemoryConfig,
    provenance: serde_json::Value,
    base: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let (jp, tp) = snapshot_paths(base);
    let json = std::io::BufWriter::new(std::fs::File::create(&jp)?);
    let tokens = std::io::BufWriter::new(std::fs::File::create(&tp)?);
    export_snapshot(snapshot, config, provenance, json, tokens)?;
    Ok((jp, tp))
}

/// Parses an exported snapshot back into memory.
pub fn parse_snapshot<J: Read, T: Read>(json: J, tokens: T) -> Result<(FlashMemorySnapshot, SnapshotDocument)> {
    let doc: SnapshotDocument =
        serde_json::from_reader(json).map_err(|e| Error::parse(e.column() as u64, None, e.to_string()))?;
    if doc.format != SNAPSHOT_FORMAT || doc.version != 1 {
        return Err(Error::parse(0, None, format!("unsupported snapshot {} v{}", doc.format, doc.version)));
    }
    let mut reader = fvsb::Reader::new(tokens)?;
    if reader.header().kind != PayloadKind::Token {
        return Err(Error::parse(6, None, "token payload has wrong kind"));
    }
    let side = doc.merge_side;
    let mut items = Vec::with_capacity(doc.items.len());
    for rec in &doc.items {
        let mut toks = Vec::with_capacity(rec.token_count);
        for _ in 0..rec.token_count {
            toks.push(
                reader
                    .next_record()?
                    .ok_or_else(|| Error::parse(0, Some(rec.token_offset as u64), "token payload ends early"))?,
            );
        }
        let shape = Shape::new(rec.grid_h, rec.grid_w, rec.dim);
        let tier = match rec.source {
            Source::Csm => Tier::Low,
            Source::Dam => Tier::High,
        };
        let feature = FeatureMap::new(rec.id, tier, shape, detokenize(&toks, shape, side))?;
        items.push(MemoryItem {
            source: rec.source,
            id: rec.id,
            temporal_position: rec.temporal_position,
            feature,
        });
    }
    if reader.next_record()?.is_some() {
        return Err(Error::parse(0, None, "token payload has extra records"));
    }
    let snapshot = FlashMemorySnapshot {
        items,
        token_positions: doc
            .token_positions
            .iter()
            .map(|&(t, h, w)| PositionTriplet { t, h, w })
            .collect(),
        token_count: doc.token_count,
        frame_count: doc.frame_count,
    };
    if snapshot.token_positions.len() != snapshot.token_count {
        return Err(Error::parse(0, None, "token position count disagrees with token_count"));
    }
    Ok((snapshot, doc))
}

/// Checks the snapshot against the full-memory budget.
pub fn is_full_budget(snapshot: &FlashMemorySnapshot, config: &MemoryConfig) -> Result<bool> {
    Ok(snapshot.token_count == token_budget(config)?)
}

/// One CSV row per memory item and per frame for PCA-style plots:
/// `kind,id,position,n_values,v0,v1,...`. Frames are written with their
/// low-res maps (`frame_low`) and, when given, high-res maps are not
/// duplicated: DAM items already carry high-res vectors.
pub fn write_pca_csv<W: Write>(
    mut out: W,
    provenance: &str,
    snapshot: &FlashMemorySnapshot,
    frames: impl IntoIterator<Item = FeatureMap>,
) -> Result<usize> {
    writeln!(out, "# {provenance}")?;
    writeln!(out, "kind,id,position,n_values,values...")?;
    let mut rows = 0;
    let mut line = String::new();
    let mut push_row = |out: &mut W, kind: &str, id: u64, pos: f64, values: &[f32]| -> Result<()> {
        use std::fmt::Write as _;
        line.clear();
        write!(line, "{kind},{id},{pos},{}", values.len()).unwrap();
        for v in values {
            write!(line, ",{v}").unwrap();
        }
        writeln!(out, "{line}")?;
        Ok(())
    };
    for item in &snapshot.items {
        let kind = match item.source {
            Source::Csm => "csm",
            Source::Dam => "dam",
        };
        push_row(&mut out, kind, item.id, item.temporal_position, item.feature.values())?;
        rows += 1;
    }
    for f in frames {
        push_row(&mut out, "frame_low", f.frame_index(), f.frame_index() as f64, f.values())?;
        rows += 1;
    }
    out.flush()?;
    Ok(rows)
}
