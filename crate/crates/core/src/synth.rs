//! Synthetic scene-segmented feature streams and FVSB stream ingestion.
//!
//! A stream is a sequence of scenes. Each scene has a fixed random center in
//! low-res feature space, optionally drifting linearly over time; frames of a
//! scene scatter around it with `cluster_spread`. The high-res map of a frame
//! is its low-res map upsampled by nearest neighbour (each low patch becomes a
//! `side × side` block) plus `detail_noise`, so average-pooling the high-res
//! map recovers the low-res one when the detail noise is zero.
//!
//! Every value is a pure function of `(spec, frame index)` through
//! [`crate::rng`], so frames can be generated in any order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::MemoryConfig;
use crate::error::{Error, Result};
use crate::fvsb::{self, Header, PayloadKind};
use crate::rng::CounterRng;
use crate::types::{FeatureMap, Shape, Tier};

const STREAM_SCHEDULE: u64 = 1;
const STREAM_CENTER: u64 = 1 << 32;
const STREAM_DRIFT: u64 = 2 << 32;
const STREAM_LOW_NOISE: u64 = 3 << 32;
const STREAM_HIGH_NOISE: u64 = 4 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub seed: u64,
    pub n_steps: u64,
    pub n_scenes: usize,
    pub scene_len_min: u64,
    pub scene_len_max: u64,
    /// Standard deviation of per-frame noise around the scene center.
    pub cluster_spread: f64,
    /// Standard deviation of scene-center coordinates.
    #[serde(default = "one")]
    pub scene_scale: f64,
    /// Distance a scene center travels per step along its drift direction,
    /// as a multiple of a unit-norm direction scaled by `sqrt(len)`.
    #[serde(default)]
    pub drift_rate: f64,
    #[serde(default)]
    pub detail_noise: f64,
    pub low: Shape,
    pub high: Shape,
}

fn one() -> f64 {
    1.0
}

impl StreamSpec {
    /// A stream shaped for `config`.
    pub fn for_config(config: &MemoryConfig, seed: u64, n_steps: u64) -> Self {
        StreamSpec {
            seed,
            n_steps,
            n_scenes: 8,
            scene_len_min: 5,
            scene_len_max: 40,
            cluster_spread: 0.1,
            scene_scale: 1.0,
            drift_rate: 0.0,
            detail_noise: 0.01,
            low: config.low_shape(),
            high: config.high_shape(),
        }
    }

    /// Patch side of the high-res block covering one low-res patch.
    pub fn upsample_side(&self) -> Result<usize> {
        let bad = || {
            Error::InvalidConfig(format!(
                "high grid {} is not an integer upsampling of low grid {}",
                self.high, self.low
            ))
        };
        if self.low.dim != self.high.dim || self.low.grid_h == 0 || self.low.grid_w == 0 {
            return Err(bad());
        }
        if !self.high.grid_h.is_multiple_of(self.low.grid_h) {
            return Err(bad());
        }
        let side = self.high.grid_h / self.low.grid_h;
        if side == 0 || self.high.grid_w != self.low.grid_w * side {
            return Err(bad());
        }
        Ok(side)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_scenes == 0 {
            return bad("n_scenes must be at least 1");
        }
        if self.scene_len_min == 0 || self.scene_len_min > self.scene_len_max {
            return bad("scene lengths must satisfy 1 <= min <= max");
        }
        if !(self.cluster_spread >= 0.0) || !self.cluster_spread.is_finite() {
            return bad("cluster_spread must be finite and non-negative");
        }
        if !self.drift_rate.is_finite() || !self.detail_noise.is_finite() || !self.scene_scale.is_finite() {
            return bad("rates must be finite");
        }
        self.upsample_side()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: StreamSpec = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// One step of the stream: both tiers of the same frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub low: FeatureMap,
    pub high: FeatureMap,
}

impl FramePair {
    pub fn index(&self) -> u64 {
        self.low.frame_index()
    }
}

/// Deterministic synthetic stream with scene ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    spec: StreamSpec,
    side: usize,
    /// `(first frame, scene)` per segment, ascending.
    segments: Vec<(u64, usize)>,
    centers: Vec<Vec<f64>>,
    drifts: Vec<Vec<f64>>,
}

impl SyntheticStream {
    pub fn new(spec: StreamSpec) -> Result<Self> {
        spec.validate()?;
        let side = spec.upsample_side()?;
        let len = spec.low.len();

        let mut sched = CounterRng::new(spec.seed, STREAM_SCHEDULE);
        let mut segments = Vec::new();
        let mut start = 0u64;
        while start < spec.n_steps {
            let scene = if segments.len() < spec.n_scenes {
                segments.len()
            } else {
                sched.below(spec.n_scenes as u64) as usize
            };
            segments.push((start, scene));
            start += sched.range_inclusive(spec.scene_len_min, spec.scene_len_max);
        }

        let centers = (0..spec.n_scenes)
            .map(|s| {
                let mut rng = CounterRng::new(spec.seed, STREAM_CENTER + s as u64);
                (0..len).map(|_| spec.scene_scale * rng.next_normal()).collect()
            })
            .collect();
        let drifts = (0..spec.n_scenes)
            .map(|s| {
                let mut rng = CounterRng::new(spec.seed, STREAM_DRIFT + s as u64);
                let raw: Vec<f64> = (0..len).map(|_| rng.next_normal()).collect();
                let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                raw.into_iter().map(|x| x / n).collect()
            })
            .collect();

        Ok(SyntheticStream {
            spec,
            side,
            segments,
            centers,
            drifts,
        })
    }

    pub fn spec(&self) -> &StreamSpec {
        &self.spec
    }

    pub fn len(&self) -> u64 {
        self.spec.n_steps
    }

    pub fn is_empty(&self) -> bool {
        self.spec.n_steps == 0
    }

    /// Ground-truth scene of frame `t`.
    pub fn scene_of(&self, t: u64) -> usize {
        let pos = self.segments.partition_point(|&(start, _)| start <= t);
        self.segments[pos - 1].1
    }

    /// Ground-truth scene center at frame `t` (including drift).
    pub fn center_at(&self, t: u64) -> Vec<f64> {
        let s = self.scene_of(t);
        let shift = self.spec.drift_rate * t as f64 * (self.spec.low.len() as f64).sqrt();
        self.centers[s]
            .iter()
            .zip(&self.drifts[s])
            .map(|(c, d)| c + shift * d)
            .collect()
    }

    /// Frame `t` of the stream.
    pub fn frame(&self, t: u64) -> FramePair {
        let low_shape = self.spec.low;
        let high_shape = self.spec.high;
        let center = self.center_at(t);
        let mut rng = CounterRng::new(self.spec.seed, STREAM_LOW_NOISE + t);
        let low: Vec<f32> = center
            .iter()
            .map(|c| (c + self.spec.cluster_spread * rng.next_normal()) as f32)
            .collect();

        let mut rng = CounterRng::new(self.spec.seed, STREAM_HIGH_NOISE + t);
        let d = low_shape.dim;
        let mut high = Vec::with_capacity(high_shape.len());
        for y in 0..high_shape.grid_h {
            for x in 0..high_shape.grid_w {
                let src = ((y / self.side) * low_shape.grid_w + x / self.side) * d;
                for c in 0..d {
                    let v = if self.spec.detail_noise == 0.0 {
                        low[src + c]
                    } else {
                        (f64::from(low[src + c]) + self.spec.detail_noise * rng.next_normal()) as f32
                    };
                    high.push(v);
                }
            }
        }
        FramePair {
            low: FeatureMap::new(t, Tier::Low, low_shape, low).expect("generated values are finite"),
            high: FeatureMap::new(t, Tier::High, high_shape, high).expect("generated values are finite"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = FramePair> + '_ {
        (0..self.spec.n_steps).map(move |t| self.frame(t))
    }
}

/// Average-pools a high-res map by `side × side` patch blocks.
pub fn average_pool(high: &FeatureMap, side: usize) -> Vec<f32> {
    let s = high.shape();
    let (h, w, d) = (s.grid_h / side, s.grid_w / side, s.dim);
    let v = high.values();
    let mut out = vec![0.0f32; h * w * d];
    let inv = 1.0 / (side * side) as f64;
    for y in 0..h {
        for x in 0..w {
            for c in 0..d {
                let mut acc = 0.0f64;
                for dy in 0..side {
                    for dx in 0..side {
                        acc += f64::from(v[((y * side + dy) * s.grid_w + x * side + dx) * d + c]);
                    }
                }
                out[(y * w + x) * d + c] = (acc * inv) as f32;
            }
        }
    }
    out
}

/// Writes a stream as a pair of FVSB files.
pub fn write_pair_files(low_path: &Path, high_path: &Path, pairs: impl IntoIterator<Item = FramePair>) -> Result<u64> {
    let mut pairs = pairs.into_iter().peekable();
    let Some(first) = pairs.peek() else {
        return Err(Error::InvalidState("cannot infer shapes from an empty stream".into()));
    };
    let (ls, hs) = (first.low.shape(), first.high.shape());
    let mut lw = fvsb::Writer::new(
        std::io::BufWriter::new(std::fs::File::create(low_path)?),
        Header::new(PayloadKind::Map(Tier::Low), ls)?,
    )?;
    let mut hw = fvsb::Writer::new(
        std::io::BufWriter::new(std::fs::File::create(high_path)?),
        Header::new(PayloadKind::Map(Tier::High), hs)?,
    )?;
    for p in pairs {
        lw.write_record(p.low.values())?;
        hw.write_record(p.high.values())?;
    }
    let n = lw.count();
    lw.finish()?;
    hw.finish()?;
    Ok(n)
}

/// Paired frames read from a low-res and a high-res FVSB file, in index order.
pub struct FileStream {
    low: fvsb::Reader<std::io::BufReader<std::fs::File>>,
    high: fvsb::Reader<std::io::BufReader<std::fs::File>>,
    failed: bool,
}

impl FileStream {
    pub fn open(low_path: &Path, high_path: &Path) -> Result<Self> {
        let low = fvsb::open_maps(low_path)?;
        let high = fvsb::open_maps(high_path)?;
        if low.header().kind != PayloadKind::Map(Tier::Low) {
            return Err(Error::parse(6, None, format!("{} is not a low-res stream", low_path.display())));
        }
        if high.header().kind != PayloadKind::Map(Tier::High) {
            return Err(Error::parse(6, None, format!("{} is not a high-res stream", high_path.display())));
        }
        Ok(FileStream {
            low,
            high,
            failed: false,
        })
    }

    pub fn low_shape(&self) -> Shape {
        self.low.header().shape
    }

    pub fn high_shape(&self) -> Shape {
        self.high.header().shape
    }
}

impl Iterator for FileStream {
    type Item = Result<FramePair>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let step = (|| {
            let low = self.low.next_map()?;
            let high = self.high.next_map()?;
            match (low, high) {
                (None, None) => Ok(None),
                (Some(low), Some(high)) => Ok(Some(FramePair { low, high })),
                (Some(l), None) => Err(Error::parse(0, Some(l.frame_index()), "high-res file ends before low-res file")),
                (None, Some(h)) => Err(Error::parse(0, Some(h.frame_index()), "low-res file ends before high-res file")),
            }
        })();
        match step {
            Ok(Some(p)) => Some(Ok(p)),
            Ok(None) => None,
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

/// Frame pairs over a byte stream (pipes, sockets): the low-res FVSB header,
/// the high-res FVSB header, then alternating low/high records.
pub struct PairStreamWriter<W: Write> {
    inner: W,
    low: Header,
    high: Header,
    buf: Vec<u8>,
}

impl<W: Write> PairStreamWriter<W> {
    pub fn new(mut inner: W, low: Shape, high: Shape) -> Result<Self> {
        let low = Header::new(PayloadKind::Map(Tier::Low), low)?;
        let high = Header::new(PayloadKind::Map(Tier::High), high)?;
        inner.write_all(&low.encode())?;
        inner.write_all(&high.encode())?;
        Ok(PairStreamWriter {
            inner,
            low,
            high,
            buf: Vec::new(),
        })
    }

    pub fn send(&mut self, pair: &FramePair) -> Result<()> {
        if pair.low.shape() != self.low.shape || pair.high.shape() != self.high.shape {
            return Err(Error::ShapeMismatch("frame pair does not match stream header".into()));
        }
        self.buf.clear();
        fvsb::encode_record(pair.low.values(), &mut self.buf);
        fvsb::encode_record(pair.high.values(), &mut self.buf);
        self.inner.write_all(&self.buf)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub struct PairStreamReader<R: Read> {
    inner: R,
    low: Header,
    high: Header,
    next: u64,
    done: bool,
}

impl<R: Read> PairStreamReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut h = [0u8; fvsb::HEADER_LEN * 2];
        inner
            .read_exact(&mut h)
            .map_err(|e| Error::parse(0, None, format!("pair stream header: {e}")))?;
        let low = Header::decode(&h[..fvsb::HEADER_LEN])?;
        let high = Header::decode(&h[fvsb::HEADER_LEN..])
            .map_err(|e| Error::parse(fvsb::HEADER_LEN as u64, None, e.to_string()))?;
        if low.kind != PayloadKind::Map(Tier::Low) || high.kind != PayloadKind::Map(Tier::High) {
            return Err(Error::parse(6, None, "pair stream must carry low then high headers"));
        }
        Ok(PairStreamReader {
            inner,
            low,
            high,
            next: 0,
            done: false,
        })
    }

    pub fn low_shape(&self) -> Shape {
        self.low.shape
    }

    pub fn high_shape(&self) -> Shape {
        self.high.shape
    }

    fn offset(&self) -> u64 {
        (2 * fvsb::HEADER_LEN) as u64 + self.next * (self.low.stride() + self.high.stride()) as u64
    }
}

impl<R: Read> Iterator for PairStreamReader<R> {
    type Item = Result<FramePair>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let total = self.low.stride() + self.high.stride();
        let mut buf = vec![0u8; total];
        let mut filled = 0;
        while filled < total {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            }
        }
        if filled == 0 {
            self.done = true;
            return None;
        }
        let index = self.next;
        if filled < total {
            self.done = true;
            return Some(Err(Error::parse(
                self.offset() + filled as u64,
                Some(index),
                format!("frame pair {index} truncated"),
            )));
        }
        let offset = self.offset();
        self.next += 1;
        let (l, h) = buf.split_at(self.low.stride());
        let pair = FeatureMap::new(index, Tier::Low, self.low.shape, fvsb::decode_record(l)).and_then(|low| {
            let high = FeatureMap::new(index, Tier::High, self.high.shape, fvsb::decode_record(h))?;
            Ok(FramePair { low, high })
        });
        Some(pair.map_err(|e| {
            self.done = true;
            Error::parse(offset, Some(index), e.to_string())
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> StreamSpec {
        StreamSpec::for_config(&MemoryConfig::scaled(), 7, 50)
    }

    #[test]
    fn deterministic_and_random_access() {
        let a = SyntheticStream::new(spec()).unwrap();
        let b = SyntheticStream::new(spec()).unwrap();
        let seq: Vec<FramePair> = a.iter().collect();
        assert_eq!(seq.len(), 50);
        assert_eq!(seq[17], b.frame(17));
        let other = SyntheticStream::new(StreamSpec { seed: 8, ..spec() }).unwrap();
        assert_ne!(other.frame(0).low, seq[0].low);
    }

    #[test]
    fn zero_spread_single_scene_is_constant() {
        let s = SyntheticStream::new(StreamSpec {
            n_scenes: 1,
            cluster_spread: 0.0,
            ..spec()
        })
        .unwrap();
        let first = s.frame(0).low;
        for t in 1..20 {
            assert_eq!(s.frame(t).low.values(), first.values());
        }
    }

    #[test]
    fn pooled_high_equals_low_without_detail_noise() {
        let s = SyntheticStream::new(StreamSpec {
            detail_noise: 0.0,
            ..spec()
        })
        .unwrap();
        for t in [0, 9, 31] {
            let p = s.frame(t);
            let pooled = average_pool(&p.high, 2);
            for (a, b) in pooled.iter().zip(p.low.values()) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn every_scene_appears_first_in_order() {
        let s = SyntheticStream::new(StreamSpec {
            n_scenes: 3,
            scene_len_max: 10,
            ..spec()
        })
        .unwrap();
        let mut seen = Vec::new();
        for t in 0..s.len() {
            let sc = s.scene_of(t);
            if !seen.contains(&sc) {
                seen.push(sc);
            }
        }
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn spec_validation() {
        assert!(StreamSpec { n_scenes: 0, ..spec() }.validate().is_err());
        assert!(StreamSpec {
            cluster_spread: -1.0,
            ..spec()
        }
        .validate()
        .is_err());
        assert!(StreamSpec {
            high: Shape::new(7, 8, 64),
            ..spec()
        }
        .validate()
        .is_err());
        let text = toml::to_string(&spec()).unwrap();
        assert_eq!(StreamSpec::from_toml_str(&text).unwrap(), spec());
    }

    #[test]
    fn pair_stream_round_trip_and_truncation() {
        let s = SyntheticStream::new(spec()).unwrap();
        let mut w = PairStreamWriter::new(Vec::new(), s.spec().low, s.spec().high).unwrap();
        for p in s.iter().take(5) {
            w.send(&p).unwrap();
        }
        let bytes = w.finish().unwrap();
        let back: Vec<FramePair> = PairStreamReader::new(&bytes[..]).unwrap().map(|r| r.unwrap()).collect();
        assert_eq!(back, s.iter().take(5).collect::<Vec<_>>());

        let cut = &bytes[..bytes.len() - 10];
        let items: Vec<_> = PairStreamReader::new(cut).unwrap().collect();
        assert_eq!(items.len(), 5);
        match &items[4] {
            Err(Error::Parse { record, .. }) => assert_eq!(*record, Some(4)),
            other => panic!("{other:?}"),
        }
    }
}
