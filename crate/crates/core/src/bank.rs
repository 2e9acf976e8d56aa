//! Append-only per-frame feature store.
//!
//! One writer appends frames in index order; any number of readers fetch
//! committed frames without taking a lock. Frames live in a segmented slot
//! array; with an offload watermark `w`, only the `w` most recent frames stay
//! resident and older ones spill to an FVSB file on disk.
//!
//! Publication order on append: record stored (slot or disk), then `committed`
//! advanced with release ordering. On spill: record written to disk, `spilled`
//! advanced, then the slot cleared. A reader that finds a cleared slot for a
//! committed frame therefore always finds it on disk.

use std::fs::File;
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use arc_swap::ArcSwapOption;

use crate::error::{Error, Result};
use crate::fvsb::{self, Header, PayloadKind};
use crate::types::{FeatureMap, Shape, Tier};

const BASE: usize = 64;
const SEGMENTS: usize = 40;

type Segment = Box<[ArcSwapOption<FeatureMap>]>;

fn locate(index: u64) -> (usize, usize) {
    let bucket = index / BASE as u64 + 1;
    let seg = 63 - bucket.leading_zeros() as usize;
    let start = BASE as u64 * ((1u64 << seg) - 1);
    (seg, (index - start) as usize)
}

struct Inner {
    tier: Tier,
    shape: Shape,
    header: Header,
    watermark: Option<usize>,
    committed: AtomicU64,
    spilled: AtomicU64,
    segments: [OnceLock<Segment>; SEGMENTS],
    disk: Option<File>,
    writer: Mutex<()>,
}

/// Shared handle to a feature bank. Clones refer to the same store.
#[derive(Clone)]
pub struct FeatureBank {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for FeatureBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureBank")
            .field("tier", &self.inner.tier)
            .field("shape", &self.inner.shape)
            .field("count", &self.len())
            .field("spilled", &self.spilled_count())
            .finish()
    }
}

impl FeatureBank {
    /// A bank that never offloads.
    pub fn in_memory(tier: Tier, shape: Shape) -> Result<Self> {
        Self::build(tier, shape, None, None)
    }

    /// A bank keeping at most `watermark` frames resident, spilling older
    /// ones to an anonymous temporary file.
    pub fn with_offload(tier: Tier, shape: Shape, watermark: usize) -> Result<Self> {
        let file = tempfile::tempfile()?;
        Self::build(tier, shape, Some(watermark), Some(file))
    }

    /// Like [`FeatureBank::with_offload`] but spilling to `path`, which then
    /// holds a valid FVSB prefix of the stream.
    pub fn with_offload_at(tier: Tier, shape: Shape, watermark: usize, path: &Path) -> Result<Self> {
        let file = File::options().read(true).write(true).create(true).truncate(true).open(path)?;
        Self::build(tier, shape, Some(watermark), Some(file))
    }

    /// `None` keeps everything resident.
    pub fn with_watermark(tier: Tier, shape: Shape, watermark: Option<usize>) -> Result<Self> {
        match watermark {
            None => Self::in_memory(tier, shape),
            Some(w) => Self::with_offload(tier, shape, w),
        }
    }

    fn build(tier: Tier, shape: Shape, watermark: Option<usize>, disk: Option<File>) -> Result<Self> {
        let header = Header::new(PayloadKind::Map(tier), shape)?;
        if let Some(f) = &disk {
            f.write_all_at(&header.encode(), 0)?;
        }
        Ok(FeatureBank {
            inner: Arc::new(Inner {
                tier,
                shape,
                header,
                watermark,
                committed: AtomicU64::new(0),
                spilled: AtomicU64::new(0),
                segments: std::array::from_fn(|_| OnceLock::new()),
                disk,
                writer: Mutex::new(()),
            }),
        })
    }

    pub fn tier(&self) -> Tier {
        self.inner.tier
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn watermark(&self) -> Option<usize> {
        self.inner.watermark
    }

    /// Committed frame count.
    pub fn len(&self) -> u64 {
        self.inner.committed.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spilled_count(&self) -> u64 {
        self.inner.spilled.load(Ordering::Acquire)
    }

    pub fn resident_count(&self) -> u64 {
        self.len() - self.spilled_count().min(self.len())
    }

    fn slot(&self, index: u64) -> Option<&ArcSwapOption<FeatureMap>> {
        let (seg, off) = locate(index);
        self.inner.segments.get(seg)?.get().map(|s| &s[off])
    }

    fn slot_or_alloc(&self, index: u64) -> Result<&ArcSwapOption<FeatureMap>> {
        let (seg, off) = locate(index);
        let segment = self
            .inner
            .segments
            .get(seg)
            .ok_or_else(|| Error::BankIntegrity(format!("frame {index} beyond addressable range")))?
            .get_or_init(|| (0..(BASE << seg)).map(|_| ArcSwapOption::empty()).collect());
        Ok(&segment[off])
    }

    /// Appends the next frame and returns its index. Frames must arrive in
    /// index order starting at 0.
    pub fn append(&self, feature: FeatureMap) -> Result<u64> {
        let _guard = self.inner.writer.lock().unwrap_or_else(|e| e.into_inner());
        feature.expect_tier(self.inner.tier)?;
        if feature.shape() != self.inner.shape {
            return Err(Error::ShapeMismatch(format!(
                "bank holds {}, got {}",
                self.inner.shape,
                feature.shape()
            )));
        }
        let index = self.inner.committed.load(Ordering::Relaxed);
        if feature.frame_index() != index {
            return Err(Error::Sequencing {
                expected: index,
                got: feature.frame_index(),
            });
        }

        if self.inner.watermark == Some(0) {
            self.write_disk(index, feature.values())?;
            self.inner.spilled.store(index + 1, Ordering::Release);
        } else {
            self.slot_or_alloc(index)?.store(Some(Arc::new(feature)));
        }
        self.inner.committed.store(index + 1, Ordering::Release);

        if let Some(w) = self.inner.watermark {
            let committed = index + 1;
            loop {
                let spilled = self.inner.spilled.load(Ordering::Relaxed);
                if committed - spilled <= w as u64 {
                    break;
                }
                let slot = self.slot(spilled).expect("resident frame has a slot");
                let map = slot.load_full().expect("resident frame is present");
                self.write_disk(spilled, map.values())?;
                self.inner.spilled.store(spilled + 1, Ordering::Release);
                slot.store(None);
            }
        }
        Ok(index)
    }

    fn write_disk(&self, index: u64, values: &[f32]) -> Result<()> {
        let file = self
            .inner
            .disk
            .as_ref()
            .ok_or_else(|| Error::BankIntegrity("offload requested without a disk segment".into()))?;
        let mut buf = Vec::with_capacity(self.inner.header.stride());
        fvsb::encode_record(values, &mut buf);
        file.write_all_at(&buf, self.inner.header.record_offset(index))?;
        Ok(())
    }

    fn read_disk(&self, index: u64) -> Result<FeatureMap> {
        let file = self
            .inner
            .disk
            .as_ref()
            .ok_or_else(|| Error::BankIntegrity(format!("frame {index} spilled but no disk segment")))?;
        let mut buf = vec![0u8; self.inner.header.stride()];
        file.read_exact_at(&mut buf, self.inner.header.record_offset(index))?;
        FeatureMap::new(index, self.inner.tier, self.inner.shape, fvsb::decode_record(&buf))
    }

    /// Fetches a committed frame, bit-exact, from memory or disk.
    pub fn read(&self, index: u64) -> Result<FeatureMap> {
        let count = self.len();
        if index >= count {
            return Err(Error::NotFound { index, count });
        }
        if index < self.spilled_count() {
            return self.read_disk(index);
        }
        match self.slot(index).and_then(|s| s.load_full()) {
            Some(map) => Ok((*map).clone()),
            None => self.read_disk(index),
        }
    }

    /// Runs `f` over the values of a committed frame without copying when the
    /// frame is resident.
    pub fn with_values<R>(&self, index: u64, f: impl FnOnce(&[f32]) -> R) -> Result<R> {
        let count = self.len();
        if index >= count {
            return Err(Error::NotFound { index, count });
        }
        if index >= self.spilled_count() {
            if let Some(slot) = self.slot(index) {
                let guard = slot.load();
                if let Some(map) = guard.as_ref() {
                    return Ok(f(map.values()));
                }
            }
        }
        Ok(f(self.read_disk(index)?.values()))
    }

    /// Writes every committed frame to an FVSB file.
    pub fn export(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(File::create(path)?);
        let mut w = fvsb::Writer::new(file, self.inner.header)?;
        for i in 0..self.len() {
            self.with_values(i, |v| w.write_record(v))??;
        }
        w.finish()?;
        Ok(())
    }

    /// Loads an FVSB file into a new bank with the given watermark.
    pub fn import(path: &Path, watermark: Option<usize>) -> Result<Self> {
        let mut reader = fvsb::open_maps(path)?;
        let header = reader.header();
        let tier = match header.kind {
            PayloadKind::Map(t) => t,
            PayloadKind::Token => return Err(Error::parse(6, None, "token payload is not a feature bank")),
        };
        let bank = Self::with_watermark(tier, header.shape, watermark)?;
        while let Some(m) = reader.next_map()? {
            bank.append(m)?;
        }
        Ok(bank)
    }
}
