//! Streaming runtime: a frame-handler thread consolidates incoming frames and
//! publishes immutable snapshots; queries run on the caller's thread against
//! the latest published snapshot.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use arc_swap::ArcSwap;
use serde::Serialize;

use crate::assembly::{assemble, FlashMemorySnapshot};
use crate::bank::FeatureBank;
use crate::config::MemoryConfig;
use crate::csm::{ClusterState, UpdateTrace};
use crate::dam::{DamState, PolicyConfig, RetrievalStats, Retriever};
use crate::error::{Error, Result};
use crate::policies::{consolidator_for, Consolidator};
use crate::synth::FramePair;
use crate::types::{FeatureMap, Tier};

/// Consistent view published after each consolidated frame.
#[derive(Debug, Clone)]
pub struct Published {
    pub csm: ClusterState,
    /// Frames committed to both banks when this state was published.
    pub frames: u64,
    /// Present when retrieval runs eagerly on every frame.
    pub dam: Option<Arc<DamState>>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, PartialEq, Eq)]
pub struct LatencyReport {
    pub snapshot_acquire_ns: u64,
    pub retrieval_ns: u64,
    pub assembly_ns: u64,
    pub total_ns: u64,
}

#[derive(Debug, Clone)]
pub struct QueryResult {
    pub snapshot: FlashMemorySnapshot,
    pub csm: ClusterState,
    pub dam: Arc<DamState>,
    pub latency: LatencyReport,
    /// Retriever counters after this query.
    pub retrieval: RetrievalStats,
}

fn nanos(d: Duration) -> u64 {
    u64::try_from(d.as_nanos()).unwrap_or(u64::MAX)
}

#[derive(Serialize)]
struct MetricLine<'a> {
    event: &'a str,
    t: u64,
    wall_ns: u64,
    tokens: usize,
}

/// Sink for JSON-lines metrics (`{"event", "t", "wall_ns", "tokens"}`).
pub type MetricsSink = Box<dyn Write + Send>;

struct Metrics(Mutex<MetricsSink>);

impl Metrics {
    fn record(&self, event: &str, t: u64, wall_ns: u64, tokens: usize) {
        let line = MetricLine {
            event,
            t,
            wall_ns,
            tokens,
        };
        let mut out = self.0.lock().unwrap_or_else(|p| p.into_inner());
        // Metrics are best effort; a failing sink must not stop the stream.
        if serde_json::to_writer(&mut *out, &line).is_ok() {
            let _ = out.write_all(b"\n");
            let _ = out.flush();
        }
    }
}

fn check_pair(config: &MemoryConfig, low: &FeatureMap, high: &FeatureMap, expected: u64) -> Result<()> {
    for (map, tier) in [(low, Tier::Low), (high, Tier::High)] {
        if map.tier() != tier {
            return Err(Error::TierMismatch {
                expected: tier,
                got: map.tier(),
            });
        }
        if map.shape() != config.shape(tier) {
            return Err(Error::ShapeMismatch(format!(
                "{tier:?} frame has shape {}, expected {}",
                map.shape(),
                config.shape(tier)
            )));
        }
        if map.frame_index() != expected {
            return Err(Error::Sequencing {
                expected,
                got: map.frame_index(),
            });
        }
    }
    Ok(())
}

/// Single-threaded engine: the same consolidation, retrieval and assembly as
/// [`Engine`], driven step by step.
pub struct Pipeline {
    config: MemoryConfig,
    low: FeatureBank,
    high: FeatureBank,
    state: ClusterState,
    consolidator: Box<dyn Consolidator>,
    retriever: Retriever,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("policy", &self.consolidator.policy())
            .field("frames", &self.low.len())
            .field("state", &self.state)
            .finish()
    }
}

impl Pipeline {
    pub fn new(config: MemoryConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let low = FeatureBank::in_memory(Tier::Low, config.low_shape())?;
        let high = FeatureBank::with_watermark(Tier::High, config.high_shape(), config.offload_watermark)?;
        Ok(Pipeline {
            state: ClusterState::new(config.low_shape(), config.n_csm),
            consolidator: consolidator_for(&config, seed),
            retriever: Retriever::new(PolicyConfig::from(&config)),
            config,
            low,
            high,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn state(&self) -> &ClusterState {
        &self.state
    }

    pub fn low_bank(&self) -> &FeatureBank {
        &self.low
    }

    pub fn high_bank(&self) -> &FeatureBank {
        &self.high
    }

    pub fn frames(&self) -> u64 {
        self.low.len()
    }

    /// Appends one frame pair and consolidates it.
    pub fn step(&mut self, low: FeatureMap, high: FeatureMap) -> Result<Option<UpdateTrace>> {
        check_pair(&self.config, &low, &high, self.low.len())?;
        let (next, trace) = self.consolidator.consolidate(&self.state, &low)?;
        self.low.append(low)?;
        self.high.append(high)?;
        self.state = next;
        Ok(trace)
    }

    pub fn step_pair(&mut self, pair: FramePair) -> Result<Option<UpdateTrace>> {
        self.step(pair.low, pair.high)
    }

    pub fn retrieve(&mut self) -> Result<DamState> {
        self.retriever.retrieve(&self.state, &self.low, &self.high, self.low.len())
    }

    pub fn query(&mut self) -> Result<FlashMemorySnapshot> {
        let dam = self.retrieve()?;
        assemble(&self.state, &dam, &self.config)
    }

    pub fn into_state(self) -> ClusterState {
        self.state
    }
}

struct Shared {
    config: MemoryConfig,
    low: FeatureBank,
    high: FeatureBank,
    published: ArcSwap<Published>,
    progress: Mutex<u64>,
    progressed: Condvar,
    retriever: Mutex<Retriever>,
    failure: Mutex<Option<String>>,
    metrics: Option<Metrics>,
}

impl Shared {
    fn failure(&self) -> Option<Error> {
        let f = self.failure.lock().unwrap_or_else(|p| p.into_inner());
        f.as_ref().map(|m| Error::InvalidState(format!("frame handler failed: {m}")))
    }

    fn fail(&self, e: &Error) {
        log::error!("frame handler stopped: {e}");
        *self.failure.lock().unwrap_or_else(|p| p.into_inner()) = Some(e.to_string());
        self.progressed.notify_all();
    }
}

struct Ingest {
    tx: Option<SyncSender<FramePair>>,
    next: u64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    Created,
    Running,
    Stopped,
}

/// Asynchronous streaming engine.
///
/// `ingest_frame` validates and enqueues into a bounded queue (blocking when
/// full); one frame-handler thread appends to the banks, consolidates and
/// publishes. `query` never blocks on the handler.
pub struct Engine {
    shared: Arc<Shared>,
    seed: u64,
    phase: Mutex<Phase>,
    ingest: Mutex<Ingest>,
    worker: Mutex<Option<JoinHandle<ClusterState>>>,
    stopped: AtomicBool,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("frames", &self.shared.published.load().frames)
            .finish()
    }
}

/// Handle returned by [`Engine::start`].
pub type EngineHandle = Engine;

impl Engine {
    /// Builds an engine without starting its thread.
    pub fn new(config: MemoryConfig, seed: u64) -> Result<Self> {
        Self::with_metrics(config, seed, None)
    }

    pub fn with_metrics(config: MemoryConfig, seed: u64, metrics: Option<MetricsSink>) -> Result<Self> {
        config.validate()?;
        let low = FeatureBank::in_memory(Tier::Low, config.low_shape())?;
        let high = FeatureBank::with_watermark(Tier::High, config.high_shape(), config.offload_watermark)?;
        let published = Published {
            csm: ClusterState::new(config.low_shape(), config.n_csm),
            frames: 0,
            dam: config.eager_retrieval.then(|| Arc::new(DamState::default())),
        };
        let shared = Shared {
            retriever: Mutex::new(Retriever::new(PolicyConfig::from(&config))),
            config,
            low,
            high,
            published: ArcSwap::from_pointee(published),
            progress: Mutex::new(0),
            progressed: Condvar::new(),
            failure: Mutex::new(None),
            metrics: metrics.map(|m| Metrics(Mutex::new(m))),
        };
        Ok(Engine {
            shared: Arc::new(shared),
            seed,
            phase: Mutex::new(Phase::Created),
            ingest: Mutex::new(Ingest { tx: None, next: 0 }),
            worker: Mutex::new(None),
            stopped: AtomicBool::new(false),
        })
    }

    /// Builds and starts an engine.
    pub fn start_with(config: MemoryConfig, seed: u64) -> Result<EngineHandle> {
        let engine = Self::new(config, seed)?;
        engine.start()?;
        Ok(engine)
    }

    fn phase(&self) -> MutexGuard<'_, Phase> {
        self.phase.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.shared.config
    }

    pub fn start(&self) -> Result<()> {
        let mut phase = self.phase();
        match *phase {
            Phase::Running => return Err(Error::Lifecycle("engine already started")),
            Phase::Stopped => return Err(Error::Lifecycle("engine cannot restart after stop")),
            Phase::Created => {}
        }
        let (tx, rx) = sync_channel::<FramePair>(self.shared.config.queue_capacity);
        let shared = Arc::clone(&self.shared);
        let consolidator = consolidator_for(&shared.config, self.seed);
        let handle = std::thread::Builder::new()
            .name("vstream-frames".into())
            .spawn(move || frame_handler(shared, consolidator, rx))?;
        self.ingest.lock().unwrap_or_else(|p| p.into_inner()).tx = Some(tx);
        *self.worker.lock().unwrap_or_else(|p| p.into_inner()) = Some(handle);
        *phase = Phase::Running;
        Ok(())
    }

    /// Validates and enqueues one frame pair. Blocks while the queue is full.
    pub fn ingest_frame(&self, low: FeatureMap, high: FeatureMap) -> Result<()> {
        if let Some(e) = self.shared.failure() {
            return Err(e);
        }
        let mut ingest = self.ingest.lock().unwrap_or_else(|p| p.into_inner());
        let Some(tx) = ingest.tx.as_ref() else {
            return Err(Error::Lifecycle(if self.stopped.load(Ordering::Acquire) {
                "engine stopped"
            } else {
                "engine not started"
            }));
        };
        check_pair(&self.shared.config, &low, &high, ingest.next)?;
        tx.send(FramePair { low, high })
            .map_err(|_| self.shared.failure().unwrap_or(Error::Lifecycle("frame handler exited")))?;
        ingest.next += 1;
        Ok(())
    }

    pub fn ingest_pair(&self, pair: FramePair) -> Result<()> {
        self.ingest_frame(pair.low, pair.high)
    }

    /// Frames accepted by `ingest_frame` so far.
    pub fn ingested(&self) -> u64 {
        self.ingest.lock().unwrap_or_else(|p| p.into_inner()).next
    }

    /// Latest published state, without blocking.
    pub fn published(&self) -> Arc<Published> {
        self.shared.published.load_full()
    }

    /// Blocks until at least `frames` frames have been published.
    pub fn wait_for(&self, frames: u64) -> Result<()> {
        let mut done = self.shared.progress.lock().unwrap_or_else(|p| p.into_inner());
        while *done < frames {
            if let Some(e) = self.shared.failure() {
                return Err(e);
            }
            if *self.phase() != Phase::Running {
                return Err(Error::Lifecycle("engine not running"));
            }
            done = self
                .shared
                .progressed
                .wait_timeout(done, Duration::from_millis(50))
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
        Ok(())
    }

    /// Blocks until every ingested frame has been published.
    pub fn flush(&self) -> Result<()> {
        self.wait_for(self.ingested())
    }

    /// Retrieves key frames for the latest snapshot and assembles the memory.
    pub fn query(&self) -> Result<QueryResult> {
        if *self.phase() != Phase::Running {
            return Err(Error::Lifecycle("query requires a running engine"));
        }
        if let Some(e) = self.shared.failure() {
            return Err(e);
        }
        let start = Instant::now();
        let published = self.shared.published.load_full();
        let acquired = Instant::now();
        let (dam, retrieval) = match &published.dam {
            Some(dam) => {
                let stats = self.shared.retriever.lock().unwrap_or_else(|p| p.into_inner()).stats();
                (Arc::clone(dam), stats)
            }
            None => {
                let mut r = self.shared.retriever.lock().unwrap_or_else(|p| p.into_inner());
                let dam = r.retrieve(&published.csm, &self.shared.low, &self.shared.high, published.frames)?;
                (Arc::new(dam), r.stats())
            }
        };
        let retrieved = Instant::now();
        let snapshot = assemble(&published.csm, &dam, &self.shared.config)?;
        let end = Instant::now();
        let latency = LatencyReport {
            snapshot_acquire_ns: nanos(acquired - start),
            retrieval_ns: nanos(retrieved - acquired),
            assembly_ns: nanos(end - retrieved),
            total_ns: nanos(end - start).max(1),
        };
        if let Some(m) = &self.shared.metrics {
            m.record("query", published.frames, latency.total_ns, snapshot.token_count);
        }
        Ok(QueryResult {
            snapshot,
            csm: published.csm.clone(),
            dam,
            latency,
            retrieval,
        })
    }

    /// Drains the queue, joins the frame handler and returns the final state.
    pub fn stop(&self) -> Result<ClusterState> {
        let mut phase = self.phase();
        match *phase {
            Phase::Created => return Err(Error::Lifecycle("engine not started")),
            Phase::Stopped => return Err(Error::Lifecycle("engine already stopped")),
            Phase::Running => {}
        }
        self.stopped.store(true, Ordering::Release);
        // Dropping the sender ends the handler loop once the queue drains.
        self.ingest.lock().unwrap_or_else(|p| p.into_inner()).tx = None;
        let handle = self.worker.lock().unwrap_or_else(|p| p.into_inner()).take();
        *phase = Phase::Stopped;
        drop(phase);
        let state = handle
            .expect("running engine has a worker")
            .join()
            .map_err(|_| Error::InvalidState("frame handler panicked".into()))?;
        match self.shared.failure() {
            Some(e) => Err(e),
            None => Ok(state),
        }
    }

    pub fn low_bank(&self) -> &FeatureBank {
        &self.shared.low
    }

    pub fn high_bank(&self) -> &FeatureBank {
        &self.shared.high
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        if *self.phase() == Phase::Running {
            let _ = self.stop();
        }
    }
}

fn frame_handler(shared: Arc<Shared>, mut consolidator: Box<dyn Consolidator>, rx: Receiver<FramePair>) -> ClusterState {
    let mut state = shared.published.load().csm.clone();
    for FramePair { low, high } in rx {
        let began = Instant::now();
        let t = low.frame_index();
        let step = (|| -> Result<Published> {
            let (next, _) = consolidator.consolidate(&state, &low)?;
            shared.low.append(low)?;
            shared.high.append(high)?;
            let frames = shared.low.len();
            let dam = if shared.config.eager_retrieval {
                let mut r = shared.retriever.lock().unwrap_or_else(|p| p.into_inner());
                Some(Arc::new(r.retrieve(&next, &shared.low, &shared.high, frames)?))
            } else {
                None
            };
            Ok(Published { csm: next, frames, dam })
        })();
        match step {
            Ok(published) => {
                state = published.csm.clone();
                let frames = published.frames;
                shared.published.store(Arc::new(published));
                if let Some(m) = &shared.metrics {
                    m.record("ingest", t, nanos(began.elapsed()), 0);
                }
                *shared.progress.lock().unwrap_or_else(|p| p.into_inner()) = frames;
                shared.progressed.notify_all();
            }
            Err(e) => {
                shared.fail(&e);
                break;
            }
        }
    }
    state
}
