use std::sync::Arc;

use vstream_core::runtime::{Engine, Pipeline};
use vstream_core::synth::{StreamSpec, SyntheticStream};
use vstream_core::{Error, FeatureMap, MemoryConfig, Tier};

fn cfg() -> MemoryConfig {
    MemoryConfig {
        n_csm: 8,
        n_dam: 4,
        queue_capacity: 4,
        ..MemoryConfig::scaled()
    }
}

fn thread_count() -> usize {
    std::fs::read_dir("/proc/self/task").map(|d| d.count()).unwrap_or(0)
}

#[test]
fn start_stop_cycles_do_not_leak_threads() {
    let c = cfg();
    let stream = SyntheticStream::new(StreamSpec::for_config(&c, 1, 30)).unwrap();
    let mut reference = Pipeline::new(c.clone(), 0).unwrap();
    for pair in stream.iter() {
        reference.step_pair(pair).unwrap();
    }
    let before = thread_count();
    for _ in 0..100 {
        let engine = Engine::start_with(c.clone(), 0).unwrap();
        for pair in stream.iter() {
            engine.ingest_pair(pair).unwrap();
        }
        assert_eq!(engine.stop().unwrap(), *reference.state());
    }
    // Other tests in this binary may run concurrently; allow for them.
    assert!(thread_count() <= before + 2, "{} -> {}", before, thread_count());
}

#[test]
fn one_frame_gives_one_cluster() {
    let c = cfg();
    let stream = SyntheticStream::new(StreamSpec::for_config(&c, 1, 1)).unwrap();
    let engine = Engine::start_with(c, 0).unwrap();
    engine.ingest_pair(stream.frame(0)).unwrap();
    engine.flush().unwrap();
    let q = engine.query().unwrap();
    assert_eq!(q.snapshot.count(vstream_core::assembly::Source::Csm), 1);
    assert_eq!(q.snapshot.count(vstream_core::assembly::Source::Dam), 1);
}

#[test]
fn default_config_weight_after_120_steps() {
    let c = MemoryConfig::scaled();
    let stream = SyntheticStream::new(StreamSpec::for_config(&c, 2, 120)).unwrap();
    let engine = Engine::start_with(c, 0).unwrap();
    for pair in stream.iter() {
        engine.ingest_pair(pair).unwrap();
    }
    engine.flush().unwrap();
    let p = engine.published();
    assert_eq!(p.csm.total_weight(), 120);
    assert_eq!(p.csm.len(), 60);
}

#[test]
fn identical_frames_are_deterministic() {
    let c = cfg();
    let run = || {
        let mut p = Pipeline::new(c.clone(), 0).unwrap();
        let v = vec![0.5f32; c.low_shape().len()];
        let h = vec![0.5f32; c.high_shape().len()];
        for t in 0..1000 {
            let low = FeatureMap::new(t, Tier::Low, c.low_shape(), v.clone()).unwrap();
            let high = FeatureMap::new(t, Tier::High, c.high_shape(), h.clone()).unwrap();
            p.step(low, high).unwrap();
        }
        p.into_state()
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.len(), 8);
    assert_eq!(a.total_weight(), 1000);
    // Every point ties into cluster 0; repair then hands the lowest-index
    // points to the empty clusters, so weight rotates through the slots.
    let w = a.weights();
    let (min, max) = (w.iter().min().unwrap(), w.iter().max().unwrap());
    assert!(max - min <= 1, "{w:?}");
}

#[test]
fn queries_from_many_threads_during_ingest() {
    let c = cfg();
    let stream = SyntheticStream::new(StreamSpec::for_config(&c, 3, 300)).unwrap();
    let engine = Arc::new(Engine::start_with(c.clone(), 0).unwrap());
    let readers: Vec<_> = (0..3)
        .map(|_| {
            let engine = Arc::clone(&engine);
            std::thread::spawn(move || {
                let mut last = 0;
                for _ in 0..50 {
                    let q = engine.query().unwrap();
                    assert!(q.snapshot.frame_count >= last);
                    last = q.snapshot.frame_count;
                    assert_eq!(q.csm.total_weight(), q.snapshot.frame_count);
                }
            })
        })
        .collect();
    for pair in stream.iter() {
        engine.ingest_pair(pair).unwrap();
    }
    for r in readers {
        r.join().unwrap();
    }
    engine.flush().unwrap();
    let q = engine.query().unwrap();
    let mut p = Pipeline::new(c, 0).unwrap();
    for pair in stream.iter() {
        p.step_pair(pair).unwrap();
    }
    assert_eq!(q.snapshot, p.query().unwrap());
}

#[test]
fn ingest_after_stop_is_lifecycle_error() {
    let c = cfg();
    let stream = SyntheticStream::new(StreamSpec::for_config(&c, 4, 2)).unwrap();
    let engine = Engine::start_with(c, 0).unwrap();
    engine.stop().unwrap();
    assert!(matches!(engine.ingest_pair(stream.frame(0)), Err(Error::Lifecycle(_))));
}
