use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context as _;
use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use vstream_core::assembly::{export_snapshot_files, parse_snapshot, snapshot_paths, write_pca_csv, FlashMemorySnapshot};
use vstream_core::bench::{bench_policies, grid_search, run_policy, CostOptions, GridCell, PolicyRun, RunOptions};
use vstream_core::config::{ClusteringPolicy, RetrievalPolicy, SelectionPolicy};
use vstream_core::policies::consolidator_for;
use vstream_core::rng::CounterRng;
use vstream_core::runtime::{Engine, MetricsSink, QueryResult};
use vstream_core::synth::{write_pair_files, FileStream, FramePair, PairStreamReader, PairStreamWriter, StreamSpec, SyntheticStream};
use vstream_core::{token_budget, MemoryConfig};

use crate::output::{provenance, sink, write_csv, write_json};
use crate::{CliError, Common, Format, Outcome};

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub struct Context {
    pub common: Common,
    pub config: MemoryConfig,
    pub argv: Vec<String>,
}

impl Context {
    pub fn new(common: Common, argv: Vec<String>) -> Result<Self> {
        let mut config = match (&common.config, common.paper_shapes) {
            (Some(path), _) => MemoryConfig::from_path(path)?,
            (None, true) => MemoryConfig::full_size(),
            (None, false) => MemoryConfig::scaled(),
        };
        if let Some(name) = &common.policy {
            config.clustering_policy = ClusteringPolicy::from_name(name).ok_or_else(|| {
                let names: Vec<_> = ClusteringPolicy::ALL.iter().map(|p| p.name()).collect();
                usage(format!("unknown policy {name:?}; expected one of {}", names.join(", ")))
            })?;
        }
        if common.watermark.is_some() {
            config.offload_watermark = common.watermark;
        }
        config.validate()?;
        Ok(Context { common, config, argv })
    }

    fn steps_list(&self, default: &[u64]) -> Result<Vec<u64>> {
        let Some(text) = &self.common.steps else {
            return Ok(default.to_vec());
        };
        text.split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| usage(format!("--steps: {s:?} is not a frame count")))
            })
            .collect()
    }

    fn steps(&self, default: u64) -> Result<u64> {
        match self.steps_list(&[default])?[..] {
            [n] => Ok(n),
            _ => Err(usage("--steps takes a single value for this command")),
        }
    }

    fn stream_spec(&self, steps: u64) -> Result<StreamSpec> {
        let mut spec = match &self.common.stream {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let mut spec = StreamSpec::from_toml_str(&text)?;
                if self.common.steps.is_some() {
                    spec.n_steps = steps;
                }
                spec
            }
            None => StreamSpec::for_config(&self.config, self.common.seed, steps),
        };
        spec.low = self.config.low_shape();
        spec.high = self.config.high_shape();
        if let Some(n) = self.common.scenes {
            spec.n_scenes = n;
        }
        spec.validate()?;
        Ok(spec)
    }

    fn provenance(&self, command: &str) -> Value {
        provenance(command, self.common.seed, &self.config, &self.argv)
    }

    fn format(&self) -> Format {
        self.common.format.unwrap_or(Format::Json)
    }

    fn out(&self) -> Option<&Path> {
        self.common.out.as_deref()
    }
}

/// Engine fed from an iterator of frame pairs.
struct Fed {
    engine: Engine,
    frames: u64,
    ingest_ns: u64,
}

fn feed(config: &MemoryConfig, seed: u64, metrics: Option<MetricsSink>) -> Result<Fed> {
    let engine = Engine::with_metrics(config.clone(), seed, metrics)?;
    engine.start()?;
    Ok(Fed {
        engine,
        frames: 0,
        ingest_ns: 0,
    })
}

impl Fed {
    fn push(&mut self, pairs: impl IntoIterator<Item = vstream_core::Result<FramePair>>) -> Result<()> {
        let started = Instant::now();
        for pair in pairs {
            self.engine.ingest_pair(pair?)?;
            self.frames += 1;
        }
        self.engine.flush()?;
        self.ingest_ns += started.elapsed().as_nanos() as u64;
        Ok(())
    }

    fn ns_per_frame(&self) -> f64 {
        self.ingest_ns as f64 / self.frames.max(1) as f64
    }
}

fn synthetic(stream: &SyntheticStream, range: std::ops::Range<u64>) -> impl Iterator<Item = vstream_core::Result<FramePair>> + '_ {
    range.map(|t| Ok(stream.frame(t)))
}

#[derive(Debug, Serialize)]
struct MemorySummary {
    frames: u64,
    token_count: usize,
    token_budget: usize,
    budget_limit: usize,
    csm_items: usize,
    dam_items: usize,
    total_weight: u64,
    /// Space-separated frame indices picked as key frames.
    key_frames: String,
    query_ns: u64,
    ingest_ns_per_frame: f64,
}

fn summarize(config: &MemoryConfig, q: &QueryResult, frames: u64, ingest_ns_per_frame: f64) -> Result<MemorySummary> {
    Ok(MemorySummary {
        frames,
        token_count: q.snapshot.token_count,
        token_budget: token_budget(config)?,
        budget_limit: config.budget_limit,
        csm_items: q.csm.len(),
        dam_items: q.dam.len(),
        total_weight: q.csm.total_weight(),
        key_frames: join(&q.dam.frame_indices()),
        query_ns: q.latency.total_ns,
        ingest_ns_per_frame,
    })
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

/// Invariants every assembled memory must satisfy.
fn check_memory(config: &MemoryConfig, q: &QueryResult, frames: u64, seed: u64) -> Result<Vec<String>> {
    let mut failed = Vec::new();
    let s = &q.snapshot;
    if q.csm.len() > config.n_csm {
        failed.push(format!("{} synopsis items exceed capacity {}", q.csm.len(), config.n_csm));
    }
    if q.dam.len() > config.n_dam {
        failed.push(format!("{} key frames exceed capacity {}", q.dam.len(), config.n_dam));
    }
    if s.token_positions.len() != s.token_count {
        failed.push(format!("{} positions for {} tokens", s.token_positions.len(), s.token_count));
    }
    let budget = token_budget(config)?;
    if s.token_count > budget || s.token_count > config.budget_limit {
        failed.push(format!("{} tokens exceed budget {budget} / limit {}", s.token_count, config.budget_limit));
    }
    if consolidator_for(config, seed).conserves_weight() && q.csm.total_weight() != frames {
        failed.push(format!("total weight {} after {frames} frames", q.csm.total_weight()));
    }
    if config.clustering_policy == ClusteringPolicy::KMeans && q.csm.len() as u64 != frames.min(config.n_csm as u64) {
        failed.push(format!("k-means holds {} clusters after {frames} frames", q.csm.len()));
    }
    if s.items.windows(2).any(|w| w[0].temporal_position > w[1].temporal_position) {
        failed.push("snapshot items are not in temporal order".into());
    }
    Ok(failed)
}

fn outcome(failed: Vec<String>) -> Outcome {
    if failed.is_empty() {
        Outcome::Passed
    } else {
        Outcome::ChecksFailed(failed)
    }
}

/// Final memory for a stream: snapshot export, metrics log, summary.
fn finish_run(ctx: &Context, command: &str, fed: Fed) -> Result<Outcome> {
    let q = fed.engine.query()?;
    fed.engine.stop()?;
    let summary = summarize(&ctx.config, &q, fed.frames, fed.ns_per_frame())?;
    let failed = check_memory(&ctx.config, &q, fed.frames, ctx.common.seed)?;
    let prov = ctx.provenance(command);
    let mut files = Vec::new();
    if let Some(base) = ctx.out() {
        let (j, t) = export_snapshot_files(&q.snapshot, &ctx.config, prov.clone(), base)?;
        files.push(j.display().to_string());
        files.push(t.display().to_string());
        files.push(metrics_path(base).display().to_string());
    }
    let format = format!("vstream-{command}");
    match ctx.format() {
        Format::Json => write_json(
            None,
            &format,
            &prov,
            json!({
                "summary": summary,
                "files": files,
                "self_checks": {"passed": failed.is_empty(), "failures": failed},
            }),
        )?,
        Format::Csv => write_csv(None, &format, &prov, &[summary])?,
    }
    Ok(outcome(failed))
}

fn metrics_path(base: &Path) -> PathBuf {
    let mut p = base.as_os_str().to_owned();
    p.push(".metrics.jsonl");
    p.into()
}

fn metrics_sink(ctx: &Context) -> Result<Option<MetricsSink>> {
    Ok(match ctx.out() {
        Some(base) => {
            let path = metrics_path(base);
            let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            Some(Box::new(BufWriter::new(f)))
        }
        None => None,
    })
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Also write the generated stream as BASE.low.fvsb and BASE.high.fvsb.
    #[arg(long, value_name = "BASE")]
    write_frames: Option<PathBuf>,
    /// Write the stream to stdout as a pair stream for `ingest --stdin`
    /// instead of running the engine.
    #[arg(long, conflicts_with_all = ["write_frames", "out"])]
    emit_pairs: bool,
}

pub fn frame_paths(base: &Path) -> (PathBuf, PathBuf) {
    let with = |suffix: &str| {
        let mut p = base.as_os_str().to_owned();
        p.push(suffix);
        PathBuf::from(p)
    };
    (with(".low.fvsb"), with(".high.fvsb"))
}

pub fn simulate(ctx: &Context, args: &SimulateArgs) -> Result<Outcome> {
    let steps = ctx.steps(1000)?;
    let stream = SyntheticStream::new(ctx.stream_spec(steps)?)?;
    if args.emit_pairs {
        let spec = stream.spec();
        let mut w = PairStreamWriter::new(std::io::BufWriter::new(std::io::stdout().lock()), spec.low, spec.high)?;
        for pair in stream.iter() {
            w.send(&pair)?;
        }
        w.finish()?;
        return Ok(Outcome::Passed);
    }
    if let Some(base) = &args.write_frames {
        if stream.is_empty() {
            return Err(usage("--write-frames needs at least one step"));
        }
        let (low, high) = frame_paths(base);
        write_pair_files(&low, &high, stream.iter())?;
    }
    let mut fed = feed(&ctx.config, ctx.common.seed, metrics_sink(ctx)?)?;
    fed.push(synthetic(&stream, 0..stream.len()))?;
    finish_run(ctx, "simulate", fed)
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Low-res FVSB file.
    #[arg(long, requires = "high", conflicts_with = "stdin")]
    low: Option<PathBuf>,
    /// High-res FVSB file.
    #[arg(long, requires = "low")]
    high: Option<PathBuf>,
    /// Read a pair stream from stdin.
    #[arg(long)]
    stdin: bool,
}

/// Adopts the grids of an input stream; the config must agree on everything else.
fn adopt_shapes(ctx: &Context, low: vstream_core::Shape, high: vstream_core::Shape) -> Result<MemoryConfig> {
    let mut cfg = ctx.config.clone();
    (cfg.low_grid_h, cfg.low_grid_w) = (low.grid_h, low.grid_w);
    (cfg.high_grid_h, cfg.high_grid_w) = (high.grid_h, high.grid_w);
    if low.dim != high.dim {
        return Err(usage(format!("input tiers disagree on dim: {} vs {}", low.dim, high.dim)));
    }
    cfg.dim = low.dim;
    cfg.validate()?;
    if cfg.low_shape() != ctx.config.low_shape() || cfg.high_shape() != ctx.config.high_shape() {
        log::info!("input shapes {low}/{high} replace the configured grids");
    }
    Ok(cfg)
}

pub fn ingest(ctx: &Context, args: &IngestArgs) -> Result<Outcome> {
    if ctx.common.steps.is_some() {
        return Err(usage("ingest reads every frame of its input; --steps does not apply"));
    }
    let (ctx, fed) = match (&args.low, &args.high, args.stdin) {
        (Some(low), Some(high), false) => {
            let files = FileStream::open(low, high)?;
            let ctx = Context {
                config: adopt_shapes(ctx, files.low_shape(), files.high_shape())?,
                common: ctx.common.clone(),
                argv: ctx.argv.clone(),
            };
            let mut fed = feed(&ctx.config, ctx.common.seed, metrics_sink(&ctx)?)?;
            fed.push(files)?;
            (ctx, fed)
        }
        (None, None, true) => {
            let reader = PairStreamReader::new(std::io::BufReader::new(std::io::stdin().lock()))?;
            let ctx = Context {
                config: adopt_shapes(ctx, reader.low_shape(), reader.high_shape())?,
                common: ctx.common.clone(),
                argv: ctx.argv.clone(),
            };
            let mut fed = feed(&ctx.config, ctx.common.seed, metrics_sink(&ctx)?)?;
            fed.push(reader)?;
            (ctx, fed)
        }
        _ => return Err(usage("ingest needs --low PATH --high PATH, or --stdin")),
    };
    finish_run(&ctx, "ingest", fed)
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Frame counts at which to query, comma-separated. Defaults to --steps.
    #[arg(long, value_name = "N[,N...]", conflicts_with = "snapshot")]
    at: Option<String>,
    /// Inspect an exported snapshot (BASE.json + BASE.tokens.fvsb) instead.
    #[arg(long, value_name = "BASE")]
    snapshot: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct QueryRow {
    frames: u64,
    csm_items: usize,
    dam_items: usize,
    token_count: usize,
    key_frames: String,
    snapshot_acquire_ns: u64,
    retrieval_ns: u64,
    assembly_ns: u64,
    total_ns: u64,
}

#[derive(Debug, Serialize)]
struct ItemRow {
    source: &'static str,
    id: u64,
    temporal_position: f64,
    grid_h: usize,
    grid_w: usize,
    tokens: usize,
}

pub fn query(ctx: &Context, args: &QueryArgs) -> Result<Outcome> {
    if let Some(base) = &args.snapshot {
        return inspect_snapshot(ctx, base);
    }
    let mut at = match &args.at {
        Some(text) => text
            .split(',')
            .map(|s| s.trim().parse::<u64>().map_err(|_| usage(format!("--at: {s:?} is not a frame count"))))
            .collect::<Result<Vec<_>>>()?,
        None => vec![ctx.steps(1000)?],
    };
    at.sort_unstable();
    at.dedup();
    let last = *at.last().ok_or_else(|| usage("--at needs at least one frame count"))?;
    let stream = SyntheticStream::new(ctx.stream_spec(last)?)?;
    let mut fed = feed(&ctx.config, ctx.common.seed, None)?;
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for &n in &at {
        fed.push(synthetic(&stream, fed.frames..n))?;
        let q = fed.engine.query()?;
        failed.extend(
            check_memory(&ctx.config, &q, n, ctx.common.seed)?
                .into_iter()
                .map(|f| format!("at {n}: {f}")),
        );
        rows.push(QueryRow {
            frames: n,
            csm_items: q.csm.len(),
            dam_items: q.dam.len(),
            token_count: q.snapshot.token_count,
            key_frames: join(&q.dam.frame_indices()),
            snapshot_acquire_ns: q.latency.snapshot_acquire_ns,
            retrieval_ns: q.latency.retrieval_ns,
            assembly_ns: q.latency.assembly_ns,
            total_ns: q.latency.total_ns,
        });
    }
    fed.engine.stop()?;
    emit_table(ctx, "query", &rows, &failed)?;
    Ok(outcome(failed))
}

fn inspect_snapshot(ctx: &Context, base: &Path) -> Result<Outcome> {
    let (jp, tp) = snapshot_paths(base);
    let json = File::open(&jp).with_context(|| format!("opening {}", jp.display()))?;
    let tokens = File::open(&tp).with_context(|| format!("opening {}", tp.display()))?;
    let (snap, doc) = parse_snapshot(std::io::BufReader::new(json), std::io::BufReader::new(tokens))?;
    let mut failed = Vec::new();
    let budget = token_budget(&doc.config)?;
    if snap.token_count > budget {
        failed.push(format!("{} tokens exceed budget {budget}", snap.token_count));
    }
    if snap.items.windows(2).any(|w| w[0].temporal_position > w[1].temporal_position) {
        failed.push("items are not in temporal order".into());
    }
    let rows = item_rows(&snap, doc.merge_side);
    let tokens: usize = rows.iter().map(|r| r.tokens).sum();
    if tokens != snap.token_count {
        failed.push(format!("items carry {tokens} tokens, header says {}", snap.token_count));
    }
    // The snapshot's own provenance travels with the report.
    let prov = json!({"inspected": doc.provenance, "by": ctx.provenance("query")});
    match ctx.format() {
        Format::Json => write_json(
            ctx.out(),
            "vstream-query-snapshot",
            &prov,
            json!({
                "frame_count": snap.frame_count,
                "token_count": snap.token_count,
                "items": rows,
                "self_checks": {"passed": failed.is_empty(), "failures": failed},
            }),
        )?,
        Format::Csv => write_csv(ctx.out(), "vstream-query-snapshot", &prov, &rows)?,
    }
    Ok(outcome(failed))
}

fn item_rows(snap: &FlashMemorySnapshot, side: usize) -> Vec<ItemRow> {
    snap.items
        .iter()
        .map(|it| {
            let s = it.feature.shape();
            ItemRow {
                source: match it.source {
                    vstream_core::assembly::Source::Csm => "csm",
                    vstream_core::assembly::Source::Dam => "dam",
                },
                id: it.id,
                temporal_position: it.temporal_position,
                grid_h: s.grid_h,
                grid_w: s.grid_w,
                tokens: (s.grid_h / side) * (s.grid_w / side),
            }
        })
        .collect()
}

fn emit_table<R: Serialize>(ctx: &Context, command: &str, rows: &[R], failed: &[String]) -> Result<()> {
    let prov = ctx.provenance(command);
    let format = format!("vstream-{command}");
    match ctx.format() {
        Format::Json => write_json(
            ctx.out(),
            &format,
            &prov,
            json!({
                "rows": rows,
                "self_checks": {"passed": failed.is_empty(), "failures": failed},
            }),
        )?,
        Format::Csv => write_csv(ctx.out(), &format, &prov, rows)?,
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Timed queries per stream length.
    #[arg(long, default_value_t = 50)]
    queries: usize,
    /// Largest allowed ratio of median query time, longest vs shortest stream.
    #[arg(long, default_value_t = 1.5)]
    max_ratio: f64,
}

#[derive(Debug, Serialize)]
struct BenchRow {
    steps: u64,
    queries: usize,
    median_query_ns: f64,
    p10_query_ns: f64,
    p90_query_ns: f64,
    ingest_ns_per_frame: f64,
    /// Median query time relative to the first row.
    ratio: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// One engine per stream length, fed from the same stream. Queries alternate
/// between engines in a fresh random order each round so every length sees
/// the same machine conditions.
pub fn bench(ctx: &Context, args: &BenchArgs) -> Result<Outcome> {
    let steps = ctx.steps_list(&[1_000, 100_000])?;
    if steps.is_empty() || args.queries == 0 {
        return Err(usage("bench needs at least one stream length and one query"));
    }
    let longest = *steps.iter().max().expect("non-empty");
    let stream = SyntheticStream::new(ctx.stream_spec(longest)?)?;
    let mut engines = Vec::with_capacity(steps.len());
    for &n in &steps {
        log::info!("feeding {n} frames");
        let mut fed = feed(&ctx.config, ctx.common.seed, None)?;
        fed.push(synthetic(&stream, 0..n))?;
        // Warm the retrieval cache.
        fed.engine.query()?;
        engines.push(fed);
    }
    let mut times = vec![Vec::with_capacity(args.queries); engines.len()];
    let mut rng = CounterRng::new(ctx.common.seed, 0xBE7C);
    let mut order: Vec<usize> = (0..engines.len()).collect();
    for _ in 0..args.queries {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i as u64 + 1) as usize);
        }
        for &e in &order {
            let started = Instant::now();
            let q = engines[e].engine.query()?;
            times[e].push(started.elapsed().as_nanos() as f64);
            std::hint::black_box(q);
        }
    }
    let mut rows = Vec::with_capacity(engines.len());
    for (fed, t) in engines.iter().zip(&mut times) {
        t.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            steps: fed.frames,
            queries: t.len(),
            median_query_ns: quantile(t, 0.5),
            p10_query_ns: quantile(t, 0.1),
            p90_query_ns: quantile(t, 0.9),
            ingest_ns_per_frame: fed.ns_per_frame(),
            ratio: 1.0,
        });
    }
    let first = rows[0].median_query_ns;
    for r in &mut rows {
        r.ratio = r.median_query_ns / first;
    }
    for fed in &engines {
        fed.engine.stop()?;
    }
    let mut failed = Vec::new();
    let shortest = rows.iter().min_by_key(|r| r.steps).expect("non-empty");
    let long = rows.iter().max_by_key(|r| r.steps).expect("non-empty");
    let ratio = long.median_query_ns / shortest.median_query_ns;
    if ratio >= args.max_ratio {
        failed.push(format!(
            "median query at {} frames is {ratio:.2}x that at {} frames (limit {})",
            long.steps, shortest.steps, args.max_ratio
        ));
    }
    emit_table(ctx, "bench", &rows, &failed)?;
    Ok(outcome(failed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Table {
    All,
    Policies,
    Retrieval,
    Selection,
    Grid,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum, default_value_t = Table::All)]
    table: Table,
    /// Synopsis share of the token budget, as fractions like 1/3.
    #[arg(long, value_name = "R[,R...]", default_value = "1/6,1/3,1/2")]
    r_csm: String,
    /// Spatial pooling ratios between the tiers.
    #[arg(long, value_name = "R[,R...]", default_value = "1,4,16")]
    r_pool: String,
    /// Also fit per-step update cost against t (slow).
    #[arg(long)]
    cost: bool,
}

/// One row of the ablation table. Cells not run leave their metrics empty.
#[derive(Debug, Default, Serialize)]
struct AblateRow {
    table: &'static str,
    clustering: &'static str,
    retrieval: &'static str,
    selection: &'static str,
    r_csm: Option<f64>,
    r_pool: Option<usize>,
    n_csm: usize,
    n_dam: usize,
    valid: bool,
    reason: Option<String>,
    steps: Option<u64>,
    update_ns_mean: Option<f64>,
    slope_ns_per_step: Option<f64>,
    slope_ci_low: Option<f64>,
    slope_ci_high: Option<f64>,
    quantization_error: Option<f64>,
    memory_items: Option<usize>,
    memory_tokens: Option<usize>,
    weight_conserved: Option<bool>,
    centroid_mean_error: Option<f64>,
    jaccard_vs_reference: Option<f64>,
}

fn run_row(table: &'static str, run: &PolicyRun) -> AblateRow {
    AblateRow {
        table,
        clustering: run.clustering.name(),
        retrieval: run.retrieval.name(),
        selection: run.selection.name(),
        n_csm: run.n_csm,
        n_dam: run.n_dam,
        valid: true,
        steps: Some(run.steps),
        update_ns_mean: Some(run.update_ns_mean),
        slope_ns_per_step: run.slope.map(|s| s.ns_per_step),
        slope_ci_low: run.slope.map(|s| s.ci_low),
        slope_ci_high: run.slope.map(|s| s.ci_high),
        quantization_error: Some(run.quantization_error),
        memory_items: Some(run.memory_items),
        memory_tokens: Some(run.memory_tokens),
        weight_conserved: Some(run.weight_conserved),
        centroid_mean_error: run.centroid_mean_error,
        jaccard_vs_reference: run.jaccard_vs_reference,
        ..AblateRow::default()
    }
}

fn grid_row(cell: &GridCell, run: Option<&PolicyRun>) -> AblateRow {
    let mut row = match run {
        Some(r) => run_row("grid", r),
        None => AblateRow {
            table: "grid",
            ..AblateRow::default()
        },
    };
    row.r_csm = Some(cell.r_csm);
    row.r_pool = Some(cell.r_pool);
    row.n_csm = cell.n_csm;
    row.n_dam = cell.n_dam;
    row.valid = cell.is_valid();
    row.reason = cell.reason.clone();
    row.memory_tokens = Some(cell.tokens);
    row
}

fn parse_ratio(s: &str) -> Option<f64> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((n, d)) => n.trim().parse::<f64>().ok()? / d.trim().parse::<f64>().ok()?,
        None => s.parse().ok()?,
    };
    (v.is_finite() && v > 0.0 && v < 1.0).then_some(v)
}

/// Checks a run against what its policy promises.
fn check_run(config: &MemoryConfig, run: &PolicyRun, seed: u64, budget: usize) -> Vec<String> {
    let name = format!("{}/{}/{}", run.clustering.name(), run.retrieval.name(), run.selection.name());
    let mut failed = Vec::new();
    if run.memory_items > run.n_csm + run.n_dam {
        failed.push(format!("{name}: {} items exceed capacity", run.memory_items));
    }
    if run.memory_tokens > budget {
        failed.push(format!("{name}: {} tokens exceed budget {budget}", run.memory_tokens));
    }
    if consolidator_for(config, seed).conserves_weight() && !run.weight_conserved {
        failed.push(format!("{name}: weight {} after {} frames", run.total_weight, run.steps));
    }
    if let Some(e) = run.centroid_mean_error {
        if e > 1e-6 {
            failed.push(format!("{name}: centroid deviates from member mean by {e:.3e}"));
        }
    }
    failed
}

pub fn ablate(ctx: &Context, args: &AblateArgs) -> Result<Outcome> {
    let steps = ctx.steps(600)?;
    let spec = ctx.stream_spec(steps)?;
    let seed = ctx.common.seed;
    let opts = RunOptions {
        seed,
        cost: args.cost.then(|| CostOptions {
            seed,
            ..CostOptions::default()
        }),
    };
    let budget = token_budget(&ctx.config)?;
    let want = |t: Table| args.table == Table::All || args.table == t;
    let mut rows = Vec::new();
    let mut failed = Vec::new();

    if want(Table::Policies) {
        let policies: Vec<ClusteringPolicy> = match ctx.common.policy {
            Some(_) => vec![ctx.config.clustering_policy],
            None => ClusteringPolicy::ALL.to_vec(),
        };
        for run in bench_policies(&ctx.config, &spec, &policies, opts)? {
            let cfg = MemoryConfig {
                clustering_policy: run.clustering,
                ..ctx.config.clone()
            };
            failed.extend(check_run(&cfg, &run, seed, budget));
            rows.push(run_row("policies", &run));
        }
    }
    let stream = if want(Table::Retrieval) || want(Table::Selection) {
        Some(SyntheticStream::new(spec.clone())?)
    } else {
        None
    };
    let mut variant_table = |table: &'static str, configs: Vec<MemoryConfig>| -> Result<()> {
        let stream = stream.as_ref().expect("stream built for variant tables");
        let mut reference = None;
        for cfg in configs {
            let mut run = run_policy(&cfg, stream, opts)?;
            let first = reference.get_or_insert_with(|| run.key_frames.clone());
            run.jaccard_vs_reference = Some(vstream_core::bench::jaccard(first, &run.key_frames));
            failed.extend(check_run(&cfg, &run, seed, budget));
            rows.push(run_row(table, &run));
        }
        Ok(())
    };
    if want(Table::Retrieval) {
        let configs = RetrievalPolicy::ALL
            .iter()
            .map(|&p| MemoryConfig {
                retrieval_policy: p,
                ..ctx.config.clone()
            })
            .collect();
        variant_table("retrieval", configs)?;
    }
    if want(Table::Selection) {
        let configs = SelectionPolicy::ALL
            .iter()
            .map(|&p| MemoryConfig {
                selection_policy: p,
                ..ctx.config.clone()
            })
            .collect();
        variant_table("selection", configs)?;
    }
    if want(Table::Grid) {
        let r_csm = args
            .r_csm
            .split(',')
            .map(|s| parse_ratio(s).ok_or_else(|| usage(format!("--r-csm: {s:?} is not a fraction in (0, 1)"))))
            .collect::<Result<Vec<_>>>()?;
        let r_pool = args
            .r_pool
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&p| p > 0)
                    .ok_or_else(|| usage(format!("--r-pool: {s:?} is not a positive integer")))
            })
            .collect::<Result<Vec<_>>>()?;
        for (cell, run) in grid_search(&ctx.config, &spec, &r_csm, &r_pool, opts)? {
            if let (Some(cfg), Some(run)) = (&cell.config, &run) {
                failed.extend(check_run(cfg, run, seed, budget));
            }
            if cell.is_valid() && cell.tokens > budget {
                failed.push(format!("grid cell {}/{} spends {} of {budget} tokens", cell.r_csm, cell.r_pool, cell.tokens));
            }
            rows.push(grid_row(&cell, run.as_ref()));
        }
    }
    emit_table(ctx, "ablate", &rows, &failed)?;
    Ok(outcome(failed))
}

pub fn export_pca(ctx: &Context) -> Result<Outcome> {
    if ctx.common.format == Some(Format::Json) {
        return Err(usage("export-pca writes CSV only"));
    }
    let steps = ctx.steps(300)?;
    let stream = SyntheticStream::new(ctx.stream_spec(steps)?)?;
    let mut fed = feed(&ctx.config, ctx.common.seed, None)?;
    fed.push(synthetic(&stream, 0..stream.len()))?;
    let q = fed.engine.query()?;
    let frames = (0..fed.frames)
        .map(|t| fed.engine.low_bank().read(t))
        .collect::<vstream_core::Result<Vec<_>>>()?;
    fed.engine.stop()?;
    let prov = ctx.provenance("export-pca").to_string();
    let mut out = sink(ctx.out()).context("opening output")?;
    let rows = write_pca_csv(&mut out, &format!("vstream-export-pca v1 {prov}"), &q.snapshot, frames)?;
    out.flush().context("flushing output")?;
    let expected = q.snapshot.items.len() + fed.frames as usize;
    let mut failed = check_memory(&ctx.config, &q, fed.frames, ctx.common.seed)?;
    if rows != expected {
        failed.push(format!("{rows} rows written, expected {expected}"));
    }
    Ok(outcome(failed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_parse_as_fractions() {
        assert_eq!(parse_ratio("1/3"), Some(1.0 / 3.0));
        assert_eq!(parse_ratio(" 0.5 "), Some(0.5));
        assert_eq!(parse_ratio("3/2"), None);
        assert_eq!(parse_ratio("1/0"), None);
        assert_eq!(parse_ratio("x"), None);
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!(quantile(&[], 0.5).is_nan());
    }

    #[test]
    fn frame_paths_append_tier() {
        let (l, h) = frame_paths(Path::new("out/run"));
        assert_eq!(l, Path::new("out/run.low.fvsb"));
        assert_eq!(h, Path::new("out/run.high.fvsb"));
    }
}
