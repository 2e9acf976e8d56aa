use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use vstream_core::MemoryConfig;

/// Version of every document this tool writes. Bump on any field change.
pub const SCHEMA_VERSION: u32 = 1;

/// Config, seed and command line that produced an artifact.
pub fn provenance(command: &str, seed: u64, config: &MemoryConfig, argv: &[String]) -> Value {
    json!({
        "tool": "vstream",
        "tool_version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "argv": argv,
        "config": config,
    })
}

pub fn sink(out: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// `{"format": .., "version": .., "provenance": .., <body>}`.
pub fn write_json(out: Option<&Path>, format: &str, provenance: &Value, body: Value) -> anyhow::Result<()> {
    let mut doc = json!({
        "format": format,
        "version": SCHEMA_VERSION,
        "provenance": provenance,
    });
    if let (Value::Object(d), Value::Object(b)) = (&mut doc, body) {
        d.extend(b);
    }
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, &doc)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// A `#`-prefixed provenance line, then a header row, then the records.
pub fn write_csv<R: Serialize>(
    out: Option<&Path>,
    format: &str,
    provenance: &Value,
    rows: &[R],
) -> anyhow::Result<()> {
    let mut w = sink(out)?;
    writeln!(w, "# {format} v{SCHEMA_VERSION} {provenance}")?;
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}
