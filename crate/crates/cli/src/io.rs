use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use pricer_core::catalog::{ingest_listings, read_pool_manifest, CandidatePool, Listing};
use pricer_core::vecindex::{read_snapshot, write_snapshot, IndexSnapshot};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

/// Writes to `path`, or to stdout when `path` is `None` or `-`.
pub fn writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    match path {
        Some(p) if p != Path::new("-") => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        _ => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut w = writer(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(reader(path)?).with_context(|| format!("parsing {}", path.display()))
}

/// Reads listings, refusing files with invalid records.
pub fn read_listings(path: &Path) -> Result<Vec<Listing>> {
    let report = ingest_listings(reader(path)?).with_context(|| format!("reading {}", path.display()))?;
    if let Some(r) = report.rejects.first() {
        bail!(
            "{}: {} invalid record(s); first at line {}: {}",
            path.display(),
            report.rejects.len(),
            r.line,
            r.reason
        );
    }
    Ok(report.catalog.into_listings())
}

pub fn read_pool(path: &Path) -> Result<CandidatePool> {
    read_pool_manifest(reader(path)?).with_context(|| format!("reading pool {}", path.display()))
}

pub fn read_index(path: &Path) -> Result<IndexSnapshot> {
    read_snapshot(reader(path)?).with_context(|| format!("reading index {}", path.display()))
}

pub fn write_index(path: &Path, snapshot: &IndexSnapshot) -> Result<()> {
    let mut w = writer(Some(path))?;
    write_snapshot(&mut w, snapshot)?;
    w.flush()?;
    Ok(())
}
