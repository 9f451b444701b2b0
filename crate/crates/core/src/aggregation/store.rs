//! On-disk sample store.
//!
//! Layout of a store directory:
//!
//! * `manifest.json` - schema version, shapes, dataset options, sample references per split.
//! * `od.csv`, `do.csv` - complete per-interval matrices, rows `interval,row,col,value`.
//! * `iod.csv`, `u.csv`, `uod_long.csv`, `uod_short.csv` - per-interval observations at
//!   each lag behind the reference, rows `interval,lag,row,col,value` (`col` is 0 for `u`).
//!
//! Every CSV starts with a `# schema_version=N` line followed by its column header.
//! Only nonzero cells are written; values use the shortest round-tripping decimal form.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, DatasetOptions, Observation};
use crate::error::{Error, Result};

pub const STORE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub schema_version: u32,
    pub stations: usize,
    pub k: usize,
    pub options: DatasetOptions,
    pub train_references: Vec<usize>,
    pub val_references: Vec<usize>,
    pub test_references: Vec<usize>,
}

pub(crate) fn check_schema_line(
    line: Option<(usize, &str)>,
    path: &Path,
    expected: u32,
) -> Result<()> {
    let (_, text) = line.ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    let version = text
        .trim()
        .strip_prefix("# schema_version=")
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::parse(path, 1, "missing `# schema_version=N` header"))?;
    if version != expected {
        return Err(Error::SchemaVersion { found: version, expected });
    }
    Ok(())
}

struct SparseWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl SparseWriter {
    fn create(path: &Path, columns: &str) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self { out: BufWriter::new(file), path: path.to_path_buf() };
        w.line(format_args!("# schema_version={STORE_SCHEMA_VERSION}\n{columns}\n"))?;
        Ok(w)
    }

    fn line(&mut self, args: std::fmt::Arguments<'_>) -> Result<()> {
        self.out.write_fmt(args).map_err(|e| Error::io(&self.path, e))
    }

    fn matrix(&mut self, prefix: &str, m: &Array2<f64>) -> Result<()> {
        for ((r, c), &v) in m.indexed_iter() {
            if v != 0.0 {
                self.line(format_args!("{prefix}{r},{c},{v}\n"))?;
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = StoreManifest {
        schema_version: STORE_SCHEMA_VERSION,
        stations: ds.stations,
        k: ds.k,
        options: ds.options.clone(),
        train_references: ds.train.iter().map(|s| s.reference).collect(),
        val_references: ds.val.iter().map(|s| s.reference).collect(),
        test_references: ds.test.iter().map(|s| s.reference).collect(),
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;

    for (name, series) in [("od.csv", &ds.od), ("do.csv", &ds.do_)] {
        let mut w = SparseWriter::create(&dir.join(name), "interval,row,col,value")?;
        for (interval, m) in series.iter().enumerate() {
            w.matrix(&format!("{interval},"), m)?;
        }
        w.finish()?;
    }

    let columns = "interval,lag,row,col,value";
    let mut iod = SparseWriter::create(&dir.join("iod.csv"), columns)?;
    let mut u = SparseWriter::create(&dir.join("u.csv"), columns)?;
    let mut uod_long = SparseWriter::create(&dir.join("uod_long.csv"), columns)?;
    let mut uod_short = SparseWriter::create(&dir.join("uod_short.csv"), columns)?;
    let n = ds.options.n;
    for (i, obs) in ds.observations.iter().enumerate() {
        let prefix = format!("{},{},", i / n, i % n);
        iod.matrix(&prefix, &obs.iod)?;
        for (r, &v) in obs.u.iter().enumerate() {
            if v != 0.0 {
                u.line(format_args!("{prefix}{r},0,{v}\n"))?;
            }
        }
        uod_long.matrix(&prefix, &obs.uod_long)?;
        uod_short.matrix(&prefix, &obs.uod_short)?;
    }
    for w in [iod, u, uod_long, uod_short] {
        w.finish()?;
    }
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<StoreManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.line(), e.to_string()))?;
    let version = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != STORE_SCHEMA_VERSION {
        return Err(Error::SchemaVersion { found: version, expected: STORE_SCHEMA_VERSION });
    }
    serde_json::from_value(value).map_err(|e| Error::parse(&path, 0, e.to_string()))
}

/// Streams `(key fields..., row, col, value)` records of a sparse CSV.
fn read_sparse(
    path: &Path,
    key_fields: usize,
    mut sink: impl FnMut(&[usize], usize, usize, f64) -> Result<()>,
) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let next_line = |lines: &mut dyn Iterator<Item = (usize, std::io::Result<String>)>| {
        lines.next().map(|(i, l)| l.map(|l| (i + 1, l)).map_err(|e| Error::io(path, e))).transpose()
    };
    let first = next_line(&mut lines)?;
    check_schema_line(first.as_ref().map(|(i, l)| (*i, l.as_str())), path, STORE_SCHEMA_VERSION)?;
    next_line(&mut lines)?;
    let mut keys = vec![0usize; key_fields];
    while let Some((no, line)) = next_line(&mut lines)? {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let bad = || Error::parse(path, no, format!("malformed record `{line}`"));
        for key in keys.iter_mut() {
            *key = fields.next().and_then(|f| f.parse().ok()).ok_or_else(bad)?;
        }
        let row: usize = fields.next().and_then(|f| f.parse().ok()).ok_or_else(bad)?;
        let col: usize = fields.next().and_then(|f| f.parse().ok()).ok_or_else(bad)?;
        let value: f64 = fields.next().and_then(|f| f.parse().ok()).ok_or_else(bad)?;
        sink(&keys, row, col, value).map_err(|_| bad())?;
    }
    Ok(())
}

fn put(m: &mut Array2<f64>, row: usize, col: usize, value: f64) -> Result<()> {
    let cell = m
        .get_mut((row, col))
        .ok_or_else(|| Error::Dimension(format!("cell ({row}, {col}) out of range")))?;
    *cell = value;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let (stations, k) = (manifest.stations, manifest.k);
    let n = manifest.options.n;
    let end = manifest.options.splits.end();
    let zero = || Array2::<f64>::zeros((stations, k));
    let out_of_range = || Error::Dimension("interval or lag outside the manifest".into());

    let mut series = Vec::new();
    for name in ["od.csv", "do.csv"] {
        let mut mats = vec![zero(); end];
        read_sparse(&dir.join(name), 1, |key, r, c, v| {
            put(mats.get_mut(key[0]).ok_or_else(out_of_range)?, r, c, v)
        })?;
        series.push(mats.into_iter().map(Arc::new).collect::<Vec<_>>());
    }
    let do_ = series.pop().expect("two series");
    let od = series.pop().expect("two series");

    let mut obs: Vec<Observation> = (0..end * n)
        .map(|_| Observation {
            iod: zero(),
            u: Array1::zeros(stations),
            uod_long: zero(),
            uod_short: zero(),
        })
        .collect();
    let slot = |key: &[usize]| -> Result<usize> {
        (key[0] < end && key[1] < n).then(|| key[0] * n + key[1]).ok_or_else(out_of_range)
    };
    read_sparse(&dir.join("iod.csv"), 2, |key, r, c, v| put(&mut obs[slot(key)?].iod, r, c, v))?;
    read_sparse(&dir.join("uod_long.csv"), 2, |key, r, c, v| {
        put(&mut obs[slot(key)?].uod_long, r, c, v)
    })?;
    read_sparse(&dir.join("uod_short.csv"), 2, |key, r, c, v| {
        put(&mut obs[slot(key)?].uod_short, r, c, v)
    })?;
    read_sparse(&dir.join("u.csv"), 2, |key, r, c, v| {
        let o = &mut obs[slot(key)?];
        match (c, o.u.get_mut(r)) {
            (0, Some(cell)) => {
                *cell = v;
                Ok(())
            }
            _ => Err(out_of_range()),
        }
    })?;

    let ds = Dataset::assemble(
        stations,
        k,
        manifest.options.clone(),
        od,
        do_,
        obs.into_iter().map(Arc::new).collect(),
    )?;
    let refs = |s: &[super::SnapshotSample]| s.iter().map(|x| x.reference).collect::<Vec<_>>();
    if refs(&ds.train) != manifest.train_references
        || refs(&ds.val) != manifest.val_references
        || refs(&ds.test) != manifest.test_references
    {
        return Err(Error::parse(
            dir.join("manifest.json"),
            0,
            "sample references disagree with the split bounds",
        ));
    }
    Ok(ds)
}
