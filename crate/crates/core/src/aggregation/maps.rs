//! Top-(K-1) partner maps used to compress N x N OD/DO matrices to N x K.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::synthgen::Transaction;

/// Marker stored in the last map column: "all remaining stations".
pub const REMAINDER: i64 = -1;

pub const MAPS_SCHEMA_VERSION: u32 = 1;

/// Compression maps `M_od` (top destinations per origin) and `M_do` (top
/// origins per destination). Column `K-1` (0-based) always holds [`REMAINDER`].
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionMaps {
    k: usize,
    od_map: Array2<i64>,
    do_map: Array2<i64>,
    od_column: Vec<u32>,
    do_column: Vec<u32>,
}

impl CompressionMaps {
    pub fn from_maps(od_map: Array2<i64>, do_map: Array2<i64>) -> Result<Self> {
        let (n, k) = od_map.dim();
        if do_map.dim() != (n, k) {
            return Err(Error::Dimension("od and do maps differ in shape".into()));
        }
        if k == 0 || k > n {
            return Err(Error::Config(format!("K={k} must lie in 1..={n}")));
        }
        for (name, map) in [("od", &od_map), ("do", &do_map)] {
            for i in 0..n {
                let row = map.row(i);
                if row[k - 1] != REMAINDER {
                    return Err(Error::Config(format!("{name} map row {i} lacks the remainder column")));
                }
                let mut seen = vec![false; n];
                for &s in row.iter().take(k - 1) {
                    if s < 0 || s as usize >= n || s as usize == i || seen[s as usize] {
                        return Err(Error::Config(format!("{name} map row {i} has invalid entry {s}")));
                    }
                    seen[s as usize] = true;
                }
            }
        }
        let od_column = column_lookup(&od_map);
        let do_column = column_lookup(&do_map);
        Ok(Self { k, od_map, do_map, od_column, do_column })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn station_count(&self) -> usize {
        self.od_map.nrows()
    }

    pub fn od_map(&self) -> &Array2<i64> {
        &self.od_map
    }

    pub fn do_map(&self) -> &Array2<i64> {
        &self.do_map
    }

    /// Compressed column of destination `dest` in origin `origin`'s OD row.
    #[inline]
    pub fn od_column(&self, origin: usize, dest: usize) -> usize {
        self.od_column[origin * self.station_count() + dest] as usize
    }

    /// Compressed column of origin `origin` in destination `dest`'s DO row.
    #[inline]
    pub fn do_column(&self, dest: usize, origin: usize) -> usize {
        self.do_column[dest * self.station_count() + origin] as usize
    }
}

fn column_lookup(map: &Array2<i64>) -> Vec<u32> {
    let (n, k) = map.dim();
    let mut table = vec![(k - 1) as u32; n * n];
    for i in 0..n {
        for c in 0..k - 1 {
            table[i * n + map[[i, c]] as usize] = c as u32;
        }
    }
    table
}

/// Ranks partners by trip count (descending, ties by ascending index) and
/// pads under-observed rows with the lowest unused station indices.
pub fn build_compression_maps(
    training_log: &[Transaction],
    stations: usize,
    k: usize,
) -> Result<CompressionMaps> {
    if k == 0 || k > stations {
        return Err(Error::Config(format!("K={k} must lie in 1..={stations}")));
    }
    if training_log.is_empty() {
        return Err(Error::EmptyInput("training log"));
    }
    let n = stations;
    let mut od_counts = Array2::<u64>::zeros((n, n));
    for tx in training_log {
        if tx.entry_station >= n || tx.exit_station >= n {
            return Err(Error::Dimension(format!(
                "transaction references station outside 0..{n}: {tx:?}"
            )));
        }
        od_counts[[tx.entry_station, tx.exit_station]] += 1;
    }
    let do_counts = od_counts.t().to_owned();
    let od_map = rank_partners(&od_counts, k);
    let do_map = rank_partners(&do_counts, k);
    CompressionMaps::from_maps(od_map, do_map)
}

fn rank_partners(counts: &Array2<u64>, k: usize) -> Array2<i64> {
    let n = counts.nrows();
    let mut map = Array2::from_elem((n, k), REMAINDER);
    for i in 0..n {
        let mut partners: Vec<usize> = (0..n).filter(|&j| j != i && counts[[i, j]] > 0).collect();
        partners.sort_by(|&a, &b| counts[[i, b]].cmp(&counts[[i, a]]).then(a.cmp(&b)));
        partners.truncate(k - 1);
        let mut used = vec![false; n];
        for &p in &partners {
            used[p] = true;
        }
        let mut pad = (0..n).filter(|&j| j != i && !used[j]);
        while partners.len() < k - 1 {
            partners.push(pad.next().expect("K <= N leaves enough stations to pad"));
        }
        for (c, &p) in partners.iter().enumerate() {
            map[[i, c]] = p as i64;
        }
    }
    map
}

/// Writes `maps_od.csv` and `maps_do.csv` into `dir`.
pub fn save_maps(maps: &CompressionMaps, dir: &Path) -> Result<()> {
    for (name, map) in [("maps_od.csv", maps.od_map()), ("maps_do.csv", maps.do_map())] {
        let path = dir.join(name);
        let mut text = format!("# schema_version={MAPS_SCHEMA_VERSION}\nstation");
        for c in 0..maps.k() {
            text.push_str(&format!(",slot{}", c + 1));
        }
        text.push('\n');
        for (i, row) in map.rows().into_iter().enumerate() {
            text.push_str(&i.to_string());
            for v in row {
                text.push_str(&format!(",{v}"));
            }
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_maps(dir: &Path) -> Result<CompressionMaps> {
    let od = read_map(&dir.join("maps_od.csv"))?;
    let dm = read_map(&dir.join("maps_do.csv"))?;
    CompressionMaps::from_maps(od, dm)
}

fn read_map(path: &Path) -> Result<Array2<i64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    crate::aggregation::store::check_schema_line(lines.next(), path, MAPS_SCHEMA_VERSION)?;
    lines.next();
    let mut rows: Vec<Vec<i64>> = Vec::new();
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let values: std::result::Result<Vec<i64>, _> =
            line.split(',').skip(1).map(|f| f.trim().parse::<i64>()).collect();
        let values = values.map_err(|e| Error::parse(path, no + 1, e.to_string()))?;
        if rows.first().is_some_and(|r| r.len() != values.len()) {
            return Err(Error::parse(path, no + 1, "ragged map row"));
        }
        rows.push(values);
    }
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((n, k), rows.into_iter().flatten().collect())
        .map_err(|e| Error::parse(path, 0, e.to_string()))
}
