//! Per-interval IOD / U / DO / OD counts observed as of a reference interval.

use ndarray::{Array1, Array2};

use super::maps::CompressionMaps;
use crate::error::{Error, Result};
use crate::synthgen::Transaction;

/// Compressed counts for trips entering (OD side) or exiting (DO side) during
/// `interval`, as visible at the end of `reference`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSnapshot {
    pub interval: usize,
    pub reference: usize,
    /// Finished trips by entry station and compressed destination column.
    pub iod: Array2<u32>,
    /// Entered during `interval`, still travelling at `reference`.
    pub u: Array1<u32>,
    /// Exits during `interval` by exit station and compressed origin column.
    pub do_: Array2<u32>,
    /// Complete OD counts (every trip eventually finishes).
    pub od: Array2<u32>,
}

/// Interval-bucketed view of a transaction log (by entry and by exit).
#[derive(Debug, Clone)]
pub struct LogIndex<'a> {
    log: &'a [Transaction],
    by_entry: Vec<u32>,
    entry_offsets: Vec<usize>,
    by_exit: Vec<u32>,
    exit_offsets: Vec<usize>,
}

impl<'a> LogIndex<'a> {
    pub fn new(log: &'a [Transaction]) -> Self {
        let horizon = log.iter().map(|t| t.exit_interval + 1).max().unwrap_or(0);
        let (by_entry, entry_offsets) = bucket(log, horizon, |t| t.entry_interval);
        let (by_exit, exit_offsets) = bucket(log, horizon, |t| t.exit_interval);
        Self { log, by_entry, entry_offsets, by_exit, exit_offsets }
    }

    pub fn log(&self) -> &'a [Transaction] {
        self.log
    }

    /// One past the last interval any trip touches.
    pub fn horizon(&self) -> usize {
        self.entry_offsets.len().saturating_sub(1)
    }

    pub fn entering(&self, interval: usize) -> impl Iterator<Item = &'a Transaction> + '_ {
        self.range(&self.by_entry, &self.entry_offsets, interval)
    }

    pub fn exiting(&self, interval: usize) -> impl Iterator<Item = &'a Transaction> + '_ {
        self.range(&self.by_exit, &self.exit_offsets, interval)
    }

    fn range<'s>(
        &'s self,
        order: &'s [u32],
        offsets: &'s [usize],
        interval: usize,
    ) -> impl Iterator<Item = &'a Transaction> + 's {
        let slice = if interval + 1 < offsets.len() {
            &order[offsets[interval]..offsets[interval + 1]]
        } else {
            &order[0..0]
        };
        let log = self.log;
        slice.iter().map(move |&i| &log[i as usize])
    }

    pub fn snapshot(
        &self,
        interval: usize,
        reference: usize,
        maps: &CompressionMaps,
    ) -> Result<IntervalSnapshot> {
        if interval > reference {
            return Err(Error::Config(format!(
                "snapshot interval {interval} is after its reference {reference}"
            )));
        }
        let (n, k) = (maps.station_count(), maps.k());
        let mut iod = Array2::<u32>::zeros((n, k));
        let mut od = Array2::<u32>::zeros((n, k));
        let mut u = Array1::<u32>::zeros(n);
        for tx in self.entering(interval) {
            let col = maps.od_column(tx.entry_station, tx.exit_station);
            od[[tx.entry_station, col]] += 1;
            if tx.exit_interval <= reference {
                iod[[tx.entry_station, col]] += 1;
            } else {
                u[tx.entry_station] += 1;
            }
        }
        let mut do_ = Array2::<u32>::zeros((n, k));
        for tx in self.exiting(interval) {
            do_[[tx.exit_station, maps.do_column(tx.exit_station, tx.entry_station)]] += 1;
        }
        Ok(IntervalSnapshot { interval, reference, iod, u, do_, od })
    }

    /// Trips entering at `interval` still unfinished `lag` intervals later,
    /// by entry station and compressed destination column.
    pub fn unfinished_counts(&self, interval: usize, lag: usize, maps: &CompressionMaps) -> Array2<u32> {
        let mut counts = Array2::<u32>::zeros((maps.station_count(), maps.k()));
        for tx in self.entering(interval) {
            if tx.exit_interval > interval + lag {
                counts[[tx.entry_station, maps.od_column(tx.entry_station, tx.exit_station)]] += 1;
            }
        }
        counts
    }
}

fn bucket(
    log: &[Transaction],
    horizon: usize,
    key: impl Fn(&Transaction) -> usize,
) -> (Vec<u32>, Vec<usize>) {
    let mut offsets = vec![0usize; horizon + 1];
    for tx in log {
        offsets[key(tx) + 1] += 1;
    }
    for i in 0..horizon {
        offsets[i + 1] += offsets[i];
    }
    let mut cursor = offsets.clone();
    let mut order = vec![0u32; log.len()];
    for (i, tx) in log.iter().enumerate() {
        let slot = &mut cursor[key(tx)];
        order[*slot] = i as u32;
        *slot += 1;
    }
    (order, offsets)
}

/// Builds one snapshot directly from a log. Prefer [`LogIndex::snapshot`] when
/// querying many intervals of the same log.
pub fn build_snapshot(
    log: &[Transaction],
    interval: usize,
    reference: usize,
    maps: &CompressionMaps,
) -> Result<IntervalSnapshot> {
    LogIndex::new(log).snapshot(interval, reference, maps)
}
