//! Destination distributions of unfinished trips and the potential-destination
//! matrices (UOD) derived from them.
//!
//! Rows are conditional distributions over the compressed destination columns
//! of passengers still travelling, so `u(j) * DD(j, .)` redistributes exactly
//! `u(j)` passengers. Empty rows fall back short-term -> long-term -> uniform.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1};

use super::maps::CompressionMaps;
use super::snapshot::LogIndex;
use crate::error::{Error, Result};
use crate::synthgen::Transaction;

pub const DAYS_PER_WEEK: usize = 7;

pub fn day_of_week(interval: usize, intervals_per_day: usize) -> usize {
    (interval / intervals_per_day) % DAYS_PER_WEEK
}

/// Pooled unfinished-trip counts per (day-of-week, interval-of-day, lag) over
/// the training period.
#[derive(Debug, Clone)]
pub struct LongTermTable {
    intervals_per_day: usize,
    max_lag: usize,
    k: usize,
    counts: Vec<Array2<f64>>,
    dow_present: [bool; DAYS_PER_WEEK],
    pooled: Vec<Array2<f64>>,
}

impl LongTermTable {
    /// `training` is the half-open interval range of the training period; only
    /// trips entering inside it contribute. Lags `0..max_lag` are tabulated.
    pub fn build(
        index: &LogIndex<'_>,
        training: Range<usize>,
        maps: &CompressionMaps,
        intervals_per_day: usize,
        max_lag: usize,
    ) -> Self {
        let (n, k) = (maps.station_count(), maps.k());
        let d = intervals_per_day;
        let cells = DAYS_PER_WEEK * d * max_lag;
        let mut counts = vec![Array2::<f64>::zeros((n, k)); cells];
        let mut pooled = vec![Array2::<f64>::zeros((n, k)); d * max_lag];
        let mut dow_present = [false; DAYS_PER_WEEK];
        for interval in training {
            let dow = day_of_week(interval, d);
            let q = interval % d;
            dow_present[dow] = true;
            for tx in index.entering(interval) {
                let col = maps.od_column(tx.entry_station, tx.exit_station);
                let travelled = tx.exit_interval - interval;
                for lag in 0..max_lag.min(travelled) {
                    counts[(dow * d + q) * max_lag + lag][[tx.entry_station, col]] += 1.0;
                    pooled[q * max_lag + lag][[tx.entry_station, col]] += 1.0;
                }
            }
        }
        Self { intervals_per_day, max_lag, k, counts, dow_present, pooled }
    }

    pub fn max_lag(&self) -> usize {
        self.max_lag
    }

    /// Long-term distribution for trips entering at (`dow`, `interval_of_day`)
    /// and still travelling after `elapsed` intervals.
    pub fn distribution(&self, dow: usize, interval_of_day: usize, elapsed: usize) -> Array2<f64> {
        let k = self.k;
        let uniform = Array1::from_elem(k, 1.0 / k as f64);
        if elapsed >= self.max_lag {
            let n = self.counts.first().map_or(0, |c| c.nrows());
            return normalize_rows(&Array2::zeros((n, k)), |_| uniform.clone());
        }
        let q = interval_of_day % self.intervals_per_day;
        let counts = if self.dow_present[dow % DAYS_PER_WEEK] {
            &self.counts[((dow % DAYS_PER_WEEK) * self.intervals_per_day + q) * self.max_lag + elapsed]
        } else {
            log::warn!("day-of-week {dow} absent from training data; using all-days statistics");
            &self.pooled[q * self.max_lag + elapsed]
        };
        normalize_rows(counts, |_| uniform.clone())
    }
}

/// Long-term destination distribution computed straight from a training log.
pub fn compute_dd_long(
    training_log: &[Transaction],
    training: Range<usize>,
    day_of_week: usize,
    interval_of_day: usize,
    elapsed: usize,
    maps: &CompressionMaps,
    intervals_per_day: usize,
) -> Array2<f64> {
    let index = LogIndex::new(training_log);
    LongTermTable::build(&index, training, maps, intervals_per_day, elapsed + 1)
        .distribution(day_of_week, interval_of_day, elapsed)
}

/// Short-term ("yesterday") distribution for the input step `offset`
/// (1-based, `1..=n`) of a sample with reference `reference`.
///
/// Uses trips that entered `intervals_per_day` intervals before the step's
/// interval and were still travelling at the same lag. Empty rows, or a step
/// on the first day, take the corresponding row of `long_term`.
pub fn compute_dd_short(
    index: &LogIndex<'_>,
    reference: usize,
    offset: usize,
    n: usize,
    maps: &CompressionMaps,
    intervals_per_day: usize,
    long_term: &Array2<f64>,
) -> Result<Array2<f64>> {
    if offset == 0 || offset > n || reference + offset < n {
        return Err(Error::Config(format!(
            "offset {offset} outside 1..={n} for reference {reference}"
        )));
    }
    let interval = reference + offset - n;
    let lag = n - offset;
    short_term_at(index, interval, lag, maps, intervals_per_day, long_term)
}

pub(crate) fn short_term_at(
    index: &LogIndex<'_>,
    interval: usize,
    lag: usize,
    maps: &CompressionMaps,
    intervals_per_day: usize,
    long_term: &Array2<f64>,
) -> Result<Array2<f64>> {
    if long_term.dim() != (maps.station_count(), maps.k()) {
        return Err(Error::Dimension("long-term fallback has the wrong shape".into()));
    }
    if interval < intervals_per_day {
        return Ok(long_term.clone());
    }
    let counts = index.unfinished_counts(interval - intervals_per_day, lag, maps).mapv(f64::from);
    Ok(normalize_rows(&counts, |j| long_term.row(j).to_owned()))
}

fn normalize_rows(counts: &Array2<f64>, fallback: impl Fn(usize) -> Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(counts.dim());
    for (j, row) in counts.rows().into_iter().enumerate() {
        let total: f64 = row.sum();
        if total > 0.0 {
            out.row_mut(j).assign(&row.mapv(|c| c / total));
        } else {
            out.row_mut(j).assign(&fallback(j));
        }
    }
    out
}

/// Potential destination matrix `UOD(j, k) = u(j) * dd(j, k)`.
pub fn estimate_uod(u: ArrayView1<'_, f64>, dd: &Array2<f64>) -> Result<Array2<f64>> {
    if u.len() != dd.nrows() {
        return Err(Error::Dimension(format!(
            "unfinished vector has {} stations, distribution has {} rows",
            u.len(),
            dd.nrows()
        )));
    }
    let mut out = dd.clone();
    for (mut row, &uj) in out.rows_mut().into_iter().zip(u.iter()) {
        row *= uj;
    }
    Ok(out)
}
