//! Assembly of training / validation / test samples from a transaction log.

use std::ops::Range;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::distribution::{day_of_week, estimate_uod, short_term_at, LongTermTable};
use super::maps::CompressionMaps;
use super::snapshot::LogIndex;
use crate::error::{Error, Result};
use crate::synthgen::Transaction;

/// Half-open interval ranges of the three splits, in absolute interval indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitBounds {
    /// Consecutive splits measured in whole days.
    pub fn from_days(train_days: usize, val_days: usize, test_days: usize, per_day: usize) -> Self {
        let a = train_days * per_day;
        let b = a + val_days * per_day;
        let c = b + test_days * per_day;
        Self { train: 0..a, val: a..b, test: b..c }
    }

    pub fn end(&self) -> usize {
        self.test.end
    }

    fn validate(&self) -> Result<()> {
        let ordered = self.train.start <= self.train.end
            && self.train.end <= self.val.start
            && self.val.start <= self.val.end
            && self.val.end <= self.test.start
            && self.test.start <= self.test.end;
        if ordered {
            Ok(())
        } else {
            Err(Error::Config(format!("split bounds are not ordered: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    /// Input sequence length.
    pub n: usize,
    /// Forecast horizon length.
    pub m: usize,
    pub intervals_per_day: usize,
    pub splits: SplitBounds,
}

/// Everything known about one input interval as of a reference `lag` intervals later.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub iod: Array2<f64>,
    pub u: Array1<f64>,
    pub uod_long: Array2<f64>,
    pub uod_short: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct InputStep {
    pub interval: usize,
    pub observed: Arc<Observation>,
    pub do_: Arc<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct TargetStep {
    pub interval: usize,
    pub od: Arc<Array2<f64>>,
    pub do_: Arc<Array2<f64>>,
}

/// `n` input steps observed at `reference` and `m` complete targets after it.
#[derive(Debug, Clone)]
pub struct SnapshotSample {
    pub reference: usize,
    pub inputs: Vec<InputStep>,
    pub targets: Vec<TargetStep>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub stations: usize,
    pub k: usize,
    pub options: DatasetOptions,
    /// Complete OD counts per interval in `0..splits.end()`.
    pub od: Vec<Arc<Array2<f64>>>,
    /// DO counts per interval in `0..splits.end()`.
    pub do_: Vec<Arc<Array2<f64>>>,
    /// Observations indexed `interval * n + lag`.
    pub observations: Vec<Arc<Observation>>,
    pub train: Vec<SnapshotSample>,
    pub val: Vec<SnapshotSample>,
    pub test: Vec<SnapshotSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SnapshotSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn observation(&self, interval: usize, lag: usize) -> &Arc<Observation> {
        &self.observations[interval * self.options.n + lag]
    }

    /// Rebuilds the sample lists from stored per-interval matrices.
    pub fn assemble(
        stations: usize,
        k: usize,
        options: DatasetOptions,
        od: Vec<Arc<Array2<f64>>>,
        do_: Vec<Arc<Array2<f64>>>,
        observations: Vec<Arc<Observation>>,
    ) -> Result<Self> {
        let end = options.splits.end();
        if od.len() != end || do_.len() != end || observations.len() != end * options.n {
            return Err(Error::Dimension("per-interval matrices do not cover the splits".into()));
        }
        let mut ds = Dataset {
            stations,
            k,
            options,
            od,
            do_,
            observations,
            train: vec![],
            val: vec![],
            test: vec![],
        };
        ds.train = ds.samples_in(&ds.options.splits.train);
        ds.val = ds.samples_in(&ds.options.splits.val);
        ds.test = ds.samples_in(&ds.options.splits.test);
        Ok(ds)
    }

    fn samples_in(&self, range: &Range<usize>) -> Vec<SnapshotSample> {
        valid_references(range, self.options.n, self.options.m)
            .map(|t| self.sample_at(t))
            .collect()
    }

    fn sample_at(&self, reference: usize) -> SnapshotSample {
        let (n, m) = (self.options.n, self.options.m);
        let inputs = (1..=n)
            .map(|offset| {
                let interval = reference + offset - n;
                InputStep {
                    interval,
                    observed: Arc::clone(self.observation(interval, n - offset)),
                    do_: Arc::clone(&self.do_[interval]),
                }
            })
            .collect();
        let targets = (1..=m)
            .map(|j| TargetStep {
                interval: reference + j,
                od: Arc::clone(&self.od[reference + j]),
                do_: Arc::clone(&self.do_[reference + j]),
            })
            .collect();
        SnapshotSample { reference, inputs, targets }
    }
}

/// References `t` whose window `[t-n+1, t+m]` lies inside `range`.
pub fn valid_references(range: &Range<usize>, n: usize, m: usize) -> impl Iterator<Item = usize> {
    let lo = range.start + n.saturating_sub(1);
    let hi = range.end.saturating_sub(m);
    lo..hi.max(lo)
}

pub fn build_dataset(
    log: &[Transaction],
    maps: &CompressionMaps,
    options: &DatasetOptions,
) -> Result<Dataset> {
    let DatasetOptions { n, m, intervals_per_day, ref splits } = *options;
    splits.validate()?;
    if n == 0 || m == 0 || intervals_per_day == 0 {
        return Err(Error::Config("n, m and intervals_per_day must be positive".into()));
    }
    let span = splits.end() - splits.train.start;
    if span < n + m {
        return Err(Error::InsufficientData(format!(
            "log spans {span} intervals but a sample needs n + m = {}",
            n + m
        )));
    }

    let index = LogIndex::new(log);
    let long = LongTermTable::build(&index, splits.train.clone(), maps, intervals_per_day, n);
    let end = splits.end();

    let mut od = Vec::with_capacity(end);
    let mut do_ = Vec::with_capacity(end);
    let mut observations = Vec::with_capacity(end * n);
    for interval in 0..end {
        let complete = index.snapshot(interval, interval, maps)?;
        od.push(Arc::new(complete.od.mapv(f64::from)));
        do_.push(Arc::new(complete.do_.mapv(f64::from)));
        for lag in 0..n {
            let snap = index.snapshot(interval, interval + lag, maps)?;
            let u = snap.u.mapv(f64::from);
            let dd_long = long.distribution(
                day_of_week(interval, intervals_per_day),
                interval % intervals_per_day,
                lag,
            );
            let dd_short = short_term_at(&index, interval, lag, maps, intervals_per_day, &dd_long)?;
            observations.push(Arc::new(Observation {
                iod: snap.iod.mapv(f64::from),
                uod_long: estimate_uod(u.view(), &dd_long)?,
                uod_short: estimate_uod(u.view(), &dd_short)?,
                u,
            }));
        }
    }
    let ds = Dataset::assemble(maps.station_count(), maps.k(), options.clone(), od, do_, observations)?;
    if ds.train.is_empty() {
        return Err(Error::InsufficientData("training split yields no samples".into()));
    }
    Ok(ds)
}
