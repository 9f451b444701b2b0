//! Network-wide MAPE, the historical-average baseline, and evaluation reports.

use std::borrow::Borrow;
use std::collections::HashMap;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{day_of_week, SnapshotSample};
use crate::error::{Error, Result};
use crate::hiam::Hiam;
use crate::topology::MetroGraph;
use crate::training::{prepare_inputs, NormStats};

/// `Σ|pred − truth| / Σ|truth|` over every entry.
pub fn network_mape(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(Error::Dimension(format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim())));
    }
    let (err, total) = abs_sums(pred, truth);
    if total == 0.0 {
        return Err(Error::UndefinedMetric("truth is all zero"));
    }
    Ok(err / total)
}

fn abs_sums(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> (f64, f64) {
    pred.iter().zip(truth.iter()).fold((0.0, 0.0), |(e, t), (p, y)| (e + (p - y).abs(), t + y.abs()))
}

/// MAPE over the top `K−1` partner columns and over the merged remainder column.
/// A group whose truth is all zero is reported as `None`.
pub fn split_group_mape(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<(Option<f64>, Option<f64>)> {
    if pred.dim() != truth.dim() || pred.ncols() == 0 {
        return Err(Error::Dimension(format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim())));
    }
    let last = pred.ncols() - 1;
    let group = |cols: ndarray::SliceInfo<_, ndarray::Ix2, ndarray::Ix2>| {
        let (e, t) = abs_sums(pred.slice(&cols), truth.slice(&cols));
        (t > 0.0).then(|| e / t)
    };
    Ok((group(s![.., ..last]), group(s![.., last..])))
}

/// Pooled per-horizon error sums across many samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MapeAccumulator {
    err: Vec<f64>,
    truth: Vec<f64>,
}

impl MapeAccumulator {
    pub fn new(horizons: usize) -> Self {
        Self { err: vec![0.0; horizons], truth: vec![0.0; horizons] }
    }

    pub fn add(&mut self, horizon: usize, pred: ArrayView2<f64>, truth: ArrayView2<f64>) {
        let (e, t) = abs_sums(pred, truth);
        self.err[horizon] += e;
        self.truth[horizon] += t;
    }

    pub fn add_restricted(&mut self, horizon: usize, pred: ArrayView2<f64>, truth: ArrayView2<f64>, cols: std::ops::Range<usize>) {
        self.add(horizon, pred.slice(s![.., cols.clone()]), truth.slice(s![.., cols]));
    }

    pub fn per_horizon(&self) -> Vec<Option<f64>> {
        self.err.iter().zip(&self.truth).map(|(&e, &t)| (t > 0.0).then(|| e / t)).collect()
    }

    /// Mean over the horizons where the metric is defined.
    pub fn mean(&self) -> Option<f64> {
        mean_defined(&self.per_horizon())
    }
}

pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Predicted counts for every horizon of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CountForecast {
    pub od: Vec<Array2<f64>>,
    pub do_: Vec<Array2<f64>>,
}

/// Runs the model on each sample, de-normalizes, and clamps at zero.
pub fn predict_counts(
    model: &Hiam,
    graph: &MetroGraph,
    norm: &NormStats,
    samples: &[SnapshotSample],
) -> Result<Vec<CountForecast>> {
    samples
        .par_iter()
        .map(|sample| {
            let out = model.forward(graph, &prepare_inputs(sample, norm))?;
            let clamp = |m: Array2<f64>| m.mapv(|v| v.max(0.0));
            Ok(CountForecast {
                od: out.od.iter().map(|p| clamp(norm.denormalize_od(p))).collect(),
                do_: out.do_.iter().map(|p| clamp(norm.denormalize_do(p))).collect(),
            })
        })
        .collect()
}

/// Mean OD and DO per (day-of-week, interval-of-day) over the training intervals.
#[derive(Debug, Clone)]
pub struct HistoricalAverage {
    intervals_per_day: usize,
    by_slot: HashMap<(usize, usize), (Array2<f64>, Array2<f64>)>,
    by_time_of_day: HashMap<usize, (Array2<f64>, Array2<f64>)>,
    overall: (Array2<f64>, Array2<f64>),
}

impl HistoricalAverage {
    /// `od[t]`, `do_[t]` are the matrices of interval `t`; `training` indexes into them.
    pub fn fit(
        od: &[impl Borrow<Array2<f64>>],
        do_: &[impl Borrow<Array2<f64>>],
        training: std::ops::Range<usize>,
        intervals_per_day: usize,
    ) -> Result<Self> {
        if training.is_empty() || training.end > od.len() || od.len() != do_.len() {
            return Err(Error::InsufficientData("historical average needs training intervals".into()));
        }
        let shape = od[training.start].borrow().dim();
        type Sums = (Array2<f64>, Array2<f64>, usize);
        let mut slots: HashMap<(usize, usize), Sums> = HashMap::new();
        let mut tod: HashMap<usize, Sums> = HashMap::new();
        let mut all: Sums = (Array2::zeros(shape), Array2::zeros(shape), 0);
        let add = |acc: &mut Sums, a: &Array2<f64>, b: &Array2<f64>| {
            acc.0 += a;
            acc.1 += b;
            acc.2 += 1;
        };
        let empty = || (Array2::zeros(shape), Array2::zeros(shape), 0);
        for t in training {
            let (a, b) = (od[t].borrow(), do_[t].borrow());
            let q = t % intervals_per_day;
            add(slots.entry((day_of_week(t, intervals_per_day), q)).or_insert_with(empty), a, b);
            add(tod.entry(q).or_insert_with(empty), a, b);
            add(&mut all, a, b);
        }
        let finish = |(a, b, n): Sums| (a / n as f64, b / n as f64);
        Ok(Self {
            intervals_per_day,
            by_slot: slots.into_iter().map(|(k, v)| (k, finish(v))).collect(),
            by_time_of_day: tod.into_iter().map(|(k, v)| (k, finish(v))).collect(),
            overall: finish(all),
        })
    }

    /// Falls back to the time-of-day mean, then the overall mean, when a slot
    /// never occurred in training.
    pub fn predict(&self, interval: usize) -> (&Array2<f64>, &Array2<f64>) {
        let q = interval % self.intervals_per_day;
        let hit = self
            .by_slot
            .get(&(day_of_week(interval, self.intervals_per_day), q))
            .or_else(|| self.by_time_of_day.get(&q))
            .unwrap_or(&self.overall);
        (&hit.0, &hit.1)
    }

    pub fn forecast(&self, sample: &SnapshotSample) -> CountForecast {
        let (od, do_) = sample.targets.iter().map(|t| {
            let (a, b) = self.predict(t.interval);
            (a.clone(), b.clone())
        }).unzip();
        CountForecast { od, do_ }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub od_mape: Option<f64>,
    pub do_mape: Option<f64>,
    pub od_mape_topk: Option<f64>,
    pub od_mape_remainder: Option<f64>,
    pub do_mape_topk: Option<f64>,
    pub do_mape_remainder: Option<f64>,
    pub ha_od_mape: Option<f64>,
    pub ha_do_mape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub samples: usize,
    pub horizons: Vec<HorizonMetrics>,
    pub od_mape_mean: Option<f64>,
    pub do_mape_mean: Option<f64>,
    pub ha_od_mape_mean: Option<f64>,
    pub ha_do_mape_mean: Option<f64>,
}

struct Tally {
    od: MapeAccumulator,
    do_: MapeAccumulator,
    od_top: MapeAccumulator,
    od_rest: MapeAccumulator,
    do_top: MapeAccumulator,
    do_rest: MapeAccumulator,
}

impl Tally {
    fn new(m: usize) -> Self {
        let acc = || MapeAccumulator::new(m);
        Self { od: acc(), do_: acc(), od_top: acc(), od_rest: acc(), do_top: acc(), do_rest: acc() }
    }

    fn add(&mut self, forecast: &CountForecast, sample: &SnapshotSample) -> Result<()> {
        if forecast.od.len() != sample.targets.len() || forecast.do_.len() != sample.targets.len() {
            return Err(Error::Dimension(format!(
                "{} horizons predicted for {} targets",
                forecast.od.len(),
                sample.targets.len()
            )));
        }
        for (h, target) in sample.targets.iter().enumerate() {
            let (po, pd) = (&forecast.od[h], &forecast.do_[h]);
            if po.dim() != target.od.dim() || pd.dim() != target.do_.dim() {
                return Err(Error::Dimension(format!(
                    "prediction {:?} vs target {:?}",
                    po.dim(),
                    target.od.dim()
                )));
            }
            let k = po.ncols();
            self.od.add(h, po.view(), target.od.view());
            self.do_.add(h, pd.view(), target.do_.view());
            self.od_top.add_restricted(h, po.view(), target.od.view(), 0..k - 1);
            self.od_rest.add_restricted(h, po.view(), target.od.view(), k - 1..k);
            self.do_top.add_restricted(h, pd.view(), target.do_.view(), 0..k - 1);
            self.do_rest.add_restricted(h, pd.view(), target.do_.view(), k - 1..k);
        }
        Ok(())
    }
}

/// Scores arbitrary count forecasts (and the HA baseline) on `samples`.
pub fn evaluate_forecasts(
    samples: &[SnapshotSample],
    forecasts: &[CountForecast],
    baseline: &HistoricalAverage,
) -> Result<Report> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("evaluation samples"));
    }
    if samples.len() != forecasts.len() {
        return Err(Error::Dimension(format!("{} forecasts for {} samples", forecasts.len(), samples.len())));
    }
    let m = samples[0].targets.len();
    let mut model = Tally::new(m);
    let mut ha = Tally::new(m);
    for (sample, forecast) in samples.iter().zip(forecasts) {
        model.add(forecast, sample)?;
        ha.add(&baseline.forecast(sample), sample)?;
    }
    let pick = |acc: &MapeAccumulator| acc.per_horizon();
    let (od, do_) = (pick(&model.od), pick(&model.do_));
    let (ha_od, ha_do) = (pick(&ha.od), pick(&ha.do_));
    let (ot, or, dt, dr) = (pick(&model.od_top), pick(&model.od_rest), pick(&model.do_top), pick(&model.do_rest));
    let horizons = (0..m)
        .map(|h| HorizonMetrics {
            horizon: h + 1,
            od_mape: od[h],
            do_mape: do_[h],
            od_mape_topk: ot[h],
            od_mape_remainder: or[h],
            do_mape_topk: dt[h],
            do_mape_remainder: dr[h],
            ha_od_mape: ha_od[h],
            ha_do_mape: ha_do[h],
        })
        .collect();
    Ok(Report {
        samples: samples.len(),
        horizons,
        od_mape_mean: mean_defined(&od),
        do_mape_mean: mean_defined(&do_),
        ha_od_mape_mean: mean_defined(&ha_od),
        ha_do_mape_mean: mean_defined(&ha_do),
    })
}

/// Runs the model on `samples` and scores it against the HA baseline.
pub fn evaluate(
    model: &Hiam,
    graph: &MetroGraph,
    norm: &NormStats,
    samples: &[SnapshotSample],
    baseline: &HistoricalAverage,
) -> Result<Report> {
    let cfg = model.config();
    if let Some(s) = samples.first() {
        let target = &s.targets[0].od;
        if s.inputs.len() != cfg.n || s.targets.len() != cfg.m || target.dim() != (cfg.stations, cfg.k) {
            return Err(Error::Dimension(format!(
                "model expects n={}, m={}, {}x{} matrices; samples have n={}, m={}, {:?}",
                cfg.n,
                cfg.m,
                cfg.stations,
                cfg.k,
                s.inputs.len(),
                s.targets.len(),
                target.dim()
            )));
        }
    }
    let forecasts = predict_counts(model, graph, norm, samples)?;
    evaluate_forecasts(samples, &forecasts, baseline)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One row per horizon; undefined metrics are empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "horizon,od_mape,do_mape,od_mape_topk,od_mape_remainder,do_mape_topk,do_mape_remainder,ha_od_mape,ha_do_mape\n",
        );
        for h in &self.horizons {
            let cells = [
                h.od_mape,
                h.do_mape,
                h.od_mape_topk,
                h.od_mape_remainder,
                h.do_mape_topk,
                h.do_mape_remainder,
                h.ha_od_mape,
                h.ha_do_mape,
            ];
            out.push_str(&h.horizon.to_string());
            for c in cells {
                out.push(',');
                out.push_str(&fmt_opt(c));
            }
            out.push('\n');
        }
        out
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("report.json", self.to_json()), ("report.csv", self.to_csv())] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    }
}
